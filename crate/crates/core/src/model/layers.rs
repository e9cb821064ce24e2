//! Network building blocks with hand-written forward and backward passes.
//!
//! Everything operates on channels-last `(H, W, C)` tensors. Backward passes
//! are exact transposes/adjoints of the forwards and are validated against
//! the finite-difference oracle in the test suites.

use rayon::prelude::*;

use crate::error::{parameter, Result};
use crate::tensor::{Scalar, Tensor};

/// 3x3 cross-correlation with zero padding of one pixel and a per-output
/// channel bias. Weights are `(3, 3, Cin, Cout)`.
pub fn conv3x3_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, cin) = image_dims(input)?;
    let (cin_w, cout) = conv_dims(weights)?;
    if cin != cin_w {
        return parameter(format!(
            "conv expects {cin_w} input channels, image has {cin}"
        ));
    }
    if bias.shape() != [cout] {
        return parameter(format!("bias must be ({cout},), got {:?}", bias.shape()));
    }
    let src = input.data();
    let wts = weights.data();
    let b = bias.data();

    let mut out = Tensor::zeros(&[h, w, cout]);
    out.data_mut()
        .par_chunks_mut(w * cout)
        .enumerate()
        .for_each(|(y, out_row)| {
            for px in out_row.chunks_mut(cout) {
                px.copy_from_slice(b);
            }
            for ky in 0..3usize {
                let iy = y + ky;
                if iy < 1 || iy > h {
                    continue;
                }
                let iy = iy - 1;
                let in_row = &src[iy * w * cin..(iy + 1) * w * cin];
                for kx in 0..3usize {
                    let slab = &wts[((ky * 3 + kx) * cin) * cout..((ky * 3 + kx + 1) * cin) * cout];
                    // Valid output columns: 0 <= x + kx - 1 < w.
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    for x in x_lo..x_hi {
                        let ix = x + kx - 1;
                        let in_px = &in_row[ix * cin..(ix + 1) * cin];
                        let out_px = &mut out_row[x * cout..(x + 1) * cout];
                        for (ci, &v) in in_px.iter().enumerate() {
                            let wrow = &slab[ci * cout..(ci + 1) * cout];
                            for (o, &wv) in out_px.iter_mut().zip(wrow) {
                                *o = *o + v * wv;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of a conv3x3 with respect to its input, weights and bias.
pub fn conv3x3_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (h, w, cin) = image_dims(input)?;
    let (cin_w, cout) = conv_dims(weights)?;
    if cin != cin_w {
        return parameter("conv backward: channel mismatch".to_string());
    }
    if grad_out.shape() != [h, w, cout] {
        return parameter(format!(
            "conv backward: upstream gradient must be ({h}, {w}, {cout}), got {:?}",
            grad_out.shape()
        ));
    }
    let src = input.data();
    let wts = weights.data();
    let g = grad_out.data();

    // Bias gradient: plain row-major accumulation.
    let mut grad_bias = Tensor::zeros(&[cout]);
    {
        let gb = grad_bias.data_mut();
        for px in g.chunks_exact(cout) {
            for (acc, &v) in gb.iter_mut().zip(px) {
                *acc = *acc + v;
            }
        }
    }

    // Weight gradient: the nine tap positions are independent slabs.
    let mut grad_weights = Tensor::zeros(&[3, 3, cin, cout]);
    grad_weights
        .data_mut()
        .par_chunks_mut(cin * cout)
        .enumerate()
        .for_each(|(tap, slab)| {
            let (ky, kx) = (tap / 3, tap % 3);
            let y_lo = 1usize.saturating_sub(ky);
            let y_hi = (h + 1 - ky).min(h);
            let x_lo = 1usize.saturating_sub(kx);
            let x_hi = (w + 1 - kx).min(w);
            for y in y_lo..y_hi {
                let iy = y + ky - 1;
                for x in x_lo..x_hi {
                    let ix = x + kx - 1;
                    let in_px = &src[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let g_px = &g[(y * w + x) * cout..(y * w + x + 1) * cout];
                    for (ci, &v) in in_px.iter().enumerate() {
                        let row = &mut slab[ci * cout..(ci + 1) * cout];
                        for (acc, &gv) in row.iter_mut().zip(g_px) {
                            *acc = *acc + v * gv;
                        }
                    }
                }
            }
        });

    // Input gradient, gathered per input row so rows parallelize cleanly.
    let mut grad_input = Tensor::zeros(&[h, w, cin]);
    grad_input
        .data_mut()
        .par_chunks_mut(w * cin)
        .enumerate()
        .for_each(|(iy, gi_row)| {
            for ky in 0..3usize {
                // iy = y + ky - 1  =>  y = iy + 1 - ky
                let y = iy + 1;
                if y < ky || y - ky >= h {
                    continue;
                }
                let y = y - ky;
                let g_row = &g[y * w * cout..(y + 1) * w * cout];
                for kx in 0..3usize {
                    let slab = &wts[((ky * 3 + kx) * cin) * cout..((ky * 3 + kx + 1) * cin) * cout];
                    for ix in 0..w {
                        let x = ix + 1;
                        if x < kx || x - kx >= w {
                            continue;
                        }
                        let x = x - kx;
                        let g_px = &g_row[x * cout..(x + 1) * cout];
                        let gi_px = &mut gi_row[ix * cin..(ix + 1) * cin];
                        for (ci, slot) in gi_px.iter_mut().enumerate() {
                            let wrow = &slab[ci * cout..(ci + 1) * cout];
                            let mut acc = T::zero();
                            for (&wv, &gv) in wrow.iter().zip(g_px) {
                                acc = acc + wv * gv;
                            }
                            *slot = *slot + acc;
                        }
                    }
                }
            }
        });

    Ok((grad_input, grad_weights, grad_bias))
}

pub fn relu_forward<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Masks the gradient by the *post*-activation output (positive iff the
/// pre-activation was); subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_map(grad, |o, g| if o > T::zero() { g } else { T::zero() })
}

/// 2x2 average pooling; extents must be even.
pub fn avg_pool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = image_dims(input)?;
    if h % 2 != 0 || w % 2 != 0 {
        return parameter(format!("avg_pool2 needs even extents, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let src = input.data();
    let mut out = Tensor::zeros(&[oh, ow, c]);
    out.data_mut()
        .par_chunks_mut(ow * c)
        .enumerate()
        .for_each(|(oy, out_row)| {
            let top = &src[(2 * oy) * w * c..(2 * oy + 1) * w * c];
            let bot = &src[(2 * oy + 1) * w * c..(2 * oy + 2) * w * c];
            for ox in 0..ow {
                let out_px = &mut out_row[ox * c..(ox + 1) * c];
                let tl = &top[(2 * ox) * c..(2 * ox + 1) * c];
                let tr = &top[(2 * ox + 1) * c..(2 * ox + 2) * c];
                let bl = &bot[(2 * ox) * c..(2 * ox + 1) * c];
                let br = &bot[(2 * ox + 1) * c..(2 * ox + 2) * c];
                for (k, slot) in out_px.iter_mut().enumerate() {
                    *slot = (tl[k] + tr[k] + bl[k] + br[k]) * quarter;
                }
            }
        });
    Ok(out)
}

/// Transpose of [`avg_pool2_forward`]: each input cell receives a quarter of
/// its block's gradient.
pub fn avg_pool2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (oh, ow, c) = image_dims(grad_out)?;
    let (h, w) = (oh * 2, ow * 2);
    let quarter = T::from_f64(0.25);
    let g = grad_out.data();
    let mut out = Tensor::zeros(&[h, w, c]);
    out.data_mut()
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, row)| {
            let oy = y / 2;
            let g_row = &g[oy * ow * c..(oy + 1) * ow * c];
            for x in 0..w {
                let gpx = &g_row[(x / 2) * c..(x / 2 + 1) * c];
                let px = &mut row[x * c..(x + 1) * c];
                for (slot, &gv) in px.iter_mut().zip(gpx) {
                    *slot = gv * quarter;
                }
            }
        });
    Ok(out)
}

/// Per-axis bilinear sampling plan: output index -> two source indices with
/// weights, under the half-pixel-center rule `src = (k + 0.5)/2 - 0.5`,
/// clamped at the borders.
fn upsample_taps(out_len: usize, in_len: usize) -> Vec<(usize, f64, usize, f64)> {
    (0..out_len)
        .map(|k| {
            let src = (k as f64 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let i0 = (floor.max(0.0) as usize).min(in_len - 1);
            let i1 = ((floor + 1.0).max(0.0) as usize).min(in_len - 1);
            (i0, 1.0 - frac, i1, frac)
        })
        .collect()
}

/// Doubles both spatial extents with bilinear interpolation
/// (half-pixel centers, clamped edges).
pub fn upsample_bilinear_x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = image_dims(input)?;
    let (oh, ow) = (h * 2, w * 2);
    let ytaps = upsample_taps(oh, h);
    let xtaps = upsample_taps(ow, w);
    let src = input.data();
    let mut out = Tensor::zeros(&[oh, ow, c]);
    out.data_mut()
        .par_chunks_mut(ow * c)
        .enumerate()
        .for_each(|(oy, row)| {
            let (y0, wy0, y1, wy1) = ytaps[oy];
            let top = &src[y0 * w * c..(y0 + 1) * w * c];
            let bot = &src[y1 * w * c..(y1 + 1) * w * c];
            for (ox, px) in row.chunks_mut(c).enumerate() {
                let (x0, wx0, x1, wx1) = xtaps[ox];
                let w00 = T::from_f64(wy0 * wx0);
                let w01 = T::from_f64(wy0 * wx1);
                let w10 = T::from_f64(wy1 * wx0);
                let w11 = T::from_f64(wy1 * wx1);
                let a = &top[x0 * c..(x0 + 1) * c];
                let b = &top[x1 * c..(x1 + 1) * c];
                let d = &bot[x0 * c..(x0 + 1) * c];
                let e = &bot[x1 * c..(x1 + 1) * c];
                for k in 0..c {
                    px[k] = a[k] * w00 + b[k] * w01 + d[k] * w10 + e[k] * w11;
                }
            }
        });
    Ok(out)
}

/// Exact adjoint of [`upsample_bilinear_x2_forward`], gathered per input cell
/// so the result is independent of parallel scheduling.
pub fn upsample_bilinear_x2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (oh, ow, c) = image_dims(grad_out)?;
    if oh != in_h * 2 || ow != in_w * 2 {
        return parameter(format!(
            "upsample backward: gradient {oh}x{ow} does not match input {in_h}x{in_w}"
        ));
    }
    // Reverse tables: input index -> (output index, weight) contributions.
    let reverse = |out_len: usize, in_len: usize| {
        let mut table = vec![Vec::<(usize, f64)>::new(); in_len];
        for (k, &(i0, w0, i1, w1)) in upsample_taps(out_len, in_len).iter().enumerate() {
            table[i0].push((k, w0));
            table[i1].push((k, w1));
        }
        table
    };
    let ytab = reverse(oh, in_h);
    let xtab = reverse(ow, in_w);
    let g = grad_out.data();
    let mut out = Tensor::zeros(&[in_h, in_w, c]);
    out.data_mut()
        .par_chunks_mut(in_w * c)
        .enumerate()
        .for_each(|(iy, row)| {
            for ix in 0..in_w {
                let px = &mut row[ix * c..(ix + 1) * c];
                for &(oy, wy) in &ytab[iy] {
                    for &(ox, wx) in &xtab[ix] {
                        let wgt = T::from_f64(wy * wx);
                        let gpx = &g[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                        for (slot, &gv) in px.iter_mut().zip(gpx) {
                            *slot = *slot + gv * wgt;
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Execution mode shared by the batch-norm and model forwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Values saved by a train-mode batch-norm forward for its backward pass and
/// for the deferred running-statistics update.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Scalar> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Batch normalization over the spatial extent, one statistic per channel.
///
/// Train mode normalizes by the batch statistics (epsilon 1e-5) and reports
/// them in the cache so the caller can fold them into the running statistics
/// (momentum 0.9); infer mode normalizes by the running statistics.
pub fn batch_norm_forward<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    offset: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let (h, w, c) = image_dims(input)?;
    if h * w == 0 {
        return parameter("batch norm over an empty batch");
    }
    for (name, t) in [
        ("scale", scale),
        ("offset", offset),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [c] {
            return parameter(format!("{name} must be ({c},), got {:?}", t.shape()));
        }
    }
    let n = h * w;
    let src = input.data();
    let inv_n = T::from_f64(1.0 / n as f64);
    let eps = T::from_f64(BN_EPSILON);

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            for px in src.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(px) {
                    *m = *m + v;
                }
            }
            for m in mean.iter_mut() {
                *m = *m * inv_n;
            }
            let mut var = vec![T::zero(); c];
            for px in src.chunks_exact(c) {
                for ((vr, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                    let d = v - m;
                    *vr = *vr + d * d;
                }
            }
            for v in var.iter_mut() {
                *v = *v * inv_n;
            }
            (mean, var)
        }
        Mode::Infer => (running_mean.data().to_vec(), running_var.data().to_vec()),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(&[h, w, c]);
    let mut out = Tensor::zeros(&[h, w, c]);
    {
        let nd = normalized.data_mut();
        let od = out.data_mut();
        let gamma = scale.data();
        let beta = offset.data();
        for (px_in, (px_n, px_o)) in src
            .chunks_exact(c)
            .zip(nd.chunks_exact_mut(c).zip(od.chunks_exact_mut(c)))
        {
            for k in 0..c {
                let xhat = (px_in[k] - mean[k]) * inv_std[k];
                px_n[k] = xhat;
                px_o[k] = gamma[k] * xhat + beta[k];
            }
        }
    }
    let cache = match mode {
        Mode::Train => Some(BatchNormCache {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        }),
        Mode::Infer => None,
    };
    Ok((out, cache))
}

/// New running statistics after folding in one batch:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn batch_norm_updated_running<T: Scalar>(
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> (Tensor<T>, Tensor<T>) {
    let momentum = T::from_f64(BN_MOMENTUM);
    let rest = T::one() - momentum;
    let mean = Tensor::new(
        running_mean.shape(),
        running_mean
            .data()
            .iter()
            .zip(&cache.batch_mean)
            .map(|(&r, &b)| r * momentum + b * rest)
            .collect(),
    )
    .expect("running mean shape");
    let var = Tensor::new(
        running_var.shape(),
        running_var
            .data()
            .iter()
            .zip(&cache.batch_var)
            .map(|(&r, &b)| r * momentum + b * rest)
            .collect(),
    )
    .expect("running var shape");
    (mean, var)
}

/// Train-mode batch-norm backward: gradients for the input, scale and offset.
pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (h, w, c) = image_dims(&cache.normalized)?;
    if grad_out.shape() != [h, w, c] {
        return parameter("batch norm backward: gradient shape mismatch".to_string());
    }
    let n = h * w;
    let inv_n = T::from_f64(1.0 / n as f64);
    let xhat = cache.normalized.data();
    let g = grad_out.data();
    let gamma = scale.data();

    let mut grad_scale = vec![T::zero(); c];
    let mut grad_offset = vec![T::zero(); c];
    let mut sum_gxhat = vec![T::zero(); c]; // sum of gamma-scaled grads * xhat
    let mut sum_gx = vec![T::zero(); c]; // sum of gamma-scaled grads
    for (px_g, px_x) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for k in 0..c {
            grad_scale[k] = grad_scale[k] + px_g[k] * px_x[k];
            grad_offset[k] = grad_offset[k] + px_g[k];
            let gs = px_g[k] * gamma[k];
            sum_gx[k] = sum_gx[k] + gs;
            sum_gxhat[k] = sum_gxhat[k] + gs * px_x[k];
        }
    }

    let mut grad_input = Tensor::zeros(&[h, w, c]);
    {
        let gi = grad_input.data_mut();
        for (px_gi, (px_g, px_x)) in gi
            .chunks_exact_mut(c)
            .zip(g.chunks_exact(c).zip(xhat.chunks_exact(c)))
        {
            for k in 0..c {
                let gs = px_g[k] * gamma[k];
                let centered = gs - inv_n * sum_gx[k] - px_x[k] * inv_n * sum_gxhat[k];
                px_gi[k] = centered * cache.inv_std[k];
            }
        }
    }
    Ok((
        grad_input,
        Tensor::new(&[c], grad_scale)?,
        Tensor::new(&[c], grad_offset)?,
    ))
}

fn image_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return parameter(format!("expected an (H, W, C) tensor, got {s:?}"));
    }
    Ok((s[0], s[1], s[2]))
}

fn conv_dims<T: Scalar>(w: &Tensor<T>) -> Result<(usize, usize)> {
    let s = w.shape();
    if s.len() != 4 || s[0] != 3 || s[1] != 3 {
        return parameter(format!("conv weights must be (3, 3, Cin, Cout), got {s:?}"));
    }
    Ok((s[2], s[3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, max_relative_error};
    use crate::rng::{Distribution, RandomStream};
    use crate::tensor::Reduction;

    fn uniform(rng: &mut RandomStream, shape: &[usize]) -> Tensor<f64> {
        rng.fill(shape, Distribution::Uniform { a: -1.0, b: 1.0 }).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = RandomStream::new(1);
        let input = uniform(&mut rng, &[5, 6, 3]);
        // Center tap maps channel i to channel i.
        let mut w = Tensor::<f64>::zeros(&[3, 3, 3, 3]);
        for ci in 0..3 {
            *w.at_mut(&[1, 1, ci, ci]) = 1.0;
        }
        let out = conv3x3_forward(&input, &w, &Tensor::zeros(&[3])).unwrap();
        for (a, b) in out.data().iter().zip(input.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn conv_all_ones_on_constant_interior() {
        let input = Tensor::<f64>::full(&[5, 5, 1], 0.3);
        let w = Tensor::<f64>::full(&[3, 3, 1, 1], 1.0);
        let bias = Tensor::new(&[1], vec![0.05]).unwrap();
        let out = conv3x3_forward(&input, &w, &bias).unwrap();
        // Interior pixel sees all nine taps.
        assert!((out.at(&[2, 2, 0]) - (9.0 * 0.3 + 0.05)).abs() < 1e-12);
        // Corner pixel sees four.
        assert!((out.at(&[0, 0, 0]) - (4.0 * 0.3 + 0.05)).abs() < 1e-12);
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let mut rng = RandomStream::new(2);
        let input = uniform(&mut rng, &[4, 5, 2]);
        let weights = uniform(&mut rng, &[3, 3, 2, 3]);
        let bias = uniform(&mut rng, &[3]);
        let upstream = uniform(&mut rng, &[4, 5, 3]);

        let loss = |w: &Tensor<f64>| {
            let out = conv3x3_forward(&input, w, &bias)?;
            Ok(out
                .zip_map(&upstream, |a, b| a * b)?
                .reduce(Reduction::Sum)?)
        };
        let fd = finite_difference_gradient(loss, &weights, 1e-6).unwrap();
        let (_, gw, _) = conv3x3_backward(&input, &weights, &upstream).unwrap();
        let err = max_relative_error(&fd, &gw, 1e-8).unwrap();
        assert!(err < 1e-6, "weight gradient error {err}");
    }

    #[test]
    fn conv_input_and_bias_gradients_match_finite_differences() {
        let mut rng = RandomStream::new(3);
        let input = uniform(&mut rng, &[3, 4, 2]);
        let weights = uniform(&mut rng, &[3, 3, 2, 2]);
        let bias = uniform(&mut rng, &[2]);
        let upstream = uniform(&mut rng, &[3, 4, 2]);

        let loss_in = |x: &Tensor<f64>| {
            let out = conv3x3_forward(x, &weights, &bias)?;
            Ok(out
                .zip_map(&upstream, |a, b| a * b)?
                .reduce(Reduction::Sum)?)
        };
        let fd = finite_difference_gradient(loss_in, &input, 1e-6).unwrap();
        let (gi, _, gb) = conv3x3_backward(&input, &weights, &upstream).unwrap();
        let err = max_relative_error(&fd, &gi, 1e-8).unwrap();
        assert!(err < 1e-6, "input gradient error {err}");

        let loss_b = |b: &Tensor<f64>| {
            let out = conv3x3_forward(&input, &weights, b)?;
            Ok(out
                .zip_map(&upstream, |a, b| a * b)?
                .reduce(Reduction::Sum)?)
        };
        let fd_b = finite_difference_gradient(loss_b, &bias, 1e-6).unwrap();
        let err_b = max_relative_error(&fd_b, &gb, 1e-8).unwrap();
        assert!(err_b < 1e-6, "bias gradient error {err_b}");
    }

    #[test]
    fn pool_constant_and_block() {
        let c = Tensor::<f64>::full(&[4, 4, 2], 0.6);
        let out = avg_pool2_forward(&c).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));

        let block = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = avg_pool2_forward(&block).unwrap();
        assert_eq!(out.data(), &[1.5]);
    }

    #[test]
    fn pool_backward_spreads_quarter() {
        let g = Tensor::<f64>::full(&[1, 1, 1], 1.0);
        let gi = avg_pool2_backward(&g).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn pool_rejects_odd_extent() {
        let t = Tensor::<f64>::zeros(&[3, 4, 1]);
        assert!(avg_pool2_forward(&t).is_err());
    }

    #[test]
    fn upsample_ramp() {
        // 1D ramp [0, 1] -> [0, 0.25, 0.75, 1] under half-pixel centers.
        let t = Tensor::new(&[1, 2, 1], vec![0.0, 1.0]).unwrap();
        let out = upsample_bilinear_x2_forward(&t).unwrap();
        assert_eq!(out.shape(), &[2, 4, 1]);
        let row: Vec<f64> = (0..4).map(|x| out.at(&[0, x, 0])).collect();
        for (a, b) in row.iter().zip(&[0.0, 0.25, 0.75, 1.0]) {
            assert!((a - b).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn upsample_constant() {
        let t = Tensor::<f64>::full(&[3, 5, 2], 0.9);
        let out = upsample_bilinear_x2_forward(&t).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.9).abs() < 1e-12));
    }

    #[test]
    fn upsample_adjoint_identity() {
        // <Ax, y> == <x, A^T y> on random tensors.
        let mut rng = RandomStream::new(5);
        for _ in 0..5 {
            let (h, w, c) = (
                rng.below(6) + 1,
                rng.below(6) + 1,
                rng.below(3) + 1,
            );
            let x = uniform(&mut rng, &[h, w, c]);
            let y = uniform(&mut rng, &[h * 2, w * 2, c]);
            let ax = upsample_bilinear_x2_forward(&x).unwrap();
            let aty = upsample_bilinear_x2_backward(&y, h, w).unwrap();
            let lhs = ax.zip_map(&y, |a, b| a * b).unwrap().reduce(Reduction::Sum).unwrap();
            let rhs = x.zip_map(&aty, |a, b| a * b).unwrap().reduce(Reduction::Sum).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "adjoint mismatch {lhs} vs {rhs}");
        }
    }

    #[test]
    fn batch_norm_normalizes() {
        let mut rng = RandomStream::new(6);
        let input = uniform(&mut rng, &[8, 8, 3]).map(|x| x * 3.0 + 0.5);
        let scale = Tensor::<f64>::full(&[3], 1.0);
        let offset = Tensor::<f64>::zeros(&[3]);
        let rm = Tensor::<f64>::zeros(&[3]);
        let rv = Tensor::<f64>::full(&[3], 1.0);
        let (out, cache) =
            batch_norm_forward(&input, &scale, &offset, &rm, &rv, Mode::Train).unwrap();
        let cache = cache.unwrap();
        for ch in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            let n = 64.0;
            for p in 0..64 {
                mean += out.data()[p * 3 + ch];
            }
            mean /= n;
            for p in 0..64 {
                let d = out.data()[p * 3 + ch] - mean;
                var += d * d;
            }
            var /= n;
            assert!(mean.abs() < 1e-5, "channel mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel variance {var}");
        }
        // Running stats fold with momentum 0.9.
        let (nm, nv) = batch_norm_updated_running(&rm, &rv, &cache);
        for ch in 0..3 {
            assert!((nm.data()[ch] - 0.1 * cache.batch_mean[ch]).abs() < 1e-12);
            assert!((nv.data()[ch] - (0.9 + 0.1 * cache.batch_var[ch])).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_identity_on_standardized_input() {
        // Unit variance, zero mean input with scale 1 offset 0 passes through.
        let mut rng = RandomStream::new(7);
        let raw = uniform(&mut rng, &[16, 16, 1]);
        let mean = raw.reduce(Reduction::Mean).unwrap();
        let centered = raw.map(|x| x - mean);
        let var = centered.map(|x| x * x).reduce(Reduction::Mean).unwrap();
        let input = centered.map(|x| x / var.sqrt());
        let (out, _) = batch_norm_forward(
            &input,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &Tensor::zeros(&[1]),
            &Tensor::full(&[1], 1.0),
            Mode::Train,
        )
        .unwrap();
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = RandomStream::new(8);
        let input = uniform(&mut rng, &[4, 3, 2]);
        let scale = uniform(&mut rng, &[2]).map(|x| x + 1.5);
        let offset = uniform(&mut rng, &[2]);
        let rm = Tensor::<f64>::zeros(&[2]);
        let rv = Tensor::<f64>::full(&[2], 1.0);
        let upstream = uniform(&mut rng, &[4, 3, 2]);

        let run = |inp: &Tensor<f64>, sc: &Tensor<f64>, of: &Tensor<f64>| {
            let (out, _) = batch_norm_forward(inp, sc, of, &rm, &rv, Mode::Train)?;
            out.zip_map(&upstream, |a, b| a * b)?.reduce(Reduction::Sum)
        };
        let (out, cache) =
            batch_norm_forward(&input, &scale, &offset, &rm, &rv, Mode::Train).unwrap();
        drop(out);
        let (gi, gs, go) = batch_norm_backward(&cache.unwrap(), &scale, &upstream).unwrap();

        let fd_in =
            finite_difference_gradient(|x| run(x, &scale, &offset), &input, 1e-6).unwrap();
        assert!(max_relative_error(&fd_in, &gi, 1e-6).unwrap() < 1e-6);
        let fd_sc =
            finite_difference_gradient(|s| run(&input, s, &offset), &scale, 1e-6).unwrap();
        assert!(max_relative_error(&fd_sc, &gs, 1e-6).unwrap() < 1e-6);
        let fd_of =
            finite_difference_gradient(|o| run(&input, &scale, o), &offset, 1e-6).unwrap();
        assert!(max_relative_error(&fd_of, &go, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn relu_masks_gradient() {
        let x = Tensor::new(&[1, 1, 4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let out = relu_forward(&x);
        assert_eq!(out.data(), &[0.0, 0.0, 2.0, 0.0]);
        let g = Tensor::<f64>::full(&[1, 1, 4], 1.0);
        let gi = relu_backward(&out, &g).unwrap();
        assert_eq!(gi.data(), &[0.0, 0.0, 1.0, 0.0]);
    }
}
