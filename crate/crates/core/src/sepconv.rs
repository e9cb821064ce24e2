//! Position-varying separable local convolution.
//!
//! The interpolated frame is rendered by giving every output pixel its own
//! pair of separable kernels: `out(x,y) = sum_ij k1v(i) k1h(j) P1(i,j)
//! + sum_ij k2v(i) k2h(j) P2(i,j)`, where `P1`/`P2` are the `n x n` patches
//! centered at `(x,y)` in the two input frames. Storing the four 1D kernels
//! takes `4n` coefficients per pixel instead of the `2n^2` a pair of dense 2D
//! kernels would need; [`memory_footprint`] quantifies the difference.
//!
//! [`forward`] evaluates the factored form in two passes per pixel (vertical
//! column sums, then one horizontal dot product) without ever materializing a
//! dense kernel or an `n x n` patch. [`dense_local_conv_oracle`] is the
//! deliberately plain reference implementation of the unfactored sum used to
//! cross-check it.

use rayon::prelude::*;

use crate::error::{parameter, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-pixel quadruple of 1D kernels over an `(H, W)` output grid.
///
/// Each field has shape `(H, W, n)`: one vertical and one horizontal kernel
/// per output pixel per input frame. Coefficients are unconstrained reals;
/// nothing enforces normalization or a sign.
#[derive(Debug, Clone)]
pub struct KernelField<T: Scalar = f32> {
    pub k1v: Tensor<T>,
    pub k1h: Tensor<T>,
    pub k2v: Tensor<T>,
    pub k2h: Tensor<T>,
}

impl<T: Scalar> KernelField<T> {
    pub fn new(k1v: Tensor<T>, k1h: Tensor<T>, k2v: Tensor<T>, k2h: Tensor<T>) -> Result<Self> {
        let shape = k1v.shape().to_vec();
        if shape.len() != 3 {
            return parameter(format!("kernel tensors must be (H, W, n), got {shape:?}"));
        }
        for (name, t) in [("k1h", &k1h), ("k2v", &k2v), ("k2h", &k2h)] {
            if t.shape() != shape.as_slice() {
                return parameter(format!(
                    "kernel tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ));
            }
        }
        let n = shape[2];
        if n % 2 == 0 || n == 0 {
            return parameter(format!("kernel size must be odd and positive, got {n}"));
        }
        Ok(Self { k1v, k1h, k2v, k2h })
    }

    pub fn height(&self) -> usize {
        self.k1v.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.k1v.shape()[1]
    }

    /// Kernel length `n` (odd).
    pub fn kernel_size(&self) -> usize {
        self.k1v.shape()[2]
    }

    pub fn zeros(height: usize, width: usize, n: usize) -> Result<Self> {
        if n % 2 == 0 || n == 0 {
            return parameter(format!("kernel size must be odd and positive, got {n}"));
        }
        let shape = [height, width, n];
        Ok(Self {
            k1v: Tensor::zeros(&shape),
            k1h: Tensor::zeros(&shape),
            k2v: Tensor::zeros(&shape),
            k2h: Tensor::zeros(&shape),
        })
    }

    /// Sub-field over rows `y0..y0+h` and columns `x0..x0+w`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (fh, fw, n) = (self.height(), self.width(), self.kernel_size());
        if y0 + h > fh || x0 + w > fw || h == 0 || w == 0 {
            return parameter(format!(
                "crop {y0},{x0} {h}x{w} exceeds kernel field {fh}x{fw}"
            ));
        }
        let pick = |t: &Tensor<T>| {
            let src = t.data();
            let mut out = Vec::with_capacity(h * w * n);
            for y in 0..h {
                let row = ((y0 + y) * fw + x0) * n;
                out.extend_from_slice(&src[row..row + w * n]);
            }
            Tensor::new(&[h, w, n], out).expect("crop volume")
        };
        Ok(Self {
            k1v: pick(&self.k1v),
            k1h: pick(&self.k1h),
            k2v: pick(&self.k2v),
            k2h: pick(&self.k2h),
        })
    }

    /// Embeds this field into a larger zero field at offset `(y0, x0)`;
    /// used to scatter valid-region kernel gradients back to full resolution.
    pub fn embed(&self, height: usize, width: usize, y0: usize, x0: usize) -> Result<Self> {
        let (h, w, n) = (self.height(), self.width(), self.kernel_size());
        if y0 + h > height || x0 + w > width {
            return parameter(format!(
                "embed {h}x{w} at {y0},{x0} exceeds target {height}x{width}"
            ));
        }
        let mut out = Self::zeros(height, width, n)?;
        for (src, dst) in [
            (&self.k1v, &mut out.k1v),
            (&self.k1h, &mut out.k1h),
            (&self.k2v, &mut out.k2v),
            (&self.k2h, &mut out.k2h),
        ] {
            let s = src.data();
            let d = dst.data_mut();
            for y in 0..h {
                let from = y * w * n;
                let to = ((y0 + y) * width + x0) * n;
                d[to..to + w * n].copy_from_slice(&s[from..from + w * n]);
            }
        }
        Ok(out)
    }
}

/// Per-pixel dense 2D kernels `(H, W, n, n)`; oracle and visualization only.
#[derive(Debug, Clone)]
pub struct DenseKernelPair<T: Scalar = f32> {
    pub k1: Tensor<T>,
    pub k2: Tensor<T>,
}

/// Extends an image by repeating its edge pixels `margin` times on every side.
pub fn replicate_pad<T: Scalar>(image: &Tensor<T>, margin: usize) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return parameter(format!("image must be (H, W, C), got {shape:?}"));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if h == 0 || w == 0 {
        return parameter("cannot pad an empty image");
    }
    if margin == 0 {
        return Ok(image.clone());
    }
    let (oh, ow) = (h + 2 * margin, w + 2 * margin);
    let src = image.data();
    let mut out = vec![T::zero(); oh * ow * c];
    for oy in 0..oh {
        let sy = oy.saturating_sub(margin).min(h - 1);
        for ox in 0..ow {
            let sx = ox.saturating_sub(margin).min(w - 1);
            let from = (sy * w + sx) * c;
            let to = (oy * ow + ox) * c;
            out[to..to + c].copy_from_slice(&src[from..from + c]);
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

fn check_operand_shapes<T: Scalar>(
    i1: &Tensor<T>,
    i2: &Tensor<T>,
    height: usize,
    width: usize,
    n: usize,
) -> Result<usize> {
    if i1.shape() != i2.shape() {
        return parameter(format!(
            "input frames differ in shape: {:?} vs {:?}",
            i1.shape(),
            i2.shape()
        ));
    }
    let shape = i1.shape();
    if shape.len() != 3 {
        return parameter(format!("frames must be (H, W, C), got {shape:?}"));
    }
    let expect_h = height + n - 1;
    let expect_w = width + n - 1;
    if shape[0] != expect_h || shape[1] != expect_w {
        return parameter(format!(
            "frames are {}x{} but a {height}x{width} output with n={n} needs {expect_h}x{expect_w}",
            shape[0], shape[1]
        ));
    }
    Ok(shape[2])
}

/// Renders the interpolated frame from two padded inputs and a kernel field.
///
/// The inputs must extend the `(H, W)` output grid by `n-1` pixels in each
/// axis so that every patch is in bounds; output pixel `(x, y)` reads padded
/// rows `y..y+n` and columns `x..x+n`. The same kernels are applied to every
/// channel. Evaluation is factored per pixel: `n` vertical column sums feed a
/// single horizontal dot product, so no `n x n` patch or dense kernel is ever
/// formed. Rows are processed independently (and in parallel); results do not
/// depend on worker count.
pub fn forward<T: Scalar>(
    i1: &Tensor<T>,
    i2: &Tensor<T>,
    kf: &KernelField<T>,
) -> Result<Tensor<T>> {
    let (h, w, n) = (kf.height(), kf.width(), kf.kernel_size());
    let c = check_operand_shapes(i1, i2, h, w, n)?;
    let in_w = w + n - 1;
    let row_stride = in_w * c;

    let src1 = i1.data();
    let src2 = i2.data();
    let k1v = kf.k1v.data();
    let k1h = kf.k1h.data();
    let k2v = kf.k2v.data();
    let k2h = kf.k2h.data();

    let mut out = Tensor::zeros(&[h, w, c]);
    out.data_mut()
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, out_row)| {
            // colsum[j*c + ch] accumulates the vertical pass for one pixel.
            let mut colsum = vec![T::zero(); n * c];
            for x in 0..w {
                let kbase = (y * w + x) * n;
                let px = &mut out_row[x * c..(x + 1) * c];
                for (frame, kv, kh) in [(src1, k1v, k1h), (src2, k2v, k2h)] {
                    let kv = &kv[kbase..kbase + n];
                    let kh = &kh[kbase..kbase + n];
                    for v in colsum.iter_mut() {
                        *v = T::zero();
                    }
                    for (i, &kvi) in kv.iter().enumerate() {
                        let row = &frame[(y + i) * row_stride + x * c..][..n * c];
                        for (acc, &val) in colsum.iter_mut().zip(row) {
                            *acc = *acc + kvi * val;
                        }
                    }
                    for (j, &khj) in kh.iter().enumerate() {
                        let cs = &colsum[j * c..(j + 1) * c];
                        for (o, &s) in px.iter_mut().zip(cs) {
                            *o = *o + khj * s;
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of a scalar loss with respect to the four kernel tensors:
/// `dL/dk1v(x,y,i) = sum_jc g(x,y,c) k1h(x,y,j) P1(i,j,c)` and symmetrically
/// for the other three. Input frames are training-data leaves and receive no
/// gradient.
pub fn backward_kernels<T: Scalar>(
    i1: &Tensor<T>,
    i2: &Tensor<T>,
    kf: &KernelField<T>,
    grad_out: &Tensor<T>,
) -> Result<KernelField<T>> {
    let (h, w, n) = (kf.height(), kf.width(), kf.kernel_size());
    let c = check_operand_shapes(i1, i2, h, w, n)?;
    if grad_out.shape() != [h, w, c] {
        return parameter(format!(
            "upstream gradient must be ({h}, {w}, {c}), got {:?}",
            grad_out.shape()
        ));
    }
    let in_w = w + n - 1;
    let row_stride = in_w * c;

    let mut grads = KernelField::<T>::zeros(h, w, n)?;
    let src1 = i1.data();
    let src2 = i2.data();
    let g = grad_out.data();

    // Split the output tensors into per-row chunks so rows can run in
    // parallel with disjoint writes.
    let rows: Vec<(&mut [T], &mut [T], &mut [T], &mut [T])> = {
        let g1v = grads.k1v.data_mut().chunks_mut(w * n);
        let g1h = grads.k1h.data_mut().chunks_mut(w * n);
        let g2v = grads.k2v.data_mut().chunks_mut(w * n);
        let g2h = grads.k2h.data_mut().chunks_mut(w * n);
        g1v.zip(g1h)
            .zip(g2v.zip(g2h))
            .map(|((a, b), (d, e))| (a, b, d, e))
            .collect()
    };

    rows.into_par_iter().enumerate().for_each(|(y, (g1v, g1h, g2v, g2h))| {
        // weighted[j*c + ch] = sum_i kv(i) P(i,j,ch)   (for the h-gradient)
        // rowdot[i*c + ch]   = sum_j kh(j) P(i,j,ch)   (for the v-gradient)
        let mut weighted = vec![T::zero(); n * c];
        let mut rowdot = vec![T::zero(); n * c];
        for x in 0..w {
            let kbase = (y * w + x) * n;
            let gpx = &g[(y * w + x) * c..(y * w + x) * c + c];
            for (frame, kv, kh, gv_row, gh_row) in [
                (src1, kf.k1v.data(), kf.k1h.data(), &mut *g1v, &mut *g1h),
                (src2, kf.k2v.data(), kf.k2h.data(), &mut *g2v, &mut *g2h),
            ] {
                let kv = &kv[kbase..kbase + n];
                let kh = &kh[kbase..kbase + n];
                for v in weighted.iter_mut() {
                    *v = T::zero();
                }
                for v in rowdot.iter_mut() {
                    *v = T::zero();
                }
                for i in 0..n {
                    let row = &frame[(y + i) * row_stride + x * c..][..n * c];
                    let kvi = kv[i];
                    for (acc, &val) in weighted.iter_mut().zip(row) {
                        *acc = *acc + kvi * val;
                    }
                    let rd = &mut rowdot[i * c..(i + 1) * c];
                    for (j, &khj) in kh.iter().enumerate() {
                        let patch = &row[j * c..(j + 1) * c];
                        for (r, &val) in rd.iter_mut().zip(patch) {
                            *r = *r + khj * val;
                        }
                    }
                }
                let gv = &mut gv_row[x * n..(x + 1) * n];
                for (i, slot) in gv.iter_mut().enumerate() {
                    let rd = &rowdot[i * c..(i + 1) * c];
                    let mut acc = T::zero();
                    for (&gc, &r) in gpx.iter().zip(rd) {
                        acc = acc + gc * r;
                    }
                    *slot = acc;
                }
                let gh = &mut gh_row[x * n..(x + 1) * n];
                for (j, slot) in gh.iter_mut().enumerate() {
                    let ws = &weighted[j * c..(j + 1) * c];
                    let mut acc = T::zero();
                    for (&gc, &s) in gpx.iter().zip(ws) {
                        acc = acc + gc * s;
                    }
                    *slot = acc;
                }
            }
        }
    });
    Ok(grads)
}

/// Reference evaluation of the unfactored per-pixel convolution:
/// `out(x,y,c) = sum_ij K1(x,y,i,j) P1(i,j,c) + sum_ij K2(x,y,i,j) P2(i,j,c)`.
///
/// Written for clarity over speed: plain nested loops, one multiply-add per
/// kernel coefficient, no factorization and no parallelism.
pub fn dense_local_conv_oracle<T: Scalar>(
    i1: &Tensor<T>,
    i2: &Tensor<T>,
    dk: &DenseKernelPair<T>,
) -> Result<Tensor<T>> {
    let shape = dk.k1.shape();
    if shape.len() != 4 || shape[2] != shape[3] {
        return parameter(format!("dense kernels must be (H, W, n, n), got {shape:?}"));
    }
    if dk.k2.shape() != shape {
        return parameter(format!(
            "dense kernel pair disagrees: {:?} vs {:?}",
            shape,
            dk.k2.shape()
        ));
    }
    let (h, w, n) = (shape[0], shape[1], shape[2]);
    if n % 2 == 0 {
        return parameter(format!("kernel size must be odd, got {n}"));
    }
    let c = check_operand_shapes(i1, i2, h, w, n)?;
    let in_w = w + n - 1;

    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = T::zero();
                for i in 0..n {
                    for j in 0..n {
                        let p1 = i1.data()[((y + i) * in_w + x + j) * c + ch];
                        let p2 = i2.data()[((y + i) * in_w + x + j) * c + ch];
                        let k1 = dk.k1.data()[(((y * w + x) * n) + i) * n + j];
                        let k2 = dk.k2.data()[(((y * w + x) * n) + i) * n + j];
                        acc = acc + k1 * p1 + k2 * p2;
                    }
                }
                out.data_mut()[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Ok(out)
}

/// Expands a kernel field to its equivalent dense 2D kernels:
/// `K(i,j) = kv(i) * kh(j)` per pixel and frame.
pub fn outer_product_kernels<T: Scalar>(kf: &KernelField<T>) -> DenseKernelPair<T> {
    let (h, w, n) = (kf.height(), kf.width(), kf.kernel_size());
    let mut k1 = Tensor::zeros(&[h, w, n, n]);
    let mut k2 = Tensor::zeros(&[h, w, n, n]);
    for (kv, kh, dst) in [
        (&kf.k1v, &kf.k1h, &mut k1),
        (&kf.k2v, &kf.k2h, &mut k2),
    ] {
        let kv = kv.data();
        let kh = kh.data();
        let out = dst.data_mut();
        for p in 0..h * w {
            let src = p * n;
            let base = p * n * n;
            for i in 0..n {
                let vi = kv[src + i];
                let row = &mut out[base + i * n..base + (i + 1) * n];
                for (slot, &hj) in row.iter_mut().zip(&kh[src..src + n]) {
                    *slot = vi * hj;
                }
            }
        }
    }
    DenseKernelPair { k1, k2 }
}

/// Kernel coefficient storage mode for [`memory_footprint`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelStorage {
    /// Two dense `n x n` kernels per pixel.
    Full2d,
    /// Four 1D kernels of length `n` per pixel.
    Separable,
}

/// Bytes needed to hold the predicted kernel coefficients for a full frame.
///
/// `Full2d`: `width * height * 2 * n^2 * bytes_per_coeff`.
/// `Separable`: `width * height * 4 * n * bytes_per_coeff`.
pub fn memory_footprint(
    width: u64,
    height: u64,
    n: u64,
    mode: KernelStorage,
    bytes_per_coeff: u64,
) -> u64 {
    debug_assert!(width > 0 && height > 0 && n % 2 == 1);
    match mode {
        KernelStorage::Full2d => width * height * 2 * n * n * bytes_per_coeff,
        KernelStorage::Separable => width * height * 4 * n * bytes_per_coeff,
    }
}
