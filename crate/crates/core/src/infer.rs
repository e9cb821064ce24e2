//! One-pass full-frame interpolation with boundary handling.
//!
//! The frames are replicate-padded twice: first to the next multiple of
//! `2^levels` so the network accepts them, then by `n/2` so the operator can
//! evaluate every output pixel. The rendered frame is cropped back to the
//! input size, so output dimensions always equal input dimensions.

use crate::error::{parameter, Result};
use crate::model::{self, ForwardMode, Parameters, Variant};
use crate::sepconv;
use crate::tensor::{Scalar, Tensor};

/// Replicate-pads with independent margins per side.
pub fn replicate_pad_rect<T: Scalar>(
    image: &Tensor<T>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return parameter(format!("image must be (H, W, C), got {s:?}"));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if h == 0 || w == 0 {
        return parameter("cannot pad an empty image");
    }
    let (oh, ow) = (h + top + bottom, w + left + right);
    let src = image.data();
    let mut out = vec![T::zero(); oh * ow * c];
    for oy in 0..oh {
        let sy = oy.saturating_sub(top).min(h - 1);
        for ox in 0..ow {
            let sx = ox.saturating_sub(left).min(w - 1);
            let from = (sy * w + sx) * c;
            let to = (oy * ow + ox) * c;
            out[to..to + c].copy_from_slice(&src[from..from + c]);
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

/// Pads a frame pair for the network, predicts kernels, renders with the
/// separable operator, and crops back to the input size. Single pass, no
/// tiling.
pub fn interpolate<T: Scalar>(
    params: &Parameters<T>,
    i1: &Tensor<T>,
    i2: &Tensor<T>,
) -> Result<Tensor<T>> {
    if i1.shape() != i2.shape() {
        return parameter(format!(
            "input frames differ in size: {:?} vs {:?}",
            i1.shape(),
            i2.shape()
        ));
    }
    let s = i1.shape();
    if s.len() != 3 || s[2] != 3 {
        return parameter(format!("frames must be (H, W, 3), got {s:?}"));
    }
    let (h, w) = (s[0], s[1]);
    let factor = params.config.pool_factor();
    let pad_h = (factor - h % factor) % factor;
    let pad_w = (factor - w % factor) % factor;
    let (top, left) = (pad_h / 2, pad_w / 2);
    let (bottom, right) = (pad_h - top, pad_w - left);

    let p1 = replicate_pad_rect(i1, top, bottom, left, right)?;
    let p2 = replicate_pad_rect(i2, top, bottom, left, right)?;

    let full = match params.config.variant {
        Variant::KernelPrediction => {
            let (kf, _) = model::forward(params, &p1, &p2, ForwardMode::Infer)?;
            let margin = params.config.kernel_size / 2;
            let o1 = sepconv::replicate_pad(&p1, margin)?;
            let o2 = sepconv::replicate_pad(&p2, margin)?;
            sepconv::forward(&o1, &o2, &kf)?
        }
        Variant::DirectSynthesis => {
            let (frame, _) = model::forward_direct(params, &p1, &p2, ForwardMode::Infer)?;
            frame
        }
    };
    crate::datapipe::crop_image(&full, top, left, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, ModelConfig};
    use crate::rng::{Distribution, RandomStream};

    fn tiny_params() -> Parameters<f32> {
        let config = ModelConfig {
            levels: 2,
            widths: vec![2, 3],
            convs_per_block: 1,
            kernel_size: 5,
            variant: Variant::KernelPrediction,
            width_scale: 1,
        };
        build(&config, &mut RandomStream::new(3)).unwrap()
    }

    #[test]
    fn output_size_equals_input_size() {
        let params = tiny_params();
        let mut rng = RandomStream::new(4);
        let d = Distribution::Uniform { a: 0.0, b: 1.0 };
        // 10x13 is divisible by neither 4 nor 2; pad+crop must restore it.
        let i1: Tensor<f32> = rng.fill(&[10, 13, 3], d).unwrap();
        let i2: Tensor<f32> = rng.fill(&[10, 13, 3], d).unwrap();
        let out = interpolate(&params, &i1, &i2).unwrap();
        assert_eq!(out.shape(), &[10, 13, 3]);
    }

    #[test]
    fn size_mismatch_rejected() {
        let params = tiny_params();
        let a = Tensor::<f32>::zeros(&[8, 8, 3]);
        let b = Tensor::<f32>::zeros(&[8, 12, 3]);
        assert!(interpolate(&params, &a, &b).is_err());
    }

    #[test]
    fn rect_pad_replicates() {
        let img = Tensor::new(&[2, 2, 1], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let p = replicate_pad_rect(&img, 1, 0, 0, 2).unwrap();
        assert_eq!(p.shape(), &[3, 4, 1]);
        assert_eq!(p.at(&[0, 0, 0]), 1.0); // replicated top row
        assert_eq!(p.at(&[0, 3, 0]), 2.0); // replicated right edge
        assert_eq!(p.at(&[2, 3, 0]), 4.0);
    }
}
