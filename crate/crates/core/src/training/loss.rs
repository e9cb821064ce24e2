//! Training losses and the frozen feature extractor for the perceptual phase.

use crate::error::{parameter, Result};
use crate::model::layers::{conv3x3_backward, conv3x3_forward, relu_backward, relu_forward};
use crate::rng::{Distribution, RandomStream};
use crate::tensor::{Reduction, Scalar, Tensor};

/// Centered sub-rectangle over which unpadded interpolation is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidRegion {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

/// For an `(H, W)` frame and kernel size `n`, the `(H-n+1, W-n+1)` centered
/// region where every `n x n` patch is in bounds; training losses are
/// evaluated only there.
pub fn valid_region(height: usize, width: usize, n: usize) -> Result<ValidRegion> {
    if n % 2 == 0 || n == 0 {
        return parameter(format!("kernel size must be odd, got {n}"));
    }
    if height < n || width < n {
        return parameter(format!(
            "frame {height}x{width} is smaller than the kernel size {n}"
        ));
    }
    Ok(ValidRegion {
        y0: n / 2,
        x0: n / 2,
        height: height - n + 1,
        width: width - n + 1,
    })
}

/// Mean absolute difference and its subgradient with respect to `pred`
/// (0 at exact ties).
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != truth.shape() {
        return parameter(format!(
            "loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        ));
    }
    if pred.is_empty() {
        return parameter("loss over an empty tensor");
    }
    let diff = pred.zip_map(truth, |a, b| a - b)?;
    let loss = diff.map(|d| d.abs()).reduce(Reduction::Mean)?;
    let inv_n = T::from_f64(1.0 / pred.len() as f64);
    let grad = diff.map(|d| {
        if d > T::zero() {
            inv_n
        } else if d < T::zero() {
            -inv_n
        } else {
            T::zero()
        }
    });
    Ok((loss, grad))
}

/// The seed that pins the default random-pyramid extractor.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5EED_FEA7;
/// Stage widths of the default random pyramid.
pub const DEFAULT_EXTRACTOR_CHANNELS: [usize; 4] = [8, 16, 32, 64];

/// One stride-2 stage of the pyramid: 3x3 conv, ReLU, subsample by two.
#[derive(Debug, Clone)]
pub struct PyramidStage<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Frozen feature map for the perceptual loss. Deterministic; never updated
/// by training.
#[derive(Debug, Clone)]
pub enum FeatureExtractor<T: Scalar = f32> {
    /// The identity map: the feature loss degenerates to mean squared error.
    Identity,
    /// Stride-2 conv+ReLU stages with pinned weights: either seeded random
    /// (the desk-scale default) or loaded from an external weights file.
    Pyramid {
        name: String,
        stages: Vec<PyramidStage<T>>,
    },
}

/// Activations saved while extracting features from the prediction.
pub struct ExtractorTrace<T: Scalar> {
    stages: Vec<(Tensor<T>, Tensor<T>)>, // (stage input, full-res post-relu)
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn identity() -> Self {
        Self::Identity
    }

    /// Four (by default) stride-2 conv+ReLU stages with He-scaled Gaussian
    /// weights drawn from the given seed.
    pub fn seeded_random_pyramid(seed: u64, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() {
            return parameter("pyramid needs at least one stage");
        }
        let mut rng = RandomStream::new(seed);
        let mut stages = Vec::new();
        let mut cin = 3usize;
        for &cout in channels {
            let fan_in = 9 * cin;
            let sigma = (2.0 / fan_in as f64).sqrt();
            let weight: Tensor<T> = rng.fill(
                &[3, 3, cin, cout],
                Distribution::Normal { mu: 0.0, sigma },
            )?;
            stages.push(PyramidStage {
                weight,
                bias: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        Ok(Self::Pyramid {
            name: format!("random_pyramid(seed={seed:#x})"),
            stages,
        })
    }

    /// Wraps externally supplied stage weights (e.g. from a weights file).
    pub fn from_stages(name: impl Into<String>, stages: Vec<PyramidStage<T>>) -> Result<Self> {
        if stages.is_empty() {
            return parameter("pyramid needs at least one stage");
        }
        Ok(Self::Pyramid {
            name: name.into(),
            stages,
        })
    }

    pub fn name(&self) -> &str {
        match self {
            Self::Identity => "identity",
            Self::Pyramid { name, .. } => name,
        }
    }

    /// Stage tensors for serialization and frozen-weights assertions.
    pub fn stage_tensors(&self) -> Vec<(String, Tensor<T>)> {
        match self {
            Self::Identity => Vec::new(),
            Self::Pyramid { stages, .. } => stages
                .iter()
                .enumerate()
                .flat_map(|(i, s)| {
                    [
                        (format!("stage{i}.weight"), s.weight.clone()),
                        (format!("stage{i}.bias"), s.bias.clone()),
                    ]
                })
                .collect(),
        }
    }

    /// Feature map of an image, plus the trace needed to backpropagate.
    pub fn extract(&self, img: &Tensor<T>) -> Result<(Tensor<T>, ExtractorTrace<T>)> {
        match self {
            Self::Identity => Ok((
                img.clone(),
                ExtractorTrace { stages: Vec::new() },
            )),
            Self::Pyramid { stages, .. } => {
                let mut x = img.clone();
                let mut trace = Vec::new();
                for stage in stages {
                    let (h, w) = (x.shape()[0], x.shape()[1]);
                    if h % 2 != 0 || w % 2 != 0 {
                        return parameter(format!(
                            "extractor needs even extents at every stage, got {h}x{w}"
                        ));
                    }
                    let full = relu_forward(&conv3x3_forward(&x, &stage.weight, &stage.bias)?);
                    let sub = subsample2(&full);
                    trace.push((x, full));
                    x = sub;
                }
                Ok((x, ExtractorTrace { stages: trace }))
            }
        }
    }

    /// Gradient of a feature-space loss with respect to the input image.
    pub fn backprop(&self, trace: &ExtractorTrace<T>, grad_features: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Self::Identity => Ok(grad_features.clone()),
            Self::Pyramid { stages, .. } => {
                let mut g = grad_features.clone();
                for (stage, (input, full)) in stages.iter().zip(&trace.stages).rev() {
                    let g_full = upscatter2(&g, full.shape()[0], full.shape()[1]);
                    let g_masked = relu_backward(full, &g_full)?;
                    let (gi, _, _) = conv3x3_backward(input, &stage.weight, &g_masked)?;
                    g = gi;
                }
                Ok(g)
            }
        }
    }
}

/// Keeps every even-indexed row/column: the subsampling half of a stride-2
/// convolution.
fn subsample2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let src = t.data();
    let mut data = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            let px = ((2 * y) * w + 2 * x) * c;
            data.extend_from_slice(&src[px..px + c]);
        }
    }
    Tensor::new(&[oh, ow, c], data).expect("subsample volume")
}

/// Adjoint of [`subsample2`]: scatter gradients to even positions, zeros
/// elsewhere.
fn upscatter2<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (gh, gw, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut out = Tensor::zeros(&[h, w, c]);
    {
        let d = out.data_mut();
        let src = g.data();
        for y in 0..gh {
            for x in 0..gw {
                let from = (y * gw + x) * c;
                let to = ((2 * y) * w + 2 * x) * c;
                d[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    out
}

/// Mean squared difference of the extracted features, with the gradient
/// backpropagated through the extractor to `pred`.
pub fn feature_loss<T: Scalar>(
    pred: &Tensor<T>,
    truth: &Tensor<T>,
    phi: &FeatureExtractor<T>,
) -> Result<(T, Tensor<T>)> {
    if pred.shape() != truth.shape() {
        return parameter(format!(
            "loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        ));
    }
    let (fp, trace) = phi.extract(pred)?;
    let (ft, _) = phi.extract(truth)?;
    let diff = fp.zip_map(&ft, |a, b| a - b)?;
    if diff.is_empty() {
        return parameter("feature loss over an empty tensor");
    }
    let loss = diff.map(|d| d * d).reduce(Reduction::Mean)?;
    let scale = T::from_f64(2.0 / diff.len() as f64);
    let grad_features = diff.map(|d| d * scale);
    let grad_pred = phi.backprop(&trace, &grad_features)?;
    Ok((loss, grad_pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, max_relative_error};

    fn uniform(seed: u64, shape: &[usize]) -> Tensor<f64> {
        RandomStream::new(seed)
            .fill(shape, Distribution::Uniform { a: 0.0, b: 1.0 })
            .unwrap()
    }

    #[test]
    fn valid_region_arithmetic() {
        let r = valid_region(128, 128, 51).unwrap();
        assert_eq!((r.height, r.width), (78, 78));
        assert_eq!((r.y0, r.x0), (25, 25));
        let r = valid_region(51, 51, 51).unwrap();
        assert_eq!((r.height, r.width), (1, 1));
        assert!(valid_region(50, 50, 51).is_err());
    }

    #[test]
    fn l1_basics() {
        let a = uniform(1, &[4, 4, 3]);
        let (loss, _) = l1_loss(&a, &a).unwrap();
        assert_eq!(loss, 0.0);

        let b = a.map(|x| x + 0.5);
        let (loss, grad) = l1_loss(&b, &a).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
        assert!(grad.data().iter().all(|&g| g > 0.0));
    }

    #[test]
    fn l1_gradient_matches_finite_differences_away_from_ties() {
        let pred = uniform(2, &[3, 3, 2]);
        let truth = uniform(3, &[3, 3, 2]);
        let (_, grad) = l1_loss(&pred, &truth).unwrap();
        let fd = finite_difference_gradient(
            |p| l1_loss(p, &truth).map(|(l, _)| l),
            &pred,
            1e-7,
        )
        .unwrap();
        assert!(max_relative_error(&fd, &grad, 1e-8).unwrap() < 1e-5);
    }

    #[test]
    fn identity_feature_loss_is_mse() {
        let pred = uniform(4, &[4, 4, 3]);
        let truth = uniform(5, &[4, 4, 3]);
        let (loss, _) = feature_loss(&pred, &truth, &FeatureExtractor::identity()).unwrap();
        let mse = pred
            .zip_map(&truth, |a, b| (a - b) * (a - b))
            .unwrap()
            .reduce(Reduction::Mean)
            .unwrap();
        assert!((loss - mse).abs() < 1e-12);
    }

    #[test]
    fn feature_loss_zero_on_identical_inputs() {
        let img = uniform(6, &[16, 16, 3]);
        let phi = FeatureExtractor::<f64>::seeded_random_pyramid(9, &[4, 8]).unwrap();
        let (loss, grad) = feature_loss(&img, &img, &phi).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn pyramid_gradient_matches_finite_differences() {
        let pred = uniform(7, &[8, 8, 3]);
        let truth = uniform(8, &[8, 8, 3]);
        let phi = FeatureExtractor::<f64>::seeded_random_pyramid(10, &[4, 6]).unwrap();
        let (_, grad) = feature_loss(&pred, &truth, &phi).unwrap();
        let fd = finite_difference_gradient(
            |p| feature_loss(p, &truth, &phi).map(|(l, _)| l),
            &pred,
            1e-6,
        )
        .unwrap();
        let err = max_relative_error(&fd, &grad, 1e-8).unwrap();
        assert!(err < 1e-6, "pyramid gradient error {err}");
    }

    #[test]
    fn extractor_is_deterministic() {
        let a = FeatureExtractor::<f32>::seeded_random_pyramid(42, &[4]).unwrap();
        let b = FeatureExtractor::<f32>::seeded_random_pyramid(42, &[4]).unwrap();
        let (ta, tb) = (&a.stage_tensors()[0].1, &b.stage_tensors()[0].1);
        assert_eq!(ta.data(), tb.data());
    }
}
