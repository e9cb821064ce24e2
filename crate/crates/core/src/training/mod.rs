//! The two-phase training loop: L1 first, then perceptual fine-tuning with a
//! frozen feature extractor, both driven by AdaMax.
//!
//! Training uses unpadded inputs: the network predicts kernels for the full
//! grid, the operator renders only the centered valid region, and the loss is
//! evaluated there. Per-batch sample gradients may be computed in parallel;
//! they are reduced in a fixed order, so runs are bitwise reproducible for a
//! given seed regardless of worker count.

pub mod loss;
pub mod optim;

use rayon::prelude::*;

pub use loss::{
    feature_loss, l1_loss, valid_region, FeatureExtractor, PyramidStage, ValidRegion,
    DEFAULT_EXTRACTOR_CHANNELS, DEFAULT_EXTRACTOR_SEED,
};
pub use optim::{adamax_step, AdamaxHyper, OptimizerState};

use crate::datapipe::{crop_image, AugmentedPair};
use crate::error::{numeric, parameter, Error, Result};
use crate::model::{self, ForwardMode, Gradients, Parameters, Variant};
use crate::rng::RandomStream;
use crate::sepconv::{self, KernelField};
use crate::tensor::{Scalar, Tensor};

/// Training phase of the two-phase scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    L1Only,
    LfFinetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::L1Only => "l1",
            Phase::LfFinetune => "lf",
        }
    }
}

/// Loss selection. The extractor is required exactly when fine-tuning.
pub struct LossConfig<T: Scalar = f32> {
    pub phase: Phase,
    pub extractor: Option<FeatureExtractor<T>>,
    /// Learning rate of the fine-tuning phase.
    pub lf_lr: f64,
}

impl<T: Scalar> LossConfig<T> {
    pub fn l1() -> Self {
        Self {
            phase: Phase::L1Only,
            extractor: None,
            lf_lr: 1e-4,
        }
    }

    pub fn lf_finetune(extractor: FeatureExtractor<T>) -> Self {
        Self {
            phase: Phase::LfFinetune,
            extractor: Some(extractor),
            lf_lr: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.phase, &self.extractor) {
            (Phase::LfFinetune, None) => {
                parameter("the fine-tuning phase needs a feature extractor")
            }
            (Phase::L1Only, Some(_)) => {
                parameter("the L1 phase does not take a feature extractor")
            }
            _ => Ok(()),
        }
    }
}

/// Deterministic-by-index dataset: `get(i, rng)` must depend only on `i` and
/// the provided stream.
pub trait SampleSource<T: Scalar>: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize, rng: &mut RandomStream) -> Result<AugmentedPair<T>>;
}

/// Training-loop knobs.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// Checkpoint every this many steps; 0 disables intermediate checkpoints.
    pub checkpoint_interval: usize,
    /// Seed for epoch shuffling and per-sample augmentation streams.
    pub seed: u64,
    /// Overrides the phase's default learning rate when set.
    pub lr_override: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            checkpoint_interval: 0,
            seed: 0,
            lr_override: None,
        }
    }
}

/// One loss-curve entry per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub phase: Phase,
}

pub struct TrainOutcome<T: Scalar> {
    pub params: Parameters<T>,
    pub curve: Vec<CurvePoint>,
}

/// Forward + loss + backward for one sample. Returns the scalar loss, the
/// parameter gradients, and any deferred batch-norm running-stat updates.
fn sample_pass<T: Scalar>(
    params: &Parameters<T>,
    pair: &AugmentedPair<T>,
    loss_config: &LossConfig<T>,
) -> Result<(f64, Gradients<T>, Vec<(String, Tensor<T>, Tensor<T>)>)> {
    let shape = pair.first.shape();
    let (h, w) = (shape[0], shape[1]);
    let n = params.config.kernel_size;
    let region = valid_region(h, w, n)?;

    let compute_loss = |pred: &Tensor<T>, truth: &Tensor<T>| -> Result<(T, Tensor<T>)> {
        match loss_config.phase {
            Phase::L1Only => l1_loss(pred, truth),
            Phase::LfFinetune => {
                let phi = loss_config
                    .extractor
                    .as_ref()
                    .ok_or_else(|| Error::Parameter("missing extractor".into()))?;
                feature_loss(pred, truth, phi)
            }
        }
    };
    let truth_valid = crop_image(&pair.truth, region.y0, region.x0, region.height, region.width)?;

    match params.config.variant {
        Variant::KernelPrediction => {
            let (kf, cache) = model::forward(params, &pair.first, &pair.last, ForwardMode::Train)?;
            let cache = cache.expect("train mode caches");
            let kf_valid = kf.crop(region.y0, region.x0, region.height, region.width)?;
            let pred = sepconv::forward(&pair.first, &pair.last, &kf_valid)?;
            let (loss_value, grad_pred) = compute_loss(&pred, &truth_valid)?;
            let kg_valid =
                sepconv::backward_kernels(&pair.first, &pair.last, &kf_valid, &grad_pred)?;
            let kernel_grads = KernelField::new(
                kg_valid.k1v.clone(),
                kg_valid.k1h.clone(),
                kg_valid.k2v.clone(),
                kg_valid.k2h.clone(),
            )?
            .embed(h, w, region.y0, region.x0)?;
            let grads = model::backward(params, &cache, kernel_grads)?;
            Ok((loss_value.as_f64(), grads, cache.bn_running_updates()))
        }
        Variant::DirectSynthesis => {
            let (pred_full, cache) =
                model::forward_direct(params, &pair.first, &pair.last, ForwardMode::Train)?;
            let cache = cache.expect("train mode caches");
            let pred = crop_image(&pred_full, region.y0, region.x0, region.height, region.width)?;
            let (loss_value, grad_pred) = compute_loss(&pred, &truth_valid)?;
            // Scatter the valid-region gradient back into the full frame.
            let mut grad_full = Tensor::zeros(pred_full.shape());
            {
                let gw = grad_full.data_mut();
                let gs = grad_pred.data();
                let c = 3;
                for y in 0..region.height {
                    let to = ((region.y0 + y) * w + region.x0) * c;
                    let from = y * region.width * c;
                    gw[to..to + region.width * c]
                        .copy_from_slice(&gs[from..from + region.width * c]);
                }
            }
            let grads = model::backward_direct(params, &cache, grad_full)?;
            Ok((loss_value.as_f64(), grads, cache.bn_running_updates()))
        }
    }
}

/// Runs the training loop and returns the trained parameters plus the loss
/// curve. `on_checkpoint` fires every `checkpoint_interval` steps.
pub fn train<T: Scalar>(
    mut params: Parameters<T>,
    source: &dyn SampleSource<T>,
    loss_config: &LossConfig<T>,
    options: &TrainOptions,
    mut on_checkpoint: impl FnMut(usize, &Parameters<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    loss_config.validate()?;
    if source.len() == 0 {
        return parameter("training dataset is empty");
    }
    if options.batch_size == 0 {
        return parameter("batch size must be positive");
    }
    let lr = options.lr_override.unwrap_or(match loss_config.phase {
        Phase::L1Only => 0.001,
        Phase::LfFinetune => loss_config.lf_lr,
    });
    let hyper = AdamaxHyper {
        lr,
        ..AdamaxHyper::default()
    };
    let mut state = OptimizerState::new(&params, hyper);

    let mut shuffle_rng = RandomStream::new(options.seed);
    let augment_base = RandomStream::new(options.seed ^ 0x00A6_3E17_0000_0001);
    let mut order: Vec<usize> = (0..source.len()).collect();
    shuffle_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let mut curve = Vec::with_capacity(options.steps);
    for step in 1..=options.steps {
        let mut batch = Vec::with_capacity(options.batch_size);
        for slot in 0..options.batch_size {
            if cursor >= order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push((slot, order[cursor]));
            cursor += 1;
        }

        // Per-sample passes may run in parallel; the reduction below is in
        // slot order, so the result is independent of scheduling.
        let passes: Vec<Result<(f64, Gradients<T>, Vec<(String, Tensor<T>, Tensor<T>)>)>> = batch
            .par_iter()
            .map(|&(slot, index)| {
                let mut rng = augment_base
                    .derive((step as u64) << 20 | slot as u64);
                let pair = source.get(index, &mut rng)?;
                sample_pass(&params, &pair, loss_config)
            })
            .collect();

        let inv_batch = T::from_f64(1.0 / options.batch_size as f64);
        let mut batch_loss = 0.0f64;
        let mut batch_grads: Option<Gradients<T>> = None;
        let mut bn_updates = Vec::new();
        for pass in passes {
            let (loss_value, grads, bn) = pass?;
            batch_loss += loss_value;
            bn_updates.extend(bn);
            match &mut batch_grads {
                None => {
                    let mut scaled = grads;
                    for g in scaled.values_mut() {
                        g.scale(inv_batch);
                    }
                    batch_grads = Some(scaled);
                }
                Some(acc) => {
                    for (name, g) in &grads {
                        acc.get_mut(name)
                            .ok_or_else(|| {
                                Error::State(format!("gradient {name} missing from batch"))
                            })?
                            .add_scaled(g, inv_batch)?;
                    }
                }
            }
        }
        batch_loss /= options.batch_size as f64;
        if !batch_loss.is_finite() {
            return numeric(format!(
                "non-finite loss {batch_loss} at step {step}; aborting"
            ));
        }

        adamax_step(&mut params, &batch_grads.expect("non-empty batch"), &mut state)?;
        // Fold batch-norm statistics in sample order (single writer).
        for (prefix, mean, var) in bn_updates {
            params.set(&format!("{prefix}.bn.running_mean"), mean)?;
            params.set(&format!("{prefix}.bn.running_var"), var)?;
        }

        curve.push(CurvePoint {
            step,
            loss: batch_loss,
            phase: loss_config.phase,
        });
        if options.checkpoint_interval > 0 && step % options.checkpoint_interval == 0 {
            on_checkpoint(step, &params)?;
        }
    }
    Ok(TrainOutcome { params, curve })
}
