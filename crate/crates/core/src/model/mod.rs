//! The kernel-prediction encoder-decoder network and its direct-synthesis
//! baseline variant.
//!
//! The trunk contracts with `levels` blocks of 3x3 conv + ReLU stacks and
//! average pooling, processes a bottleneck block, then expands back to half
//! resolution with bilinear upsampling and additive skip connections. Four
//! head sub-networks (one per 1D kernel) upsample to full resolution and emit
//! the `(H, W, n)` kernel tensors; the direct-synthesis variant keeps one
//! head that emits the frame itself and adds batch normalization after each
//! conv block.
//!
//! Decoder stages are residual: `stage(x) = x' + convs(x')` where
//! `x' = upsample(conv(x)) + skip`. Zeroing a stage's conv stack therefore
//! passes the upsampled-plus-skip tensor through unchanged.

pub mod layers;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{parameter, Error, Result};
use crate::rng::{Distribution, RandomStream};
use crate::sepconv::KernelField;
use crate::tensor::{Scalar, Tensor};

use layers::{
    avg_pool2_backward, avg_pool2_forward, batch_norm_backward, batch_norm_forward,
    batch_norm_updated_running, conv3x3_backward, conv3x3_forward, relu_backward, relu_forward,
    upsample_bilinear_x2_backward, upsample_bilinear_x2_forward, BatchNormCache, Mode,
};

/// Output head flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Four heads, each predicting one `(H, W, n)` kernel tensor.
    KernelPrediction,
    /// One head predicting the interpolated frame directly, with batch
    /// normalization after each conv block.
    DirectSynthesis,
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of pooling stages.
    pub levels: usize,
    /// Channels per encoder level before `width_scale` is applied.
    pub widths: Vec<usize>,
    /// Convs in every encoder/bottleneck/decoder block.
    pub convs_per_block: usize,
    /// 1D kernel length `n` (odd).
    pub kernel_size: usize,
    pub variant: Variant,
    /// Divisor applied to all widths for desk-scale runs.
    pub width_scale: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            widths: vec![32, 64, 128, 256, 512],
            convs_per_block: 3,
            kernel_size: 51,
            variant: Variant::KernelPrediction,
            width_scale: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return parameter("levels must be at least 1");
        }
        if self.widths.len() != self.levels {
            return parameter(format!(
                "widths has {} entries for {} levels",
                self.widths.len(),
                self.levels
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return parameter("widths must be positive");
        }
        if self.convs_per_block == 0 {
            return parameter("convs_per_block must be at least 1");
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return parameter(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.width_scale == 0 {
            return parameter("width_scale must be at least 1");
        }
        Ok(())
    }

    /// Widths after the desk-scale divisor, floored at one channel.
    pub fn effective_widths(&self) -> Vec<usize> {
        self.widths
            .iter()
            .map(|&w| (w / self.width_scale).max(1))
            .collect()
    }

    /// Input extents must be divisible by this.
    pub fn pool_factor(&self) -> usize {
        1 << self.levels
    }

    /// Channel count entering the head sub-networks.
    fn head_width(&self) -> usize {
        let w = self.effective_widths();
        if self.levels >= 2 {
            w[1]
        } else {
            w[0]
        }
    }

    fn head_names(&self) -> &'static [&'static str] {
        match self.variant {
            Variant::KernelPrediction => &["head_k1v", "head_k1h", "head_k2v", "head_k2h"],
            Variant::DirectSynthesis => &["head_synth"],
        }
    }

    fn head_out_channels(&self) -> usize {
        match self.variant {
            Variant::KernelPrediction => self.kernel_size,
            Variant::DirectSynthesis => 3,
        }
    }

    fn uses_batch_norm(&self) -> bool {
        self.variant == Variant::DirectSynthesis
    }

    /// Every learnable/stateful tensor the config declares, in creation
    /// order: `(name, shape)`.
    fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.effective_widths();
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize| {
            specs.push((format!("{name}.weight"), vec![3, 3, cin, cout]));
            specs.push((format!("{name}.bias"), vec![cout]));
        };
        let bn = |specs: &mut Vec<(String, Vec<usize>)>, prefix: String, c: usize| {
            for field in ["scale", "offset", "running_mean", "running_var"] {
                specs.push((format!("{prefix}.bn.{field}"), vec![c]));
            }
        };
        for l in 1..=self.levels {
            let cin = if l == 1 { 6 } else { w[l - 2] };
            for k in 0..self.convs_per_block {
                let ci = if k == 0 { cin } else { w[l - 1] };
                conv(&mut specs, format!("enc{l}.conv{k}"), ci, w[l - 1]);
            }
            if self.uses_batch_norm() {
                bn(&mut specs, format!("enc{l}"), w[l - 1]);
            }
        }
        let wl = w[self.levels - 1];
        for k in 0..self.convs_per_block {
            conv(&mut specs, format!("bottleneck.conv{k}"), wl, wl);
        }
        if self.uses_batch_norm() {
            bn(&mut specs, "bottleneck".to_string(), wl);
        }
        for l in (2..=self.levels).rev() {
            let cin = w[(l + 1).min(self.levels) - 1];
            let cout = w[l - 1];
            conv(&mut specs, format!("dec{l}.up"), cin, cout);
            for k in 0..self.convs_per_block {
                conv(&mut specs, format!("dec{l}.res{k}"), cout, cout);
            }
            if self.uses_batch_norm() {
                bn(&mut specs, format!("dec{l}"), cout);
            }
        }
        let hw = self.head_width();
        for head in self.head_names() {
            conv(&mut specs, format!("{head}.conv0"), hw, hw);
            conv(&mut specs, format!("{head}.conv1"), hw, hw);
            conv(&mut specs, format!("{head}.out"), hw, self.head_out_channels());
        }
        specs
    }
}

static NEXT_PARAMS_ID: AtomicU64 = AtomicU64::new(1);

/// One network instance: the configuration plus a named map of tensors.
#[derive(Debug, Clone)]
pub struct Parameters<T: Scalar = f32> {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
    identity: u64,
    revision: u64,
}

/// Named gradient map returned by the backward passes. Running statistics
/// never appear here.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

impl<T: Scalar> Parameters<T> {
    /// Wraps an existing tensor map, checking it against the config:
    /// every declared name present with the declared shape, nothing extra.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = config.tensor_specs();
        for (name, shape) in &specs {
            match tensors.get(name) {
                None => return parameter(format!("missing parameter tensor {name}")),
                Some(t) if t.shape() != shape.as_slice() => {
                    return parameter(format!(
                        "parameter {name} has shape {:?}, config wants {shape:?}",
                        t.shape()
                    ))
                }
                _ => {}
            }
        }
        if tensors.len() != specs.len() {
            let declared: std::collections::BTreeSet<_> =
                specs.iter().map(|(n, _)| n.clone()).collect();
            let extra: Vec<_> = tensors
                .keys()
                .filter(|k| !declared.contains(*k))
                .cloned()
                .collect();
            return parameter(format!("unknown parameter tensors: {extra:?}"));
        }
        Ok(Self {
            config,
            tensors,
            identity: NEXT_PARAMS_ID.fetch_add(1, Ordering::Relaxed),
            revision: 0,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("no parameter named {name}")))
    }

    /// Replaces one tensor (same shape) and marks the parameters as mutated.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return parameter(format!(
                "cannot replace {name}: shape {:?} with {:?}",
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        self.revision += 1;
        Ok(())
    }

    /// Name/tensor pairs in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    /// Names that receive gradients (everything except running statistics).
    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| !n.ends_with(".running_mean") && !n.ends_with(".running_var"))
            .cloned()
            .collect()
    }

    /// Applies an in-place update to every trainable tensor, in name order.
    pub(crate) fn update_trainable(
        &mut self,
        mut f: impl FnMut(&str, &mut Tensor<T>) -> Result<()>,
    ) -> Result<()> {
        for (name, tensor) in self.tensors.iter_mut() {
            if name.ends_with(".running_mean") || name.ends_with(".running_var") {
                continue;
            }
            f(name, tensor)?;
        }
        self.revision += 1;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            identity: NEXT_PARAMS_ID.fetch_add(1, Ordering::Relaxed),
            revision: 0,
        }
    }

    fn stamp(&self) -> (u64, u64) {
        (self.identity, self.revision)
    }
}

/// He-scaled orthogonal initialization: draw a Gaussian matrix, orthonormalize
/// the shorter side by modified Gram-Schmidt, and rescale so every entry has
/// variance `2 / fan_in`.
fn orthogonal_he(rng: &mut RandomStream, rows: usize, cols: usize) -> Vec<f64> {
    let mut m: Vec<f64> = {
        let t: Tensor<f64> = rng
            .fill(&[rows * cols], Distribution::Normal { mu: 0.0, sigma: 1.0 })
            .expect("normal fill");
        t.into_data()
    };
    let orthonormalize_cols = rows >= cols;
    let (vecs, dim) = if orthonormalize_cols {
        (cols, rows)
    } else {
        (rows, cols)
    };
    let idx = |v: usize, d: usize| {
        if orthonormalize_cols {
            d * cols + v
        } else {
            v * cols + d
        }
    };
    for v in 0..vecs {
        for prev in 0..v {
            let mut dot = 0.0;
            for d in 0..dim {
                dot += m[idx(v, d)] * m[idx(prev, d)];
            }
            for d in 0..dim {
                let sub = dot * m[idx(prev, d)];
                m[idx(v, d)] -= sub;
            }
        }
        let norm = (0..dim)
            .map(|d| m[idx(v, d)] * m[idx(v, d)])
            .sum::<f64>()
            .sqrt();
        if norm > 1e-12 {
            for d in 0..dim {
                m[idx(v, d)] /= norm;
            }
        }
    }
    let scale = if orthonormalize_cols {
        // Unit columns over fan_in entries: variance 1/rows, want 2/rows.
        2.0f64.sqrt()
    } else {
        // Unit rows over cols entries: variance 1/cols, want 2/rows.
        (2.0 * cols as f64 / rows as f64).sqrt()
    };
    for x in m.iter_mut() {
        *x *= scale;
    }
    m
}

/// Builds a fresh parameter set. Deterministic: the stream is consumed in
/// declaration order, weights get the orthogonal He init, biases are zero,
/// batch-norm scale/offset start at 1/0 and running stats at 0/1.
pub fn build<T: Scalar>(config: &ModelConfig, rng: &mut RandomStream) -> Result<Parameters<T>> {
    config.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.tensor_specs() {
        let tensor: Tensor<T> = if name.ends_with(".weight") {
            let (cin, cout) = (shape[2], shape[3]);
            let data = orthogonal_he(rng, 9 * cin, cout);
            Tensor::new(&shape, data.into_iter().map(T::from_f64).collect())?
        } else if name.ends_with(".bn.scale") || name.ends_with(".running_var") {
            Tensor::full(&shape, T::one())
        } else {
            // biases, bn offsets, running means
            Tensor::zeros(&shape)
        };
        tensors.insert(name, tensor);
    }
    Parameters::from_tensors(config.clone(), tensors)
}

struct ConvTrace<T: Scalar> {
    input: Tensor<T>,
    /// Post-ReLU output, stored only when the conv is followed by a ReLU.
    output: Option<Tensor<T>>,
}

struct BlockTrace<T: Scalar> {
    convs: Vec<ConvTrace<T>>,
    bn: Option<BatchNormCache<T>>,
}

struct StageTrace<T: Scalar> {
    up: ConvTrace<T>,
    up_in_hw: (usize, usize),
    res: BlockTrace<T>,
}

struct HeadTrace<T: Scalar> {
    up_in_hw: (usize, usize),
    convs: Vec<ConvTrace<T>>,
}

/// Per-layer activations saved by a train-mode forward; consumed by
/// [`backward`]/[`backward_direct`].
pub struct ActivationCache<T: Scalar> {
    stamp: (u64, u64),
    enc: Vec<BlockTrace<T>>,
    bottleneck: BlockTrace<T>,
    dec: Vec<StageTrace<T>>,
    heads: Vec<HeadTrace<T>>,
    /// Deferred running-statistics updates: `(prefix, new_mean, new_var)`.
    bn_updates: Vec<(String, Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> ActivationCache<T> {
    /// The batch-norm running-statistics updates this forward produced;
    /// empty for the kernel-prediction variant.
    pub fn bn_running_updates(&self) -> Vec<(String, Tensor<T>, Tensor<T>)> {
        self.bn_updates.clone()
    }
}

fn concat_channels<T: Scalar>(i1: &Tensor<T>, i2: &Tensor<T>) -> Result<Tensor<T>> {
    if i1.shape() != i2.shape() {
        return parameter(format!(
            "frames differ in shape: {:?} vs {:?}",
            i1.shape(),
            i2.shape()
        ));
    }
    let s = i1.shape();
    if s.len() != 3 || s[2] != 3 {
        return parameter(format!("frames must be (H, W, 3), got {s:?}"));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[h, w, 2 * c]);
    {
        let d = out.data_mut();
        let a = i1.data();
        let b = i2.data();
        for p in 0..h * w {
            d[p * 2 * c..p * 2 * c + c].copy_from_slice(&a[p * c..(p + 1) * c]);
            d[p * 2 * c + c..(p + 1) * 2 * c].copy_from_slice(&b[p * c..(p + 1) * c]);
        }
    }
    Ok(out)
}

struct Runner<'p, T: Scalar> {
    params: &'p Parameters<T>,
    mode: Mode,
}

impl<'p, T: Scalar> Runner<'p, T> {
    /// conv + optional ReLU, recording a trace in train mode.
    fn conv(
        &self,
        name: &str,
        x: Tensor<T>,
        relu: bool,
        trace: &mut Option<&mut Vec<ConvTrace<T>>>,
    ) -> Result<Tensor<T>> {
        let w = self.params.get(&format!("{name}.weight"))?;
        let b = self.params.get(&format!("{name}.bias"))?;
        let raw = conv3x3_forward(&x, w, b)?;
        let out = if relu { relu_forward(&raw) } else { raw };
        if let Some(traces) = trace.as_deref_mut() {
            traces.push(ConvTrace {
                input: x,
                output: relu.then(|| out.clone()),
            });
        }
        Ok(out)
    }

    #[allow(clippy::type_complexity)]
    fn conv_block(
        &self,
        prefix: &str,
        conv_name: &str,
        count: usize,
        mut x: Tensor<T>,
        trace: bool,
    ) -> Result<(
        Tensor<T>,
        Option<BlockTrace<T>>,
        Option<(String, Tensor<T>, Tensor<T>)>,
    )> {
        let mut convs = Vec::new();
        for k in 0..count {
            let mut slot = trace.then_some(&mut convs);
            x = self.conv(&format!("{prefix}.{conv_name}{k}"), x, true, &mut slot)?;
        }
        let mut bn_cache = None;
        let mut bn_update = None;
        if self.params.config.uses_batch_norm() {
            let scale = self.params.get(&format!("{prefix}.bn.scale"))?;
            let offset = self.params.get(&format!("{prefix}.bn.offset"))?;
            let rm = self.params.get(&format!("{prefix}.bn.running_mean"))?;
            let rv = self.params.get(&format!("{prefix}.bn.running_var"))?;
            let (out, cache) = batch_norm_forward(&x, scale, offset, rm, rv, self.mode)?;
            x = out;
            if let Some(cache) = cache {
                let (nm, nv) = batch_norm_updated_running(rm, rv, &cache);
                bn_update = Some((prefix.to_string(), nm, nv));
                bn_cache = Some(cache);
            }
        }
        let block = trace.then_some(BlockTrace { convs, bn: bn_cache });
        Ok((x, block, bn_update))
    }

    fn block_backward(
        &self,
        prefix: &str,
        conv_name: &str,
        trace: &BlockTrace<T>,
        mut g: Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        if let Some(bn) = &trace.bn {
            let scale = self.params.get(&format!("{prefix}.bn.scale"))?;
            let (gi, gs, go) = batch_norm_backward(bn, scale, &g)?;
            accumulate(grads, format!("{prefix}.bn.scale"), gs)?;
            accumulate(grads, format!("{prefix}.bn.offset"), go)?;
            g = gi;
        }
        for (k, conv) in trace.convs.iter().enumerate().rev() {
            g = self.conv_backward(&format!("{prefix}.{conv_name}{k}"), conv, g, grads)?;
        }
        Ok(g)
    }

    fn conv_backward(
        &self,
        name: &str,
        trace: &ConvTrace<T>,
        mut g: Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        if let Some(out) = &trace.output {
            g = relu_backward(out, &g)?;
        }
        let w = self.params.get(&format!("{name}.weight"))?;
        let (gi, gw, gb) = conv3x3_backward(&trace.input, w, &g)?;
        accumulate(grads, format!("{name}.weight"), gw)?;
        accumulate(grads, format!("{name}.bias"), gb)?;
        Ok(gi)
    }
}

fn accumulate<T: Scalar>(grads: &mut Gradients<T>, name: String, g: Tensor<T>) -> Result<()> {
    match grads.entry(name) {
        std::collections::btree_map::Entry::Vacant(slot) => {
            slot.insert(g);
        }
        std::collections::btree_map::Entry::Occupied(mut slot) => {
            slot.get_mut().add_scaled(&g, T::one())?;
        }
    }
    Ok(())
}

fn forward_impl<T: Scalar>(
    params: &Parameters<T>,
    i1: &Tensor<T>,
    i2: &Tensor<T>,
    mode: Mode,
) -> Result<(Vec<Tensor<T>>, Option<ActivationCache<T>>)> {
    let config = &params.config;
    config.validate()?;
    let x = concat_channels(i1, i2)?;
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let factor = config.pool_factor();
    if h % factor != 0 || w % factor != 0 {
        return parameter(format!("input {h}x{w} not divisible by 2^levels = {factor}"));
    }
    let trace = mode == Mode::Train;
    let runner = Runner { params, mode };

    let mut bn_updates = Vec::new();
    let mut enc_traces = Vec::new();
    let mut skips: Vec<Tensor<T>> = Vec::new();
    let mut cur = x;
    for l in 1..=config.levels {
        let (e, block, bn) =
            runner.conv_block(&format!("enc{l}"), "conv", config.convs_per_block, cur, trace)?;
        if let Some(block) = block {
            enc_traces.push(block);
        }
        if let Some(update) = bn {
            bn_updates.push(update);
        }
        cur = avg_pool2_forward(&e)?;
        skips.push(e);
    }
    let (mut d, bottleneck_trace, bn) =
        runner.conv_block("bottleneck", "conv", config.convs_per_block, cur, trace)?;
    if let Some(update) = bn {
        bn_updates.push(update);
    }

    let mut dec_traces = Vec::new();
    for l in (2..=config.levels).rev() {
        let up_in_hw = (d.shape()[0], d.shape()[1]);
        let mut up_trace_vec = Vec::new();
        let mut slot = trace.then_some(&mut up_trace_vec);
        let t = runner.conv(&format!("dec{l}.up"), d, true, &mut slot)?;
        let u = upsample_bilinear_x2_forward(&t)?;
        let s = u.zip_map(&skips[l - 1], |a, b| a + b)?;
        let (r, res_trace, bn) = runner.conv_block(
            &format!("dec{l}"),
            "res",
            config.convs_per_block,
            s.clone(),
            trace,
        )?;
        if let Some(update) = bn {
            bn_updates.push(update);
        }
        d = s.zip_map(&r, |a, b| a + b)?;
        if trace {
            dec_traces.push(StageTrace {
                up: up_trace_vec.pop().expect("up trace"),
                up_in_hw,
                res: res_trace.expect("res trace"),
            });
        }
    }

    let head_in = d;
    let mut outputs = Vec::new();
    let mut head_traces = Vec::new();
    for head in config.head_names() {
        let up_in_hw = (head_in.shape()[0], head_in.shape()[1]);
        let u = upsample_bilinear_x2_forward(&head_in)?;
        let mut convs = Vec::new();
        let mut slot = trace.then_some(&mut convs);
        let a = runner.conv(&format!("{head}.conv0"), u, true, &mut slot)?;
        let mut slot = trace.then_some(&mut convs);
        let b = runner.conv(&format!("{head}.conv1"), a, true, &mut slot)?;
        let mut slot = trace.then_some(&mut convs);
        let o = runner.conv(&format!("{head}.out"), b, false, &mut slot)?;
        outputs.push(o);
        if trace {
            head_traces.push(HeadTrace { up_in_hw, convs });
        }
    }

    let cache = trace.then(|| ActivationCache {
        stamp: params.stamp(),
        enc: enc_traces,
        bottleneck: bottleneck_trace.expect("bottleneck trace"),
        dec: dec_traces,
        heads: head_traces,
        bn_updates,
    });
    Ok((outputs, cache))
}

fn backward_impl<T: Scalar>(
    params: &Parameters<T>,
    cache: &ActivationCache<T>,
    head_grads: Vec<Tensor<T>>,
) -> Result<Gradients<T>> {
    if cache.stamp != params.stamp() {
        return Err(Error::State(
            "activation cache is stale: parameters changed since forward".into(),
        ));
    }
    let config = &params.config;
    let runner = Runner {
        params,
        mode: Mode::Train,
    };
    let mut grads: Gradients<T> = BTreeMap::new();

    // Heads, accumulating into the shared trunk tensor.
    let mut trunk_grad: Option<Tensor<T>> = None;
    for ((head, trace), g) in config
        .head_names()
        .iter()
        .zip(&cache.heads)
        .zip(head_grads)
    {
        let mut g = runner.conv_backward(&format!("{head}.out"), &trace.convs[2], g, &mut grads)?;
        g = runner.conv_backward(&format!("{head}.conv1"), &trace.convs[1], g, &mut grads)?;
        g = runner.conv_backward(&format!("{head}.conv0"), &trace.convs[0], g, &mut grads)?;
        let gu = upsample_bilinear_x2_backward(&g, trace.up_in_hw.0, trace.up_in_hw.1)?;
        match &mut trunk_grad {
            None => trunk_grad = Some(gu),
            Some(t) => t.add_scaled(&gu, T::one())?,
        }
    }
    let mut g = trunk_grad.ok_or_else(|| Error::State("model has no heads".into()))?;

    // Decoder stages in reverse execution order.
    let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; config.levels + 1];
    let dec_levels: Vec<usize> = (2..=config.levels).rev().collect();
    for (trace, &l) in cache.dec.iter().zip(&dec_levels).rev() {
        // d = s + res(s): both paths carry the gradient.
        let res_g =
            runner.block_backward(&format!("dec{l}"), "res", &trace.res, g.clone(), &mut grads)?;
        g.add_scaled(&res_g, T::one())?;
        skip_grads[l] = Some(g.clone());
        let gu = upsample_bilinear_x2_backward(&g, trace.up_in_hw.0, trace.up_in_hw.1)?;
        g = runner.conv_backward(&format!("dec{l}.up"), &trace.up, gu, &mut grads)?;
    }

    g = runner.block_backward("bottleneck", "conv", &cache.bottleneck, g, &mut grads)?;

    for l in (1..=config.levels).rev() {
        let mut ge = avg_pool2_backward(&g)?;
        if let Some(skip) = skip_grads[l].take() {
            ge.add_scaled(&skip, T::one())?;
        }
        g = runner.block_backward(&format!("enc{l}"), "conv", &cache.enc[l - 1], ge, &mut grads)?;
    }
    // g is now the gradient for the concatenated input frames; frames are
    // data leaves, so it is dropped.

    Ok(grads)
}

/// Predicts the four 1D kernel tensors for a frame pair.
///
/// Train mode also returns the activation cache needed by [`backward`].
pub fn forward<T: Scalar>(
    params: &Parameters<T>,
    i1: &Tensor<T>,
    i2: &Tensor<T>,
    mode: Mode,
) -> Result<(KernelField<T>, Option<ActivationCache<T>>)> {
    if params.config.variant != Variant::KernelPrediction {
        return parameter("forward requires the kernel_prediction variant");
    }
    let (mut outputs, cache) = forward_impl(params, i1, i2, mode)?;
    let k2h = outputs.pop().expect("four heads");
    let k2v = outputs.pop().expect("four heads");
    let k1h = outputs.pop().expect("four heads");
    let k1v = outputs.pop().expect("four heads");
    Ok((KernelField::new(k1v, k1h, k2v, k2h)?, cache))
}

/// Gradients for every parameter given kernel-field gradients.
pub fn backward<T: Scalar>(
    params: &Parameters<T>,
    cache: &ActivationCache<T>,
    kernel_grads: KernelField<T>,
) -> Result<Gradients<T>> {
    if params.config.variant != Variant::KernelPrediction {
        return parameter("backward requires the kernel_prediction variant");
    }
    backward_impl(
        params,
        cache,
        vec![
            kernel_grads.k1v,
            kernel_grads.k1h,
            kernel_grads.k2v,
            kernel_grads.k2h,
        ],
    )
}

/// Direct-synthesis forward: emits the interpolated frame itself.
pub fn forward_direct<T: Scalar>(
    params: &Parameters<T>,
    i1: &Tensor<T>,
    i2: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<ActivationCache<T>>)> {
    if params.config.variant != Variant::DirectSynthesis {
        return parameter("forward_direct requires the direct_synthesis variant");
    }
    let (mut outputs, cache) = forward_impl(params, i1, i2, mode)?;
    Ok((outputs.pop().expect("one head"), cache))
}

pub fn backward_direct<T: Scalar>(
    params: &Parameters<T>,
    cache: &ActivationCache<T>,
    grad_out: Tensor<T>,
) -> Result<Gradients<T>> {
    if params.config.variant != Variant::DirectSynthesis {
        return parameter("backward_direct requires the direct_synthesis variant");
    }
    backward_impl(params, cache, vec![grad_out])
}

/// Folds the cache's batch-norm statistics into the running statistics.
/// No-op for the kernel-prediction variant.
pub fn apply_bn_updates<T: Scalar>(
    params: &mut Parameters<T>,
    cache: &ActivationCache<T>,
) -> Result<()> {
    for (prefix, mean, var) in &cache.bn_updates {
        params.set(&format!("{prefix}.bn.running_mean"), mean.clone())?;
        params.set(&format!("{prefix}.bn.running_var"), var.clone())?;
    }
    Ok(())
}

pub use layers::Mode as ForwardMode;

/// Rough bytes of live activations for one forward pass at `h x w`,
/// assuming 4-byte elements: the 6-channel input, every skip feature map,
/// the bottleneck, and the head outputs.
pub fn activation_footprint(config: &ModelConfig, h: u64, w: u64) -> u64 {
    let widths = config.effective_widths();
    let mut cells: u64 = 6 * h * w;
    let mut scale = 1u64;
    for &wl in &widths {
        cells += (wl as u64) * h * w / (scale * scale);
        scale *= 2;
    }
    cells += (*widths.last().unwrap() as u64) * h * w / (scale * scale);
    let head_out = match config.variant {
        Variant::KernelPrediction => 4 * config.kernel_size as u64,
        Variant::DirectSynthesis => 3,
    };
    cells += head_out * h * w;
    cells * 4
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            levels: 2,
            widths: vec![2, 3],
            convs_per_block: 1,
            kernel_size: 3,
            variant: Variant::KernelPrediction,
            width_scale: 1,
        }
    }

    fn frames(seed: u64, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = RandomStream::new(seed);
        let d = Distribution::Uniform { a: 0.0, b: 1.0 };
        (
            rng.fill(&[h, w, 3], d).unwrap(),
            rng.fill(&[h, w, 3], d).unwrap(),
        )
    }

    #[test]
    fn build_is_deterministic() {
        let config = tiny_config();
        let a: Parameters<f64> = build(&config, &mut RandomStream::new(7)).unwrap();
        let b: Parameters<f64> = build(&config, &mut RandomStream::new(7)).unwrap();
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn biases_start_at_zero() {
        let params: Parameters<f64> = build(&tiny_config(), &mut RandomStream::new(1)).unwrap();
        for (name, t) in params.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        // Layers with >= 512 weights match Var = 2/fan_in within 20%.
        let config = ModelConfig {
            levels: 2,
            widths: vec![16, 32],
            convs_per_block: 2,
            kernel_size: 5,
            variant: Variant::KernelPrediction,
            width_scale: 1,
        };
        let params: Parameters<f64> = build(&config, &mut RandomStream::new(3)).unwrap();
        for (name, t) in params.iter() {
            if !name.ends_with(".weight") || t.len() < 512 {
                continue;
            }
            let fan_in = (t.shape()[0] * t.shape()[1] * t.shape()[2]) as f64;
            let mean: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
            let var: f64 =
                t.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / t.len() as f64;
            let target = 2.0 / fan_in;
            assert!(
                (var - target).abs() <= 0.2 * target,
                "{name}: var {var:.3e}, target {target:.3e}"
            );
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let config = tiny_config();
        let params: Parameters<f64> = build(&config, &mut RandomStream::new(5)).unwrap();
        let (i1, i2) = frames(11, 8, 12);
        let (kf, cache) = forward(&params, &i1, &i2, Mode::Infer).unwrap();
        assert!(cache.is_none());
        assert_eq!(kf.k1v.shape(), &[8, 12, 3]);
        let (kf2, _) = forward(&params, &i1, &i2, Mode::Infer).unwrap();
        assert_eq!(kf.k1v.data(), kf2.k1v.data());
        assert_eq!(kf.k2h.data(), kf2.k2h.data());
    }

    #[test]
    fn indivisible_extent_rejected() {
        let config = tiny_config();
        let params: Parameters<f64> = build(&config, &mut RandomStream::new(5)).unwrap();
        let (i1, i2) = frames(1, 6, 8);
        assert!(forward(&params, &i1, &i2, Mode::Infer).is_err());
    }

    #[test]
    fn variant_mismatch_rejected() {
        let params: Parameters<f64> = build(&tiny_config(), &mut RandomStream::new(5)).unwrap();
        let (i1, i2) = frames(2, 8, 8);
        assert!(forward_direct(&params, &i1, &i2, Mode::Infer).is_err());
    }

    #[test]
    fn stale_cache_rejected() {
        let config = tiny_config();
        let mut params: Parameters<f64> = build(&config, &mut RandomStream::new(5)).unwrap();
        let (i1, i2) = frames(3, 8, 8);
        let (_kf, cache) = forward(&params, &i1, &i2, Mode::Train).unwrap();
        let zero_grads = KernelField::zeros(8, 8, 3).unwrap();
        // Mutate one tensor; the cache must now be rejected.
        let name = params.trainable_names()[0].clone();
        let t = params.get(&name).unwrap().clone();
        params.set(&name, t).unwrap();
        let err = backward(&params, &cache.unwrap(), zero_grads);
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_grads_give_zero_param_grads() {
        let config = tiny_config();
        let params: Parameters<f64> = build(&config, &mut RandomStream::new(6)).unwrap();
        let (i1, i2) = frames(4, 8, 8);
        let (_, cache) = forward(&params, &i1, &i2, Mode::Train).unwrap();
        let grads =
            backward(&params, &cache.unwrap(), KernelField::zeros(8, 8, 3).unwrap()).unwrap();
        for (name, g) in &grads {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn residual_stage_passes_skip_sum_through_when_zeroed() {
        // With the dec2 residual stack zeroed, the tensor feeding the heads
        // is exactly upsample(conv_up(bottleneck)) + skip.
        let config = ModelConfig {
            levels: 2,
            widths: vec![2, 2],
            convs_per_block: 1,
            kernel_size: 3,
            variant: Variant::KernelPrediction,
            width_scale: 1,
        };
        let mut params: Parameters<f64> = build(&config, &mut RandomStream::new(8)).unwrap();
        params
            .set("dec2.res0.weight", Tensor::zeros(&[3, 3, 2, 2]))
            .unwrap();
        params.set("dec2.res0.bias", Tensor::zeros(&[2])).unwrap();
        let (i1, i2) = frames(5, 8, 8);

        let (kf_full, _) = forward(&params, &i1, &i2, Mode::Infer).unwrap();

        // Recompute the trunk by hand with the residual stack removed.
        let runner = Runner {
            params: &params,
            mode: Mode::Infer,
        };
        let x = concat_channels(&i1, &i2).unwrap();
        let (e1, _, _) = runner.conv_block("enc1", "conv", 1, x, false).unwrap();
        let p1 = avg_pool2_forward(&e1).unwrap();
        let (e2, _, _) = runner.conv_block("enc2", "conv", 1, p1, false).unwrap();
        let p2 = avg_pool2_forward(&e2).unwrap();
        let (b, _, _) = runner.conv_block("bottleneck", "conv", 1, p2, false).unwrap();
        let mut none = None;
        let t = runner.conv("dec2.up", b, true, &mut none).unwrap();
        let u = upsample_bilinear_x2_forward(&t).unwrap();
        let s = u.zip_map(&e2, |a, b| a + b).unwrap();
        let uu = upsample_bilinear_x2_forward(&s).unwrap();
        let a = runner.conv("head_k1v.conv0", uu, true, &mut none).unwrap();
        let a = runner.conv("head_k1v.conv1", a, true, &mut none).unwrap();
        let o = runner.conv("head_k1v.out", a, false, &mut none).unwrap();
        for (x, y) in o.data().iter().zip(kf_full.k1v.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn direct_variant_output_shape_and_bn_updates() {
        let config = ModelConfig {
            levels: 2,
            widths: vec![2, 3],
            convs_per_block: 1,
            kernel_size: 3,
            variant: Variant::DirectSynthesis,
            width_scale: 1,
        };
        let params: Parameters<f64> = build(&config, &mut RandomStream::new(9)).unwrap();
        let (i1, i2) = frames(6, 8, 8);
        let (out, cache) = forward_direct(&params, &i1, &i2, Mode::Train).unwrap();
        assert_eq!(out.shape(), i1.shape());
        let cache = cache.unwrap();
        assert!(!cache.bn_updates.is_empty());
        let mut params = params;
        let rv_before = params.get("enc1.bn.running_var").unwrap().clone();
        apply_bn_updates(&mut params, &cache).unwrap();
        let rv_after = params.get("enc1.bn.running_var").unwrap();
        assert_ne!(rv_before.data(), rv_after.data());
    }

    #[test]
    fn head_shape_follows_config() {
        // 64/2^5 = 2 bottleneck; heads (64, 64, 15).
        let config = ModelConfig {
            levels: 5,
            widths: vec![32, 64, 128, 256, 512],
            convs_per_block: 1,
            kernel_size: 15,
            variant: Variant::KernelPrediction,
            width_scale: 8,
        };
        let params: Parameters<f32> = build(&config, &mut RandomStream::new(10)).unwrap();
        let mut rng = RandomStream::new(11);
        let d = Distribution::Uniform { a: 0.0, b: 1.0 };
        let i1: Tensor<f32> = rng.fill(&[64, 64, 3], d).unwrap();
        let i2: Tensor<f32> = rng.fill(&[64, 64, 3], d).unwrap();
        let (kf, _) = forward(&params, &i1, &i2, Mode::Infer).unwrap();
        assert_eq!(kf.k1v.shape(), &[64, 64, 15]);
        assert_eq!(kf.k2h.shape(), &[64, 64, 15]);
    }
}
