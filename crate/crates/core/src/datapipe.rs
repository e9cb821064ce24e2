//! Dataset construction from frame sequences: triplet extraction with
//! shot-boundary and texture filters, block-matching mean-flow estimation,
//! flow-weighted sampling without replacement, and on-the-fly augmentation.

use rayon::prelude::*;

use crate::error::{parameter, Result};
use crate::rng::RandomStream;
use crate::tensor::{Scalar, Tensor};

/// Three consecutive patches; the middle one is the ground truth.
#[derive(Debug, Clone)]
pub struct TripletSample<T: Scalar = f32> {
    pub first: Tensor<T>,
    pub middle: Tensor<T>,
    pub last: Tensor<T>,
    /// Mean optical-flow magnitude between `first` and `last`, in pixels.
    pub mean_flow: f32,
    pub source_id: String,
    /// Index of the window's first frame in the source sequence.
    pub frame_index: usize,
}

/// Record of the transform applied by [`augment`]; replaying it through
/// [`apply_transform`] reproduces the same output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformLog {
    pub crop_y: usize,
    pub crop_x: usize,
    /// First-frame window shift `(dy, dx)`; the last frame shifts by the
    /// negation.
    pub shift: (i32, i32),
    pub hflip: bool,
    pub vflip: bool,
    pub swap: bool,
}

impl TransformLog {
    pub fn identity() -> Self {
        Self {
            crop_y: 0,
            crop_x: 0,
            shift: (0, 0),
            hflip: false,
            vflip: false,
            swap: false,
        }
    }
}

/// Augmented training inputs: shifted first/last windows and the unshifted
/// ground-truth window.
#[derive(Debug, Clone)]
pub struct AugmentedPair<T: Scalar = f32> {
    pub first: Tensor<T>,
    pub truth: Tensor<T>,
    pub last: Tensor<T>,
    pub log: TransformLog,
}

/// Block-matching estimator settings.
#[derive(Debug, Clone)]
pub struct BlockMatchSettings {
    /// Side of the square blocks, in pixels.
    pub block: usize,
    /// Exhaustive search radius in pixels.
    pub radius: usize,
    /// Blocks with mean gradient magnitude below this are excluded.
    pub texture_threshold: f64,
}

impl Default for BlockMatchSettings {
    fn default() -> Self {
        Self {
            block: 8,
            radius: 24,
            texture_threshold: 0.02,
        }
    }
}

/// Triplet-extraction settings.
#[derive(Debug, Clone)]
pub struct ExtractSettings {
    /// Square patch side cropped from each frame.
    pub patch: usize,
    /// Temporal advance between windows (diversity control).
    pub stride: usize,
    /// Mean absolute grayscale difference above this marks a shot boundary.
    pub shot_threshold: f64,
    /// Patches with mean gradient magnitude below this are rejected.
    pub texture_threshold: f64,
    pub flow: BlockMatchSettings,
}

impl Default for ExtractSettings {
    fn default() -> Self {
        Self {
            patch: 150,
            stride: 25,
            shot_threshold: 0.25,
            texture_threshold: 0.02,
            flow: BlockMatchSettings::default(),
        }
    }
}

/// Extraction tallies for reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtractStats {
    pub windows: usize,
    pub shot_rejected: usize,
    pub texture_rejected: usize,
}

/// Additive weight floor so zero-flow samples keep a nonzero selection
/// probability.
pub const FLOW_WEIGHT_FLOOR: f64 = 0.05;

/// Rec. 601 luma plane of an `(H, W, 3)` image, as `f64`.
pub fn luma_plane<T: Scalar>(img: &Tensor<T>) -> Result<Vec<f64>> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return parameter(format!("expected an (H, W, 3) image, got {s:?}"));
    }
    Ok(img
        .data()
        .chunks_exact(3)
        .map(|px| 0.299 * px[0].as_f64() + 0.587 * px[1].as_f64() + 0.114 * px[2].as_f64())
        .collect())
}

/// Mean central-difference gradient magnitude of a luma plane.
fn mean_gradient_magnitude(luma: &[f64], h: usize, w: usize) -> f64 {
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut total = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (luma[y * w + x + 1] - luma[y * w + x - 1]) * 0.5;
            let gy = (luma[(y + 1) * w + x] - luma[(y - 1) * w + x]) * 0.5;
            total += (gx * gx + gy * gy).sqrt();
        }
    }
    total / ((h - 2) * (w - 2)) as f64
}

fn mean_abs_difference(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    sum / a.len() as f64
}

/// Rectangular crop of an `(H, W, C)` tensor.
pub fn crop_image<T: Scalar>(
    img: &Tensor<T>,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 {
        return parameter(format!("expected an (H, W, C) tensor, got {s:?}"));
    }
    let c = s[2];
    if y0 + h > s[0] || x0 + w > s[1] {
        return parameter(format!(
            "crop {y0},{x0} {h}x{w} exceeds image {}x{}",
            s[0], s[1]
        ));
    }
    let src = img.data();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let row = ((y0 + y) * s[1] + x0) * c;
        data.extend_from_slice(&src[row..row + w * c]);
    }
    Tensor::new(&[h, w, c], data)
}

fn flip_horizontal<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut data = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let px = (y * w + x) * c;
            data.extend_from_slice(&src[px..px + c]);
        }
    }
    Tensor::new(&[h, w, c], data).expect("flip volume")
}

fn flip_vertical<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut data = Vec::with_capacity(src.len());
    for y in (0..h).rev() {
        data.extend_from_slice(&src[y * w * c..(y + 1) * w * c]);
    }
    Tensor::new(&[h, w, c], data).expect("flip volume")
}

/// Slides a 3-frame window over the sequence, crops one random patch per
/// window, and keeps candidates that pass the shot-boundary and texture
/// tests, annotated with their block-matching mean flow.
pub fn extract_triplets(
    frames: &[Tensor<f32>],
    source_id: &str,
    settings: &ExtractSettings,
    rng: &mut RandomStream,
) -> Result<(Vec<TripletSample>, ExtractStats)> {
    if frames.len() < 3 {
        return parameter(format!("need at least 3 frames, got {}", frames.len()));
    }
    if settings.stride == 0 {
        return parameter("stride must be positive");
    }
    let shape = frames[0].shape().to_vec();
    if frames.iter().any(|f| f.shape() != shape.as_slice()) {
        return parameter("all frames must share one shape");
    }
    let (h, w) = (shape[0], shape[1]);
    let p = settings.patch;
    if h < p || w < p {
        return parameter(format!(
            "frames are {h}x{w}, smaller than the {p}x{p} patch"
        ));
    }

    let mut samples = Vec::new();
    let mut stats = ExtractStats::default();
    let mut start = 0;
    while start + 2 < frames.len() {
        stats.windows += 1;
        let oy = rng.below(h - p + 1);
        let ox = rng.below(w - p + 1);
        let first = crop_image(&frames[start], oy, ox, p, p)?;
        let middle = crop_image(&frames[start + 1], oy, ox, p, p)?;
        let last = crop_image(&frames[start + 2], oy, ox, p, p)?;

        let lf = luma_plane(&first)?;
        let lm = luma_plane(&middle)?;
        let ll = luma_plane(&last)?;
        if mean_abs_difference(&lf, &lm) > settings.shot_threshold
            || mean_abs_difference(&lm, &ll) > settings.shot_threshold
        {
            stats.shot_rejected += 1;
            start += settings.stride;
            continue;
        }
        if mean_gradient_magnitude(&lf, p, p) < settings.texture_threshold
            || mean_gradient_magnitude(&ll, p, p) < settings.texture_threshold
        {
            stats.texture_rejected += 1;
            start += settings.stride;
            continue;
        }
        let mean_flow = mean_flow_block_match(&first, &last, &settings.flow)?;
        samples.push(TripletSample {
            first,
            middle,
            last,
            mean_flow,
            source_id: source_id.to_string(),
            frame_index: start,
        });
        start += settings.stride;
    }
    Ok((samples, stats))
}

/// Mean displacement magnitude between two equally sized patches, from
/// exhaustive SAD matching of non-overlapping blocks.
///
/// Only blocks whose full search neighborhood fits inside the patch
/// participate, so integer translations within the radius are recovered
/// exactly; flat blocks are excluded by the texture threshold. Returns 0 when
/// no block qualifies.
pub fn mean_flow_block_match(
    first: &Tensor<f32>,
    last: &Tensor<f32>,
    settings: &BlockMatchSettings,
) -> Result<f32> {
    if first.shape() != last.shape() {
        return parameter(format!(
            "patch shapes differ: {:?} vs {:?}",
            first.shape(),
            last.shape()
        ));
    }
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let a = luma_plane(first)?;
    let b = luma_plane(last)?;
    let (bs, r) = (settings.block, settings.radius);
    if h < bs + 2 * r || w < bs + 2 * r {
        return Ok(0.0);
    }

    let positions: Vec<(usize, usize)> = (r..=h - bs - r)
        .step_by(bs)
        .flat_map(|by| (r..=w - bs - r).step_by(bs).map(move |bx| (by, bx)))
        .collect();

    let displacements: Vec<Option<f64>> = positions
        .par_iter()
        .map(|&(by, bx)| {
            // Texture gate on the reference block.
            let mut grad = 0.0;
            let mut count = 0usize;
            for y in by.max(1)..(by + bs).min(h - 1) {
                for x in bx.max(1)..(bx + bs).min(w - 1) {
                    let gx = (a[y * w + x + 1] - a[y * w + x - 1]) * 0.5;
                    let gy = (a[(y + 1) * w + x] - a[(y - 1) * w + x]) * 0.5;
                    grad += (gx * gx + gy * gy).sqrt();
                    count += 1;
                }
            }
            if count == 0 || grad / (count as f64) < settings.texture_threshold {
                return None;
            }
            let sad = |dy: i64, dx: i64| -> f64 {
                let ty = (by as i64 + dy) as usize;
                let tx = (bx as i64 + dx) as usize;
                let mut s = 0.0;
                for y in 0..bs {
                    let ra = &a[(by + y) * w + bx..(by + y) * w + bx + bs];
                    let rb = &b[(ty + y) * w + tx..(ty + y) * w + tx + bs];
                    for (va, vb) in ra.iter().zip(rb) {
                        s += (va - vb).abs();
                    }
                }
                s
            };
            // Zero displacement first so ties keep it.
            let mut best = sad(0, 0);
            let mut best_d = (0i64, 0i64);
            let ri = r as i64;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let s = sad(dy, dx);
                    if s < best {
                        best = s;
                        best_d = (dy, dx);
                    }
                }
            }
            Some(((best_d.0 * best_d.0 + best_d.1 * best_d.1) as f64).sqrt())
        })
        .collect();

    let qualified: Vec<f64> = displacements.into_iter().flatten().collect();
    if qualified.is_empty() {
        return Ok(0.0);
    }
    Ok((qualified.iter().sum::<f64>() / qualified.len() as f64) as f32)
}

/// Weighted sampling without replacement (Efraimidis-Spirakis keys), weight
/// `mean_flow + 0.05`. Returns the selected candidate indices in ascending
/// order.
pub fn weighted_select<T: Scalar>(
    candidates: &[TripletSample<T>],
    target_count: usize,
    rng: &mut RandomStream,
) -> Result<Vec<usize>> {
    if target_count > candidates.len() {
        return parameter(format!(
            "cannot select {target_count} of {} candidates",
            candidates.len()
        ));
    }
    let mut keyed: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let weight = c.mean_flow as f64 + FLOW_WEIGHT_FLOOR;
            let u = rng.next_f64();
            // ln(1-u) <= 0; dividing by a larger weight moves the key toward
            // zero, i.e. earlier in descending order.
            ((1.0 - u).ln() / weight, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut selected: Vec<usize> = keyed[..target_count].iter().map(|&(_, i)| i).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Order statistics over per-sample mean flows (nearest-rank percentiles).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowStats {
    pub p90: f32,
    pub p95: f32,
    pub max: f32,
}

pub fn flow_percentiles(flows: &[f32]) -> Result<FlowStats> {
    if flows.is_empty() {
        return parameter("flow percentiles over an empty manifest");
    }
    let mut sorted = flows.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = |p: f64| {
        let r = (p * sorted.len() as f64 / 100.0).ceil() as usize;
        sorted[r.max(1) - 1]
    };
    Ok(FlowStats {
        p90: rank(90.0),
        p95: rank(95.0),
        max: *sorted.last().unwrap(),
    })
}

/// Replays a recorded transform. Window placement: the first frame's window
/// sits at `origin + shift`, the last frame's at `origin - shift`, the truth
/// window at `origin`; flips and the temporal swap are applied afterwards to
/// all three patches consistently.
pub fn apply_transform<T: Scalar>(
    sample: &TripletSample<T>,
    crop: usize,
    log: &TransformLog,
) -> Result<AugmentedPair<T>> {
    let (sy, sx) = log.shift;
    let place = |base: usize, delta: i32| -> Result<usize> {
        let v = base as i64 + delta as i64;
        if v < 0 {
            return parameter(format!("window origin {v} out of bounds"));
        }
        Ok(v as usize)
    };
    let first = crop_image(
        &sample.first,
        place(log.crop_y, sy)?,
        place(log.crop_x, sx)?,
        crop,
        crop,
    )?;
    let truth = crop_image(&sample.middle, log.crop_y, log.crop_x, crop, crop)?;
    let last = crop_image(
        &sample.last,
        place(log.crop_y, -sy)?,
        place(log.crop_x, -sx)?,
        crop,
        crop,
    )?;
    let mut patches = [first, truth, last];
    if log.hflip {
        for p in patches.iter_mut() {
            *p = flip_horizontal(p);
        }
    }
    if log.vflip {
        for p in patches.iter_mut() {
            *p = flip_vertical(p);
        }
    }
    let [first, truth, last] = patches;
    let (first, last) = if log.swap { (last, first) } else { (first, last) };
    Ok(AugmentedPair {
        first,
        truth,
        last,
        log: *log,
    })
}

/// Draws a random transform (shift up to `max_shift` per component, random
/// crop origin with shift headroom, random flips and temporal swap) and
/// applies it.
pub fn augment<T: Scalar>(
    sample: &TripletSample<T>,
    crop: usize,
    max_shift: i32,
    rng: &mut RandomStream,
) -> Result<AugmentedPair<T>> {
    let (h, w) = (sample.first.shape()[0], sample.first.shape()[1]);
    if max_shift < 0 {
        return parameter("max_shift must be non-negative");
    }
    let headroom = 2 * max_shift as usize;
    if h < crop + headroom || w < crop + headroom {
        return parameter(format!(
            "patch {h}x{w} too small for a {crop} crop with shift {max_shift}"
        ));
    }
    let sy = rng.int_in(-(max_shift as i64), max_shift as i64) as i32;
    let sx = rng.int_in(-(max_shift as i64), max_shift as i64) as i32;
    // Keep origin +/- shift inside the patch.
    let oy = rng.int_in(sy.abs() as i64, (h - crop) as i64 - sy.abs() as i64) as usize;
    let ox = rng.int_in(sx.abs() as i64, (w - crop) as i64 - sx.abs() as i64) as usize;
    let log = TransformLog {
        crop_y: oy,
        crop_x: ox,
        shift: (sy, sx),
        hflip: rng.flip(),
        vflip: rng.flip(),
        swap: rng.flip(),
    };
    apply_transform(sample, crop, &log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Distribution;
    use crate::synth;

    #[test]
    fn static_constant_sequence_fails_texture() {
        let frames: Vec<Tensor<f32>> =
            (0..5).map(|_| Tensor::full(&[160, 160, 3], 0.5)).collect();
        let mut rng = RandomStream::new(1);
        let settings = ExtractSettings {
            stride: 1,
            ..ExtractSettings::default()
        };
        let (samples, stats) = extract_triplets(&frames, "clip", &settings, &mut rng).unwrap();
        assert_eq!(stats.windows, 3);
        assert_eq!(stats.texture_rejected, 3);
        assert!(samples.is_empty());
    }

    #[test]
    fn cut_windows_are_dropped() {
        let mut rng = RandomStream::new(2);
        let mut frames = synth::translating_clip(7, 6, 160, 160, (1, 0)).unwrap();
        // Insert a hard cut: dim the tail frames to near black.
        for f in frames.iter_mut().skip(3) {
            *f = f.map(|v| v * 0.1);
        }
        let settings = ExtractSettings {
            stride: 1,
            ..ExtractSettings::default()
        };
        let (samples, stats) = extract_triplets(&frames, "cut", &settings, &mut rng).unwrap();
        assert_eq!(stats.windows, 4);
        assert!(stats.shot_rejected >= 2, "windows crossing the cut rejected");
        for s in &samples {
            assert!(s.frame_index + 2 < 3 || s.frame_index >= 3, "no straddler");
        }
    }

    #[test]
    fn textured_translation_passes_with_flow() {
        let mut rng = RandomStream::new(3);
        let frames = synth::translating_clip(11, 5, 170, 170, (2, 0)).unwrap();
        let settings = ExtractSettings {
            stride: 1,
            ..ExtractSettings::default()
        };
        let (samples, stats) = extract_triplets(&frames, "move", &settings, &mut rng).unwrap();
        assert_eq!(stats.windows, 3);
        assert_eq!(samples.len(), 3);
        for s in &samples {
            // first -> last spans two frame steps of (2, 0).
            assert!((s.mean_flow - 4.0).abs() < 1e-6, "flow {}", s.mean_flow);
        }
    }

    #[test]
    fn block_match_identical_patches() {
        let mut rng = RandomStream::new(4);
        let img: Tensor<f32> = rng
            .fill(&[96, 96, 3], Distribution::Uniform { a: 0.0, b: 1.0 })
            .unwrap();
        let flow = mean_flow_block_match(&img, &img, &BlockMatchSettings::default()).unwrap();
        assert_eq!(flow, 0.0);
    }

    #[test]
    fn block_match_exact_translations() {
        for (v, expect) in [((3i32, 0i32), 3.0f32), ((3, 4), 5.0)] {
            let t = synth::translating_triplet(99, 150, v).unwrap();
            let flow =
                mean_flow_block_match(&t.first, &t.last, &BlockMatchSettings::default()).unwrap();
            // first -> last is two steps of v; halve to compare per-step.
            assert!(
                (flow / 2.0 - expect).abs() < 1e-6,
                "velocity {v:?}: flow {flow}"
            );
        }
    }

    fn zero_triplet(flow: f32) -> TripletSample {
        TripletSample {
            first: Tensor::zeros(&[2, 2, 3]),
            middle: Tensor::zeros(&[2, 2, 3]),
            last: Tensor::zeros(&[2, 2, 3]),
            mean_flow: flow,
            source_id: "s".into(),
            frame_index: 0,
        }
    }

    #[test]
    fn weighted_select_all_and_errors() {
        let mut rng = RandomStream::new(5);
        let pool: Vec<TripletSample> = (0..10).map(|i| zero_triplet(i as f32)).collect();
        let all = weighted_select(&pool, 10, &mut rng).unwrap();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(weighted_select(&pool, 11, &mut rng).is_err());
    }

    #[test]
    fn weighted_select_favors_heavy_candidates() {
        // One candidate a million times the floor weight.
        let mut pool: Vec<TripletSample> = (0..20).map(|_| zero_triplet(0.0)).collect();
        pool.push(zero_triplet(0.05 * 1e6));
        let mut included = 0;
        for seed in 0..1000 {
            let mut rng = RandomStream::new(seed);
            let sel = weighted_select(&pool, 5, &mut rng).unwrap();
            if sel.contains(&20) {
                included += 1;
            }
        }
        assert!(included >= 999, "heavy candidate included {included}/1000");
    }

    #[test]
    fn weighted_select_monotone_in_flow() {
        let pool: Vec<TripletSample> = (0..10).map(|i| zero_triplet(i as f32)).collect();
        let mut counts = [0usize; 10];
        for seed in 0..1000 {
            let mut rng = RandomStream::new(seed ^ 0xABCD);
            for idx in weighted_select(&pool, 3, &mut rng).unwrap() {
                counts[idx] += 1;
            }
        }
        // Spearman rank correlation between flow order and inclusion counts.
        let mut ranked: Vec<(usize, usize)> = counts.iter().copied().enumerate().collect();
        ranked.sort_by_key(|&(_, c)| c);
        let mut rank_of = [0usize; 10];
        for (rank, &(idx, _)) in ranked.iter().enumerate() {
            rank_of[idx] = rank;
        }
        let n = 10.0;
        let d2: f64 = rank_of
            .iter()
            .enumerate()
            .map(|(i, &r)| ((i as f64) - r as f64).powi(2))
            .sum();
        let rho = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!(rho > 0.9, "rank correlation {rho}");
    }

    #[test]
    fn percentiles_nearest_rank() {
        let flows: Vec<f32> = (1..=100).map(|i| i as f32).collect();
        let stats = flow_percentiles(&flows).unwrap();
        assert_eq!(stats.p90, 90.0);
        assert_eq!(stats.p95, 95.0);
        assert_eq!(stats.max, 100.0);

        let one = flow_percentiles(&[5.0]).unwrap();
        assert_eq!((one.p90, one.p95, one.max), (5.0, 5.0, 5.0));
        assert!(flow_percentiles(&[]).is_err());
    }

    #[test]
    fn percentiles_match_brute_force() {
        let mut rng = RandomStream::new(6);
        for _ in 0..20 {
            let n = rng.below(50) + 1;
            let flows: Vec<f32> = (0..n).map(|_| rng.uniform(0.0, 30.0) as f32).collect();
            let stats = flow_percentiles(&flows).unwrap();
            let mut sorted = flows.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let brute = |p: f64| sorted[((p * n as f64 / 100.0).ceil() as usize).max(1) - 1];
            assert_eq!(stats.p90, brute(90.0));
            assert_eq!(stats.p95, brute(95.0));
            assert_eq!(stats.max, *sorted.last().unwrap());
        }
    }

    #[test]
    fn swap_is_an_involution() {
        let t = synth::translating_triplet(13, 150, (2, 1)).unwrap();
        let log = TransformLog {
            crop_y: 8,
            crop_x: 8,
            shift: (3, -2),
            hflip: false,
            vflip: false,
            swap: true,
        };
        let once = apply_transform(&t, 128, &log).unwrap();
        let unswapped = apply_transform(&t, 128, &TransformLog { swap: false, ..log }).unwrap();
        assert_eq!(once.first.data(), unswapped.last.data());
        assert_eq!(once.last.data(), unswapped.first.data());
        assert_eq!(once.truth.data(), unswapped.truth.data());
    }

    #[test]
    fn linear_motion_truth_is_invariant_under_shifts() {
        // Exact linear motion: the truth window is the correct interpolation
        // target no matter the shift.
        let v = (2, 1);
        let t = synth::translating_triplet(21, 150, v).unwrap();
        for (sy, sx) in [(0, 0), (6, 6), (-6, 4), (3, -5)] {
            let log = TransformLog {
                crop_y: 7,
                crop_x: 9,
                shift: (sy, sx),
                hflip: false,
                vflip: false,
                swap: false,
            };
            let pair = apply_transform(&t, 128, &log).unwrap();
            let baseline =
                apply_transform(&t, 128, &TransformLog { shift: (0, 0), ..log }).unwrap();
            assert_eq!(pair.truth.data(), baseline.truth.data());
        }
    }

    #[test]
    fn augment_respects_bounds_and_replays() {
        let t = synth::translating_triplet(34, 150, (1, 1)).unwrap();
        let mut rng = RandomStream::new(9);
        for _ in 0..50 {
            let pair = augment::<f32>(&t, 128, 6, &mut rng).unwrap();
            assert_eq!(pair.first.shape(), &[128, 128, 3]);
            let replay = apply_transform(&t, 128, &pair.log).unwrap();
            assert_eq!(pair.first.data(), replay.first.data());
            assert_eq!(pair.truth.data(), replay.truth.data());
            assert_eq!(pair.last.data(), replay.last.data());
            assert!(pair.log.shift.0.abs() <= 6 && pair.log.shift.1.abs() <= 6);
        }
    }
}
