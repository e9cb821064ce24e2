//! Quantitative evaluation: MAE/RMSE/PSNR/SSIM, the withheld-frame protocol,
//! the overlay baseline, kernel visualization and benchmarking.
//!
//! Metric conventions (pinned so numbers are comparable run to run): inputs
//! are `(H, W, 3)` frames in `[0, 1]`, rescaled to 0-255; MAE/RMSE over all
//! elements; `PSNR = 20 log10(255 / RMSE)` capped at 100 dB; SSIM on the
//! Rec. 601 luma with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
//! K2 = 0.03, dynamic range 255, averaged over valid window centers.

use std::time::Instant;

use rayon::prelude::*;

use crate::datapipe::luma_plane;
use crate::error::{parameter, Result};
use crate::model::{activation_footprint, ModelConfig};
use crate::rng::{Distribution, RandomStream};
use crate::sepconv::{memory_footprint, outer_product_kernels, KernelField, KernelStorage};
use crate::tensor::{Scalar, Tensor};

pub const PSNR_CAP: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 255.0;

/// Image-quality metrics for one frame pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// MAE, RMSE, PSNR and SSIM between a prediction and its ground truth.
pub fn metrics<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Metrics> {
    if pred.shape() != truth.shape() {
        return parameter(format!(
            "metric shapes differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        ));
    }
    let s = pred.shape();
    if s.len() != 3 || s[2] != 3 {
        return parameter(format!("metrics expect (H, W, 3) frames, got {s:?}"));
    }
    let n = pred.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (a, b) in pred.data().iter().zip(truth.data()) {
        let d = (a.as_f64() - b.as_f64()) * DYNAMIC_RANGE;
        abs_sum += d.abs();
        sq_sum += d * d;
    }
    let mae = abs_sum / n;
    let rmse = (sq_sum / n).sqrt();
    let psnr = if rmse <= 0.0 {
        PSNR_CAP
    } else {
        (20.0 * (DYNAMIC_RANGE / rmse).log10()).min(PSNR_CAP)
    };
    let ssim = ssim_luma(pred, truth)?;
    Ok(Metrics {
        mae,
        rmse,
        psnr,
        ssim,
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, slot) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *slot = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *slot;
    }
    for slot in k.iter_mut() {
        *slot /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter of a luma plane.
fn gaussian_filter(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_window();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, &kj) in k.iter().enumerate() {
                acc += kj * plane[y * w + x + j];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &ki) in k.iter().enumerate() {
                acc += ki * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_luma<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return parameter(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        ));
    }
    let x: Vec<f64> = luma_plane(pred)?.iter().map(|v| v * DYNAMIC_RANGE).collect();
    let y: Vec<f64> = luma_plane(truth)?.iter().map(|v| v * DYNAMIC_RANGE).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();

    let mu_x = gaussian_filter(&x, h, w);
    let mu_y = gaussian_filter(&y, h, w);
    let m_xx = gaussian_filter(&xx, h, w);
    let m_yy = gaussian_filter(&yy, h, w);
    let m_xy = gaussian_filter(&xy, h, w);

    let c1 = (SSIM_K1 * DYNAMIC_RANGE) * (SSIM_K1 * DYNAMIC_RANGE);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE) * (SSIM_K2 * DYNAMIC_RANGE);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = m_xx[i] - mx * mx;
        let var_y = m_yy[i] - my * my;
        let cov = m_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Per-frame metrics plus aggregates for one evaluation run.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub per_frame: Vec<Metrics>,
    pub mae: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub frame_count: usize,
    pub seconds_per_frame: f64,
}

impl MetricsReport {
    fn from_frames(per_frame: Vec<Metrics>, seconds_per_frame: f64) -> Self {
        let n = per_frame.len().max(1) as f64;
        let sum = per_frame.iter().fold((0.0, 0.0, 0.0, 0.0), |acc, m| {
            (
                acc.0 + m.mae,
                acc.1 + m.rmse,
                acc.2 + m.psnr,
                acc.3 + m.ssim,
            )
        });
        Self {
            frame_count: per_frame.len(),
            mae: sum.0 / n,
            rmse: sum.1 / n,
            psnr: sum.2 / n,
            ssim: sum.3 / n,
            per_frame,
            seconds_per_frame,
        }
    }

    /// One header line, one line per frame, one aggregate line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,mae,rmse,psnr,ssim\n");
        for (i, m) in self.per_frame.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.4},{:.6}\n",
                i, m.mae, m.rmse, m.psnr, m.ssim
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.4},{:.6}\n",
            self.mae, self.rmse, self.psnr, self.ssim
        ));
        out
    }

    pub fn to_text(&self) -> String {
        format!(
            "frames: {}\nMAE:  {:.4}\nRMSE: {:.4}\nPSNR: {:.2} dB\nSSIM: {:.4}\nwall time per frame: {:.4} s\n",
            self.frame_count, self.mae, self.rmse, self.psnr, self.ssim, self.seconds_per_frame
        )
    }
}

/// The weakest sensible interpolator: the per-pixel average of both frames.
pub fn overlay_baseline<T: Scalar>(i1: &Tensor<T>, i2: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::from_f64(0.5);
    i1.zip_map(i2, |a, b| (a + b) * half)
}

/// Withheld-frame protocol: even-indexed frames are kept; every interior
/// odd-indexed frame is interpolated from its even neighbors and scored
/// against the withheld original.
pub fn withheld_frame_eval<T: Scalar>(
    frames: &[Tensor<T>],
    mut interpolator: impl FnMut(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
) -> Result<MetricsReport> {
    if frames.len() < 3 {
        return parameter(format!(
            "withheld-frame evaluation needs at least 3 frames, got {}",
            frames.len()
        ));
    }
    let mut per_frame = Vec::new();
    let mut total_seconds = 0.0;
    let mut k = 1;
    while k + 1 < frames.len() {
        let started = Instant::now();
        let pred = interpolator(&frames[k - 1], &frames[k + 1])?;
        total_seconds += started.elapsed().as_secs_f64();
        per_frame.push(metrics(&pred, &frames[k])?);
        k += 2;
    }
    let count = per_frame.len().max(1) as f64;
    Ok(MetricsReport::from_frames(per_frame, total_seconds / count))
}

/// A kernel pair rendered for inspection at one output pixel.
#[derive(Debug, Clone)]
pub struct KernelGlimpse {
    /// `(n, n)` display image: `|K1| + |K2|` jointly normalized to `[0, 1]`.
    pub image: Tensor<f32>,
    /// Center of mass of `|K1| + |K2|` relative to the kernel center,
    /// as `(dy, dx)`.
    pub offset: (f64, f64),
    pub com_k1: (f64, f64),
    pub com_k2: (f64, f64),
    /// Frame-to-frame displacement implied by the kernel mass:
    /// `2 (m2 com2 - m1 com1) / (m1 + m2)`; robust to how the mass is split
    /// between the frames.
    pub implied_motion: (f64, f64),
    mass: Vec<f64>,
    n: usize,
}

impl KernelGlimpse {
    /// Fraction of total kernel mass within a centered square of half-width
    /// `radius` pixels.
    pub fn center_mass_fraction(&self, radius: usize) -> f64 {
        let n = self.n;
        let c = n / 2;
        let total: f64 = self.mass.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i.abs_diff(c) <= radius && j.abs_diff(c) <= radius {
                    inside += self.mass[i * n + j];
                }
            }
        }
        inside / total
    }
}

fn mass_center(mass: &[f64], n: usize) -> ((f64, f64), f64) {
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return ((0.0, 0.0), 0.0);
    }
    let c = (n / 2) as f64;
    let mut my = 0.0;
    let mut mx = 0.0;
    for i in 0..n {
        for j in 0..n {
            my += mass[i * n + j] * (i as f64 - c);
            mx += mass[i * n + j] * (j as f64 - c);
        }
    }
    ((my / total, mx / total), total)
}

/// Expands the pixel's 1D kernels to their dense 2D equivalents and reports
/// display and center-of-mass diagnostics.
pub fn kernel_visualize<T: Scalar>(kf: &KernelField<T>, x: usize, y: usize) -> Result<KernelGlimpse> {
    let (h, w, n) = (kf.height(), kf.width(), kf.kernel_size());
    if y >= h || x >= w {
        return parameter(format!("pixel ({x}, {y}) outside the {w}x{h} kernel field"));
    }
    let single = kf.crop(y, x, 1, 1)?;
    let dense = outer_product_kernels(&single);
    let k1: Vec<f64> = dense.k1.data().iter().map(|v| v.as_f64()).collect();
    let k2: Vec<f64> = dense.k2.data().iter().map(|v| v.as_f64()).collect();

    let mass1: Vec<f64> = k1.iter().map(|v| v.abs()).collect();
    let mass2: Vec<f64> = k2.iter().map(|v| v.abs()).collect();
    let mass: Vec<f64> = mass1.iter().zip(&mass2).map(|(a, b)| a + b).collect();

    let peak = mass.iter().fold(0.0f64, |m, &v| m.max(v));
    let image = Tensor::new(
        &[n, n],
        mass.iter()
            .map(|&v| if peak > 0.0 { (v / peak) as f32 } else { 0.0 })
            .collect(),
    )?;

    let (offset, _) = mass_center(&mass, n);
    let (com1, m1) = mass_center(&mass1, n);
    let (com2, m2) = mass_center(&mass2, n);
    let implied_motion = if m1 + m2 > 0.0 {
        (
            2.0 * (m2 * com2.0 - m1 * com1.0) / (m1 + m2),
            2.0 * (m2 * com2.1 - m1 * com1.1) / (m1 + m2),
        )
    } else {
        (0.0, 0.0)
    };
    Ok(KernelGlimpse {
        image,
        offset,
        com_k1: com1,
        com_k2: com2,
        implied_motion,
        mass,
        n,
    })
}

/// Benchmark outcome: median wall clock and a working-set estimate.
#[derive(Debug, Clone, Copy)]
pub struct BenchReport {
    pub seconds_per_frame: f64,
    /// Separable kernel-field bytes plus the activation accounting.
    pub working_set_bytes: u64,
}

/// Times the interpolator on seeded random frames and reports the median of
/// `repetitions` runs.
pub fn bench<T: Scalar>(
    mut interpolator: impl FnMut(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    width: usize,
    height: usize,
    repetitions: usize,
    config: &ModelConfig,
) -> Result<BenchReport> {
    if width == 0 || height == 0 || repetitions == 0 {
        return parameter("bench needs positive dimensions and repetitions");
    }
    let mut rng = RandomStream::new(0xBE4C);
    let d = Distribution::Uniform { a: 0.0, b: 1.0 };
    let i1: Tensor<T> = rng.fill(&[height, width, 3], d)?;
    let i2: Tensor<T> = rng.fill(&[height, width, 3], d)?;
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let started = Instant::now();
        let out = interpolator(&i1, &i2)?;
        times.push(started.elapsed().as_secs_f64());
        drop(out);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = times[times.len() / 2];
    let kernel_bytes = memory_footprint(
        width as u64,
        height as u64,
        config.kernel_size as u64,
        KernelStorage::Separable,
        4,
    );
    Ok(BenchReport {
        seconds_per_frame: median,
        working_set_bytes: kernel_bytes + activation_footprint(config, height as u64, width as u64),
    })
}

/// Parallel per-frame metric evaluation for frame sequences scored against
/// references (report assembly stays single-writer).
pub fn score_frames<T: Scalar>(
    preds: &[Tensor<T>],
    truths: &[Tensor<T>],
) -> Result<Vec<Metrics>> {
    if preds.len() != truths.len() {
        return parameter("prediction/truth counts differ");
    }
    preds
        .par_iter()
        .zip(truths.par_iter())
        .map(|(p, t)| metrics(p, t))
        .collect()
}
