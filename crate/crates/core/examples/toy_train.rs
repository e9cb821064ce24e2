//! Desk-scale training demo on synthetic translating textures.
//!
//! Usage: `cargo run --release -p sepconv-core --example toy_train [steps]`
//! Prints per-step losses and a held-out PSNR comparison against the overlay
//! baseline.

use std::time::Instant;

use sepconv_core::eval::{metrics, overlay_baseline};
use sepconv_core::infer::interpolate;
use sepconv_core::model::{build, ModelConfig, Variant};
use sepconv_core::rng::RandomStream;
use sepconv_core::synth::SyntheticTranslations;
use sepconv_core::training::{train, LossConfig, TrainOptions};

fn main() {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let config = ModelConfig {
        levels: 5,
        widths: vec![32, 64, 128, 256, 512],
        convs_per_block: 3,
        kernel_size: 15,
        variant: Variant::KernelPrediction,
        width_scale: 8,
    };
    let source = SyntheticTranslations {
        base_seed: 2001,
        count: 2000,
        patch: 64,
        max_speed: 5,
    };
    let params = build::<f32>(&config, &mut RandomStream::new(11)).unwrap();
    let started = Instant::now();
    let options = TrainOptions {
        steps,
        batch_size: 16,
        seed: 5,
        ..TrainOptions::default()
    };
    let outcome = train(params, &source, &LossConfig::l1(), &options, |s, _| {
        eprintln!("checkpoint at {s}");
        Ok(())
    })
    .unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    println!(
        "{steps} steps in {elapsed:.1} s ({:.3} s/step)",
        elapsed / steps as f64
    );
    for p in outcome
        .curve
        .iter()
        .step_by((steps / 20).max(1))
        .chain(outcome.curve.last())
    {
        println!("step {:4}  loss {:.5}", p.step, p.loss);
    }

    // Held-out comparison vs overlay.
    let holdout = SyntheticTranslations {
        base_seed: 9999,
        count: 40,
        patch: 64,
        max_speed: 5,
    };
    let mut model_psnr = 0.0;
    let mut overlay_psnr = 0.0;
    for i in 0..holdout.count {
        let t = holdout.triplet(i).unwrap();
        let pred = interpolate(&outcome.params, &t.first, &t.last).unwrap();
        let base = overlay_baseline(&t.first, &t.last).unwrap();
        model_psnr += metrics(&pred, &t.middle).unwrap().psnr;
        overlay_psnr += metrics(&base, &t.middle).unwrap().psnr;
    }
    model_psnr /= holdout.count as f64;
    overlay_psnr /= holdout.count as f64;
    println!("held-out PSNR: model {model_psnr:.2} dB, overlay {overlay_psnr:.2} dB");
}
