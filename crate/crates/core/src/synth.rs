//! Synthetic data: textured canvases translated with exact integer motion.
//!
//! These generators drive the data-pipeline tests, the toy training runs and
//! the evaluation protocol tests. Motion is applied by cropping a larger
//! canvas at shifted origins, so the "ground truth" middle frame is exact.

use crate::datapipe::{crop_image, AugmentedPair, TransformLog, TripletSample};
use crate::error::{parameter, Result};
use crate::rng::{Distribution, RandomStream};
use crate::tensor::Tensor;
use crate::training::SampleSource;

/// Random RGB texture: two octaves of bilinearly interpolated value noise.
pub fn texture_canvas(rng: &mut RandomStream, h: usize, w: usize) -> Result<Tensor<f32>> {
    if h == 0 || w == 0 {
        return parameter("empty canvas");
    }
    let coarse_cell = 6 + rng.below(7); // 6..=12 px features
    let fine_cell = 2 + rng.below(2); // 2..=3 px detail
    let coarse = value_noise(rng, h, w, coarse_cell)?;
    let fine = value_noise(rng, h, w, fine_cell)?;
    coarse.zip_map(&fine, |a, b| (0.72 * a + 0.28 * b).clamp(0.0, 1.0))
}

/// Uniform noise on a coarse grid, bilinearly sampled at pixel resolution.
fn value_noise(rng: &mut RandomStream, h: usize, w: usize, cell: usize) -> Result<Tensor<f32>> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Tensor<f32> = rng.fill(&[gh, gw, 3], Distribution::Uniform { a: 0.0, b: 1.0 })?;
    let g = grid.data();
    let mut out = Tensor::zeros(&[h, w, 3]);
    {
        let d = out.data_mut();
        for y in 0..h {
            let fy = y as f32 / cell as f32;
            let y0 = fy.floor() as usize;
            let ty = fy - y0 as f32;
            for x in 0..w {
                let fx = x as f32 / cell as f32;
                let x0 = fx.floor() as usize;
                let tx = fx - x0 as f32;
                for c in 0..3 {
                    let v00 = g[(y0 * gw + x0) * 3 + c];
                    let v01 = g[(y0 * gw + x0 + 1) * 3 + c];
                    let v10 = g[((y0 + 1) * gw + x0) * 3 + c];
                    let v11 = g[((y0 + 1) * gw + x0 + 1) * 3 + c];
                    let top = v00 + (v01 - v00) * tx;
                    let bot = v10 + (v11 - v10) * tx;
                    d[(y * w + x) * 3 + c] = top + (bot - top) * ty;
                }
            }
        }
    }
    Ok(out)
}

/// Three `patch x patch` frames of a scene translating by `velocity` pixels
/// per frame step; motion is exact because all three are crops of one canvas.
pub fn translating_triplet(seed: u64, patch: usize, velocity: (i32, i32)) -> Result<TripletSample> {
    let mut rng = RandomStream::new(seed);
    translating_triplet_from(&mut rng, patch, velocity)
}

pub fn translating_triplet_from(
    rng: &mut RandomStream,
    patch: usize,
    velocity: (i32, i32),
) -> Result<TripletSample> {
    let (vy, vx) = velocity;
    let speed = vy.unsigned_abs().max(vx.unsigned_abs()) as usize;
    if speed > 24 {
        return parameter(format!("velocity {velocity:?} exceeds the supported range"));
    }
    let margin = 2 * speed + 1;
    let canvas = texture_canvas(rng, patch + 2 * margin, patch + 2 * margin)?;
    // Content moves by +v per frame: frame t is the canvas window at
    // origin - t*v.
    let origin = margin as i32;
    let window = |t: i32| -> Result<Tensor<f32>> {
        crop_image(
            &canvas,
            (origin - t * vy) as usize,
            (origin - t * vx) as usize,
            patch,
            patch,
        )
    };
    let flow = 2.0 * ((vy as f64).hypot(vx as f64)) as f32;
    Ok(TripletSample {
        first: window(0)?,
        middle: window(1)?,
        last: window(2)?,
        mean_flow: flow,
        source_id: "synthetic".to_string(),
        frame_index: 0,
    })
}

/// A clip of `count` frames translating by `velocity` per frame.
pub fn translating_clip(
    seed: u64,
    count: usize,
    h: usize,
    w: usize,
    velocity: (i32, i32),
) -> Result<Vec<Tensor<f32>>> {
    if count == 0 {
        return parameter("clip needs at least one frame");
    }
    let (vy, vx) = velocity;
    let speed = vy.unsigned_abs().max(vx.unsigned_abs()) as usize;
    let margin = speed * count + 1;
    let mut rng = RandomStream::new(seed);
    let canvas = texture_canvas(&mut rng, h + 2 * margin, w + 2 * margin)?;
    let origin = margin as i32;
    (0..count as i32)
        .map(|t| {
            crop_image(
                &canvas,
                (origin - t * vy) as usize,
                (origin - t * vx) as usize,
                h,
                w,
            )
        })
        .collect()
}

/// Deterministic stream of translating-texture training pairs. Sample `i` is
/// a pure function of `(base_seed, i)`: a fresh texture moving with a random
/// integer velocity of magnitude at most `max_speed`.
#[derive(Debug, Clone)]
pub struct SyntheticTranslations {
    pub base_seed: u64,
    pub count: usize,
    pub patch: usize,
    pub max_speed: i32,
}

impl SyntheticTranslations {
    /// The velocity sample `i` moves with.
    pub fn velocity(&self, index: usize) -> (i32, i32) {
        let mut rng = RandomStream::new(self.base_seed).derive(index as u64);
        Self::draw_velocity(&mut rng, self.max_speed)
    }

    fn draw_velocity(rng: &mut RandomStream, max_speed: i32) -> (i32, i32) {
        loop {
            let vy = rng.int_in(-(max_speed as i64), max_speed as i64) as i32;
            let vx = rng.int_in(-(max_speed as i64), max_speed as i64) as i32;
            if vy * vy + vx * vx <= max_speed * max_speed {
                return (vy, vx);
            }
        }
    }

    /// The full triplet behind sample `i` (used by evaluations that need the
    /// middle frame).
    pub fn triplet(&self, index: usize) -> Result<TripletSample> {
        let mut rng = RandomStream::new(self.base_seed).derive(index as u64);
        let velocity = Self::draw_velocity(&mut rng, self.max_speed);
        translating_triplet_from(&mut rng, self.patch, velocity)
    }
}

impl SampleSource<f32> for SyntheticTranslations {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize, _rng: &mut RandomStream) -> Result<AugmentedPair<f32>> {
        let t = self.triplet(index)?;
        Ok(AugmentedPair {
            first: t.first,
            truth: t.middle,
            last: t.last,
            log: TransformLog::identity(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::luma_plane;

    #[test]
    fn triplet_motion_is_exact() {
        // A feature at p in `first` sits at p + v in `middle`.
        let v = (2, -3);
        let t = translating_triplet(5, 64, v).unwrap();
        let p = 64usize;
        for y in 2..p {
            for x in 0..p - 3 {
                let a = t.first.at(&[y - 2, x + 3, 0]);
                let b = t.middle.at(&[y, x, 0]);
                assert_eq!(a, b, "at {y},{x}");
            }
        }
    }

    #[test]
    fn clip_frames_share_shape_and_move() {
        let frames = translating_clip(8, 5, 70, 66, (1, 2)).unwrap();
        assert_eq!(frames.len(), 5);
        for f in &frames {
            assert_eq!(f.shape(), &[70, 66, 3]);
        }
        let a = luma_plane(&frames[0]).unwrap();
        let b = luma_plane(&frames[1]).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    #[test]
    fn source_is_deterministic_and_bounded() {
        let src = SyntheticTranslations {
            base_seed: 77,
            count: 10,
            patch: 64,
            max_speed: 5,
        };
        let mut rng = RandomStream::new(0);
        for i in 0..10 {
            let a = src.get(i, &mut rng.clone()).unwrap();
            let b = src.get(i, &mut rng).unwrap();
            assert_eq!(a.first.data(), b.first.data());
            let (vy, vx) = src.velocity(i);
            assert!(vy * vy + vx * vx <= 25);
        }
    }

    #[test]
    fn textures_are_textured() {
        let mut rng = RandomStream::new(3);
        let canvas = texture_canvas(&mut rng, 64, 64).unwrap();
        let l = luma_plane(&canvas).unwrap();
        let mean: f64 = l.iter().sum::<f64>() / l.len() as f64;
        let var: f64 = l.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / l.len() as f64;
        assert!(var > 1e-3, "variance {var}");
    }
}
