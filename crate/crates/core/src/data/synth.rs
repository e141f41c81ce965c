//! Deterministic moving-dim-target sequences for desk-scale experiments.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_sequence, BBox, Frame, Sequence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_sequences: usize,
    /// Held-out sequences written under `test/`.
    pub num_test_sequences: usize,
    pub frames_per_sequence: usize,
    pub image_size: usize,
    /// Peak intensity added at the target centre, in `[0, 1]` units.
    pub amplitude: (f64, f64),
    /// Gaussian standard deviation of the target, pixels.
    pub sigma: (f64, f64),
    /// Speed in pixels per frame; heading is uniform unless `fixed_velocity` is set.
    pub speed: (f64, f64),
    pub fixed_velocity: Option<(f64, f64)>,
    /// Standard deviation of the per-frame position jitter, pixels.
    pub jitter: f64,
    pub clutter_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_sequences: 8,
            num_test_sequences: 2,
            frames_per_sequence: 32,
            image_size: 128,
            amplitude: (0.15, 0.3),
            sigma: (1.0, 2.0),
            speed: (1.0, 4.0),
            fixed_velocity: None,
            jitter: 0.3,
            clutter_scale: 1.0,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("synthetic spec: {m}")));
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if self.frames_per_sequence == 0 {
            return bad("frames_per_sequence must be positive".into());
        }
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return bad(format!("image_size {} must be a multiple of 8 and at least 16", self.image_size));
        }
        if !ordered(self.sigma) || self.sigma.0 <= 0.0 {
            return bad(format!("sigma range {:?} must be positive", self.sigma));
        }
        if !ordered(self.amplitude) || self.amplitude.0 < 0.0 {
            return bad(format!("amplitude range {:?} must be non-negative", self.amplitude));
        }
        let limit = self.image_size as f64 / self.frames_per_sequence as f64;
        let fastest = match self.fixed_velocity {
            Some((vx, vy)) => vx.hypot(vy),
            None if ordered(self.speed) && self.speed.0 >= 0.0 => self.speed.1,
            None => return bad(format!("speed range {:?} is not ordered", self.speed)),
        };
        if !(fastest <= limit) {
            return bad(format!("speed {fastest} exceeds image_size/frames = {limit}"));
        }
        if !(self.jitter >= 0.0 && self.clutter_scale >= 0.0 && self.noise_std >= 0.0) {
            return bad("jitter, clutter_scale and noise_std must be non-negative".into());
        }
        Ok(())
    }
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Fold `v` into `[lo, hi]` by mirror reflection.
fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (v - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f64,
}

fn splat(img: &mut [f64], size: usize, cx: f64, cy: f64, sigma: f64, amp: f64) {
    let r = (4.0 * sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let (x0, y0) = (cx.round() as isize, cy.round() as isize);
    for y in (y0 - r).max(0)..=(y0 + r).min(size as isize - 1) {
        for x in (x0 - r).max(0)..=(x0 + r).min(size as isize - 1) {
            // pixel centres at integer + 0.5
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            img[y as usize * size + x as usize] += amp * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

/// Build sequence number `index` of the stream seeded by `spec.seed`.
///
/// Frames are quantised to 8 bits so the in-memory sequence equals what
/// [`generate_synthetic_dataset`] writes.
pub fn generate_sequence(spec: &SyntheticSpec, id: &str, index: u64) -> Result<Sequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    let s = spec.image_size;
    let sf = s as f64;
    let n = spec.frames_per_sequence;
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let c = spec.clutter_scale;

    let base = rng.random_range(0.25..0.45);
    let coarse_n = s / 16 + 1;
    let coarse: Vec<f32> = (0..coarse_n * coarse_n)
        .map(|_| (0.06 * c * std.sample(&mut rng)) as f32)
        .collect();
    let low_freq = Frame::new(coarse_n, coarse_n, coarse)?.resized(s, s);
    let grad_amp = 0.08 * c;
    let grad_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let grad_spin = rng.random_range(-0.05..0.05);
    let blobs: Vec<Blob> = (0..(8.0 * c).round() as usize)
        .map(|_| Blob {
            x: rng.random_range(0.0..sf),
            y: rng.random_range(0.0..sf),
            sigma: rng.random_range(3.0..8.0),
            amp: rng.random_range(-0.1..0.1) * c,
        })
        .collect();
    let mut background = vec![base; s * s];
    for (b, &l) in background.iter_mut().zip(&low_freq.pixels) {
        *b += f64::from(l);
    }
    for blob in &blobs {
        splat(&mut background, s, blob.x, blob.y, blob.sigma, blob.amp);
    }

    let amp = sample(&mut rng, spec.amplitude);
    let sigma = sample(&mut rng, spec.sigma);
    let (vx, vy) = spec.fixed_velocity.unwrap_or_else(|| {
        let speed = sample(&mut rng, spec.speed);
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        (speed * heading.cos(), speed * heading.sin())
    });
    let margin = (2.0 * sigma + 1.0).min(sf / 2.0);
    let (lo, hi) = (margin, sf - margin);
    let (px0, py0) = (rng.random_range(lo..hi), rng.random_range(lo..hi));

    let mut frames = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    for t in 0..n {
        let tf = t as f64;
        let cx = reflect(px0 + vx * tf, lo, hi) + spec.jitter * std.sample(&mut rng);
        let cy = reflect(py0 + vy * tf, lo, hi) + spec.jitter * std.sample(&mut rng);
        let angle = grad_angle + grad_spin * tf;
        let (ca, sa) = (angle.cos(), angle.sin());
        let mut img: Vec<f64> = background
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let (x, y) = ((i % s) as f64 / sf - 0.5, (i / s) as f64 / sf - 0.5);
                b + grad_amp * (x * ca + y * sa) + spec.noise_std * std.sample(&mut rng)
            })
            .collect();
        splat(&mut img, s, cx, cy, sigma, amp);
        let raw: Vec<u8> = img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        frames.push(Frame::from_u8(s, s, &raw)?);
        let b = BBox::from_center(cx, cy, 3.0 * sigma, 3.0 * sigma).clamped(sf, sf);
        annotations.push(if b.is_valid() { vec![b] } else { Vec::new() });
    }
    Sequence::new(id, frames, annotations)
}

/// Write `train/` and `test/` splits in the dataset layout under `out`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    let splits = [("train", spec.num_sequences, 0u64), ("test", spec.num_test_sequences, 1 << 32)];
    for (split, count, base) in splits {
        let root = out.join(split);
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        for i in 0..count {
            let seq = generate_sequence(spec, &format!("{split}_{i:03}"), base + i as u64)?;
            write_sequence(&seq, &root)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_sequences: 2,
            num_test_sequences: 1,
            frames_per_sequence: 8,
            image_size: 32,
            speed: (0.5, 4.0),
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn reflect_folds_into_range() {
        assert_eq!(reflect(5.0, 0.0, 10.0), 5.0);
        assert_eq!(reflect(12.0, 0.0, 10.0), 8.0);
        assert_eq!(reflect(-3.0, 0.0, 10.0), 3.0);
        assert_eq!(reflect(23.0, 0.0, 10.0), 3.0);
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic_dataset(&small(), a.path()).unwrap();
        generate_synthetic_dataset(&small(), b.path()).unwrap();
        for rel in ["train/train_001/frames/000005.png", "train/train_001/annotations.csv", "test/test_000/frames/000000.png"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
        let other = generate_sequence(&SyntheticSpec { seed: 1, ..small() }, "train_000", 0).unwrap();
        assert_ne!(other.frames, generate_sequence(&small(), "train_000", 0).unwrap().frames);
    }

    #[test]
    fn generated_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        generate_synthetic_dataset(&spec, dir.path()).unwrap();
        let train = load_dataset(&dir.path().join("train")).unwrap();
        assert_eq!(train.len(), 2);
        for (i, s) in train.iter().enumerate() {
            let mem = generate_sequence(&spec, &s.id, i as u64).unwrap();
            assert_eq!(s.annotations, mem.annotations);
            assert_eq!(s.frames, mem.frames);
        }
    }

    #[test]
    fn fixed_velocity_advances_centre() {
        let spec = SyntheticSpec {
            frames_per_sequence: 32,
            image_size: 128,
            fixed_velocity: Some((4.0, 0.0)),
            sigma: (1.0, 1.0),
            ..SyntheticSpec::default()
        };
        // runs until the first reflection
        let seq = generate_sequence(&spec, "v", 3).unwrap();
        let xs: Vec<f64> = seq.annotations.iter().map(|b| b[0].center().0).collect();
        let steps: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).take_while(|d| *d > 0.0).collect();
        assert!(!steps.is_empty());
        for d in steps {
            assert!((d - 4.0).abs() < 6.0 * spec.jitter, "step {d}");
        }
    }

    #[test]
    fn zero_amplitude_still_annotated() {
        let seq = generate_sequence(&SyntheticSpec { amplitude: (0.0, 0.0), ..small() }, "z", 0).unwrap();
        assert!(seq.annotations.iter().all(|b| b.len() == 1));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            SyntheticSpec { sigma: (0.0, 1.0), ..small() },
            SyntheticSpec { speed: (1.0, 4.5), ..small() },
            SyntheticSpec { fixed_velocity: Some((5.0, 0.0)), ..small() },
            SyntheticSpec { image_size: 20, ..small() },
        ] {
            assert!(matches!(spec.validate(), Err(Error::InvalidConfig(_))), "{spec:?}");
        }
    }
}
