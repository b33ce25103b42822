use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, MotionSequence};
use crate::autodiff::Tensor;
use crate::rng::{self, streams, StreamRng};

/// Per-frame layout: 2-D position, 2-D velocity, two oscillatory limb
/// channels and two binary contact channels.
pub const SYNTHETIC_FEATURES: usize = 8;

const FAMILY_COUNT: usize = 8;

/// Synthetic benchmark description. Condition `c` combines trajectory
/// family `c / variants` (coarse path shape) with detail variant
/// `c % variants` (limb rhythm, contact pattern and a small path wiggle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub families: usize,
    pub variants: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub fps: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            families: 8,
            variants: 5,
            min_len: 40,
            max_len: 64,
            noise: 0.01,
            fps: 20.0,
        }
    }
}

impl SyntheticSpec {
    pub fn classes(&self) -> usize {
        self.families * self.variants
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.families == 0 || self.families > FAMILY_COUNT {
            return Err(DatasetError::Spec(format!(
                "families must be in 1..={FAMILY_COUNT}, got {}",
                self.families
            )));
        }
        if self.variants == 0 {
            return Err(DatasetError::Spec("variants must be at least 1".into()));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(DatasetError::Spec(format!(
                "need 2 <= min_len <= max_len, got {} and {}",
                self.min_len, self.max_len
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.fps > 0.0) {
            return Err(DatasetError::Spec(format!(
                "noise {} and fps {} must be non-negative and positive",
                self.noise, self.fps
            )));
        }
        Ok(())
    }
}

/// Point on the unit-scale path of `family` at progress `s` in `[0, 1]`.
fn family_path(family: usize, s: f64) -> (f64, f64) {
    let tau = 2.0 * PI * s;
    match family {
        // circle
        0 => (tau.cos(), tau.sin()),
        // figure eight
        1 => (tau.sin(), 0.5 * (2.0 * tau).sin()),
        // zigzag
        2 => {
            let teeth = 3.0;
            let phase = (s * teeth).fract();
            let tri = if phase < 0.5 {
                4.0 * phase - 1.0
            } else {
                3.0 - 4.0 * phase
            };
            (2.0 * s - 1.0, 0.6 * tri)
        }
        // spiral
        3 => {
            let r = 0.25 + 0.75 * s;
            (r * (2.0 * tau).cos(), r * (2.0 * tau).sin())
        }
        // straight walk with a slight arc
        4 => (2.0 * s - 1.0, 0.3 * (PI * s).sin()),
        // square
        5 => {
            let q = (4.0 * s).min(3.999_999);
            let side = q.floor();
            let f = q - side;
            match side as usize {
                0 => (-1.0 + 2.0 * f, -1.0),
                1 => (1.0, -1.0 + 2.0 * f),
                2 => (1.0 - 2.0 * f, 1.0),
                _ => (-1.0, 1.0 - 2.0 * f),
            }
        }
        // sine wave
        6 => (2.0 * s - 1.0, 0.5 * (3.0 * tau).sin()),
        // three-petal rose
        _ => {
            let th = PI * s;
            let r = (3.0 * th).cos();
            (r * th.cos(), r * th.sin())
        }
    }
}

fn uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn gauss(rng: &mut StreamRng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

fn synth_sequence(spec: &SyntheticSpec, label: usize, rng: &mut StreamRng) -> MotionSequence {
    let family = label / spec.variants;
    let variant = label % spec.variants;
    let n = rng.random_range(spec.min_len..=spec.max_len);
    let scale = uniform(rng, 0.8, 1.2);
    let angle = uniform(rng, -0.25, 0.25);
    let (ox, oy) = (uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2));
    let progress_end = uniform(rng, 0.85, 1.0);
    let phase = uniform(rng, 0.0, 2.0 * PI);
    let limb_amp = uniform(rng, 0.7, 1.0);

    // Variant-specific detail.
    let rhythm = 1.0 + 0.6 * variant as f64; // limb cycles per second
    let duty = 0.3 + 0.4 * variant as f64 / spec.variants.max(1) as f64;
    let wiggle_freq = 4.0 + 2.0 * variant as f64;
    let wiggle_amp = 0.06;

    let (ca, sa) = (angle.cos(), angle.sin());
    let mut pos = Vec::with_capacity(n);
    for i in 0..n {
        let s = progress_end * i as f64 / (n - 1) as f64;
        let (px, py) = family_path(family, s);
        let w = wiggle_amp * (2.0 * PI * wiggle_freq * s + phase).sin();
        let (px, py) = (px + w * py.signum() * 0.5, py + w);
        let x = scale * (ca * px - sa * py) + ox;
        let y = scale * (sa * px + ca * py) + oy;
        pos.push((x, y));
    }

    let mut data = Vec::with_capacity(n * SYNTHETIC_FEATURES);
    for i in 0..n {
        let (x, y) = pos[i];
        let (nx, ny) = pos[(i + 1).min(n - 1)];
        let (px, py) = pos[i.saturating_sub(1)];
        let denom = if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
        let vx = 10.0 * (nx - px) / denom;
        let vy = 10.0 * (ny - py) / denom;
        let time = i as f64 / spec.fps;
        let cycle = 2.0 * PI * rhythm * time + phase;
        let limb1 = limb_amp * cycle.sin();
        let limb2 = limb_amp * 0.6 * (2.0 * cycle).cos();
        let cyc_pos = (cycle / (2.0 * PI)).rem_euclid(1.0);
        let contact1 = if cyc_pos < duty { 1.0 } else { 0.0 };
        let contact2 = if (cyc_pos + 0.5).rem_euclid(1.0) < duty {
            1.0
        } else {
            0.0
        };
        let continuous = [x, y, vx, vy, limb1, limb2];
        for v in continuous {
            data.push(v + spec.noise * gauss(rng));
        }
        data.push(contact1);
        data.push(contact2);
    }
    MotionSequence {
        frames: Tensor::new(vec![n, SYNTHETIC_FEATURES], data).expect("synthetic shape"),
        label: Some(label),
        fps: spec.fps,
    }
}

/// Generates `count` labelled sequences; item `i` has label `i % classes`,
/// so labels are balanced whenever `count` is a multiple of the class count.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<MotionSequence>, DatasetError> {
    spec.validate()?;
    let classes = spec.classes();
    Ok((0..count)
        .map(|i| {
            let mut rng = rng::stream(seed, &[streams::DATA, i as u64]);
            synth_sequence(spec, i % classes, &mut rng)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_balanced() {
        let spec = SyntheticSpec {
            families: 8,
            variants: 1,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec, 0, 1).unwrap().is_empty());
        let data = generate_synthetic(&spec, 800, 1).unwrap();
        let mut counts = vec![0; 8];
        for s in &data {
            counts[s.label.unwrap()] += 1;
            assert!(s.len() >= spec.min_len && s.len() <= spec.max_len);
            assert!(s.frames.is_finite());
        }
        assert!(counts.iter().all(|&c| c == 100));
    }

    #[test]
    fn reproducible() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec, 30, 9).unwrap();
        let b = generate_synthetic(&spec, 30, 9).unwrap();
        assert_eq!(super::super::digest(&a), super::super::digest(&b));
        let c = generate_synthetic(&spec, 30, 10).unwrap();
        assert_ne!(super::super::digest(&a), super::super::digest(&c));
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = SyntheticSpec {
            families: 9,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&bad, 3, 0).is_err());
        let bad = SyntheticSpec {
            min_len: 70,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&bad, 3, 0).is_err());
    }

    #[test]
    fn contacts_are_binary() {
        let data = generate_synthetic(&SyntheticSpec::default(), 40, 3).unwrap();
        for s in &data {
            for row in s.frames.data().chunks(SYNTHETIC_FEATURES) {
                assert!(row[6] == 0.0 || row[6] == 1.0);
                assert!(row[7] == 0.0 || row[7] == 1.0);
            }
        }
    }
}
