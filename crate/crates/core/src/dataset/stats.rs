use std::fmt::Write as _;

use super::{DatasetError, MotionSequence};

/// Smallest standard deviation kept for a feature; constant features are
/// scaled by `1 / STD_FLOOR`.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-feature mean and standard deviation over the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DatasetStats {
    pub fn identity(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            std: vec![1.0; features],
        }
    }

    /// Frame-weighted statistics over every frame of `seqs`.
    pub fn fit(seqs: &[MotionSequence]) -> Result<Self, DatasetError> {
        let first = seqs
            .first()
            .ok_or_else(|| DatasetError::Spec("cannot fit statistics on an empty split".into()))?;
        let j = first.features();
        let mut sum = vec![0.0; j];
        let mut count = 0usize;
        for s in seqs {
            if s.features() != j {
                return Err(DatasetError::StatsWidth {
                    expected: j,
                    found: s.features(),
                });
            }
            for row in s.frames.data().chunks(j) {
                for (a, v) in sum.iter_mut().zip(row) {
                    *a += v;
                }
            }
            count += s.len();
        }
        if count == 0 {
            return Err(DatasetError::Spec("training split has no frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; j];
        for s in seqs {
            for row in s.frames.data().chunks(j) {
                for ((a, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *a += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, s: &MotionSequence) -> Result<(), DatasetError> {
        if s.features() != self.features() {
            return Err(DatasetError::StatsWidth {
                expected: self.features(),
                found: s.features(),
            });
        }
        Ok(())
    }

    fn apply(&self, s: &MotionSequence, f: impl Fn(f64, f64, f64) -> f64) -> MotionSequence {
        let j = self.features();
        let mut out = s.clone();
        for row in out.frames.data_mut().chunks_mut(j) {
            for ((v, m), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = f(*v, *m, *sd);
            }
        }
        out
    }

    pub fn normalize(&self, s: &MotionSequence) -> Result<MotionSequence, DatasetError> {
        self.check(s)?;
        Ok(self.apply(s, |v, m, sd| (v - m) / sd))
    }

    pub fn denormalize(&self, s: &MotionSequence) -> Result<MotionSequence, DatasetError> {
        self.check(s)?;
        Ok(self.apply(s, |v, m, sd| v * sd + m))
    }

    pub fn normalize_all(
        &self,
        seqs: &[MotionSequence],
    ) -> Result<Vec<MotionSequence>, DatasetError> {
        seqs.iter().map(|s| self.normalize(s)).collect()
    }

    pub fn denormalize_all(
        &self,
        seqs: &[MotionSequence],
    ) -> Result<Vec<MotionSequence>, DatasetError> {
        seqs.iter().map(|s| self.denormalize(s)).collect()
    }

    /// Key-value text; floats use the shortest round-tripping form.
    pub fn to_text(&self) -> String {
        let mut out = format!("features = {}\n", self.features());
        for (i, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            writeln!(out, "mean.{i} = {m:?}").expect("string write");
            writeln!(out, "std.{i} = {s:?}").expect("string write");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let bad = |msg: String| DatasetError::Malformed {
            path: "stats".into(),
            reason: msg,
        };
        let mut features = None;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "features" {
                let n: usize = v
                    .parse()
                    .map_err(|_| bad(format!("bad feature count `{v}`")))?;
                features = Some(n);
                mean = vec![f64::NAN; n];
                std = vec![f64::NAN; n];
                continue;
            }
            let n = features.ok_or_else(|| bad("`features` must come first".into()))?;
            let (kind, idx) = k
                .split_once('.')
                .ok_or_else(|| bad(format!("unknown key `{k}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| bad(format!("bad index in `{k}`")))?;
            if idx >= n {
                return Err(bad(format!("index {idx} out of range")));
            }
            let val: f64 = v.parse().map_err(|_| bad(format!("bad value `{v}`")))?;
            match kind {
                "mean" => mean[idx] = val,
                "std" => std[idx] = val,
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        if features.is_none() {
            return Err(bad("missing `features`".into()));
        }
        if mean.iter().any(|v| !v.is_finite()) || std.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(bad("missing, non-finite or non-positive entries".into()));
        }
        Ok(Self { mean, std })
    }
}
