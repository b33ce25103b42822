use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{digest, DatasetError, MotionSequence};
use crate::rng::{self, streams};

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<MotionSequence>,
    pub val: Vec<MotionSequence>,
    pub test: Vec<MotionSequence>,
}

fn digest_seed(d: &str) -> u64 {
    u64::from_str_radix(&d[..16], 16).expect("hex digest")
}

/// Label-stratified split into train/val/test by the `val` and `test`
/// fractions. The permutation is a function of the dataset digest and
/// `seed` only, and every sequence lands in exactly one split.
pub fn split_dataset(
    seqs: &[MotionSequence],
    val: f64,
    test: f64,
    seed: u64,
) -> Result<Splits, DatasetError> {
    if !(0.0..1.0).contains(&val) || !(0.0..1.0).contains(&test) || val + test >= 1.0 {
        return Err(DatasetError::Spec(format!(
            "split fractions val={val}, test={test} must be non-negative and sum below 1"
        )));
    }
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        groups.entry(s.label).or_default().push(i);
    }
    let mut rng = rng::stream(seed, &[streams::SPLIT, digest_seed(&digest(seqs))]);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = (val * n as f64).round() as usize;
        let n_test = ((test * n as f64).round() as usize).min(n - n_val);
        va.extend_from_slice(&idx[..n_val]);
        te.extend_from_slice(&idx[n_val..n_val + n_test]);
        tr.extend_from_slice(&idx[n_val + n_test..]);
    }
    for v in [&mut tr, &mut va, &mut te] {
        v.sort_unstable();
    }
    let pick = |v: &[usize]| v.iter().map(|&i| seqs[i].clone()).collect();
    Ok(Splits {
        train: pick(&tr),
        val: pick(&va),
        test: pick(&te),
    })
}
