//! Evaluation suite: Gaussian feature statistics with the Fréchet distance,
//! retrieval precision, matched-pair distance, diversity and multimodality,
//! plus the contrastive feature extractors they run on.

mod evaluator;
mod gaussian;

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};

use crate::rng::{self, streams};

pub use evaluator::{
    train_evaluator, Evaluator, EvaluatorConfig, EvaluatorReport, EvaluatorTraining,
};
pub use gaussian::{fid, sqrtm_product, GaussianStats, SqrtmMethod, SqrtmResult};

/// Candidate pool size for retrieval: one matched plus 31 mismatched.
pub const R_PRECISION_POOL: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("feature dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("need at least {needed} {what}, have {have}")]
    Insufficient {
        what: &'static str,
        needed: usize,
        have: usize,
    },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("covariance is not symmetric positive semi-definite: {0}")]
    NotPsd(String),
    #[error("matrix square root did not converge, relative residual {residual:e}")]
    Sqrtm { residual: f64 },
    #[error("evaluator needs at least 2 condition classes, found {0}")]
    SingleClass(usize),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

/// Motion feature and the feature of the condition it was generated for.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub motion: Vec<f64>,
    pub condition: Vec<f64>,
}

impl FeaturePair {
    pub fn new(motion: Vec<f64>, condition: Vec<f64>) -> Result<Self, MetricsError> {
        if motion.len() != condition.len() {
            return Err(MetricsError::Dimension(motion.len(), condition.len()));
        }
        if motion.iter().chain(&condition).any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        Ok(Self { motion, condition })
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RPrecision {
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
}

/// Retrieval pool for one query: candidate condition ids in ranking order
/// of ties, with the matched id at `matched`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalPool {
    pub candidates: Vec<usize>,
    pub matched: usize,
}

/// Draws a pool per query: the query's condition plus `pool - 1` distinct
/// other conditions, with the matched entry at a random position.
pub fn draw_pools(
    condition_ids: &[usize],
    pool: usize,
    seed: u64,
) -> Result<Vec<RetrievalPool>, MetricsError> {
    let mut distinct: Vec<usize> = condition_ids.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < pool || pool == 0 {
        return Err(MetricsError::Insufficient {
            what: "distinct conditions for the retrieval pool",
            needed: pool.max(1),
            have: distinct.len(),
        });
    }
    let mut rng = rng::stream(seed, &[streams::METRICS, 1]);
    Ok(condition_ids
        .iter()
        .map(|&c| {
            let others: Vec<usize> = distinct.iter().copied().filter(|&d| d != c).collect();
            let mut candidates: Vec<usize> = others
                .choose_multiple(&mut rng, pool - 1)
                .copied()
                .collect();
            let matched = rand::Rng::random_range(&mut rng, 0..pool);
            candidates.insert(matched, c);
            RetrievalPool {
                candidates,
                matched,
            }
        })
        .collect())
}

/// Top-1/2/3 retrieval accuracy of the matched condition among the pool,
/// ranked by Euclidean distance to the motion feature. Ties keep pool order.
/// `condition_features` maps each condition id to its feature.
pub fn r_precision_with_pools(
    motions: &[Vec<f64>],
    pools: &[RetrievalPool],
    condition_features: &BTreeMap<usize, Vec<f64>>,
) -> Result<RPrecision, MetricsError> {
    if motions.is_empty() || motions.len() != pools.len() {
        return Err(MetricsError::Insufficient {
            what: "queries with pools",
            needed: motions.len().max(1),
            have: pools.len(),
        });
    }
    let mut hits = [0usize; 3];
    for (m, pool) in motions.iter().zip(pools) {
        let dists: Vec<f64> = pool
            .candidates
            .iter()
            .map(|c| {
                let f = condition_features
                    .get(c)
                    .ok_or(MetricsError::Insufficient {
                        what: "condition features",
                        needed: c + 1,
                        have: condition_features.len(),
                    })?;
                if f.len() != m.len() {
                    return Err(MetricsError::Dimension(f.len(), m.len()));
                }
                Ok(euclidean(m, f))
            })
            .collect::<Result<_, _>>()?;
        let mut order: Vec<usize> = (0..dists.len()).collect();
        order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]));
        let rank = order
            .iter()
            .position(|&i| i == pool.matched)
            .expect("matched in pool");
        for (k, h) in hits.iter_mut().enumerate() {
            if rank <= k {
                *h += 1;
            }
        }
    }
    let n = motions.len() as f64;
    Ok(RPrecision {
        top1: hits[0] as f64 / n,
        top2: hits[1] as f64 / n,
        top3: hits[2] as f64 / n,
    })
}

/// R-precision over pairs labelled by condition id. Each condition's
/// feature is taken from its first occurrence.
pub fn r_precision(
    pairs: &[FeaturePair],
    condition_ids: &[usize],
    pool: usize,
    seed: u64,
) -> Result<RPrecision, MetricsError> {
    if pairs.len() != condition_ids.len() {
        return Err(MetricsError::Dimension(pairs.len(), condition_ids.len()));
    }
    let mut features = BTreeMap::new();
    for (p, &c) in pairs.iter().zip(condition_ids) {
        features.entry(c).or_insert_with(|| p.condition.clone());
    }
    let pools = draw_pools(condition_ids, pool, seed)?;
    let motions: Vec<Vec<f64>> = pairs.iter().map(|p| p.motion.clone()).collect();
    r_precision_with_pools(&motions, &pools, &features)
}

/// Mean distance between each motion feature and its condition feature.
pub fn mm_dist(pairs: &[FeaturePair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Insufficient {
            what: "feature pairs",
            needed: 1,
            have: 0,
        });
    }
    Ok(pairs
        .iter()
        .map(|p| euclidean(&p.motion, &p.condition))
        .sum::<f64>()
        / pairs.len() as f64)
}

/// Two disjoint index sets of size `n` drawn from `0..len`.
pub fn disjoint_indices(
    len: usize,
    n: usize,
    rng: &mut rng::StreamRng,
) -> Result<(Vec<usize>, Vec<usize>), MetricsError> {
    if n == 0 || 2 * n > len {
        return Err(MetricsError::Insufficient {
            what: "features for two disjoint subsets",
            needed: 2 * n.max(1),
            have: len,
        });
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    Ok((idx[..n].to_vec(), idx[n..2 * n].to_vec()))
}

pub fn diversity_indices(
    len: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), MetricsError> {
    disjoint_indices(len, n_pairs, &mut rng::stream(seed, &[streams::METRICS, 2]))
}

/// Mean distance between paired draws of two disjoint random subsets.
pub fn diversity(features: &[Vec<f64>], n_pairs: usize, seed: u64) -> Result<f64, MetricsError> {
    let (a, b) = diversity_indices(features.len(), n_pairs, seed)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(&i, &j)| euclidean(&features[i], &features[j]))
        .sum::<f64>()
        / n_pairs as f64)
}

pub fn mmodality_indices(
    condition: usize,
    len: usize,
    m: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), MetricsError> {
    disjoint_indices(
        len,
        m,
        &mut rng::stream(seed, &[streams::METRICS, 3, condition as u64]),
    )
}

/// Per condition, the mean distance between two disjoint size-`m` subsets
/// of its generations; averaged over conditions.
pub fn mmodality(
    per_condition: &BTreeMap<usize, Vec<Vec<f64>>>,
    m: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    if per_condition.is_empty() {
        return Err(MetricsError::Insufficient {
            what: "conditions",
            needed: 1,
            have: 0,
        });
    }
    let mut total = 0.0;
    for (&c, feats) in per_condition {
        let (a, b) = mmodality_indices(c, feats.len(), m, seed)?;
        total += a
            .iter()
            .zip(&b)
            .map(|(&i, &j)| euclidean(&feats[i], &feats[j]))
            .sum::<f64>()
            / m as f64;
    }
    Ok(total / per_condition.len() as f64)
}
