use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{euclidean, FeaturePair, MetricsError};
use crate::autodiff::{AdamW, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::dataset::{DatasetStats, MotionSequence};
use crate::nn::{Block, Embedding, LayerNorm, Linear, Mixer, Mode};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub features: usize,
    pub max_len: usize,
    pub num_labels: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub pool_tokens: usize,
    pub feature_dim: usize,
    pub margin: f64,
    pub negatives: usize,
}

impl EvaluatorConfig {
    pub fn new(features: usize, max_len: usize, num_labels: usize) -> Self {
        Self {
            features,
            max_len,
            num_labels,
            hidden: 32,
            blocks: 1,
            pool_tokens: 4,
            feature_dim: 32,
            margin: 4.0,
            negatives: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for EvaluatorTraining {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 32,
            lr: 2e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorReport {
    /// Mean training loss per epoch.
    pub curve: Vec<f64>,
    /// Median over validation items of (mean mismatched distance − matched
    /// distance).
    pub val_margin: f64,
}

/// Motion encoder (sequence to `feature_dim` vector) paired with a
/// condition encoder (label embedding), trained so that matched pairs are
/// close and mismatched pairs are at least `margin` apart.
#[derive(Debug, Clone)]
pub struct Evaluator {
    config: EvaluatorConfig,
    stats: DatasetStats,
    store: ParamStore,
    input: Linear,
    pos: ParamId,
    frames: Vec<Block>,
    pool: Mixer,
    tokens: Vec<Block>,
    ln: LayerNorm,
    head: Linear,
    cond: Embedding,
}

impl Evaluator {
    pub fn new(
        config: EvaluatorConfig,
        stats: DatasetStats,
        seed: u64,
    ) -> Result<Self, MetricsError> {
        if stats.features() != config.features {
            return Err(MetricsError::Dimension(config.features, stats.features()));
        }
        let mut rng = rng::stream(seed, &[streams::INIT, 7]);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let h = config.hidden;
        let input = Linear::new(s, "eval.in", config.features, h, 1.0, rng);
        let pos = s.add(
            "eval.pos",
            rng::gaussian(rng, &[config.max_len, h]).scale(0.1),
        );
        let frames = (0..config.blocks)
            .map(|i| Block::new(s, &format!("eval.frame{i}"), h, None, None, rng))
            .collect();
        let pool = Mixer::new(s, "eval.pool", config.pool_tokens, config.max_len, rng);
        let tokens = (0..config.blocks)
            .map(|i| {
                Block::new(
                    s,
                    &format!("eval.tok{i}"),
                    h,
                    Some(config.pool_tokens),
                    None,
                    rng,
                )
            })
            .collect();
        let ln = LayerNorm::new(s, "eval.ln", h);
        let head = Linear::new(
            s,
            "eval.head",
            config.pool_tokens * h,
            config.feature_dim,
            1.0,
            rng,
        );
        let cond = Embedding::new(s, "eval.cond", config.num_labels, config.feature_dim, rng);
        Ok(Self {
            config,
            stats,
            store,
            input,
            pos,
            frames,
            pool,
            tokens,
            ln,
            head,
            cond,
        })
    }

    pub fn config(&self) -> &EvaluatorConfig {
        &self.config
    }

    pub fn stats(&self) -> &DatasetStats {
        &self.stats
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn motion_nodes(
        &self,
        g: &mut Graph,
        seqs: &[&MotionSequence],
    ) -> Result<NodeId, MetricsError> {
        let n = self.config.max_len;
        let j = self.config.features;
        let h = self.config.hidden;
        let b = seqs.len();
        let mut x = vec![0.0; b * n * j];
        let mut mask = vec![0.0; b * n * h];
        for (i, s) in seqs.iter().enumerate() {
            let s = self.stats.normalize(s)?;
            let len = s.len().min(n);
            x[i * n * j..i * n * j + len * j].copy_from_slice(&s.frames.data()[..len * j]);
            mask[i * n * h..i * n * h + len * h].fill(1.0);
        }
        let x = g.input(Tensor::new(vec![b, n, j], x)?)?;
        let mask = g.input(Tensor::new(vec![b, n, h], mask)?)?;
        let mut mode = Mode::Eval;
        let mut hid = self.input.forward(g, x)?;
        let pos = g.param(self.pos)?;
        hid = g.add_suffix(hid, pos)?;
        hid = g.mul(hid, mask)?;
        for block in &self.frames {
            hid = block.forward(g, hid, None, &mut mode)?;
            hid = g.mul(hid, mask)?;
        }
        let mut t = self.pool.forward(g, hid)?;
        for block in &self.tokens {
            t = block.forward(g, t, None, &mut mode)?;
        }
        let t = self.ln.forward(g, t)?;
        let flat = g.reshape(t, vec![b, self.config.pool_tokens * h])?;
        Ok(self.head.forward(g, flat)?)
    }

    /// Motion features in input order, batched internally.
    pub fn motion_features(&self, seqs: &[MotionSequence]) -> Result<Vec<Vec<f64>>, MetricsError> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let refs: Vec<&MotionSequence> = chunk.iter().collect();
            let mut g = Graph::new(&self.store);
            let f = self.motion_nodes(&mut g, &refs)?;
            out.extend(
                g.value(f)
                    .data()
                    .chunks(self.config.feature_dim)
                    .map(<[f64]>::to_vec),
            );
        }
        Ok(out)
    }

    pub fn condition_feature(&self, label: usize) -> Result<Vec<f64>, MetricsError> {
        if label >= self.config.num_labels {
            return Err(MetricsError::Insufficient {
                what: "condition labels",
                needed: label + 1,
                have: self.config.num_labels,
            });
        }
        let d = self.config.feature_dim;
        Ok(self.store.value(self.cond.table).data()[label * d..(label + 1) * d].to_vec())
    }

    /// Feature pairs for labelled sequences.
    pub fn feature_pairs(&self, seqs: &[MotionSequence]) -> Result<Vec<FeaturePair>, MetricsError> {
        let motions = self.motion_features(seqs)?;
        motions
            .into_iter()
            .zip(seqs)
            .map(|(m, s)| {
                let label = s.label.ok_or(MetricsError::Insufficient {
                    what: "labelled sequences",
                    needed: seqs.len(),
                    have: 0,
                })?;
                FeaturePair::new(m, self.condition_feature(label)?)
            })
            .collect()
    }

    /// Median over items of the mean mismatched-condition distance minus
    /// the matched distance.
    pub fn margin(&self, seqs: &[MotionSequence]) -> Result<f64, MetricsError> {
        let motions = self.motion_features(seqs)?;
        let conds: Vec<Vec<f64>> = (0..self.config.num_labels)
            .map(|l| self.condition_feature(l))
            .collect::<Result<_, _>>()?;
        let mut margins: Vec<f64> = motions
            .iter()
            .zip(seqs)
            .filter_map(|(m, s)| s.label.map(|l| (m, l)))
            .map(|(m, l)| {
                let matched = euclidean(m, &conds[l]);
                let mis: f64 = conds
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != l)
                    .map(|(_, c)| euclidean(m, c))
                    .sum::<f64>()
                    / (conds.len() - 1) as f64;
                mis - matched
            })
            .collect();
        if margins.is_empty() {
            return Err(MetricsError::Insufficient {
                what: "labelled validation sequences",
                needed: 1,
                have: 0,
            });
        }
        margins.sort_by(f64::total_cmp);
        Ok(margins[margins.len() / 2])
    }

    /// `mean(d_pos²) + mean over negatives of mean(relu(margin − d_neg)²)`.
    fn loss_nodes(
        &self,
        g: &mut Graph,
        seqs: &[&MotionSequence],
        labels: &[usize],
        negatives: &[Vec<usize>],
    ) -> Result<NodeId, MetricsError> {
        let m = self.motion_nodes(g, seqs)?;
        let table = g.param(self.cond.table)?;
        let pos = g.embedding(table, labels)?;
        let d = g.sub(m, pos)?;
        let d = g.square(d)?;
        let d = g.sum_last(d)?;
        let mut loss = g.mean(d)?;
        let w = 1.0 / negatives.len().max(1) as f64;
        for neg in negatives {
            let c = g.embedding(table, neg)?;
            let d = g.sub(m, c)?;
            let d = g.square(d)?;
            let d = g.sum_last(d)?;
            let d = g.add_const(d, 1e-9)?;
            let d = g.sqrt(d)?;
            let gap = g.scale(d, -1.0)?;
            let gap = g.add_const(gap, self.config.margin)?;
            let gap = g.relu(gap)?;
            let gap = g.square(gap)?;
            let term = g.mean(gap)?;
            let term = g.scale(term, w)?;
            loss = g.add(loss, term)?;
        }
        Ok(loss)
    }
}

/// Trains the paired encoders on `train` and reports the median margin on
/// `val`. Requires at least two distinct labels.
pub fn train_evaluator(
    train: &[MotionSequence],
    val: &[MotionSequence],
    config: EvaluatorConfig,
    training: EvaluatorTraining,
    seed: u64,
) -> Result<(Evaluator, EvaluatorReport), MetricsError> {
    let mut labels: Vec<usize> = train.iter().filter_map(|s| s.label).collect();
    if labels.len() != train.len() {
        return Err(MetricsError::Insufficient {
            what: "labelled training sequences",
            needed: train.len(),
            have: labels.len(),
        });
    }
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(MetricsError::SingleClass(labels.len()));
    }
    let stats = DatasetStats::fit(train)?;
    let mut model = Evaluator::new(config, stats, seed)?;
    let opt = AdamW::with_lr(training.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(training.epochs);
    for epoch in 0..training.epochs {
        let mut rng = rng::stream(seed, &[streams::TRAIN, 7, epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(training.batch.max(1)) {
            let seqs: Vec<&MotionSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let ls: Vec<usize> = seqs.iter().map(|s| s.label.expect("checked")).collect();
            let negatives: Vec<Vec<usize>> = (0..config.negatives)
                .map(|_| {
                    ls.iter()
                        .map(|&l| loop {
                            let c = labels[rng.random_range(0..labels.len())];
                            if c != l {
                                break c;
                            }
                        })
                        .collect()
                })
                .collect();
            let grads = {
                let mut g = Graph::new(&model.store);
                let loss = model.loss_nodes(&mut g, &seqs, &ls, &negatives)?;
                total += g.value(loss).item();
                g.backward(loss)?
            };
            opt.step(&mut model.store, &grads)?;
            batches += 1;
        }
        curve.push(total / batches.max(1) as f64);
    }
    let val_margin = model.margin(if val.is_empty() { train } else { val })?;
    Ok((model, EvaluatorReport { curve, val_margin }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    fn small(spec: &SyntheticSpec) -> EvaluatorConfig {
        EvaluatorConfig {
            hidden: 16,
            feature_dim: 8,
            ..EvaluatorConfig::new(8, spec.max_len, spec.classes())
        }
    }

    #[test]
    fn single_class_is_an_error() {
        let spec = SyntheticSpec {
            families: 1,
            variants: 1,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec, 6, 0).unwrap();
        let err = train_evaluator(&data, &[], small(&spec), EvaluatorTraining::default(), 0);
        assert!(matches!(err, Err(MetricsError::SingleClass(1))));
    }

    #[test]
    fn learns_positive_margin_reproducibly() {
        let spec = SyntheticSpec {
            families: 4,
            variants: 1,
            ..SyntheticSpec::default()
        };
        let train = generate_synthetic(&spec, 48, 1).unwrap();
        let val = generate_synthetic(&spec, 16, 2).unwrap();
        let training = EvaluatorTraining {
            epochs: 8,
            batch: 16,
            lr: 3e-3,
        };
        let (a, ra) = train_evaluator(&train, &val, small(&spec), training, 3).unwrap();
        let (b, rb) = train_evaluator(&train, &val, small(&spec), training, 3).unwrap();
        assert_eq!(a.store(), b.store());
        assert_eq!(ra, rb);
        assert!(ra.val_margin > 0.0, "{ra:?}");
        assert!(ra.curve.last().unwrap() < ra.curve.first().unwrap());
    }
}
