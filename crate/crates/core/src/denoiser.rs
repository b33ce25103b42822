//! Conditional noise predictor with classifier-free guidance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AutodiffError, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::diffusion::{DiffusionError, LossWeightConfig, NoiseSchedule};
use crate::nn::{timestep_features, Block, Embedding, LayerNorm, Linear, Mode};
use crate::rng::{self, streams};
use crate::vae::{LatentCode, LatentSpec, VaeError};

#[derive(Debug, thiserror::Error)]
pub enum DenoiserError {
    #[error("latent {found} does not match the denoiser's space {expected}")]
    LatentSpace {
        expected: LatentSpec,
        found: LatentSpec,
    },
    #[error("timestep {t} outside 1..={steps}")]
    Timestep { t: usize, steps: usize },
    #[error("label {label} outside vocabulary of {vocab}")]
    Label { label: usize, vocab: usize },
    #[error("guidance needs a real condition, got the null token")]
    NullGuidance,
    #[error("invalid timestep range {0}")]
    Range(String),
    #[error("invalid denoiser configuration: {0}")]
    Config(String),
    #[error("empty training batch")]
    EmptyBatch,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Vae(#[from] VaeError),
}

/// Conditioning input: a label from the learned embedding table or the
/// reserved null token used for unconditional prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Label(usize),
    Null,
}

impl Condition {
    pub fn label(self) -> Option<usize> {
        match self {
            Condition::Label(l) => Some(l),
            Condition::Null => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: 7.5 }
    }
}

/// Inclusive timestep interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimestepRange {
    pub start: usize,
    pub end: usize,
}

impl TimestepRange {
    pub fn new(start: usize, end: usize) -> Result<Self, DenoiserError> {
        if start == 0 || start > end {
            return Err(DenoiserError::Range(format!("[{start}, {end}]")));
        }
        Ok(Self { start, end })
    }

    pub fn full(steps: usize) -> Self {
        Self {
            start: 1,
            end: steps,
        }
    }

    pub fn contains(self, t: usize) -> bool {
        (self.start..=self.end).contains(&t)
    }

    pub fn contains_range(self, other: TimestepRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn len(self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

impl std::fmt::Display for TimestepRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent: LatentSpec,
    pub num_labels: usize,
    /// Total diffusion steps `T` of the schedule this model serves.
    pub steps: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_features: usize,
    #[serde(default)]
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    t_range: TimestepRange,
    store: ParamStore,
    in_proj: Linear,
    pos: ParamId,
    labels: Embedding,
    time_fc1: Linear,
    time_fc2: Linear,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    out_proj: Linear,
}

impl DenoiserModel {
    pub fn new(
        config: DenoiserConfig,
        t_range: TimestepRange,
        seed: u64,
    ) -> Result<Self, DenoiserError> {
        if config.latent.is_empty() || config.hidden == 0 || config.num_labels == 0 {
            return Err(DenoiserError::Config(format!("{config:?}")));
        }
        if t_range.end > config.steps {
            return Err(DenoiserError::Range(format!(
                "{t_range} exceeds {} steps",
                config.steps
            )));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(DenoiserError::Config(format!("dropout {}", config.dropout)));
        }
        let mut rng = rng::stream(seed, &[streams::INIT]);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let h = config.hidden;
        let k = config.latent.tokens;
        let in_proj = Linear::new(s, "in", config.latent.channels, h, 1.0, rng);
        let pos = s.add("pos", rng::gaussian(rng, &[k, h]).scale(0.1));
        // One extra row for the null token.
        let labels = Embedding::new(s, "labels", config.num_labels + 1, h, rng);
        let time_fc1 = Linear::new(s, "time.fc1", config.time_features, h, 1.0, rng);
        let time_fc2 = Linear::new(s, "time.fc2", h, h, 1.0, rng);
        let blocks = (0..config.blocks)
            .map(|i| Block::new(s, &format!("block{i}"), h, Some(k), Some(h), rng))
            .collect();
        let ln_out = LayerNorm::new(s, "out.ln", h);
        let out_proj = Linear::new(s, "out", h, config.latent.channels, 0.5, rng);
        Ok(Self {
            config,
            t_range,
            store,
            in_proj,
            pos,
            labels,
            time_fc1,
            time_fc2,
            blocks,
            ln_out,
            out_proj,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn latent_spec(&self) -> LatentSpec {
        self.config.latent
    }

    pub fn t_range(&self) -> TimestepRange {
        self.t_range
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn null_index(&self) -> usize {
        self.config.num_labels
    }

    fn condition_index(&self, c: Condition) -> Result<usize, DenoiserError> {
        match c {
            Condition::Null => Ok(self.null_index()),
            Condition::Label(l) if l < self.config.num_labels => Ok(l),
            Condition::Label(l) => Err(DenoiserError::Label {
                label: l,
                vocab: self.config.num_labels,
            }),
        }
    }

    fn check_t(&self, t: usize) -> Result<(), DenoiserError> {
        if t == 0 || t > self.config.steps {
            return Err(DenoiserError::Timestep {
                t,
                steps: self.config.steps,
            });
        }
        Ok(())
    }

    fn check_code(&self, z: &LatentCode) -> Result<(), DenoiserError> {
        if z.spec() != self.config.latent {
            return Err(DenoiserError::LatentSpace {
                expected: self.config.latent,
                found: z.spec(),
            });
        }
        Ok(())
    }

    /// Noise-prediction graph for a `[B, K, D]` input node.
    pub fn eps_nodes(
        &self,
        g: &mut Graph,
        z: NodeId,
        conds: &[Condition],
        ts: &[usize],
        mode: &mut Mode,
    ) -> Result<NodeId, DenoiserError> {
        let ids = conds
            .iter()
            .map(|&c| self.condition_index(c))
            .collect::<Result<Vec<_>, _>>()?;
        for &t in ts {
            self.check_t(t)?;
        }
        let f = self.config.time_features;
        let mut feats = Vec::with_capacity(ts.len() * f);
        for &t in ts {
            feats.extend(timestep_features(t, f));
        }
        let feats = g.input(Tensor::new(vec![ts.len(), f], feats)?)?;
        let temb = self.time_fc1.forward(g, feats)?;
        let temb = g.silu(temb)?;
        let temb = self.time_fc2.forward(g, temb)?;
        let lemb = self.labels.forward(g, &ids)?;
        let cond = g.add(temb, lemb)?;

        let mut x = self.in_proj.forward(g, z)?;
        let pos = g.param(self.pos)?;
        x = g.add_suffix(x, pos)?;
        x = g.add_batch(x, cond)?;
        for block in &self.blocks {
            x = block.forward(g, x, Some(cond), mode)?;
        }
        let x = self.ln_out.forward(g, x)?;
        Ok(self.out_proj.forward(g, x)?)
    }

    /// Batched `eps_theta(z_t, c, t)`.
    pub fn predict_batch(
        &self,
        items: &[(&LatentCode, Condition, usize)],
    ) -> Result<Vec<LatentCode>, DenoiserError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut zs = Vec::with_capacity(items.len());
        for (z, _, _) in items {
            self.check_code(z)?;
            zs.push(z.tensor().clone());
        }
        let conds: Vec<Condition> = items.iter().map(|i| i.1).collect();
        let ts: Vec<usize> = items.iter().map(|i| i.2).collect();
        let mut g = Graph::new(&self.store);
        let z = g.input(Tensor::stack(&zs)?)?;
        let out = self.eps_nodes(&mut g, z, &conds, &ts, &mut Mode::Eval)?;
        g.value(out)
            .unstack()
            .into_iter()
            .map(|t| Ok(LatentCode::new(self.config.latent, t)?))
            .collect()
    }

    pub fn predict_eps(
        &self,
        z_t: &LatentCode,
        c: Condition,
        t: usize,
    ) -> Result<LatentCode, DenoiserError> {
        Ok(self.predict_batch(&[(z_t, c, t)])?.remove(0))
    }

    /// Classifier-free guided prediction
    /// `eps_null + g * (eps_cond - eps_null)`, evaluated as
    /// `g * eps_cond + (1 - g) * eps_null` so that `g = 1` and `g = 0`
    /// reproduce the conditional and unconditional predictions exactly.
    pub fn guided_eps(
        &self,
        z_t: &LatentCode,
        c: Condition,
        t: usize,
        cfg: GuidanceConfig,
    ) -> Result<LatentCode, DenoiserError> {
        if c == Condition::Null {
            return Err(DenoiserError::NullGuidance);
        }
        let cond = self.predict_eps(z_t, c, t)?;
        let uncond = self.predict_eps(z_t, Condition::Null, t)?;
        Ok(combine_guidance(&cond, &uncond, cfg.scale))
    }
}

pub(crate) fn combine_guidance(cond: &LatentCode, uncond: &LatentCode, g: f64) -> LatentCode {
    // Signed zeros would otherwise break bitwise equality at the endpoints.
    if g == 1.0 {
        return cond.clone();
    }
    if g == 0.0 {
        return uncond.clone();
    }
    let data = cond
        .tensor()
        .data()
        .iter()
        .zip(uncond.tensor().data())
        .map(|(c, u)| g * c + (1.0 - g) * u)
        .collect();
    cond.with_tensor(Tensor::new(cond.tensor().shape().to_vec(), data).expect("same shape"))
}

/// Per-step training options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub weight: Option<LossWeightConfig>,
    pub drop_prob: f64,
    pub t_range: TimestepRange,
}

/// Random draws made for one training item.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub t: usize,
    pub dropped: bool,
    pub eps: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// The optimized (possibly timestep-weighted) loss.
    pub loss: f64,
    /// The same draws scored without timestep weights.
    pub unweighted_loss: f64,
    pub draws: Vec<Draw>,
}

/// Draws `t` uniformly from `range`, drops the condition with probability
/// `drop_prob`, and samples `eps ~ N(0, I)`, independently per item.
pub fn draw_training_noise(
    spec: LatentSpec,
    count: usize,
    range: TimestepRange,
    drop_prob: f64,
    seed: u64,
) -> Vec<Draw> {
    let mut rng = rng::stream(seed, &[streams::TRAIN]);
    (0..count)
        .map(|_| {
            let t = rng.random_range(range.start..=range.end);
            let dropped = rng.random::<f64>() < drop_prob;
            let eps = rng::gaussian(&mut rng, &spec.shape());
            Draw { t, dropped, eps }
        })
        .collect()
}

/// Weighted noise-prediction loss for given predictions: the batch mean of
/// `w_i * mean((eps_i - pred_i)^2)`.
pub fn noise_prediction_loss(preds: &[Tensor], eps: &[Tensor], weights: &[f64]) -> f64 {
    let b = preds.len().max(1) as f64;
    preds
        .iter()
        .zip(eps)
        .zip(weights)
        .map(|((p, e), w)| {
            let mse = p
                .data()
                .iter()
                .zip(e.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / p.len() as f64;
            w * mse
        })
        .sum::<f64>()
        / b
}

/// One optimization step on a batch of clean latents. `t` is drawn from
/// `opts.t_range`; pass [`TimestepRange::full`] for unrestricted training.
pub fn train_step(
    model: &mut DenoiserModel,
    opt: &AdamW,
    batch: &[(LatentCode, Condition)],
    sched: &NoiseSchedule,
    opts: &TrainOptions,
    seed: u64,
) -> Result<StepReport, DenoiserError> {
    if batch.is_empty() {
        return Err(DenoiserError::EmptyBatch);
    }
    if !(0.0..1.0).contains(&opts.drop_prob) {
        return Err(DenoiserError::Config(format!(
            "drop_prob {}",
            opts.drop_prob
        )));
    }
    if opts.t_range.end > sched.steps() {
        return Err(DenoiserError::Range(format!(
            "{} exceeds {} steps",
            opts.t_range,
            sched.steps()
        )));
    }
    let spec = model.latent_spec();
    let draws = draw_training_noise(spec, batch.len(), opts.t_range, opts.drop_prob, seed);
    let (grads, report) = {
        let mut g = Graph::new(&model.store);
        let mut z_t = Vec::with_capacity(batch.len());
        let mut conds = Vec::with_capacity(batch.len());
        let mut weights = Vec::with_capacity(batch.len());
        for ((z0, c), d) in batch.iter().zip(&draws) {
            model.check_code(z0)?;
            z_t.push(sched.q_sample(z0.tensor(), d.t, &d.eps)?);
            conds.push(if d.dropped { Condition::Null } else { *c });
            weights.push(match opts.weight {
                Some(cfg) => sched.loss_weight(d.t, cfg)?,
                None => 1.0,
            });
        }
        let ts: Vec<usize> = draws.iter().map(|d| d.t).collect();
        let z = g.input(Tensor::stack(&z_t)?)?;
        let mut drop_rng = rng::stream(seed, &[streams::TRAIN, 1]);
        let mut mode = if model.config.dropout > 0.0 {
            Mode::Train {
                dropout: model.config.dropout,
                rng: &mut drop_rng,
            }
        } else {
            Mode::Eval
        };
        let pred = model.eps_nodes(&mut g, z, &conds, &ts, &mut mode)?;
        let eps_all: Vec<Tensor> = draws.iter().map(|d| d.eps.clone()).collect();
        let target = g.input(Tensor::stack(&eps_all)?)?;
        let per_item = spec.len();
        let scale = 1.0 / (batch.len() * per_item) as f64;
        let w = Tensor::from_fn(g.shape(pred), |i| weights[i / per_item] * scale);
        let w = g.input(w)?;
        let diff = g.sub(pred, target)?;
        let sq = g.square(diff)?;
        let weighted = g.mul(sq, w)?;
        let loss = g.sum(weighted)?;
        let loss_value = g.value(loss).item();
        let unweighted_loss = g.value(sq).sum() * scale;
        let grads = g.backward(loss)?;
        (
            grads,
            StepReport {
                loss: loss_value,
                unweighted_loss,
                draws,
            },
        )
    };
    opt.step(&mut model.store, &grads)?;
    Ok(report)
}
