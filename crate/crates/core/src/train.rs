//! Epoch-based training loops. Every epoch draws its randomness from a
//! stream keyed by `(seed, epoch)`, so a run resumed from a checkpoint
//! continues exactly as an uninterrupted one would.

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, Graph, Tensor};
use crate::dataset::MotionSequence;
use crate::denoiser::{train_step, Condition, DenoiserModel, TrainOptions};
use crate::diffusion::{LossWeightConfig, NoiseSchedule};
use crate::nn::Mode;
use crate::rng::{self, streams};
use crate::vae::{LatentCode, LatentStats, VaeLossWeights, VaeModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weights: VaeLossWeights,
}

impl Default for VaeTraining {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 32,
            lr: 2e-3,
            weights: VaeLossWeights::default(),
        }
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    pub kl: f64,
}

fn check_batch(batch: usize, lr: f64) -> Result<()> {
    if batch == 0 || !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!(
            "batch {batch} and lr {lr} must be positive"
        )));
    }
    Ok(())
}

/// Runs the given epochs of VAE training on (normalized) frame tensors.
pub fn train_vae(
    vae: &mut VaeModel,
    data: &[Tensor],
    cfg: &VaeTraining,
    epochs: Range<usize>,
    seed: u64,
) -> Result<Vec<VaeEpoch>> {
    check_batch(cfg.batch, cfg.lr)?;
    if data.is_empty() {
        return Err(Error::Invalid("no training sequences".into()));
    }
    let opt = AdamW::with_lr(cfg.lr);
    let spec = vae.latent_spec();
    let dropout = vae.config().dropout;
    let mut curve = Vec::with_capacity(epochs.len());
    for epoch in epochs {
        let mut rng = rng::stream(seed, &[streams::TRAIN, 10, epoch as u64]);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss, mut mse, mut kl) = (0.0, 0.0, 0.0);
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let seqs: Vec<&Tensor> = chunk.iter().map(|&i| &data[i]).collect();
            let eps: Vec<Tensor> = chunk
                .iter()
                .map(|_| rng::gaussian(&mut rng, &spec.shape()))
                .collect();
            let mut drop_rng = rng::stream(seed, &[streams::TRAIN, 11, epoch as u64, batches]);
            let mut mode = if dropout > 0.0 {
                Mode::Train {
                    dropout,
                    rng: &mut drop_rng,
                }
            } else {
                Mode::Eval
            };
            let grads = {
                let mut g = Graph::new(vae.store());
                let nodes = vae.loss_nodes(&mut g, &seqs, &eps, cfg.weights, &mut mode)?;
                loss += g.value(nodes.total).item();
                mse += g.value(nodes.mse).item();
                kl += g.value(nodes.kl).item();
                g.backward(nodes.total)?
            };
            opt.step(vae.store_mut(), &grads)?;
            batches += 1;
        }
        let n = batches as f64;
        curve.push(VaeEpoch {
            epoch,
            loss: loss / n,
            mse: mse / n,
            kl: kl / n,
        });
    }
    Ok(curve)
}

/// Posterior means of `data`, in order.
pub fn encode_means(vae: &VaeModel, data: &[Tensor]) -> Result<Vec<LatentCode>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        out.extend(vae.encode_batch(&refs)?.into_iter().map(|p| p.mean));
    }
    Ok(out)
}

/// Fits the latent standardization on training posterior means.
pub fn fit_latent_stats(vae: &VaeModel, data: &[Tensor]) -> Result<LatentStats> {
    LatentStats::fit(&encode_means(vae, data)?)
        .ok_or_else(|| Error::Invalid("cannot fit latent statistics on an empty set".into()))
}

/// Standardized posterior means paired with each sequence's label.
pub fn latent_dataset(
    vae: &VaeModel,
    seqs: &[MotionSequence],
) -> Result<Vec<(LatentCode, Condition)>> {
    let frames: Vec<Tensor> = seqs.iter().map(|s| s.frames.clone()).collect();
    let stats = vae.latent_stats_or_identity();
    let means = encode_means(vae, &frames)?;
    means
        .into_iter()
        .zip(seqs)
        .map(|(m, s)| {
            let label = s.label.ok_or_else(|| {
                Error::Invalid("denoiser training needs labelled sequences".into())
            })?;
            Ok((stats.normalize(&m), Condition::Label(label)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub drop_prob: f64,
    pub loss_weight: Option<LossWeightConfig>,
}

impl Default for DenoiserTraining {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 32,
            lr: 1e-3,
            drop_prob: 0.1,
            loss_weight: None,
        }
    }
}

/// Mean losses of one denoiser over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserEpoch {
    pub epoch: usize,
    pub denoiser: usize,
    pub loss: f64,
    pub unweighted: f64,
}

/// Trains a set of denoisers jointly: each minibatch is shown to every
/// denoiser, with timesteps drawn from that denoiser's own range.
pub fn train_denoisers(
    models: &mut [DenoiserModel],
    data: &[(LatentCode, Condition)],
    sched: &NoiseSchedule,
    cfg: &DenoiserTraining,
    epochs: Range<usize>,
    seed: u64,
) -> Result<Vec<DenoiserEpoch>> {
    check_batch(cfg.batch, cfg.lr)?;
    if data.is_empty() {
        return Err(Error::Invalid("no training latents".into()));
    }
    let opt = AdamW::with_lr(cfg.lr);
    let mut curve = Vec::with_capacity(epochs.len() * models.len());
    for epoch in epochs {
        let mut rng = rng::stream(seed, &[streams::TRAIN, 20, epoch as u64]);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = vec![(0.0, 0.0); models.len()];
        let mut batches = 0u64;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<(LatentCode, Condition)> =
                chunk.iter().map(|&i| data[i].clone()).collect();
            for (i, model) in models.iter_mut().enumerate() {
                let opts = TrainOptions {
                    weight: cfg.loss_weight,
                    drop_prob: cfg.drop_prob,
                    t_range: model.t_range(),
                };
                let step_seed =
                    rng::derive_seed(seed, &[streams::TRAIN, 21, epoch as u64, batches, i as u64]);
                let r = train_step(model, &opt, &batch, sched, &opts, step_seed)?;
                sums[i].0 += r.loss;
                sums[i].1 += r.unweighted_loss;
            }
            batches += 1;
        }
        for (i, (l, u)) in sums.into_iter().enumerate() {
            curve.push(DenoiserEpoch {
                epoch,
                denoiser: i,
                loss: l / batches as f64,
                unweighted: u / batches as f64,
            });
        }
    }
    Ok(curve)
}

pub fn vae_curve_csv(curve: &[VaeEpoch]) -> String {
    let mut out = String::from("epoch,loss,mse,kl\n");
    for e in curve {
        out.push_str(&format!(
            "{},{:?},{:?},{:?}\n",
            e.epoch, e.loss, e.mse, e.kl
        ));
    }
    out
}

pub fn denoiser_curve_csv(curve: &[DenoiserEpoch]) -> String {
    let mut out = String::from("epoch,denoiser,loss,unweighted_loss\n");
    for e in curve {
        out.push_str(&format!(
            "{},{},{:?},{:?}\n",
            e.epoch, e.denoiser, e.loss, e.unweighted
        ));
    }
    out
}
