//! Sequence VAE: an `N x J` sequence is encoded into a diagonal Gaussian
//! posterior over a `K x D` latent and decoded back to a requested length.
//!
//! Sequences shorter than `max_len` are zero-padded and masked; the frame
//! axis is resampled to `K` tokens by a learned pooling matrix and back by a
//! learned expansion matrix, so the latent does not carry the length.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::nn::{Block, LayerNorm, Linear, Mixer, Mode};
use crate::rng::{self, streams, StreamRng};

#[derive(Debug, thiserror::Error)]
pub enum VaeError {
    #[error("sequence has {found} features, model expects {expected}")]
    FeatureWidth { expected: usize, found: usize },
    #[error("sequence length {len} outside 1..={max}")]
    Length { len: usize, max: usize },
    #[error("latent shape {found:?} does not match {expected:?}")]
    LatentShape {
        expected: LatentSpec,
        found: Vec<usize>,
    },
    #[error("invalid VAE configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Token count `K` and channel width `D` of a latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    pub tokens: usize,
    pub channels: usize,
}

impl LatentSpec {
    pub fn new(tokens: usize, channels: usize) -> Self {
        Self { tokens, channels }
    }

    pub fn shape(self) -> [usize; 2] {
        [self.tokens, self.channels]
    }

    pub fn len(self) -> usize {
        self.tokens * self.channels
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for LatentSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.tokens, self.channels)
    }
}

/// A `K x D` code tagged with the latent space it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    spec: LatentSpec,
    tensor: Tensor,
}

impl LatentCode {
    pub fn new(spec: LatentSpec, tensor: Tensor) -> Result<Self, VaeError> {
        if tensor.shape() != spec.shape() {
            return Err(VaeError::LatentShape {
                expected: spec,
                found: tensor.shape().to_vec(),
            });
        }
        Ok(Self { spec, tensor })
    }

    pub fn zeros(spec: LatentSpec) -> Self {
        Self {
            spec,
            tensor: Tensor::zeros(&spec.shape()),
        }
    }

    pub fn gaussian(spec: LatentSpec, rng: &mut StreamRng) -> Self {
        Self {
            spec,
            tensor: rng::gaussian(rng, &spec.shape()),
        }
    }

    pub fn spec(&self) -> LatentSpec {
        self.spec
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// Replaces the values, keeping the space; panics on a shape change.
    pub fn with_tensor(&self, tensor: Tensor) -> Self {
        assert_eq!(tensor.shape(), self.spec.shape(), "latent shape changed");
        Self {
            spec: self.spec,
            tensor,
        }
    }
}

/// Diagonal Gaussian posterior. A `log_variance` of negative infinity marks
/// a deterministic posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPosterior {
    pub mean: LatentCode,
    pub log_variance: LatentCode,
}

impl EncodedPosterior {
    pub fn deterministic(mean: LatentCode) -> Self {
        let lv = mean.tensor.map(|_| f64::NEG_INFINITY);
        Self {
            log_variance: mean.with_tensor(lv),
            mean,
        }
    }

    /// Reparameterized draw `mean + exp(log_variance / 2) * eps`.
    pub fn sample_with(&self, eps: &Tensor) -> LatentCode {
        let data = self
            .mean
            .tensor
            .data()
            .iter()
            .zip(self.log_variance.tensor.data())
            .zip(eps.data())
            .map(|((m, lv), e)| {
                let std = (0.5 * lv).exp();
                if std == 0.0 {
                    *m
                } else {
                    m + std * e
                }
            })
            .collect();
        self.mean
            .with_tensor(Tensor::new(self.mean.tensor.shape().to_vec(), data).expect("same shape"))
    }

    pub fn sample(&self, rng: &mut StreamRng) -> LatentCode {
        let eps = rng::gaussian(rng, &self.mean.spec.shape());
        self.sample_with(&eps)
    }

    /// Mean over elements of `KL(q || N(0, I))`.
    pub fn kl(&self) -> f64 {
        let n = self.mean.spec.len() as f64;
        self.mean
            .tensor
            .data()
            .iter()
            .zip(self.log_variance.tensor.data())
            .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
            .sum::<f64>()
            / n
    }
}

/// Per-element standardization of latent codes, fitted on training-set
/// posterior means so diffusion runs on roughly unit-scale latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Tensor,
    pub std: Tensor,
}

impl LatentStats {
    pub fn fit(codes: &[LatentCode]) -> Option<Self> {
        let first = codes.first()?;
        let shape = first.tensor.shape().to_vec();
        let n = codes.len() as f64;
        let len = first.tensor.len();
        let mut mean = vec![0.0; len];
        for c in codes {
            for (m, v) in mean.iter_mut().zip(c.tensor.data()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; len];
        for c in codes {
            for ((s, v), m) in var.iter_mut().zip(c.tensor.data()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
        Some(Self {
            mean: Tensor::new(shape.clone(), mean).ok()?,
            std: Tensor::new(shape, std).ok()?,
        })
    }

    pub fn identity(spec: LatentSpec) -> Self {
        Self {
            mean: Tensor::zeros(&spec.shape()),
            std: Tensor::full(&spec.shape(), 1.0),
        }
    }

    pub fn normalize(&self, code: &LatentCode) -> LatentCode {
        let data = code
            .tensor
            .data()
            .iter()
            .zip(self.mean.data())
            .zip(self.std.data())
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        code.with_tensor(Tensor::new(code.tensor.shape().to_vec(), data).expect("same shape"))
    }

    pub fn denormalize(&self, code: &LatentCode) -> LatentCode {
        let data = code
            .tensor
            .data()
            .iter()
            .zip(self.mean.data())
            .zip(self.std.data())
            .map(|((v, m), s)| v * s + m)
            .collect();
        code.with_tensor(Tensor::new(code.tensor.shape().to_vec(), data).expect("same shape"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    /// Per-frame feature width `J`.
    pub features: usize,
    pub max_len: usize,
    pub latent: LatentSpec,
    pub hidden: usize,
    pub blocks: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl VaeConfig {
    pub fn validate(&self) -> Result<(), VaeError> {
        if self.features == 0 || self.max_len == 0 || self.hidden == 0 || self.latent.is_empty() {
            return Err(VaeError::Config(format!(
                "zero-sized dimension in {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(VaeError::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Loss weights for VAE training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeLossWeights {
    pub kl: f64,
    pub mse: f64,
}

impl Default for VaeLossWeights {
    fn default() -> Self {
        Self { kl: 1e-4, mse: 1.0 }
    }
}

/// Scalar parts of a VAE loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLossParts {
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
}

/// `mse_weight * MSE(s, recon) + kl_weight * KL(p || N(0, I))`, with the KL
/// averaged per latent element.
pub fn vae_loss(
    s: &Tensor,
    recon: &Tensor,
    p: &EncodedPosterior,
    weights: VaeLossWeights,
) -> Result<VaeLossParts, VaeError> {
    if s.shape() != recon.shape() {
        return Err(VaeError::Config(format!(
            "reconstruction shape {:?} vs input {:?}",
            recon.shape(),
            s.shape()
        )));
    }
    let mse = s
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / s.len().max(1) as f64;
    let kl = p.kl();
    Ok(VaeLossParts {
        total: weights.mse * mse + weights.kl * kl,
        mse,
        kl,
    })
}

/// Graph nodes produced by [`VaeModel::loss_nodes`].
pub struct VaeLossNodes {
    pub total: NodeId,
    pub mse: NodeId,
    pub kl: NodeId,
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    config: VaeConfig,
    store: ParamStore,
    enc_in: Linear,
    enc_pos: ParamId,
    enc_frames: Vec<Block>,
    enc_pool: Mixer,
    enc_tokens: Vec<Block>,
    enc_ln: LayerNorm,
    mean_head: Linear,
    logvar_head: Linear,
    dec_in: Linear,
    dec_pos_tok: ParamId,
    dec_tokens: Vec<Block>,
    dec_expand: Mixer,
    dec_pos: ParamId,
    dec_frames: Vec<Block>,
    dec_ln: LayerNorm,
    dec_out: Linear,
    latent_stats: Option<LatentStats>,
}

impl VaeModel {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self, VaeError> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[streams::INIT]);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let VaeConfig {
            features: j,
            max_len: n,
            latent,
            hidden: h,
            blocks,
            ..
        } = config;
        let k = latent.tokens;
        let d = latent.channels;

        let enc_in = Linear::new(s, "enc.in", j, h, 1.0, rng);
        let enc_pos = s.add("enc.pos", rng::gaussian(rng, &[n, h]).scale(0.1));
        let enc_frames = (0..blocks)
            .map(|i| Block::new(s, &format!("enc.frame{i}"), h, None, None, rng))
            .collect();
        let enc_pool = Mixer::new(s, "enc.pool", k, n, rng);
        let enc_tokens = (0..blocks)
            .map(|i| Block::new(s, &format!("enc.tok{i}"), h, Some(k), None, rng))
            .collect();
        let enc_ln = LayerNorm::new(s, "enc.ln", h);
        let mean_head = Linear::new(s, "enc.mean", h, d, 1.0, rng);
        let logvar_head = Linear::new(s, "enc.logvar", h, d, 0.1, rng);

        let dec_in = Linear::new(s, "dec.in", d, h, 1.0, rng);
        let dec_pos_tok = s.add("dec.pos_tok", rng::gaussian(rng, &[k, h]).scale(0.1));
        let dec_tokens = (0..blocks)
            .map(|i| Block::new(s, &format!("dec.tok{i}"), h, Some(k), None, rng))
            .collect();
        let dec_expand = Mixer::new(s, "dec.expand", n, k, rng);
        let dec_pos = s.add("dec.pos", rng::gaussian(rng, &[n, h]).scale(0.1));
        let dec_frames = (0..blocks)
            .map(|i| Block::new(s, &format!("dec.frame{i}"), h, None, None, rng))
            .collect();
        let dec_ln = LayerNorm::new(s, "dec.ln", h);
        let dec_out = Linear::new(s, "dec.out", h, j, 1.0, rng);

        Ok(Self {
            config,
            store,
            enc_in,
            enc_pos,
            enc_frames,
            enc_pool,
            enc_tokens,
            enc_ln,
            mean_head,
            logvar_head,
            dec_in,
            dec_pos_tok,
            dec_tokens,
            dec_expand,
            dec_pos,
            dec_frames,
            dec_ln,
            dec_out,
            latent_stats: None,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn latent_spec(&self) -> LatentSpec {
        self.config.latent
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn latent_stats(&self) -> Option<&LatentStats> {
        self.latent_stats.as_ref()
    }

    pub fn set_latent_stats(&mut self, stats: Option<LatentStats>) {
        self.latent_stats = stats;
    }

    /// Latent standardization, falling back to the identity when unfitted.
    pub fn latent_stats_or_identity(&self) -> LatentStats {
        self.latent_stats
            .clone()
            .unwrap_or_else(|| LatentStats::identity(self.config.latent))
    }

    fn check_sequence(&self, s: &Tensor) -> Result<usize, VaeError> {
        let shape = s.shape();
        if shape.len() != 2 || shape[1] != self.config.features {
            return Err(VaeError::FeatureWidth {
                expected: self.config.features,
                found: shape.get(1).copied().unwrap_or(0),
            });
        }
        self.check_len(shape[0])?;
        Ok(shape[0])
    }

    fn check_len(&self, len: usize) -> Result<(), VaeError> {
        if len == 0 || len > self.config.max_len {
            return Err(VaeError::Length {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Zero-padded `[B, max_len, width]` tensor plus a matching 0/1 mask.
    fn pad(&self, seqs: &[&Tensor], width: usize) -> (Tensor, Tensor) {
        let n = self.config.max_len;
        let j = self.config.features;
        let b = seqs.len();
        let mut x = vec![0.0; b * n * j];
        let mut mask = vec![0.0; b * n * width];
        for (i, s) in seqs.iter().enumerate() {
            let len = s.shape()[0];
            x[i * n * j..i * n * j + len * j].copy_from_slice(s.data());
            mask[i * n * width..i * n * width + len * width].fill(1.0);
        }
        (
            Tensor::new(vec![b, n, j], x).expect("padded shape"),
            Tensor::new(vec![b, n, width], mask).expect("mask shape"),
        )
    }

    /// Encoder graph; returns `(mean, log_variance)` nodes of shape `[B, K, D]`.
    pub fn encode_nodes(
        &self,
        g: &mut Graph,
        seqs: &[&Tensor],
        mode: &mut Mode,
    ) -> Result<(NodeId, NodeId), VaeError> {
        for s in seqs {
            self.check_sequence(s)?;
        }
        let (x, mask) = self.pad(seqs, self.config.hidden);
        let x = g.input(x)?;
        let mask = g.input(mask)?;
        let mut h = self.enc_in.forward(g, x)?;
        let pos = g.param(self.enc_pos)?;
        h = g.add_suffix(h, pos)?;
        h = g.mul(h, mask)?;
        for block in &self.enc_frames {
            h = block.forward(g, h, None, mode)?;
            h = g.mul(h, mask)?;
        }
        let mut t = self.enc_pool.forward(g, h)?;
        for block in &self.enc_tokens {
            t = block.forward(g, t, None, mode)?;
        }
        let t = self.enc_ln.forward(g, t)?;
        let mean = self.mean_head.forward(g, t)?;
        let logvar = self.logvar_head.forward(g, t)?;
        Ok((mean, logvar))
    }

    /// Decoder graph from `[B, K, D]` latents to `[B, max_len, J]` frames.
    pub fn decode_nodes(
        &self,
        g: &mut Graph,
        z: NodeId,
        mode: &mut Mode,
    ) -> Result<NodeId, VaeError> {
        let spec = self.config.latent;
        let zs = g.shape(z);
        if zs.len() != 3 || zs[1..] != spec.shape() {
            return Err(VaeError::LatentShape {
                expected: spec,
                found: zs.to_vec(),
            });
        }
        let mut t = self.dec_in.forward(g, z)?;
        let pos_tok = g.param(self.dec_pos_tok)?;
        t = g.add_suffix(t, pos_tok)?;
        for block in &self.dec_tokens {
            t = block.forward(g, t, None, mode)?;
        }
        let mut h = self.dec_expand.forward(g, t)?;
        let pos = g.param(self.dec_pos)?;
        h = g.add_suffix(h, pos)?;
        for block in &self.dec_frames {
            h = block.forward(g, h, None, mode)?;
        }
        let h = self.dec_ln.forward(g, h)?;
        Ok(self.dec_out.forward(g, h)?)
    }

    /// Full training objective on a batch. `eps` supplies one reparameterization
    /// draw per sequence. Reconstruction error is masked to each sequence's
    /// true length.
    pub fn loss_nodes(
        &self,
        g: &mut Graph,
        seqs: &[&Tensor],
        eps: &[Tensor],
        weights: VaeLossWeights,
        mode: &mut Mode,
    ) -> Result<VaeLossNodes, VaeError> {
        let (mean, logvar) = self.encode_nodes(g, seqs, mode)?;
        let eps = g.input(Tensor::stack(eps)?)?;
        let half = g.scale(logvar, 0.5)?;
        let std = g.exp(half)?;
        let noise = g.mul(std, eps)?;
        let z = g.add(mean, noise)?;
        let recon = self.decode_nodes(g, z, mode)?;
        let (target, mask) = self.pad(seqs, self.config.features);
        let valid = mask.sum();
        let target = g.input(target)?;
        let mask = g.input(mask)?;
        let diff = g.sub(recon, target)?;
        let diff = g.mul(diff, mask)?;
        let sq = g.square(diff)?;
        let total_sq = g.sum(sq)?;
        let mse = g.scale(total_sq, 1.0 / valid.max(1.0))?;
        let kl = g.kl_unit_gaussian(mean, logvar)?;
        let a = g.scale(mse, weights.mse)?;
        let b = g.scale(kl, weights.kl)?;
        let total = g.add(a, b)?;
        Ok(VaeLossNodes { total, mse, kl })
    }

    pub fn encode(&self, s: &Tensor) -> Result<EncodedPosterior, VaeError> {
        Ok(self.encode_batch(&[s])?.remove(0))
    }

    /// Encodes a batch; order is preserved.
    pub fn encode_batch(&self, seqs: &[&Tensor]) -> Result<Vec<EncodedPosterior>, VaeError> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.store);
        let (mean, logvar) = self.encode_nodes(&mut g, seqs, &mut Mode::Eval)?;
        let spec = self.config.latent;
        let means = g.value(mean).unstack();
        let logvars = g.value(logvar).unstack();
        means
            .into_iter()
            .zip(logvars)
            .map(|(m, lv)| {
                Ok(EncodedPosterior {
                    mean: LatentCode::new(spec, m)?,
                    log_variance: LatentCode::new(spec, lv)?,
                })
            })
            .collect()
    }

    pub fn decode(&self, z: &LatentCode, len: usize) -> Result<Tensor, VaeError> {
        Ok(self.decode_batch(&[(z, len)])?.remove(0))
    }

    pub fn decode_batch(&self, items: &[(&LatentCode, usize)]) -> Result<Vec<Tensor>, VaeError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let spec = self.config.latent;
        let mut codes = Vec::with_capacity(items.len());
        for (z, len) in items {
            if z.spec() != spec {
                return Err(VaeError::LatentShape {
                    expected: spec,
                    found: z.tensor().shape().to_vec(),
                });
            }
            self.check_len(*len)?;
            codes.push(z.tensor().clone());
        }
        let mut g = Graph::new(&self.store);
        let z = g.input(Tensor::stack(&codes)?)?;
        let out = self.decode_nodes(&mut g, z, &mut Mode::Eval)?;
        let j = self.config.features;
        Ok(g.value(out)
            .unstack()
            .into_iter()
            .zip(items)
            .map(|(full, (_, len))| {
                let data = full.data()[..len * j].to_vec();
                Tensor::new(vec![*len, j], data).expect("trimmed shape")
            })
            .collect())
    }

    /// Mean squared reconstruction error of `decode(encode(s).mean)` over all
    /// valid frames of the given sequences.
    pub fn reconstruction_mse(&self, seqs: &[&Tensor], batch: usize) -> Result<f64, VaeError> {
        let mut sq = 0.0;
        let mut count = 0usize;
        for chunk in seqs.chunks(batch.max(1)) {
            let posts = self.encode_batch(chunk)?;
            let items: Vec<(&LatentCode, usize)> = posts
                .iter()
                .zip(chunk)
                .map(|(p, s)| (&p.mean, s.shape()[0]))
                .collect();
            let recons = self.decode_batch(&items)?;
            for (r, s) in recons.iter().zip(chunk) {
                sq += r
                    .data()
                    .iter()
                    .zip(s.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                count += s.len();
            }
        }
        Ok(sq / count.max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VaeModel {
        VaeModel::new(
            VaeConfig {
                features: 3,
                max_len: 12,
                latent: LatentSpec::new(2, 4),
                hidden: 8,
                blocks: 1,
                dropout: 0.0,
            },
            5,
        )
        .unwrap()
    }

    fn seq(len: usize, offset: f64) -> Tensor {
        Tensor::from_fn(&[len, 3], |i| (i as f64 * 0.3 + offset).sin())
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let m = small();
        let s = seq(12, 0.0);
        let a = m.encode(&s).unwrap();
        let b = m.encode(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mean.tensor().shape(), &[2, 4]);
        let err = m.encode(&Tensor::zeros(&[5, 4])).unwrap_err();
        assert!(matches!(
            err,
            VaeError::FeatureWidth {
                expected: 3,
                found: 4
            }
        ));
        assert!(matches!(
            m.encode(&Tensor::zeros(&[13, 3])),
            Err(VaeError::Length { .. })
        ));
    }

    #[test]
    fn batch_preserves_order() {
        let m = small();
        let s1 = seq(12, 0.0);
        let s2 = seq(7, 1.0);
        let batch = m.encode_batch(&[&s1, &s2]).unwrap();
        let single2 = m.encode(&s2).unwrap();
        assert!(batch[1].mean.tensor().max_abs_diff(single2.mean.tensor()) < 1e-12);
        assert!(batch[0].mean.tensor().max_abs_diff(batch[1].mean.tensor()) > 1e-6);
    }

    #[test]
    fn untrained_decode_shape_and_determinism() {
        let m = small();
        let z = LatentCode::new(
            m.latent_spec(),
            Tensor::from_fn(&[2, 4], |i| i as f64 * 0.1),
        )
        .unwrap();
        let a = m.decode(&z, 9).unwrap();
        assert_eq!(a.shape(), &[9, 3]);
        assert!(a.is_finite());
        assert_eq!(a, m.decode(&z, 9).unwrap());
        let wrong = LatentCode::zeros(LatentSpec::new(3, 4));
        assert!(matches!(
            m.decode(&wrong, 9),
            Err(VaeError::LatentShape { .. })
        ));
    }

    #[test]
    fn posterior_sampling() {
        let spec = LatentSpec::new(2, 2);
        let mean = LatentCode::new(spec, Tensor::from_fn(&[2, 2], |i| i as f64)).unwrap();
        let det = EncodedPosterior::deterministic(mean.clone());
        let mut rng = rng::stream(1, &[]);
        assert_eq!(det.sample(&mut rng), mean);

        let unit = EncodedPosterior {
            mean: LatentCode::zeros(spec),
            log_variance: LatentCode::zeros(spec),
        };
        let eps = Tensor::from_fn(&[2, 2], |i| i as f64 - 1.5);
        assert_eq!(unit.sample_with(&eps).tensor(), &eps);
        let a = unit.sample(&mut rng::stream(3, &[]));
        let b = unit.sample(&mut rng::stream(3, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn vae_loss_closed_forms() {
        let spec = LatentSpec::new(1, 3);
        let s = Tensor::from_fn(&[4, 2], |i| i as f64);
        let unit = EncodedPosterior {
            mean: LatentCode::zeros(spec),
            log_variance: LatentCode::zeros(spec),
        };
        let parts = vae_loss(&s, &s, &unit, VaeLossWeights::default()).unwrap();
        assert_eq!(parts.total, 0.0);

        let m = [1.0, -2.0, 0.5];
        let shifted = EncodedPosterior {
            mean: LatentCode::new(spec, Tensor::new(vec![1, 3], m.to_vec()).unwrap()).unwrap(),
            log_variance: LatentCode::zeros(spec),
        };
        let want = m.iter().map(|v| 0.5 * v * v).sum::<f64>() / 3.0;
        assert!((shifted.kl() - want).abs() < 1e-15);
        assert_eq!(
            VaeLossWeights::default(),
            VaeLossWeights { kl: 1e-4, mse: 1.0 }
        );
    }

    #[test]
    fn graph_loss_matches_tensor_loss() {
        let m = small();
        let s = seq(10, 0.2);
        let eps = Tensor::zeros(&[2, 4]);
        let mut g = Graph::new(m.store());
        let nodes = m
            .loss_nodes(
                &mut g,
                &[&s],
                &[eps],
                VaeLossWeights::default(),
                &mut Mode::Eval,
            )
            .unwrap();
        let post = m.encode(&s).unwrap();
        let recon = m.decode(&post.mean, 10).unwrap();
        let parts = vae_loss(&s, &recon, &post, VaeLossWeights::default()).unwrap();
        assert!((g.value(nodes.total).item() - parts.total).abs() < 1e-10);
        assert!((g.value(nodes.kl).item() - parts.kl).abs() < 1e-12);
    }

    #[test]
    fn latent_stats_round_trip() {
        let spec = LatentSpec::new(1, 2);
        let codes: Vec<LatentCode> = (0..5)
            .map(|i| {
                LatentCode::new(
                    spec,
                    Tensor::new(vec![1, 2], vec![i as f64, 2.0 * i as f64 + 1.0]).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let stats = LatentStats::fit(&codes).unwrap();
        let n = stats.normalize(&codes[3]);
        assert!(
            stats
                .denormalize(&n)
                .tensor()
                .max_abs_diff(codes[3].tensor())
                < 1e-12
        );
    }
}
