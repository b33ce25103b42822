//! Layers assembled from autodiff primitives.

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::rng::{gaussian, StreamRng};

/// Whether a forward pass is for training (optionally with dropout) or
/// evaluation.
pub enum Mode<'r> {
    Eval,
    Train {
        dropout: f64,
        rng: &'r mut StreamRng,
    },
}

impl Mode<'_> {
    fn dropout(&mut self, g: &mut Graph, x: NodeId) -> Result<NodeId, AutodiffError> {
        match self {
            Mode::Train { dropout, rng } if *dropout > 0.0 => {
                let keep = 1.0 - *dropout;
                let shape = g.shape(x).to_vec();
                let mask = Tensor::from_fn(&shape, |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = g.input(mask)?;
                g.mul(x, m)
            }
            _ => Ok(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut StreamRng,
    ) -> Self {
        let std = gain / (inputs as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            gaussian(rng, &[inputs, outputs]).scale(std),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[outputs]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, AutodiffError> {
        let w = g.param(self.w)?;
        let b = g.param(self.b)?;
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, AutodiffError> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        width: usize,
        rng: &mut StreamRng,
    ) -> Self {
        Self {
            table: store.add(format!("{name}.table"), gaussian(rng, &[vocab, width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        let t = g.param(self.table)?;
        g.embedding(t, ids)
    }
}

/// Learned `[rows, cols]` matrix used to mix or resample the token axis.
#[derive(Debug, Clone)]
pub struct Mixer {
    pub p: ParamId,
}

impl Mixer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let std = 1.0 / (cols as f64).sqrt();
        Self {
            p: store.add(format!("{name}.p"), gaussian(rng, &[rows, cols]).scale(std)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, AutodiffError> {
        let p = g.param(self.p)?;
        g.token_mix(p, x)
    }
}

/// Residual block: optional token-mixing sublayer, then
/// layer-norm -> dense -> SiLU -> dense with a residual connection.
/// A per-sample conditioning vector, when given, is projected and added
/// to the hidden activation.
#[derive(Debug, Clone)]
pub struct Block {
    mix: Option<(LayerNorm, Mixer)>,
    ln: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    cond: Option<Linear>,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        tokens_to_mix: Option<usize>,
        cond_width: Option<usize>,
        rng: &mut StreamRng,
    ) -> Self {
        let mix = tokens_to_mix.map(|n| {
            (
                LayerNorm::new(store, &format!("{name}.mix_ln"), width),
                Mixer::new(store, &format!("{name}.mix"), n, n, rng),
            )
        });
        let ln = LayerNorm::new(store, &format!("{name}.ln"), width);
        let fc1 = Linear::new(store, &format!("{name}.fc1"), width, 2 * width, 1.0, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), 2 * width, width, 0.5, rng);
        let cond =
            cond_width.map(|c| Linear::new(store, &format!("{name}.cond"), c, 2 * width, 1.0, rng));
        Self {
            mix,
            ln,
            fc1,
            fc2,
            cond,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        mut x: NodeId,
        cond: Option<NodeId>,
        mode: &mut Mode,
    ) -> Result<NodeId, AutodiffError> {
        if let Some((ln, mixer)) = &self.mix {
            let h = ln.forward(g, x)?;
            let h = mixer.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let h = self.ln.forward(g, x)?;
        let mut h = self.fc1.forward(g, h)?;
        if let (Some(proj), Some(c)) = (&self.cond, cond) {
            let c = proj.forward(g, c)?;
            h = g.add_batch(h, c)?;
        }
        let h = g.silu(h)?;
        let h = mode.dropout(g, h)?;
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

/// Sinusoidal features of an integer timestep.
pub fn timestep_features(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    out.resize(width, 0.0);
    out
}
