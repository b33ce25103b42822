//! Define-by-run tape. Every operation evaluates eagerly, validates shapes and
//! finiteness, and records what [`Graph::backward`] needs.

use std::collections::HashMap;

use super::tensor::gemm;
use super::{AutodiffError, Gradients, ParamId, ParamStore, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    TokenMix {
        p: NodeId,
        x: NodeId,
    },
    Add(NodeId, NodeId),
    AddSuffix(NodeId, NodeId),
    AddBatch(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Silu(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    Reshape(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::TokenMix { .. } => "token_mix",
            Op::Add(..) => "add",
            Op::AddSuffix(..) => "add_suffix",
            Op::AddBatch(..) => "add_batch",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Silu(_) => "silu",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recording of one forward evaluation over a parameter store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId, AutodiffError> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                node,
                op: op.name(),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(node))
    }

    fn mismatch(&self, op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: self.next_id(),
            op,
            detail,
        }
    }

    /// A constant leaf. Gradients flowing into it are discarded.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId, AutodiffError> {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Result<NodeId, AutodiffError> {
        if let Some(&node) = self.param_nodes.get(&id) {
            return Ok(node);
        }
        let node = self.push(self.store.value(id).clone(), Op::Param(id))?;
        self.param_nodes.insert(id, node);
        Ok(node)
    }

    /// `x @ w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, AutodiffError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let inp = *xs.last().unwrap_or(&1);
        if ws.len() != 2 || ws[0] != inp {
            return Err(self.mismatch("linear", format!("input {xs:?} with weight {ws:?}")));
        }
        let out = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(self.mismatch(
                    "linear",
                    format!("bias {:?} for {out} outputs", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / inp.max(1);
        let mut y = vec![0.0; rows * out];
        gemm(
            rows,
            inp,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut y,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(out) {
                for (v, bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
        let mut shape = xs;
        if shape.is_empty() {
            shape.push(out);
        } else {
            *shape.last_mut().unwrap() = out;
        }
        self.push(Tensor::new(shape, y)?, Op::Linear { x, w, b })
    }

    /// Mixes along the token axis: `p` is `[m, n]`, `x` is `[batch, n, h]`,
    /// result is `[batch, m, h]`.
    pub fn token_mix(&mut self, p: NodeId, x: NodeId) -> Result<NodeId, AutodiffError> {
        let ps = self.shape(p).to_vec();
        let xs = self.shape(x).to_vec();
        if ps.len() != 2 || xs.len() != 3 || ps[1] != xs[1] {
            return Err(self.mismatch("token_mix", format!("mixer {ps:?} with input {xs:?}")));
        }
        let (m, n) = (ps[0], ps[1]);
        let (batch, h) = (xs[0], xs[2]);
        let mut y = vec![0.0; batch * m * h];
        let pd = self.value(p).data();
        let xd = self.value(x).data();
        for b in 0..batch {
            gemm(
                m,
                n,
                h,
                pd,
                false,
                &xd[b * n * h..(b + 1) * n * h],
                false,
                &mut y[b * m * h..(b + 1) * m * h],
                false,
            );
        }
        self.push(Tensor::new(vec![batch, m, h], y)?, Op::TokenMix { p, x })
    }

    fn binary_same(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `b` broadcast over the leading axes of `a`; `b`'s shape must be a
    /// suffix of `a`'s.
    pub fn add_suffix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.mismatch("add_suffix", format!("{sa:?} with suffix {sb:?}")));
        }
        let stride = self.value(b).len();
        let bd = self.value(b).data();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % stride])
            .collect();
        let shape = sa.to_vec();
        self.push(Tensor::new(shape, data)?, Op::AddSuffix(a, b))
    }

    /// `a` is `[batch, n, h]`, `c` is `[batch, h]`; adds `c[b]` to every token.
    pub fn add_batch(&mut self, a: NodeId, c: NodeId) -> Result<NodeId, AutodiffError> {
        let sa = self.shape(a).to_vec();
        let sc = self.shape(c).to_vec();
        if sa.len() != 3 || sc.len() != 2 || sa[0] != sc[0] || sa[2] != sc[1] {
            return Err(self.mismatch("add_batch", format!("{sa:?} with {sc:?}")));
        }
        let (n, h) = (sa[1], sa[2]);
        let cd = self.value(c).data();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + cd[(i / (n * h)) * h + i % h])
            .collect();
        self.push(Tensor::new(sa, data)?, Op::AddBatch(a, c))
    }

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId, AutodiffError> {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, AutodiffError> {
        self.unary(a, |v| v * factor, Op::Scale(a, factor))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.unary(a, |v| v + c, Op::AddConst(a))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, |v| v * sigmoid(v), Op::Silu(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    /// Square root; inputs must be strictly positive.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(AutodiffError::Domain {
                node: self.next_id(),
                op: "sqrt",
            });
        }
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let h = self.value(x).last_dim();
        if self.shape(gamma) != [h] || self.shape(beta) != [h] {
            return Err(self.mismatch(
                "layer_norm",
                format!(
                    "input {:?} with gamma {:?} beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xd.len() / h;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..h {
                let xh = (row[j] - mean) * rs;
                xhat[r * h + j] = xh;
                y[r * h + j] = xh * g[j] + bt[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, y)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Gathers rows of a `[vocab, h]` table; result is `[ids.len(), h]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(self.mismatch("embedding", format!("table {ts:?}")));
        }
        let (vocab, h) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(self.mismatch(
                "embedding",
                format!("index {bad} out of range for vocabulary {vocab}"),
            ));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            data.extend_from_slice(&td[i * h..(i + 1) * h]);
        }
        self.push(
            Tensor::new(vec![ids.len(), h], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(self.mismatch("mean", "empty tensor".into()));
        }
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let t = self.value(a);
        let h = t.last_dim();
        let data: Vec<f64> = t.data().chunks(h).map(|c| c.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        shape.pop();
        self.push(Tensor::new(shape, data)?, Op::SumLast(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, AutodiffError> {
        let len: usize = shape.iter().product();
        if len != self.value(a).len() {
            return Err(self.mismatch("reshape", format!("{:?} into {shape:?}", self.shape(a))));
        }
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a))
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Mean over elements of `KL(N(mean, exp(log_var)) || N(0, 1))`.
    pub fn kl_unit_gaussian(
        &mut self,
        mean: NodeId,
        log_var: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let m2 = self.square(mean)?;
        let var = self.exp(log_var)?;
        let a = self.add(m2, var)?;
        let b = self.sub(a, log_var)?;
        let c = self.add_const(b, -1.0)?;
        let m = self.mean(c)?;
        self.scale(m, 0.5)
    }

    /// Reverse pass from a scalar `loss`, returning gradients for every
    /// parameter of the store (zero where a parameter did not participate).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::NoForward { node: loss.0 });
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.store);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    let g = out.get_mut(*pid);
                    for (a, b) in g.data_mut().iter_mut().zip(&dy) {
                        *a += b;
                    }
                }
                Op::Linear { x, w, b } => {
                    let inp = self.value(*w).shape()[0];
                    let outd = self.value(*w).shape()[1];
                    let rows = self.value(*x).len() / inp.max(1);
                    let dx = acc(&mut grads, *x, self.value(*x).len());
                    gemm(
                        rows,
                        outd,
                        inp,
                        &dy,
                        false,
                        self.value(*w).data(),
                        true,
                        dx,
                        true,
                    );
                    let dw = acc(&mut grads, *w, inp * outd);
                    gemm(
                        inp,
                        rows,
                        outd,
                        self.value(*x).data(),
                        true,
                        &dy,
                        false,
                        dw,
                        true,
                    );
                    if let Some(b) = b {
                        let db = acc(&mut grads, *b, outd);
                        for row in dy.chunks(outd) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
                Op::TokenMix { p, x } => {
                    let ps = self.shape(*p);
                    let (m, n) = (ps[0], ps[1]);
                    let xs = self.shape(*x);
                    let (batch, h) = (xs[0], xs[2]);
                    let xd = self.value(*x).data();
                    let pd = self.value(*p).data();
                    {
                        let dp = acc(&mut grads, *p, m * n);
                        for b in 0..batch {
                            gemm(
                                m,
                                h,
                                n,
                                &dy[b * m * h..(b + 1) * m * h],
                                false,
                                &xd[b * n * h..(b + 1) * n * h],
                                true,
                                dp,
                                true,
                            );
                        }
                    }
                    let dx = acc(&mut grads, *x, batch * n * h);
                    for b in 0..batch {
                        gemm(
                            n,
                            m,
                            h,
                            pd,
                            true,
                            &dy[b * m * h..(b + 1) * m * h],
                            false,
                            &mut dx[b * n * h..(b + 1) * n * h],
                            true,
                        );
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, dy.len()), &dy, 1.0);
                    add_into(acc(&mut grads, *b, dy.len()), &dy, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, dy.len()), &dy, 1.0);
                    add_into(acc(&mut grads, *b, dy.len()), &dy, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da = acc(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        da[i] += dy[i] * bv[i];
                    }
                    let db = acc(&mut grads, *b, dy.len());
                    for i in 0..dy.len() {
                        db[i] += dy[i] * av[i];
                    }
                }
                Op::AddSuffix(a, b) => {
                    add_into(acc(&mut grads, *a, dy.len()), &dy, 1.0);
                    let stride = self.value(*b).len();
                    let db = acc(&mut grads, *b, stride);
                    for (i, v) in dy.iter().enumerate() {
                        db[i % stride] += v;
                    }
                }
                Op::AddBatch(a, c) => {
                    add_into(acc(&mut grads, *a, dy.len()), &dy, 1.0);
                    let sa = self.shape(*a);
                    let (n, h) = (sa[1], sa[2]);
                    let dc = acc(&mut grads, *c, self.value(*c).len());
                    for (i, v) in dy.iter().enumerate() {
                        dc[(i / (n * h)) * h + i % h] += v;
                    }
                }
                Op::Scale(a, f) => add_into(acc(&mut grads, *a, dy.len()), &dy, *f),
                Op::AddConst(a) => add_into(acc(&mut grads, *a, dy.len()), &dy, 1.0),
                Op::Silu(a) => {
                    let av = self.value(*a).data();
                    let da = acc(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        let s = sigmoid(av[i]);
                        da[i] += dy[i] * (s * (1.0 + av[i] * (1.0 - s)));
                    }
                }
                Op::Relu(a) => {
                    let av = self.value(*a).data();
                    let da = acc(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        if av[i] > 0.0 {
                            da[i] += dy[i];
                        }
                    }
                }
                Op::Exp(a) => {
                    let yv = node.value.data();
                    let da = acc(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        da[i] += dy[i] * yv[i];
                    }
                }
                Op::Square(a) => {
                    let av = self.value(*a).data();
                    let da = acc(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        da[i] += dy[i] * 2.0 * av[i];
                    }
                }
                Op::Sqrt(a) => {
                    let yv = node.value.data();
                    let da = acc(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        da[i] += dy[i] * 0.5 / yv[i];
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let h = self.value(*gamma).len();
                    let g = self.value(*gamma).data();
                    {
                        let dg = acc(&mut grads, *gamma, h);
                        for (i, v) in dy.iter().enumerate() {
                            dg[i % h] += v * xhat[i];
                        }
                    }
                    {
                        let db = acc(&mut grads, *beta, h);
                        for (i, v) in dy.iter().enumerate() {
                            db[i % h] += v;
                        }
                    }
                    let dx = acc(&mut grads, *x, dy.len());
                    let mut dxhat = vec![0.0; h];
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * h;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..h {
                            dxhat[j] = dy[base + j] * g[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[base + j];
                        }
                        mean_d /= h as f64;
                        mean_dx /= h as f64;
                        for j in 0..h {
                            dx[base + j] += rs * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let h = self.shape(*table)[1];
                    let dt = acc(&mut grads, *table, self.value(*table).len());
                    for (row, &i) in ids.iter().enumerate() {
                        for j in 0..h {
                            dt[i * h + j] += dy[row * h + j];
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    for v in acc(&mut grads, *a, n) {
                        *v += dy[0];
                    }
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let g = dy[0] / n as f64;
                    for v in acc(&mut grads, *a, n) {
                        *v += g;
                    }
                }
                Op::SumLast(a) => {
                    let h = self.value(*a).last_dim();
                    let n = self.value(*a).len();
                    let da = acc(&mut grads, *a, n);
                    for (i, v) in da.iter_mut().enumerate() {
                        *v += dy[i / h];
                    }
                }
                Op::Reshape(a) => add_into(acc(&mut grads, *a, dy.len()), &dy, 1.0),
            }
        }
        Ok(out)
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone())).collect();
        (s, ids)
    }

    #[test]
    fn product_rule_by_hand() {
        let (s, ids) = store_with(&[
            ("a", Tensor::new(vec![2], vec![2.0, -1.0]).unwrap()),
            ("b", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()),
        ]);
        let mut g = Graph::new(&s);
        let a = g.param(ids[0]).unwrap();
        let b = g.param(ids[1]).unwrap();
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(ids[0]).data(), &[3.0, 4.0]);
        assert_eq!(grads.get(ids[1]).data(), &[2.0, -1.0]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        let (s, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&s);
        let x = g.param(ids[0]).unwrap();
        let x2 = g.param(ids[0]).unwrap();
        assert_eq!(x, x2);
        let y = g.mul(x, x2).unwrap();
        let y = g.add(y, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(ids[0]).item(), 7.0);
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let (s, ids) = store_with(&[
            ("x", Tensor::scalar(1.0)),
            ("unused", Tensor::zeros(&[2, 2])),
        ]);
        let mut g = Graph::new(&s);
        let x = g.param(ids[0]).unwrap();
        let y = g.exp(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(ids[1]).data(), &[0.0; 4]);
        assert!((grads.get(ids[0]).item() - 1f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn shape_and_domain_errors() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(
            g.add(a, b),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
        assert!(g.linear(a, a, None).is_err());
        assert!(g.embedding(b, &[3]).is_err());
        assert!(g.reshape(a, vec![4]).is_err());
        let neg = g.input(Tensor::full(&[1], -1.0)).unwrap();
        assert!(g.sqrt(neg).is_err());
        assert!(matches!(
            g.backward(a),
            Err(AutodiffError::NonScalarLoss { .. })
        ));
        let big = g.input(Tensor::full(&[1], 1e6)).unwrap();
        assert!(matches!(g.exp(big), Err(AutodiffError::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g
            .input(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).unwrap())
            .unwrap();
        let gamma = g.input(Tensor::full(&[4], 1.0)).unwrap();
        let beta = g.input(Tensor::zeros(&[4])).unwrap();
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
