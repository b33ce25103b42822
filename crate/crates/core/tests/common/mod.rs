//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use b2a_hdm::autodiff::{AutodiffError, Graph, NodeId, ParamStore, Tensor};
use b2a_hdm::metrics::{euclidean, RetrievalPool};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

pub type Builder<'a> = dyn Fn(&mut Graph) -> Result<NodeId, AutodiffError> + 'a;

fn loss_value(store: &ParamStore, build: &Builder) -> f64 {
    let mut g = Graph::new(store);
    let loss = build(&mut g).expect("forward pass");
    g.value(loss).item()
}

/// Largest relative error between the reverse-mode gradient of `build` and
/// a central finite difference, over every element of every parameter.
pub fn max_gradient_error(store: &ParamStore, build: &Builder) -> f64 {
    let mut g = Graph::new(store);
    let loss = build(&mut g).expect("forward pass");
    let grads = g.backward(loss).expect("backward pass");
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for (id, p) in store.iter() {
        let analytic = grads.get(id).data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = p.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let up = loss_value(&probe, build);
            probe.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let down = loss_value(&probe, build);
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Reduces `x` to a scalar through fixed random weights so that every
/// output element receives a distinct upstream gradient.
pub fn probe(g: &mut Graph, x: NodeId, weights: &Tensor) -> Result<NodeId, AutodiffError> {
    let w = g.input(weights.clone())?;
    let y = g.mul(x, w)?;
    g.sum(y)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn unbiased_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Frechet distance between two 1-D Gaussians fitted to `a` and `b`.
pub fn fid_1d(a: &[f64], b: &[f64]) -> f64 {
    let (va, vb) = (unbiased_var(a), unbiased_var(b));
    let d = mean(a) - mean(b);
    d * d + va + vb - 2.0 * (va * vb).sqrt()
}

/// Top-1/2/3 hit rates, ranking by counting strictly closer candidates plus
/// equally distant ones listed earlier in the pool.
pub fn r_precision_naive(
    motions: &[Vec<f64>],
    pools: &[RetrievalPool],
    features: &BTreeMap<usize, Vec<f64>>,
) -> [f64; 3] {
    let mut hits = [0usize; 3];
    for (m, pool) in motions.iter().zip(pools) {
        let d: Vec<f64> = pool
            .candidates
            .iter()
            .map(|c| euclidean(m, &features[c]))
            .collect();
        let dm = d[pool.matched];
        let mut rank = 0;
        for (i, &di) in d.iter().enumerate() {
            if di < dm || (di == dm && i < pool.matched) {
                rank += 1;
            }
        }
        for (k, h) in hits.iter_mut().enumerate() {
            if rank <= k {
                *h += 1;
            }
        }
    }
    let n = motions.len() as f64;
    [hits[0] as f64 / n, hits[1] as f64 / n, hits[2] as f64 / n]
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

pub fn mm_dist_naive(motions: &[Vec<f64>], conditions: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for i in 0..motions.len() {
        s += dist(&motions[i], &conditions[i]);
    }
    s / motions.len() as f64
}

/// Mean distance between `features[a[i]]` and `features[b[i]]`.
pub fn paired_mean_naive(features: &[Vec<f64>], a: &[usize], b: &[usize]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += dist(&features[a[i]], &features[b[i]]);
    }
    s / a.len() as f64
}
