//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4`.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use b2a_hdm::autodiff::{Graph, ParamStore, Tensor};
use b2a_hdm::config::RunConfig;
use b2a_hdm::denoiser::{Condition, DenoiserConfig, DenoiserModel, GuidanceConfig, TimestepRange};
use b2a_hdm::diffusion::{LossWeightConfig, NoiseSchedule, ScheduleKind, ScheduleParams};
use b2a_hdm::metrics::{
    diversity, diversity_indices, draw_pools, fid, mm_dist, mmodality, mmodality_indices,
    r_precision_with_pools, FeaturePair, GaussianStats,
};
use b2a_hdm::nn::{Block, Mode};
use b2a_hdm::pipeline::{
    evaluate, fit_denoisers, fit_evaluator, fit_vae, generate, generation_plan, noise_schedule,
    normalized_frames, prepare_data, DenoiserSet, EvalProtocol, MetricReport, ModelSet, SampleMode,
    VaeRole,
};
use b2a_hdm::rng::{self, gaussian, gaussian_vec, stream};
use b2a_hdm::sampler::{DenoiserSchedule, SamplerBundle, StageEvent};
use b2a_hdm::vae::{LatentSpec, VaeConfig, VaeModel};
use rand::Rng;

type Check = fn() -> Result<String, String>;

fn main() -> ExitCode {
    let checks: [(&str, Check); 10] = [
        ("gradients match finite differences", gradients),
        ("forward process moments and oracle chain", forward_process),
        ("loss weight range and monotonicity", loss_weight),
        ("guidance endpoints are exact", guidance_endpoints),
        ("schedule tiling and stage order", schedule_and_trace),
        ("metrics match reference computations", metric_oracles),
        ("more latent tokens reconstruct better", vae_tokens),
        ("hierarchical sampling beats advanced-only", b2a_vs_advanced),
        ("weighted loss improves the single denoiser", weighted_loss),
        ("reruns are byte-identical", reproducible),
    ];
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    if elapsed > limit {
        return Err(format!("{what} took {elapsed:?}, limit {limit:?}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 1

fn gradients() -> Result<String, String> {
    let start = Instant::now();
    let mut r = stream(1, &[]);
    let mut rand_t = |shape: &[usize]| gaussian(&mut r, shape);
    let mut worst: Vec<(&str, f64)> = Vec::new();

    macro_rules! check {
        ($name:expr, [$($shape:expr),*], |$g:ident, $p:ident| $body:expr) => {{
            let mut store = ParamStore::new();
            let ids = vec![$(store.add("p", rand_t(&$shape))),*];
            let out_shape = {
                let mut $g = Graph::new(&store);
                let $p: Vec<_> = ids.iter().map(|&id| $g.param(id).unwrap()).collect();
                let y = $body.unwrap();
                $g.shape(y).to_vec()
            };
            let w = rand_t(&out_shape);
            let build = |$g: &mut Graph| {
                let $p: Vec<_> = ids.iter().map(|&id| $g.param(id)).collect::<Result<_, _>>()?;
                let y = $body?;
                common::probe($g, y, &w)
            };
            worst.push(($name, common::max_gradient_error(&store, &build)));
        }};
    }

    check!("linear", [[2, 3, 4], [4, 5], [5]], |g, p| g.linear(
        p[0],
        p[1],
        Some(p[2])
    ));
    check!("linear-nobias", [[3, 4], [4, 2]], |g, p| g
        .linear(p[0], p[1], None));
    check!("token_mix", [[3, 4], [2, 4, 5]], |g, p| g
        .token_mix(p[0], p[1]));
    check!("add", [[3, 4], [3, 4]], |g, p| g.add(p[0], p[1]));
    check!("sub", [[3, 4], [3, 4]], |g, p| g.sub(p[0], p[1]));
    check!("mul", [[3, 4], [3, 4]], |g, p| g.mul(p[0], p[1]));
    check!("add_suffix", [[2, 3, 4], [3, 4]], |g, p| g
        .add_suffix(p[0], p[1]));
    check!("add_batch", [[2, 3, 4], [2, 4]], |g, p| g
        .add_batch(p[0], p[1]));
    check!("scale", [[3, 4]], |g, p| g.scale(p[0], -1.7));
    check!("add_const", [[3, 4]], |g, p| g.add_const(p[0], 0.3));
    check!("silu", [[3, 4]], |g, p| g.silu(p[0]));
    check!("exp", [[3, 4]], |g, p| g.exp(p[0]));
    check!("square", [[3, 4]], |g, p| g.square(p[0]));
    check!("layer_norm", [[3, 5], [5], [5]], |g, p| g
        .layer_norm(p[0], p[1], p[2]));
    check!("embedding", [[6, 4]], |g, p| g
        .embedding(p[0], &[0, 3, 3, 5]));
    check!("sum", [[3, 4]], |g, p| g.sum(p[0]));
    check!("mean", [[3, 4]], |g, p| g.mean(p[0]));
    check!("sum_last", [[2, 3, 4]], |g, p| g.sum_last(p[0]));
    check!("reshape", [[2, 6]], |g, p| g.reshape(p[0], vec![3, 4]));
    check!("mse", [[3, 4], [3, 4]], |g, p| g.mse(p[0], p[1]));
    check!("kl_unit_gaussian", [[3, 4], [3, 4]], |g, p| g
        .kl_unit_gaussian(p[0], p[1]));

    // Ops with restricted domains get inputs away from their kinks.
    for (name, op) in [("relu", 0usize), ("sqrt", 1)] {
        let mut store = ParamStore::new();
        let x: Vec<f64> = gaussian_vec(&mut r, 12)
            .into_iter()
            .map(|v| {
                if op == 1 {
                    v.abs() + 0.2
                } else {
                    v.signum() * (v.abs() + 0.1)
                }
            })
            .collect();
        let id = store.add("x", Tensor::new(vec![3, 4], x).unwrap());
        let w = gaussian(&mut r, &[3, 4]);
        let build = |g: &mut Graph| {
            let x = g.param(id)?;
            let y = if op == 0 { g.relu(x)? } else { g.sqrt(x)? };
            common::probe(g, y, &w)
        };
        worst.push((name, common::max_gradient_error(&store, &build)));
    }

    // A random two-block conditioned network with token mixing.
    let mut store = ParamStore::new();
    let mut init = stream(2, &[]);
    let blocks: Vec<Block> = (0..2)
        .map(|i| Block::new(&mut store, &format!("b{i}"), 6, Some(3), Some(4), &mut init))
        .collect();
    let x_id = store.add("x", gaussian(&mut init, &[2, 3, 6]));
    let c_id = store.add("c", gaussian(&mut init, &[2, 4]));
    let w = gaussian(&mut init, &[2, 3, 6]);
    let build = |g: &mut Graph| {
        let mut x = g.param(x_id)?;
        let c = g.param(c_id)?;
        for b in &blocks {
            x = b.forward(g, x, Some(c), &mut Mode::Eval)?;
        }
        common::probe(g, x, &w)
    };
    worst.push((
        "two-block network",
        common::max_gradient_error(&store, &build),
    ));

    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(60), "gradient check")?;
    let (name, err) = worst
        .iter()
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let bad: Vec<String> = worst
        .iter()
        .filter(|(_, e)| !(*e < 1e-4))
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    ensure(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} checks, worst {name} rel err {err:.2e}", worst.len())
        } else {
            format!("rel err >= 1e-4 for {}", bad.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------
// 2

fn schedules() -> Vec<NoiseSchedule> {
    vec![
        NoiseSchedule::new(RunConfig::default().schedule.params()).unwrap(),
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(),
        NoiseSchedule::new(ScheduleParams {
            kind: ScheduleKind::ScaledLinear,
            steps: 1000,
            beta_start: 8.5e-4,
            beta_end: 0.012,
        })
        .unwrap(),
    ]
}

fn forward_process() -> Result<String, String> {
    const DRAWS: usize = 100_000;
    let mut worst_z: f64 = 0.0;
    for (si, s) in schedules().iter().enumerate() {
        let steps = s.steps();
        for (ti, &t) in [1, steps / 4, steps / 2, steps].iter().enumerate() {
            let z0_value = 1.5 - ti as f64;
            let z0 = Tensor::full(&[DRAWS], z0_value);
            let eps = gaussian(&mut stream(3, &[si as u64, t as u64]), &[DRAWS]);
            let x = s.q_sample(&z0, t, &eps).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            let n = DRAWS as f64;
            let mean = x.sum() / n;
            let var = x
                .data()
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / (n - 1.0);
            let want_var = 1.0 - ab;
            let z_mean = (mean - ab.sqrt() * z0_value) / (want_var / n).sqrt();
            let z_var = (var - want_var) / (want_var * (2.0 / (n - 1.0)).sqrt());
            worst_z = worst_z.max(z_mean.abs()).max(z_var.abs());
        }
    }
    if worst_z > 3.0 {
        return Err(format!("moment deviation {worst_z:.2} standard errors"));
    }

    let mut worst_rec: f64 = 0.0;
    for (si, s) in schedules().iter().enumerate() {
        let mut r = stream(4, &[si as u64]);
        let z0 = gaussian(&mut r, &[8, 16]);
        let eps = gaussian(&mut r, &[8, 16]);
        let mut z = s.q_sample(&z0, s.steps(), &eps).unwrap();
        for t in (1..=s.steps()).rev() {
            let ab = s.alpha_bar(t).unwrap();
            let oracle = Tensor::new(
                z.shape().to_vec(),
                z.data()
                    .iter()
                    .zip(z0.data())
                    .map(|(zt, z0)| (zt - ab.sqrt() * z0) / (1.0 - ab).sqrt())
                    .collect(),
            )
            .unwrap();
            let noise = gaussian(&mut r, &[8, 16]);
            z = s.reverse_step(&z, &oracle, t, &noise).unwrap();
        }
        worst_rec = worst_rec.max(z.max_abs_diff(&z0));
    }
    ensure(
        worst_rec < 1e-8,
        format!("moments within {worst_z:.2} SE, oracle chain error {worst_rec:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 3

fn loss_weight() -> Result<String, String> {
    let cfg = LossWeightConfig { w1: 4.5, w2: 0.5 };
    let mut checked = 0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in schedules() {
        let mut prev = f64::NEG_INFINITY;
        for t in 1..=s.steps() {
            let l = s.loss_weight(t, cfg).unwrap();
            if !(0.5..=5.0).contains(&l) {
                return Err(format!("lambda({t}) = {l} outside [0.5, 5]"));
            }
            if l < prev {
                return Err(format!("lambda decreases at t = {t}: {prev} -> {l}"));
            }
            prev = l;
            lo = lo.min(l);
            hi = hi.max(l);
            checked += 1;
        }
    }
    Ok(format!("{checked} timesteps, range [{lo:.4}, {hi:.4}]"))
}

// ---------------------------------------------------------------------------
// 4

fn guidance_endpoints() -> Result<String, String> {
    let mut compared = 0usize;
    for m in 0..100u64 {
        let mut r = stream(5, &[m]);
        let latent = LatentSpec::new(r.random_range(1..6), r.random_range(1..6));
        let steps = r.random_range(1..50);
        let labels = r.random_range(1..8);
        let d = DenoiserModel::new(
            DenoiserConfig {
                latent,
                num_labels: labels,
                steps,
                hidden: 4 * r.random_range(1..5),
                blocks: r.random_range(0..3),
                time_features: 2 * r.random_range(1..6),
                dropout: 0.0,
            },
            TimestepRange::full(steps),
            m,
        )
        .unwrap();
        let z = b2a_hdm::vae::LatentCode::gaussian(latent, &mut r);
        let t = r.random_range(1..=steps);
        let c = Condition::Label(r.random_range(0..labels));
        let cond = d.predict_eps(&z, c, t).unwrap();
        let uncond = d.predict_eps(&z, Condition::Null, t).unwrap();
        let g1 = d
            .guided_eps(&z, c, t, GuidanceConfig { scale: 1.0 })
            .unwrap();
        let g0 = d
            .guided_eps(&z, c, t, GuidanceConfig { scale: 0.0 })
            .unwrap();
        let bits = |x: &b2a_hdm::vae::LatentCode| -> Vec<u64> {
            x.tensor().data().iter().map(|v| v.to_bits()).collect()
        };
        if bits(&g1) != bits(&cond) {
            return Err(format!(
                "model {m}: g = 1 differs from the conditional prediction"
            ));
        }
        if bits(&g0) != bits(&uncond) {
            return Err(format!(
                "model {m}: g = 0 differs from the unconditional prediction"
            ));
        }
        compared += 2 * latent.len();
    }
    Ok(format!("100 models, {compared} values bitwise equal"))
}

// ---------------------------------------------------------------------------
// 5

fn tiny_bundle(steps: usize, schedule: DenoiserSchedule) -> SamplerBundle {
    let vae = |tokens, seed| {
        VaeModel::new(
            VaeConfig {
                features: 3,
                max_len: 6,
                latent: LatentSpec::new(tokens, 2),
                hidden: 4,
                blocks: 1,
                dropout: 0.0,
            },
            seed,
        )
        .unwrap()
    };
    let den = |tokens, range, seed| {
        DenoiserModel::new(
            DenoiserConfig {
                latent: LatentSpec::new(tokens, 2),
                num_labels: 2,
                steps,
                hidden: 4,
                blocks: 1,
                time_features: 4,
                dropout: 0.0,
            },
            range,
            seed,
        )
        .unwrap()
    };
    SamplerBundle {
        basic_vae: vae(1, 1),
        advanced_vae: vae(3, 2),
        basic_denoiser: den(1, TimestepRange::full(steps), 3),
        advanced_denoisers: schedule
            .segments()
            .iter()
            .map(|s| den(3, s.range, 10 + s.denoiser as u64))
            .collect(),
        schedule: NoiseSchedule::linear(steps, 1e-3, 0.1).unwrap(),
        denoiser_schedule: schedule,
        guidance: GuidanceConfig { scale: 2.0 },
        bridge_sample: false,
    }
}

fn schedule_and_trace() -> Result<String, String> {
    let mut points = 0;
    let mut rejected = 0;
    for total in [10usize, 50, 200] {
        for rate in [0.25, 0.5, 0.75, 0.95] {
            for k in 1..=4usize {
                let at = format!("T={total} rate={rate} k={k}");
                let expected_t_h = (rate * total as f64 + 0.5 + 1e-9).floor() as usize;
                if expected_t_h < k {
                    // Fewer advanced steps than denoisers must be refused.
                    if DenoiserSchedule::build(total, rate, k).is_ok() {
                        return Err(format!(
                            "{at}: accepted {expected_t_h} steps for {k} denoisers"
                        ));
                    }
                    rejected += 1;
                    continue;
                }
                let s =
                    DenoiserSchedule::build(total, rate, k).map_err(|e| format!("{at}: {e}"))?;
                let t_h = s.advanced_steps();
                if s.basic_steps() + t_h != total {
                    return Err(format!("{at}: T_l + T_h = {}", s.basic_steps() + t_h));
                }
                let mut covered = vec![0u32; t_h + 1];
                for seg in s.segments() {
                    for t in seg.range.start..=seg.range.end {
                        covered[t] += 1;
                    }
                }
                if s.segments().len() != k || covered[1..].iter().any(|&c| c != 1) {
                    return Err(format!("{at}: segments do not tile [1, {t_h}]"));
                }

                let bundle = tiny_bundle(total, s.clone());
                let mut trace = Vec::new();
                bundle
                    .sample_b2a_traced(Condition::Label(1), 5, points, Some(&mut trace))
                    .map_err(|e| format!("{at}: {e}"))?;
                check_trace(&trace, total, &s).map_err(|e| format!("{at}: {e}"))?;
                points += 1;
            }
        }
    }
    Ok(format!(
        "{points} grid points tile and trace in order, {rejected} with T_h < k rejected"
    ))
}

fn check_trace(trace: &[StageEvent], total: usize, s: &DenoiserSchedule) -> Result<(), String> {
    let basic = LatentSpec::new(1, 2);
    let adv = LatentSpec::new(3, 2);
    let mut want: Vec<StageEvent> = (1..=total)
        .rev()
        .map(|t| StageEvent::BasicDenoise { t, space: basic })
        .collect();
    want.push(StageEvent::BasicDecode { space: basic });
    want.push(StageEvent::AdvancedEncode { space: adv });
    want.push(StageEvent::QSample {
        t: s.advanced_steps(),
        space: adv,
    });
    for t in (1..=s.advanced_steps()).rev() {
        want.push(StageEvent::AdvancedDenoise {
            t,
            denoiser: s.denoiser_for(t).ok_or("uncovered timestep")?,
            space: adv,
        });
    }
    want.push(StageEvent::AdvancedDecode { space: adv });
    if trace != want.as_slice() {
        let at = trace.iter().zip(&want).position(|(a, b)| a != b);
        return Err(format!(
            "trace diverges at event {at:?} ({} events, expected {})",
            trace.len(),
            want.len()
        ));
    }
    // Denoisers are visited in order, highest timesteps first.
    let order: Vec<usize> = trace
        .iter()
        .filter_map(|e| match e {
            StageEvent::AdvancedDenoise { denoiser, .. } => Some(*denoiser),
            _ => None,
        })
        .collect();
    if order.windows(2).any(|w| w[1] < w[0]) {
        return Err("advanced denoisers run out of order".into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 6

fn metric_oracles() -> Result<String, String> {
    // Frechet distance in one dimension.
    let mut worst_fid: f64 = 0.0;
    for case in 0..100u64 {
        let mut r = stream(6, &[case]);
        let (ma, sa) = (r.random_range(-3.0..3.0), r.random_range(0.1..3.0));
        let (mb, sb) = (r.random_range(-3.0..3.0), r.random_range(0.1..3.0));
        let a: Vec<f64> = gaussian_vec(&mut r, 100)
            .iter()
            .map(|v| ma + sa * v)
            .collect();
        let b: Vec<f64> = gaussian_vec(&mut r, 100)
            .iter()
            .map(|v| mb + sb * v)
            .collect();
        let wrap = |v: &[f64]| v.iter().map(|x| vec![*x]).collect::<Vec<_>>();
        let got = fid(
            &GaussianStats::fit(&wrap(&a)).map_err(|e| e.to_string())?,
            &GaussianStats::fit(&wrap(&b)).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        worst_fid = worst_fid.max((got - common::fid_1d(&a, &b)).abs());
    }
    if worst_fid > 1e-9 {
        return Err(format!("1-D FID off by {worst_fid:.2e}"));
    }

    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let mut r = stream(7, &[case]);
        let labels = 40;
        let dim = 5;
        // Integer-valued features on even cases to force distance ties.
        let feat = |r: &mut rng::StreamRng| -> Vec<f64> {
            if case % 2 == 0 {
                (0..dim).map(|_| r.random_range(-2..=2) as f64).collect()
            } else {
                gaussian_vec(r, dim)
            }
        };
        let cond_feats: BTreeMap<usize, Vec<f64>> =
            (0..labels).map(|c| (c, feat(&mut r))).collect();
        let ids: Vec<usize> = (0..100).map(|i| i % labels).collect();
        let motions: Vec<Vec<f64>> = ids
            .iter()
            .map(|c| {
                let noise = feat(&mut r);
                cond_feats[c]
                    .iter()
                    .zip(noise)
                    .map(|(a, n)| a + 0.7 * n)
                    .collect()
            })
            .collect();

        let pools = draw_pools(&ids, 32, case).map_err(|e| e.to_string())?;
        let got =
            r_precision_with_pools(&motions, &pools, &cond_feats).map_err(|e| e.to_string())?;
        let want = common::r_precision_naive(&motions, &pools, &cond_feats);
        if [got.top1, got.top2, got.top3] != want {
            return Err(format!(
                "case {case}: R-precision {got:?}, reference {want:?}"
            ));
        }

        let conds: Vec<Vec<f64>> = ids.iter().map(|c| cond_feats[c].clone()).collect();
        let pairs: Vec<FeaturePair> = motions
            .iter()
            .zip(&conds)
            .map(|(m, c)| FeaturePair::new(m.clone(), c.clone()).unwrap())
            .collect();
        let mm = mm_dist(&pairs).map_err(|e| e.to_string())?;
        worst = worst.max((mm - common::mm_dist_naive(&motions, &conds)).abs());

        let div = diversity(&motions, 30, case).map_err(|e| e.to_string())?;
        let (a, b) = diversity_indices(motions.len(), 30, case).map_err(|e| e.to_string())?;
        if a.iter().any(|i| b.contains(i)) {
            return Err(format!("case {case}: diversity subsets overlap"));
        }
        worst = worst.max((div - common::paired_mean_naive(&motions, &a, &b)).abs());

        let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for (m, &c) in motions.iter().zip(&ids) {
            groups.entry(c % 10).or_default().push(m.clone());
        }
        let mmod = mmodality(&groups, 3, case).map_err(|e| e.to_string())?;
        let mut want = 0.0;
        for (&c, feats) in &groups {
            let (a, b) = mmodality_indices(c, feats.len(), 3, case).map_err(|e| e.to_string())?;
            want += common::paired_mean_naive(feats, &a, &b);
        }
        want /= groups.len() as f64;
        worst = worst.max((mmod - want).abs());
    }
    ensure(
        worst <= 1e-12,
        format!("FID within {worst_fid:.1e} over 100 cases; R-precision exact; distances within {worst:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 7, 8, 9: trained pipelines, one per seed.

const SEEDS: [u64; 3] = [0, 1, 2];
const TOKEN_COUNTS: [usize; 3] = [1, 4, 8];

struct SeedRun {
    vae_mse: [f64; 3],
    vae_time: Duration,
    b2a: MetricReport,
    advanced_only: MetricReport,
    weighted: MetricReport,
}

fn run_seed(seed: u64) -> Result<SeedRun, String> {
    let e = |e: b2a_hdm::Error| e.to_string();
    let mut cfg = RunConfig::default();
    cfg.set_all_seeds(seed);
    let data = prepare_data(&cfg).map_err(e)?;
    let splits = &data.splits;
    let train_norm = data
        .stats
        .normalize_all(&splits.train)
        .map_err(|x| x.to_string())?;
    let frames: Vec<Tensor> = train_norm.iter().map(|s| s.frames.clone()).collect();
    let val = normalized_frames(&data.stats, &splits.val).map_err(e)?;
    let val_refs: Vec<&Tensor> = val.iter().collect();

    let vae_start = Instant::now();
    let mut vae_mse = [0.0; 3];
    let mut advanced_vae = None;
    for (i, &k) in TOKEN_COUNTS.iter().enumerate() {
        let mut c = cfg.clone();
        c.vae_advanced.tokens = k;
        let (vae, _) = fit_vae(&c, VaeRole::Advanced, &frames).map_err(e)?;
        vae_mse[i] = vae
            .reconstruction_mse(&val_refs, c.vae_advanced.batch)
            .map_err(|x| x.to_string())?;
        if k == cfg.vae_advanced.tokens {
            advanced_vae = Some(vae);
        }
    }
    let vae_time = vae_start.elapsed();
    let advanced_vae = advanced_vae.ok_or("default advanced token count not in the sweep")?;

    let schedule = noise_schedule(&cfg).map_err(e)?;
    let (evaluator, _) = fit_evaluator(&cfg, &splits.train, &splits.val).map_err(e)?;
    let (basic_vae, _) = fit_vae(&cfg, VaeRole::Basic, &frames).map_err(e)?;
    let fit =
        |c: &RunConfig, set, vae| fit_denoisers(c, set, vae, &train_norm, &schedule).map(|r| r.0);
    let basic = fit(&cfg, DenoiserSet::Basic, &basic_vae).map_err(e)?;
    let advanced = fit(&cfg, DenoiserSet::Advanced, &advanced_vae).map_err(e)?;
    let mut unweighted_cfg = cfg.clone();
    unweighted_cfg.denoiser.loss_weight_advanced = false;
    let advanced_only =
        fit(&unweighted_cfg, DenoiserSet::AdvancedOnly, &advanced_vae).map_err(e)?;
    let mut weighted_cfg = cfg.clone();
    weighted_cfg.denoiser.loss_weight_advanced = true;
    let weighted = fit(&weighted_cfg, DenoiserSet::AdvancedOnly, &advanced_vae).map_err(e)?;

    let models = ModelSet {
        basic_vae: Some(basic_vae),
        advanced_vae: Some(advanced_vae),
        basic: Some(basic),
        advanced: Some(advanced),
        advanced_only: Some(advanced_only),
    };
    let weighted_models = ModelSet {
        advanced_only: Some(weighted),
        ..models.clone()
    };
    let plan = generation_plan(
        &splits.test,
        cfg.num_labels(),
        cfg.metrics.samples_per_condition,
        cfg.data.max_len,
    );
    let protocol = EvalProtocol::from_config(&cfg);
    let score = |mode, m: &ModelSet| -> Result<MetricReport, String> {
        let seqs = generate(
            &cfg,
            mode,
            m,
            &schedule,
            &data.stats,
            &plan,
            cfg.seeds.sample,
        )
        .map_err(e)?;
        evaluate(
            &evaluator,
            &splits.test,
            &seqs,
            protocol,
            cfg.seeds.sample,
            cfg.seeds.metrics,
        )
        .map_err(e)
    };
    Ok(SeedRun {
        vae_mse,
        vae_time,
        b2a: score(SampleMode::B2a, &models)?,
        advanced_only: score(SampleMode::AdvancedOnly, &models)?,
        weighted: score(SampleMode::AdvancedOnly, &weighted_models)?,
    })
}

fn seed_runs() -> Result<&'static [SeedRun], String> {
    static RUNS: OnceLock<Result<Vec<SeedRun>, String>> = OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| run_seed(s)).collect())
        .as_deref()
        .map_err(Clone::clone)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.4}"))
        .collect::<Vec<_>>()
        .join("/")
}

fn vae_tokens() -> Result<String, String> {
    let runs = seed_runs()?;
    let vae_time: Duration = runs.iter().map(|r| r.vae_time).sum();
    within(vae_time, Duration::from_secs(600), "VAE sweep")?;
    let med: Vec<f64> = (0..TOKEN_COUNTS.len())
        .map(|i| median(runs.iter().map(|r| r.vae_mse[i]).collect()))
        .collect();
    ensure(
        med.windows(2).all(|w| w[1] <= w[0]),
        format!(
            "median val MSE for K=1/4/8: {} (training {vae_time:.0?})",
            fmt_list(&med)
        ),
    )
}

fn b2a_vs_advanced() -> Result<String, String> {
    let start = Instant::now();
    let runs = seed_runs()?;
    within(
        start.elapsed(),
        Duration::from_secs(1800),
        "training and sampling",
    )?;
    let fid_b2a = median(runs.iter().map(|r| r.b2a.fid).collect());
    let fid_adv = median(runs.iter().map(|r| r.advanced_only.fid).collect());
    let top_b2a = median(runs.iter().map(|r| r.b2a.r_precision.top1).collect());
    let top_adv = median(
        runs.iter()
            .map(|r| r.advanced_only.r_precision.top1)
            .collect(),
    );
    ensure(
        fid_b2a <= 0.9 * fid_adv && top_b2a >= top_adv,
        format!(
            "median FID {fid_b2a:.4} vs {fid_adv:.4} (ratio {:.3}), top-1 {top_b2a:.3} vs {top_adv:.3}",
            fid_b2a / fid_adv
        ),
    )
}

fn weighted_loss() -> Result<String, String> {
    let runs = seed_runs()?;
    let w: Vec<f64> = runs.iter().map(|r| r.weighted.fid).collect();
    let u: Vec<f64> = runs.iter().map(|r| r.advanced_only.fid).collect();
    let (mw, mu) = (median(w.clone()), median(u.clone()));
    ensure(
        mw <= mu,
        format!(
            "median FID weighted {mw:.4} ({}) vs unweighted {mu:.4} ({})",
            fmt_list(&w),
            fmt_list(&u)
        ),
    )
}

// ---------------------------------------------------------------------------
// 10

const RERUN_FLAGS: &[&str] = &[
    "--seed",
    "3",
    "--steps",
    "20",
    "--vae-epochs",
    "2",
    "--denoiser-epochs",
    "3",
    "--evaluator-epochs",
    "2",
    "--set",
    "data.count=400",
];

fn b2a(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_b2a"))
        .args(args)
        .args(RERUN_FLAGS)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!(
            "`b2a {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&status.stderr).trim()
        ));
    }
    Ok(())
}

fn full_run(out: &Path) -> Result<(), String> {
    b2a(out, &["gen-data"])?;
    b2a(out, &["train", "all"])?;
    for mode in ["b2a", "advanced-only"] {
        b2a(out, &["sample", "--mode", mode])?;
        b2a(out, &["evaluate", "--mode", mode])?;
    }
    Ok(())
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn reproducible() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    // Both runs use the same output path, which is echoed into artifacts.
    let work = tmp.path().join("run");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dest in [&a, &b] {
        full_run(&work)?;
        std::fs::rename(&work, dest).map_err(|e| e.to_string())?;
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    if fa != fb {
        return Err("the two runs wrote different file sets".into());
    }
    let mut seqs = 0;
    let mut report_diff: f64 = 0.0;
    for rel in &fa {
        let (x, y) = (
            std::fs::read(a.join(rel)).unwrap(),
            std::fs::read(b.join(rel)).unwrap(),
        );
        let name = rel.to_string_lossy();
        if name.ends_with(".seq") {
            seqs += 1;
        }
        if name.starts_with("reports") && name.ends_with(".txt") && !name.ends_with(".config.toml")
        {
            let ra =
                MetricReport::from_text(&String::from_utf8_lossy(&x)).map_err(|e| e.to_string())?;
            let rb =
                MetricReport::from_text(&String::from_utf8_lossy(&y)).map_err(|e| e.to_string())?;
            report_diff = report_diff.max(ra.max_abs_diff(&rb));
        } else if x != y {
            return Err(format!("{name} differs between runs"));
        }
    }
    if seqs == 0 {
        return Err("no sequence files were written".into());
    }
    ensure(
        report_diff <= 1e-12,
        format!(
            "{} files compared, {seqs} sequence files identical, reports within {report_diff:.1e}",
            fa.len()
        ),
    )
}
