//! Hierarchical basic-to-advanced reverse diffusion.
//!
//! The basic denoiser runs the full reverse chain in the low-dimensional
//! latent space; the result is decoded, re-encoded by the advanced VAE,
//! re-noised to step `T_h`, and finished by the advanced denoisers, each
//! responsible for one contiguous timestep segment.

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::denoiser::{
    combine_guidance, Condition, DenoiserError, DenoiserModel, GuidanceConfig, TimestepRange,
};
use crate::diffusion::{DiffusionError, NoiseSchedule};
use crate::rng::{self, streams, StreamRng};
use crate::vae::{LatentCode, LatentSpec, VaeError, VaeModel};

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("invalid denoiser schedule: {0}")]
    Schedule(String),
    #[error("inconsistent sampler bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// One denoiser's share of the reverse chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub denoiser: usize,
    pub range: TimestepRange,
}

/// Partition of the advanced reverse steps `[1, T_h]` among `k` denoisers,
/// listed in execution order (highest timesteps first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserSchedule {
    total: usize,
    basic_steps: usize,
    advanced_steps: usize,
    segments: Vec<Segment>,
}

/// `floor(x + 1/2)`, tolerant of representation error just below a half.
fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

impl DenoiserSchedule {
    /// `T_h = round_half_up(rate * T)` split into `k` near-equal contiguous
    /// segments; denoiser 0 takes the highest timesteps and any remainder
    /// goes to the lowest segment.
    pub fn build(total: usize, advanced_rate: f64, k: usize) -> Result<Self, SamplerError> {
        if !(advanced_rate > 0.0 && advanced_rate <= 1.0) {
            return Err(SamplerError::Schedule(format!(
                "advanced rate {advanced_rate} not in (0, 1]"
            )));
        }
        if k == 0 {
            return Err(SamplerError::Schedule(
                "need at least one advanced denoiser".into(),
            ));
        }
        let advanced = round_half_up(advanced_rate * total as f64).min(total);
        if advanced < k {
            return Err(SamplerError::Schedule(format!(
                "{advanced} advanced steps cannot be shared by {k} denoisers"
            )));
        }
        let base = advanced / k;
        let mut segments = Vec::with_capacity(k);
        let mut hi = advanced;
        for i in 0..k {
            let len = if i + 1 == k { hi } else { base };
            let lo = hi + 1 - len;
            segments.push(Segment {
                denoiser: i,
                range: TimestepRange { start: lo, end: hi },
            });
            hi = lo - 1;
        }
        Self::from_segments(total, advanced, segments)
    }

    /// Validates an explicit partition.
    pub fn from_segments(
        total: usize,
        advanced_steps: usize,
        segments: Vec<Segment>,
    ) -> Result<Self, SamplerError> {
        if advanced_steps == 0 || advanced_steps > total {
            return Err(SamplerError::Schedule(format!(
                "advanced steps {advanced_steps} must lie in 1..={total}"
            )));
        }
        let mut expect_end = advanced_steps;
        for (i, seg) in segments.iter().enumerate() {
            if seg.denoiser != i {
                return Err(SamplerError::Schedule(format!(
                    "segment {i} assigned to denoiser {}",
                    seg.denoiser
                )));
            }
            if seg.range.end != expect_end
                || seg.range.start == 0
                || seg.range.start > seg.range.end
            {
                return Err(SamplerError::Schedule(format!(
                    "segment {i} {} leaves a gap or overlap below {expect_end}",
                    seg.range
                )));
            }
            expect_end = seg.range.start - 1;
        }
        if expect_end != 0 {
            return Err(SamplerError::Schedule(format!(
                "timesteps 1..={expect_end} are not covered"
            )));
        }
        Ok(Self {
            total,
            basic_steps: total - advanced_steps,
            advanced_steps,
            segments,
        })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn basic_steps(&self) -> usize {
        self.basic_steps
    }

    pub fn advanced_steps(&self) -> usize {
        self.advanced_steps
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Denoiser responsible for advanced timestep `t`.
    pub fn denoiser_for(&self, t: usize) -> Option<usize> {
        self.segments
            .iter()
            .find(|s| s.range.contains(t))
            .map(|s| s.denoiser)
    }
}

/// Events emitted, in order, by an instrumented sampling run.
#[derive(Debug, Clone, PartialEq)]
pub enum StageEvent {
    BasicDenoise {
        t: usize,
        space: LatentSpec,
    },
    BasicDecode {
        space: LatentSpec,
    },
    AdvancedEncode {
        space: LatentSpec,
    },
    QSample {
        t: usize,
        space: LatentSpec,
    },
    AdvancedDenoise {
        t: usize,
        denoiser: usize,
        space: LatentSpec,
    },
    AdvancedDecode {
        space: LatentSpec,
    },
}

fn emit(trace: &mut Option<&mut Vec<StageEvent>>, e: StageEvent) {
    if let Some(t) = trace.as_deref_mut() {
        t.push(e);
    }
}

/// Requests advanced together through one batched chain.
const LANES: usize = 32;

/// Everything the hierarchical sampler needs.
#[derive(Debug, Clone)]
pub struct SamplerBundle {
    pub basic_vae: VaeModel,
    pub advanced_vae: VaeModel,
    pub basic_denoiser: DenoiserModel,
    pub advanced_denoisers: Vec<DenoiserModel>,
    pub schedule: NoiseSchedule,
    pub denoiser_schedule: DenoiserSchedule,
    pub guidance: GuidanceConfig,
    /// Re-encode with a posterior sample instead of the posterior mean.
    pub bridge_sample: bool,
}

impl SamplerBundle {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let steps = self.schedule.steps();
        if self.denoiser_schedule.total() != steps {
            return Err(SamplerError::Bundle(format!(
                "denoiser schedule covers {} steps, noise schedule has {steps}",
                self.denoiser_schedule.total()
            )));
        }
        let (bc, ac) = (self.basic_vae.config(), self.advanced_vae.config());
        if bc.features != ac.features {
            return Err(SamplerError::Bundle(format!(
                "basic VAE has {} features, advanced VAE {}",
                bc.features, ac.features
            )));
        }
        check_denoiser(
            &self.basic_denoiser,
            &self.basic_vae,
            steps,
            TimestepRange::full(steps),
            "basic",
        )?;
        let segs = self.denoiser_schedule.segments();
        if segs.len() != self.advanced_denoisers.len() {
            return Err(SamplerError::Bundle(format!(
                "{} segments but {} advanced denoisers",
                segs.len(),
                self.advanced_denoisers.len()
            )));
        }
        for (seg, d) in segs.iter().zip(&self.advanced_denoisers) {
            check_denoiser(d, &self.advanced_vae, steps, seg.range, "advanced")?;
        }
        Ok(())
    }

    pub fn sample_b2a(&self, c: Condition, len: usize, seed: u64) -> Result<Tensor, SamplerError> {
        self.sample_b2a_traced(c, len, seed, None)
    }

    pub fn sample_b2a_traced(
        &self,
        c: Condition,
        len: usize,
        seed: u64,
        trace: Option<&mut Vec<StageEvent>>,
    ) -> Result<Tensor, SamplerError> {
        self.validate()?;
        Ok(self.b2a_lanes(&[(c, len)], &[seed], trace)?.remove(0))
    }

    fn b2a_lanes(
        &self,
        requests: &[(Condition, usize)],
        seeds: &[u64],
        mut trace: Option<&mut Vec<StageEvent>>,
    ) -> Result<Vec<Tensor>, SamplerError> {
        let conds: Vec<Condition> = requests.iter().map(|r| r.0).collect();
        let z_low = basic_chain(
            &self.basic_vae,
            &self.basic_denoiser,
            &self.schedule,
            self.guidance,
            &conds,
            seeds,
            &mut trace,
        )?;
        let basic_space = self.basic_vae.latent_spec();
        emit(&mut trace, StageEvent::BasicDecode { space: basic_space });
        let items: Vec<(&LatentCode, usize)> =
            z_low.iter().zip(requests).map(|(z, r)| (z, r.1)).collect();
        let s_low = self.basic_vae.decode_batch(&items)?;

        let adv_space = self.advanced_vae.latent_spec();
        emit(&mut trace, StageEvent::AdvancedEncode { space: adv_space });
        let refs: Vec<&Tensor> = s_low.iter().collect();
        let posts = self.advanced_vae.encode_batch(&refs)?;
        let stats = self.advanced_vae.latent_stats_or_identity();
        let t_h = self.denoiser_schedule.advanced_steps();
        emit(
            &mut trace,
            StageEvent::QSample {
                t: t_h,
                space: adv_space,
            },
        );
        let mut z = Vec::with_capacity(requests.len());
        for (post, &seed) in posts.into_iter().zip(seeds) {
            let mut bridge_rng = rng::stream(seed, &[streams::SAMPLE, 1]);
            let eps = rng::gaussian(&mut bridge_rng, &adv_space.shape());
            let z0 = if self.bridge_sample {
                post.sample(&mut bridge_rng)
            } else {
                post.mean
            };
            let z0 = stats.normalize(&z0);
            z.push(z0.with_tensor(self.schedule.q_sample(z0.tensor(), t_h, &eps)?));
        }

        let mut step_rngs: Vec<StreamRng> = seeds
            .iter()
            .map(|&s| rng::stream(s, &[streams::SAMPLE, 2]))
            .collect();
        for seg in self.denoiser_schedule.segments() {
            let d = &self.advanced_denoisers[seg.denoiser];
            for t in (seg.range.start..=seg.range.end).rev() {
                emit(
                    &mut trace,
                    StageEvent::AdvancedDenoise {
                        t,
                        denoiser: seg.denoiser,
                        space: adv_space,
                    },
                );
                z = ancestral_steps(
                    d,
                    &self.schedule,
                    self.guidance,
                    &conds,
                    z,
                    t,
                    &mut step_rngs,
                )?;
            }
        }
        emit(&mut trace, StageEvent::AdvancedDecode { space: adv_space });
        let z: Vec<LatentCode> = z.iter().map(|z| stats.denormalize(z)).collect();
        let items: Vec<(&LatentCode, usize)> =
            z.iter().zip(requests).map(|(z, r)| (z, r.1)).collect();
        Ok(self.advanced_vae.decode_batch(&items)?)
    }

    /// Output of the basic stage alone (full chain then basic decode), drawing
    /// from the same random stream as the hierarchical run.
    pub fn basic_stage(&self, c: Condition, len: usize, seed: u64) -> Result<Tensor, SamplerError> {
        let z = basic_chain(
            &self.basic_vae,
            &self.basic_denoiser,
            &self.schedule,
            self.guidance,
            &[c],
            &[seed],
            &mut None,
        )?;
        Ok(self.basic_vae.decode(&z[0], len)?)
    }

    /// Samples many requests; request `i` uses a stream derived from
    /// `(seed, i)` and yields the same sequence as a lone `sample_b2a` call.
    pub fn sample_b2a_many(
        &self,
        requests: &[(Condition, usize)],
        seed: u64,
    ) -> Result<Vec<Tensor>, SamplerError> {
        self.validate()?;
        in_lanes(requests, seed, |r, s| self.b2a_lanes(r, s, None))
    }
}

/// Splits requests into fixed lane groups, runs them in parallel and
/// concatenates the results in request order.
fn in_lanes<F>(
    requests: &[(Condition, usize)],
    seed: u64,
    run: F,
) -> Result<Vec<Tensor>, SamplerError>
where
    F: Fn(&[(Condition, usize)], &[u64]) -> Result<Vec<Tensor>, SamplerError> + Sync,
{
    let seeds: Vec<u64> = (0..requests.len())
        .map(|i| rng::derive_seed(seed, &[i as u64]))
        .collect();
    let groups: Vec<Vec<Tensor>> = requests
        .par_chunks(LANES)
        .zip(seeds.par_chunks(LANES))
        .map(|(r, s)| run(r, s))
        .collect::<Result<_, _>>()?;
    Ok(groups.into_iter().flatten().collect())
}

fn check_denoiser(
    d: &DenoiserModel,
    vae: &VaeModel,
    steps: usize,
    needed: TimestepRange,
    role: &str,
) -> Result<(), SamplerError> {
    if d.latent_spec() != vae.latent_spec() {
        return Err(SamplerError::Bundle(format!(
            "{role} denoiser works in {} but its VAE in {}",
            d.latent_spec(),
            vae.latent_spec()
        )));
    }
    if d.config().steps != steps {
        return Err(SamplerError::Bundle(format!(
            "{role} denoiser was built for {} steps, schedule has {steps}",
            d.config().steps
        )));
    }
    if !d.t_range().contains_range(needed) {
        return Err(SamplerError::Bundle(format!(
            "{role} denoiser trained on {} cannot serve {needed}",
            d.t_range()
        )));
    }
    Ok(())
}

/// One guided reverse step for every lane; lane `i` draws its noise from
/// `rngs[i]`.
fn ancestral_steps(
    d: &DenoiserModel,
    sched: &NoiseSchedule,
    guidance: GuidanceConfig,
    conds: &[Condition],
    z: Vec<LatentCode>,
    t: usize,
    rngs: &mut [StreamRng],
) -> Result<Vec<LatentCode>, SamplerError> {
    let mut items = Vec::with_capacity(2 * z.len());
    for (zi, &c) in z.iter().zip(conds) {
        if c == Condition::Null {
            return Err(DenoiserError::NullGuidance.into());
        }
        items.push((zi, c, t));
        items.push((zi, Condition::Null, t));
    }
    let preds = d.predict_batch(&items)?;
    z.iter()
        .zip(preds.chunks(2))
        .zip(rngs.iter_mut())
        .map(|((zi, p), rng)| {
            let eps = combine_guidance(&p[0], &p[1], guidance.scale);
            let noise = if t > 1 {
                rng::gaussian(rng, &zi.spec().shape())
            } else {
                Tensor::zeros(&zi.spec().shape())
            };
            Ok(zi.with_tensor(sched.reverse_step(zi.tensor(), eps.tensor(), t, &noise)?))
        })
        .collect()
}

/// Full `T`-step chain in the basic space; returns de-standardized codes.
fn basic_chain(
    vae: &VaeModel,
    d: &DenoiserModel,
    sched: &NoiseSchedule,
    guidance: GuidanceConfig,
    conds: &[Condition],
    seeds: &[u64],
    trace: &mut Option<&mut Vec<StageEvent>>,
) -> Result<Vec<LatentCode>, SamplerError> {
    let segs = [Segment {
        denoiser: 0,
        range: TimestepRange::full(sched.steps()),
    }];
    segmented_chain(vae, &[d], &segs, sched, guidance, conds, seeds, trace)
}

#[allow(clippy::too_many_arguments)]
fn segmented_chain(
    vae: &VaeModel,
    denoisers: &[&DenoiserModel],
    segments: &[Segment],
    sched: &NoiseSchedule,
    guidance: GuidanceConfig,
    conds: &[Condition],
    seeds: &[u64],
    trace: &mut Option<&mut Vec<StageEvent>>,
) -> Result<Vec<LatentCode>, SamplerError> {
    let spec = vae.latent_spec();
    let mut rngs: Vec<StreamRng> = seeds
        .iter()
        .map(|&s| rng::stream(s, &[streams::SAMPLE, 0]))
        .collect();
    let mut z: Vec<LatentCode> = rngs
        .iter_mut()
        .map(|r| LatentCode::gaussian(spec, r))
        .collect();
    for seg in segments {
        let d = denoisers[seg.denoiser];
        for t in (seg.range.start..=seg.range.end).rev() {
            emit(trace, StageEvent::BasicDenoise { t, space: spec });
            z = ancestral_steps(d, sched, guidance, conds, z, t, &mut rngs)?;
        }
    }
    let stats = vae.latent_stats_or_identity();
    Ok(z.iter().map(|z| stats.denormalize(z)).collect())
}

/// A single latent space served by one or more denoisers over the full
/// `[1, T]` chain. One denoiser gives plain latent diffusion; several give
/// the segmented single-space variants.
#[derive(Debug, Clone, Copy)]
pub struct SingleSpace<'a> {
    pub vae: &'a VaeModel,
    pub denoisers: &'a [DenoiserModel],
    pub schedule: &'a NoiseSchedule,
    pub guidance: GuidanceConfig,
}

impl SingleSpace<'_> {
    fn segments(&self) -> Result<Vec<Segment>, SamplerError> {
        let steps = self.schedule.steps();
        let ds = DenoiserSchedule::build(steps, 1.0, self.denoisers.len())?;
        for (seg, d) in ds.segments().iter().zip(self.denoisers) {
            check_denoiser(d, self.vae, steps, seg.range, "single-space")?;
        }
        Ok(ds.segments().to_vec())
    }

    fn lanes(
        &self,
        segs: &[Segment],
        requests: &[(Condition, usize)],
        seeds: &[u64],
    ) -> Result<Vec<Tensor>, SamplerError> {
        let refs: Vec<&DenoiserModel> = self.denoisers.iter().collect();
        let conds: Vec<Condition> = requests.iter().map(|r| r.0).collect();
        let z = segmented_chain(
            self.vae,
            &refs,
            segs,
            self.schedule,
            self.guidance,
            &conds,
            seeds,
            &mut None,
        )?;
        let items: Vec<(&LatentCode, usize)> =
            z.iter().zip(requests).map(|(z, r)| (z, r.1)).collect();
        Ok(self.vae.decode_batch(&items)?)
    }

    pub fn sample(&self, c: Condition, len: usize, seed: u64) -> Result<Tensor, SamplerError> {
        let segs = self.segments()?;
        Ok(self.lanes(&segs, &[(c, len)], &[seed])?.remove(0))
    }

    pub fn sample_many(
        &self,
        requests: &[(Condition, usize)],
        seed: u64,
    ) -> Result<Vec<Tensor>, SamplerError> {
        let segs = self.segments()?;
        in_lanes(requests, seed, |r, s| self.lanes(&segs, r, s))
    }
}

/// Plain guided latent diffusion with one VAE and one denoiser.
pub fn sample_single(
    vae: &VaeModel,
    denoiser: &DenoiserModel,
    schedule: &NoiseSchedule,
    guidance: GuidanceConfig,
    c: Condition,
    len: usize,
    seed: u64,
) -> Result<Tensor, SamplerError> {
    SingleSpace {
        vae,
        denoisers: std::slice::from_ref(denoiser),
        schedule,
        guidance,
    }
    .sample(c, len, seed)
}
