//! Self-describing binary checkpoint container and model (de)serialization.
//!
//! ```text
//! magic     8 bytes  "B2ACKPT\0"
//! version   u32 LE
//! seed      u64 LE
//! n_meta    u32 LE, then n_meta × (key, value) length-prefixed UTF-8
//! n_tensor  u32 LE, then per tensor:
//!   name (length-prefixed UTF-8), rank u32, dims u64 × rank,
//!   step_count u64, value, first moment, second moment (f64 LE each)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autodiff::{AutodiffError, ParamStore, Parameter, Tensor};
use crate::dataset::DatasetStats;
use crate::denoiser::{DenoiserConfig, DenoiserError, DenoiserModel, TimestepRange};
use crate::diffusion::{DiffusionError, NoiseSchedule, ScheduleParams};
use crate::metrics::{Evaluator, EvaluatorConfig, MetricsError};
use crate::vae::{LatentSpec, LatentStats, VaeConfig, VaeError, VaeModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"B2ACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint is missing `{0}`")]
    Missing(String),
    #[error("checkpoint holds a `{found}`, expected a `{expected}`")]
    Kind { expected: String, found: String },
    #[error("checkpoint conflicts with configuration: {0}")]
    Conflict(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Key-value metadata, named tensors with optimizer state, and a seed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<Parameter>,
    pub seed: u64,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| CheckpointError::Malformed(format!("invalid UTF-8: {e}")))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor, CheckpointError> {
        let n: usize = shape.iter().product();
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| CheckpointError::Malformed("tensor size overflow".into()))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    }
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("kind".to_string(), kind.to_string());
        Self {
            metadata,
            tensors: Vec::new(),
            seed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for p in &self.tensors {
            put_str(&mut out, &p.name);
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&p.step_count.to_le_bytes());
            put_f64s(&mut out, &p.value);
            put_f64s(&mut out, &p.first_moment);
            put_f64s(&mut out, &p.second_moment);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Malformed("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Malformed(format!(
                "unsupported version {version}"
            )));
        }
        let seed = r.u64()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let step_count = r.u64()?;
            let value = r.tensor(&shape)?;
            let first_moment = r.tensor(&shape)?;
            let second_moment = r.tensor(&shape)?;
            tensors.push(Parameter {
                name,
                value,
                first_moment,
                second_moment,
                step_count,
            });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            metadata,
            tensors,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str, CheckpointError> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Missing(key.to_string()))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| CheckpointError::Malformed(format!("cannot parse `{key}` = `{raw}`")))
    }

    pub fn set_toml<T: Serialize>(&mut self, key: &str, value: &T) {
        let text = toml::to_string(value).expect("config types serialize to TOML");
        self.set(key, text);
    }

    pub fn get_toml<T: DeserializeOwned>(&self, key: &str) -> Result<T, CheckpointError> {
        toml::from_str(self.get(key)?)
            .map_err(|e| CheckpointError::Malformed(format!("`{key}`: {e}")))
    }

    pub fn kind(&self) -> Result<&str, CheckpointError> {
        self.get("kind")
    }

    fn expect_kind(&self, expected: &str) -> Result<(), CheckpointError> {
        let found = self.kind()?;
        if found != expected {
            return Err(CheckpointError::Kind {
                expected: expected.to_string(),
                found: found.to_string(),
            });
        }
        Ok(())
    }

    fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, p) in store.iter() {
            let mut p = p.clone();
            p.name = format!("{prefix}{}", p.name);
            self.tensors.push(p);
        }
    }

    fn push_plain(&mut self, name: &str, t: &Tensor) {
        self.tensors.push(Parameter::new(name, t.clone()));
    }

    fn plain(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// Parameters stored under `prefix`, with the prefix stripped.
    fn take_store(&self, prefix: &str) -> Vec<Parameter> {
        self.tensors
            .iter()
            .filter_map(|p| {
                p.name.strip_prefix(prefix).map(|rest| Parameter {
                    name: rest.to_string(),
                    ..p.clone()
                })
            })
            .collect()
    }
}

pub fn vae_checkpoint(vae: &VaeModel, seed: u64) -> Checkpoint {
    let mut c = Checkpoint::new("vae", seed);
    c.set_toml("vae.config", vae.config());
    c.set("vae.latent", vae.latent_spec());
    c.push_store("model/", vae.store());
    if let Some(stats) = vae.latent_stats() {
        c.push_plain("latent_stats/mean", &stats.mean);
        c.push_plain("latent_stats/std", &stats.std);
    }
    c
}

/// Restores a VAE. When `expect` is given, a different feature width or
/// latent spec is an error.
pub fn load_vae(
    c: &Checkpoint,
    expect: Option<(usize, LatentSpec)>,
) -> Result<VaeModel, CheckpointError> {
    c.expect_kind("vae")?;
    let config: VaeConfig = c.get_toml("vae.config")?;
    if let Some((features, latent)) = expect {
        if config.features != features || config.latent != latent {
            return Err(CheckpointError::Conflict(format!(
                "VAE checkpoint has J={} and latent {}, configuration wants J={} and latent {}",
                config.features, config.latent, features, latent
            )));
        }
    }
    let mut vae = VaeModel::new(config, c.seed)?;
    vae.store_mut().load_from(c.take_store("model/"))?;
    if let Ok(mean) = c.plain("latent_stats/mean") {
        let std = c.plain("latent_stats/std")?;
        vae.set_latent_stats(Some(LatentStats {
            mean: mean.clone(),
            std: std.clone(),
        }));
    }
    Ok(vae)
}

/// One checkpoint for a set of denoisers sharing a schedule; each keeps
/// its own timestep range.
pub fn denoiser_checkpoint(
    models: &[DenoiserModel],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Checkpoint {
    let mut c = Checkpoint::new("denoisers", seed);
    c.set("count", models.len());
    c.set_toml("schedule", &schedule.params());
    c.set("schedule.digest", schedule.digest());
    for (i, m) in models.iter().enumerate() {
        c.set_toml(&format!("denoiser.{i}.config"), m.config());
        c.set(format!("denoiser.{i}.latent"), m.latent_spec());
        c.set(format!("denoiser.{i}.t_start"), m.t_range().start);
        c.set(format!("denoiser.{i}.t_end"), m.t_range().end);
        c.push_store(&format!("d{i}/"), m.store());
    }
    c
}

/// Restores every denoiser and the verified schedule. When `expect` is
/// given, denoisers in another latent space are rejected.
pub fn load_denoisers(
    c: &Checkpoint,
    expect: Option<LatentSpec>,
) -> Result<(Vec<DenoiserModel>, NoiseSchedule), CheckpointError> {
    c.expect_kind("denoisers")?;
    let params: ScheduleParams = c.get_toml("schedule")?;
    let schedule = NoiseSchedule::restore(params, c.get("schedule.digest")?)?;
    let count: usize = c.parse("count")?;
    let mut models = Vec::with_capacity(count);
    for i in 0..count {
        let config: DenoiserConfig = c.get_toml(&format!("denoiser.{i}.config"))?;
        if let Some(spec) = expect {
            if config.latent != spec {
                return Err(CheckpointError::Conflict(format!(
                    "denoiser {i} operates in latent {}, configuration wants {spec}",
                    config.latent
                )));
            }
        }
        if config.steps != schedule.steps() {
            return Err(CheckpointError::Conflict(format!(
                "denoiser {i} was built for {} steps, schedule has {}",
                config.steps,
                schedule.steps()
            )));
        }
        let range = TimestepRange::new(
            c.parse(&format!("denoiser.{i}.t_start"))?,
            c.parse(&format!("denoiser.{i}.t_end"))?,
        )?;
        let mut m = DenoiserModel::new(config, range, c.seed)?;
        m.store_mut().load_from(c.take_store(&format!("d{i}/")))?;
        models.push(m);
    }
    Ok((models, schedule))
}

pub fn evaluator_checkpoint(e: &Evaluator, seed: u64) -> Checkpoint {
    let mut c = Checkpoint::new("evaluator", seed);
    c.set_toml("evaluator.config", e.config());
    let stats = e.stats();
    let j = stats.features();
    c.push_plain(
        "stats/mean",
        &Tensor::new(vec![j], stats.mean.clone()).expect("shape"),
    );
    c.push_plain(
        "stats/std",
        &Tensor::new(vec![j], stats.std.clone()).expect("shape"),
    );
    c.push_store("model/", e.store());
    c
}

pub fn load_evaluator(c: &Checkpoint) -> Result<Evaluator, CheckpointError> {
    c.expect_kind("evaluator")?;
    let config: EvaluatorConfig = c.get_toml("evaluator.config")?;
    let stats = DatasetStats {
        mean: c.plain("stats/mean")?.data().to_vec(),
        std: c.plain("stats/std")?.data().to_vec(),
    };
    let mut e = Evaluator::new(config, stats, c.seed)?;
    e.store_mut().load_from(c.take_store("model/"))?;
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamId;

    fn vae() -> VaeModel {
        VaeModel::new(
            VaeConfig {
                features: 3,
                max_len: 6,
                latent: LatentSpec::new(2, 4),
                hidden: 8,
                blocks: 1,
                dropout: 0.0,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let mut c = vae_checkpoint(&vae(), 11);
        c.tensors[0].first_moment.data_mut()[0] = f64::MIN_POSITIVE;
        c.tensors[0].second_moment.data_mut()[1] = 1.0 / 3.0;
        c.tensors[0].step_count = 17;
        c.set("note", "é = ü");
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn vae_restores_and_rejects_conflicts() {
        let mut v = vae();
        v.set_latent_stats(Some(LatentStats {
            mean: Tensor::full(&[2, 4], 0.5),
            std: Tensor::full(&[2, 4], 2.0),
        }));
        let c = vae_checkpoint(&v, 11);
        let back = load_vae(&c, Some((3, LatentSpec::new(2, 4)))).unwrap();
        assert_eq!(back.store(), v.store());
        assert_eq!(back.latent_stats(), v.latent_stats());
        assert!(matches!(
            load_vae(&c, Some((4, LatentSpec::new(2, 4)))),
            Err(CheckpointError::Conflict(_))
        ));
        assert!(matches!(
            load_vae(&c, Some((3, LatentSpec::new(4, 4)))),
            Err(CheckpointError::Conflict(_))
        ));
        assert!(matches!(
            load_evaluator(&c),
            Err(CheckpointError::Kind { .. })
        ));
    }

    #[test]
    fn denoisers_keep_ranges_and_verify_schedule() {
        let sched = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let config = DenoiserConfig {
            latent: LatentSpec::new(2, 3),
            num_labels: 4,
            steps: 10,
            hidden: 8,
            blocks: 1,
            time_features: 8,
            dropout: 0.0,
        };
        let mut models = vec![
            DenoiserModel::new(config, TimestepRange::new(6, 10).unwrap(), 1).unwrap(),
            DenoiserModel::new(config, TimestepRange::new(1, 5).unwrap(), 2).unwrap(),
        ];
        models[1].store_mut().get_mut(ParamId(0)).value.data_mut()[0] = 42.0;
        let c = denoiser_checkpoint(&models, &sched, 5);
        let (back, s) = load_denoisers(&c, Some(LatentSpec::new(2, 3))).unwrap();
        assert_eq!(s, sched);
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].t_range(), TimestepRange::new(6, 10).unwrap());
        assert_eq!(back[1].store(), models[1].store());
        assert!(load_denoisers(&c, Some(LatentSpec::new(4, 3))).is_err());

        let mut tampered = c.clone();
        tampered.set("schedule.digest", "00");
        assert!(matches!(
            load_denoisers(&tampered, None),
            Err(CheckpointError::Diffusion(
                DiffusionError::DigestMismatch { .. }
            ))
        ));
    }
}
