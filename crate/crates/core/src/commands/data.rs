use std::fs;

use serde::{Deserialize, Serialize};

use super::{write_file, Context};
use crate::config::DataSection;
use crate::dataset::{self, read_sequence_dir, write_sequence_dir, DatasetStats, Splits};
use crate::pipeline::{prepare_data, DataBundle};
use crate::{Error, Result};

const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Digests {
    all: String,
    train: String,
    val: String,
    test: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    data_seed: u64,
    split_seed: u64,
    data: DataSection,
    digests: Digests,
}

impl Manifest {
    fn same_source(&self, other: &Manifest) -> bool {
        self.format == other.format
            && self.data_seed == other.data_seed
            && self.split_seed == other.split_seed
            && self.data == other.data
    }
}

fn digests(s: &Splits) -> Digests {
    let all: Vec<_> = s
        .train
        .iter()
        .chain(&s.val)
        .chain(&s.test)
        .cloned()
        .collect();
    Digests {
        all: dataset::digest(&all),
        train: dataset::digest(&s.train),
        val: dataset::digest(&s.val),
        test: dataset::digest(&s.test),
    }
}

fn manifest_for(ctx: &Context, splits: &Splits) -> Manifest {
    Manifest {
        format: MANIFEST_FORMAT,
        data_seed: ctx.cfg.seeds.data,
        split_seed: ctx.cfg.seeds.split,
        data: ctx.cfg.data.clone(),
        digests: digests(splits),
    }
}

fn read_manifest(ctx: &Context) -> Result<Option<Manifest>> {
    let path = ctx.layout().manifest();
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Invalid(format!("malformed manifest {}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSummary {
    pub digest: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Generates the synthetic benchmark, writes the three split directories,
/// the normalization statistics and a manifest with content digests.
pub fn gen_data(ctx: &Context) -> Result<DataSummary> {
    let bundle = prepare_data(&ctx.cfg)?;
    let manifest = manifest_for(ctx, &bundle.splits);
    if let Some(old) = read_manifest(ctx)? {
        if !old.same_source(&manifest) && !ctx.force {
            return Err(Error::Config(format!(
                "{} was written by a different data configuration; pass --force to replace it",
                ctx.layout().manifest().display()
            )));
        }
    }
    let layout = ctx.layout();
    let dir = layout.data_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let provenance = format!(
        "data_seed = {}\nsplit_seed = {}\n\n[data]\n{}",
        manifest.data_seed,
        manifest.split_seed,
        toml::to_string(&manifest.data).expect("data section serializes")
    );
    let s = &bundle.splits;
    for (name, seqs) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        write_sequence_dir(&layout.split_dir(name), seqs, &provenance)?;
    }
    write_file(&layout.stats(), bundle.stats.to_text())?;
    write_file(
        &layout.manifest(),
        toml::to_string(&manifest).expect("manifest serializes"),
    )?;
    Ok(DataSummary {
        digest: manifest.digests.all,
        train: s.train.len(),
        val: s.val.len(),
        test: s.test.len(),
    })
}

/// Loaded dataset with the digest other artifacts are keyed on.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub bundle: DataBundle,
    pub digest: String,
}

/// Reads the dataset written by `gen_data`, checking that it matches the
/// current configuration and its recorded digests.
pub fn load_data(ctx: &Context) -> Result<LoadedData> {
    let layout = ctx.layout();
    let manifest = read_manifest(ctx)?.ok_or_else(|| {
        Error::Missing(format!(
            "no dataset under {}; run `b2a gen-data` first",
            layout.data_dir().display()
        ))
    })?;
    let expected = Manifest {
        digests: manifest.digests.clone(),
        ..manifest_for(
            ctx,
            &Splits {
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            },
        )
    };
    if !manifest.same_source(&expected) {
        return Err(Error::Config(format!(
            "dataset under {} was generated with a different data configuration; rerun `b2a gen-data --force`",
            layout.data_dir().display()
        )));
    }
    let splits = Splits {
        train: read_sequence_dir(&layout.split_dir("train"))?,
        val: read_sequence_dir(&layout.split_dir("val"))?,
        test: read_sequence_dir(&layout.split_dir("test"))?,
    };
    if digests(&splits) != manifest.digests {
        return Err(Error::Invalid(format!(
            "dataset under {} does not match its manifest digests; regenerate it with `b2a gen-data --force`",
            layout.data_dir().display()
        )));
    }
    let stats_path = layout.stats();
    let text = fs::read_to_string(&stats_path).map_err(|e| Error::io(&stats_path, e))?;
    let stats = DatasetStats::from_text(&text)?;
    Ok(LoadedData {
        bundle: DataBundle { splits, stats },
        digest: manifest.digests.all,
    })
}
