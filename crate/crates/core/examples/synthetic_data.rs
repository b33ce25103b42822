//! Generates the synthetic benchmark, splits it, and writes a few
//! sequences as `.seq` and CSV files.
//!
//! `cargo run --example synthetic_data -- [out_dir]`

use std::path::PathBuf;

use b2a_hdm::config::RunConfig;
use b2a_hdm::dataset::{read_sequence, write_csv, write_sequence};
use b2a_hdm::pipeline::prepare_data;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("b2a-synthetic"), PathBuf::from);
    std::fs::create_dir_all(&out)?;
    let cfg = RunConfig::default();
    let data = prepare_data(&cfg)?;
    let s = &data.splits;
    println!(
        "{} conditions, splits train {} / val {} / test {}",
        cfg.num_labels(),
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    let lens: Vec<usize> = s.train.iter().map(|q| q.len()).collect();
    println!(
        "train lengths {}..={}, feature means {:?}",
        lens.iter().min().unwrap(),
        lens.iter().max().unwrap(),
        data.stats
            .mean
            .iter()
            .map(|m| format!("{m:.3}"))
            .collect::<Vec<_>>()
    );
    for (i, seq) in s.train.iter().take(3).enumerate() {
        let path = out.join(format!("example{i}.seq"));
        write_sequence(&path, seq, "[example]\nsource = \"synthetic\"\n")?;
        write_csv(&path.with_extension("csv"), seq)?;
        let (back, header) = read_sequence(&path)?;
        assert_eq!(&back, seq);
        println!(
            "{}: label {:?}, {} frames x {} features",
            path.display(),
            header.label,
            header.frames,
            header.features
        );
    }
    Ok(())
}
