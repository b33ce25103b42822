//! Binary sequence container.
//!
//! ```text
//! magic      4 bytes  "BSEQ"
//! version    u16 LE
//! fps        f64 LE
//! features   u32 LE   (J)
//! frames     u32 LE   (N)
//! label      u32 LE   (0xFFFF_FFFF when unlabelled)
//! prov_len   u32 LE
//! provenance prov_len bytes of UTF-8
//! data       N * J f64 LE, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{DatasetError, MotionSequence};
use crate::autodiff::Tensor;

pub const SEQ_MAGIC: &[u8; 4] = b"BSEQ";
pub const SEQ_VERSION: u16 = 1;
const NO_LABEL: u32 = u32::MAX;

/// Decoded header fields, including free-form provenance text.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceHeader {
    pub fps: f64,
    pub features: usize,
    pub frames: usize,
    pub label: Option<usize>,
    pub provenance: String,
}

pub fn encode_sequence(seq: &MotionSequence, provenance: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(30 + provenance.len() + seq.frames.len() * 8);
    out.extend_from_slice(SEQ_MAGIC);
    out.extend_from_slice(&SEQ_VERSION.to_le_bytes());
    out.extend_from_slice(&seq.fps.to_le_bytes());
    out.extend_from_slice(&(seq.features() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    out.extend_from_slice(&seq.label.map_or(NO_LABEL, |l| l as u32).to_le_bytes());
    out.extend_from_slice(&(provenance.len() as u32).to_le_bytes());
    out.extend_from_slice(provenance.as_bytes());
    for v in seq.frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.bytes.len() {
            return Err(DatasetError::Malformed {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_sequence(
    bytes: &[u8],
    path: &Path,
) -> Result<(MotionSequence, SequenceHeader), DatasetError> {
    let malformed = |reason: String| DatasetError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut c = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if c.take(4)? != SEQ_MAGIC {
        return Err(malformed("bad magic bytes".into()));
    }
    let version = c.u16()?;
    if version != SEQ_VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let fps = c.f64()?;
    let features = c.u32()? as usize;
    let frames = c.u32()? as usize;
    let label = match c.u32()? {
        NO_LABEL => None,
        l => Some(l as usize),
    };
    let prov_len = c.u32()? as usize;
    let provenance = std::str::from_utf8(c.take(prov_len)?)
        .map_err(|e| malformed(format!("provenance is not UTF-8: {e}")))?
        .to_string();
    let count = features
        .checked_mul(frames)
        .ok_or_else(|| malformed("frame count overflow".into()))?;
    let raw = c.take(count * 8)?;
    if c.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(DatasetError::NonFinite {
            path: path.to_path_buf(),
            frame: i / features.max(1),
            feature: i % features.max(1),
        });
    }
    let frames_t = Tensor::new(vec![frames, features], data).expect("length checked");
    Ok((
        MotionSequence {
            frames: frames_t,
            label,
            fps,
        },
        SequenceHeader {
            fps,
            features,
            frames,
            label,
            provenance,
        },
    ))
}

pub fn write_sequence(
    path: &Path,
    seq: &MotionSequence,
    provenance: &str,
) -> Result<(), DatasetError> {
    let bytes = encode_sequence(seq, provenance);
    let mut f = fs::File::create(path).map_err(|e| DatasetError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| DatasetError::io(path, e))
}

pub fn read_sequence(path: &Path) -> Result<(MotionSequence, SequenceHeader), DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    decode_sequence(&bytes, path)
}

/// Writes `dir/NNNN.seq` for every sequence, creating `dir`.
pub fn write_sequence_dir(
    dir: &Path,
    seqs: &[MotionSequence],
    provenance: &str,
) -> Result<Vec<PathBuf>, DatasetError> {
    fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let p = dir.join(format!("{i:04}.seq"));
            write_sequence(&p, s, provenance)?;
            Ok(p)
        })
        .collect()
}

/// Reads every `*.seq` file of a directory in file-name order.
pub fn read_sequence_dir(dir: &Path) -> Result<Vec<MotionSequence>, DatasetError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DatasetError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "seq"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| read_sequence(p).map(|(s, _)| s))
        .collect()
}

/// CSV export for inspection: a `frame,f0,f1,...` header then one row per
/// frame.
pub fn write_csv(path: &Path, seq: &MotionSequence) -> Result<(), DatasetError> {
    let mut out = String::from("frame");
    for j in 0..seq.features() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (i, row) in seq.frames.data().chunks(seq.features().max(1)).enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DatasetError::io(path, e))
}
