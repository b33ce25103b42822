//! Redundant per-frame pose representation: root angular velocity, root
//! planar velocities, root height, root-relative positions of the `j - 1`
//! non-root joints, velocities of all `j` joints, 6-D rotations of the
//! non-root joints, and four binary foot contacts. Width is `12 j - 1`
//! (263 for 22 joints, 251 for 21).

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use super::seqfile::decode_sequence;
use super::{DatasetError, MotionSequence};
use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RedundantPoseLayout {
    joints: usize,
}

impl RedundantPoseLayout {
    pub const HUMANML3D: Self = Self { joints: 22 };
    pub const KIT_ML: Self = Self { joints: 21 };

    pub fn new(joints: usize) -> Result<Self, DatasetError> {
        if joints < 2 {
            return Err(DatasetError::Spec(format!(
                "a pose layout needs at least 2 joints, got {joints}"
            )));
        }
        Ok(Self { joints })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn width(&self) -> usize {
        12 * self.joints - 1
    }

    pub fn root_angular_velocity(&self) -> Range<usize> {
        0..1
    }

    pub fn root_linear_velocity(&self) -> Range<usize> {
        1..3
    }

    pub fn root_height(&self) -> Range<usize> {
        3..4
    }

    pub fn joint_positions(&self) -> Range<usize> {
        4..4 + 3 * (self.joints - 1)
    }

    pub fn joint_rotations(&self) -> Range<usize> {
        let s = self.joint_positions().end;
        s..s + 6 * (self.joints - 1)
    }

    pub fn joint_velocities(&self) -> Range<usize> {
        let s = self.joint_rotations().end;
        s..s + 3 * self.joints
    }

    pub fn foot_contacts(&self) -> Range<usize> {
        let s = self.joint_velocities().end;
        s..s + 4
    }

    /// Typed view of frame `i` of a sequence in this layout.
    pub fn frame<'a>(&self, seq: &'a MotionSequence, i: usize) -> PoseFrame<'a> {
        let w = self.width();
        PoseFrame {
            layout: *self,
            values: &seq.frames.data()[i * w..(i + 1) * w],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PoseFrame<'a> {
    layout: RedundantPoseLayout,
    values: &'a [f64],
}

impl<'a> PoseFrame<'a> {
    pub fn root_angular_velocity(&self) -> f64 {
        self.values[0]
    }

    pub fn root_linear_velocity(&self) -> [f64; 2] {
        [self.values[1], self.values[2]]
    }

    pub fn root_height(&self) -> f64 {
        self.values[3]
    }

    pub fn joint_positions(&self) -> &'a [f64] {
        &self.values[self.layout.joint_positions()]
    }

    pub fn joint_velocities(&self) -> &'a [f64] {
        &self.values[self.layout.joint_velocities()]
    }

    pub fn joint_rotations(&self) -> &'a [f64] {
        &self.values[self.layout.joint_rotations()]
    }

    pub fn foot_contacts(&self) -> &'a [f64] {
        &self.values[self.layout.foot_contacts()]
    }
}

fn validate(
    seq: &MotionSequence,
    layout: &RedundantPoseLayout,
    path: &Path,
) -> Result<(), DatasetError> {
    if seq.features() != layout.width() {
        return Err(DatasetError::Width {
            path: path.to_path_buf(),
            expected: layout.width(),
            found: seq.features(),
        });
    }
    let w = layout.width();
    for (frame, row) in seq.frames.data().chunks(w).enumerate() {
        if let Some(feature) = row.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite {
                path: path.to_path_buf(),
                frame,
                feature,
            });
        }
        for &v in &row[layout.foot_contacts()] {
            if v != 0.0 && v != 1.0 {
                return Err(DatasetError::Contact {
                    path: path.to_path_buf(),
                    frame,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

/// Parses a version 1-3 `.npy` file holding a C-ordered `(N, W)` array of
/// little-endian `f4` or `f8`.
fn read_npy(bytes: &[u8], path: &Path) -> Result<MotionSequence, DatasetError> {
    let malformed = |reason: &str| DatasetError::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(malformed("missing NPY magic"));
    }
    let major = bytes[6];
    let (header_len, start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(malformed("truncated NPY header"));
            }
            (
                u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize,
                12,
            )
        }
        _ => return Err(malformed("unsupported NPY version")),
    };
    let header = bytes
        .get(start..start + header_len)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| malformed("unreadable NPY header"))?;
    let elem = if header.contains("'<f4'") {
        4
    } else if header.contains("'<f8'") {
        8
    } else {
        return Err(malformed("only little-endian f4/f8 arrays are supported"));
    };
    if header.contains("'fortran_order': True") {
        return Err(malformed("Fortran-ordered arrays are not supported"));
    }
    let shape_src = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| malformed("missing shape"))?;
    let dims: Vec<usize> = shape_src
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| malformed("bad shape"))?;
    if dims.len() != 2 {
        return Err(malformed("expected a 2-D array"));
    }
    let body = &bytes[start + header_len..];
    let count = dims[0] * dims[1];
    if body.len() != count * elem {
        return Err(malformed("data length does not match shape"));
    }
    let data: Vec<f64> = if elem == 4 {
        body.chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect()
    } else {
        body.chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect()
    };
    Ok(MotionSequence {
        frames: Tensor::new(dims, data).expect("length checked"),
        label: None,
        fps: 20.0,
    })
}

fn load_one(path: &Path, layout: &RedundantPoseLayout) -> Result<MotionSequence, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    let seq = if path.extension().is_some_and(|e| e == "npy") {
        read_npy(&bytes, path)?
    } else {
        decode_sequence(&bytes, path)?.0
    };
    validate(&seq, layout, path)?;
    Ok(seq)
}

/// Loads one `.seq`/`.npy` file, or every such file of a directory in
/// file-name order, checking width, finiteness and binary contacts.
pub fn load_redundant(
    path: &Path,
    layout: &RedundantPoseLayout,
) -> Result<Vec<MotionSequence>, DatasetError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| DatasetError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "seq" || x == "npy"))
            .collect();
        files.sort();
        files.iter().map(|p| load_one(p, layout)).collect()
    } else {
        Ok(vec![load_one(path, layout)?])
    }
}
