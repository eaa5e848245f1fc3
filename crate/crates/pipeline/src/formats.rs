//! On-disk formats: the corpus manifest, line-delimited JSON records for trajectories
//! and landmarks, and headered binary rasters for masks, edge maps and flows.
//!
//! Raster layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "CMPRAST1"
//! kind    1 byte   0 = mask (u8 cells, 0 or 1), 1 = edge (f32), 2 = flow (2 x f32, dx then dy)
//! width   u32
//! height  u32
//! frames  u32
//! data    frames x height x width cells, row-major
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use cmpalign_core::{Grid, Interval};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RASTER_MAGIC: &[u8; 8] = b"CMPRAST1";
pub const RASTER_HEADER_LEN: usize = 8 + 1 + 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("not a raster file (bad magic)")]
    BadMagic,
    #[error("unknown raster kind {0}")]
    UnknownKind(u8),
    #[error("expected a {expected} raster, found {got}")]
    WrongKind { expected: &'static str, got: &'static str },
    #[error("raster data has {got} bytes, header implies {expected}")]
    Length { expected: usize, got: usize },
    #[error("frame {frame}: {message}")]
    Value { frame: usize, message: String },
    #[error("frames have differing dimensions")]
    RaggedFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterKind {
    Mask,
    Edge,
    Flow,
}

impl RasterKind {
    fn code(self) -> u8 {
        match self {
            RasterKind::Mask => 0,
            RasterKind::Edge => 1,
            RasterKind::Flow => 2,
        }
    }

    fn from_code(b: u8) -> Result<Self, FormatError> {
        match b {
            0 => Ok(RasterKind::Mask),
            1 => Ok(RasterKind::Edge),
            2 => Ok(RasterKind::Flow),
            other => Err(FormatError::UnknownKind(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RasterKind::Mask => "mask",
            RasterKind::Edge => "edge",
            RasterKind::Flow => "flow",
        }
    }

    fn cell_bytes(self) -> usize {
        match self {
            RasterKind::Mask => 1,
            RasterKind::Edge => 4,
            RasterKind::Flow => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RasterHeader {
    pub kind: RasterKind,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
}

fn common_dims<T>(frames: &[Grid<T>]) -> Result<(usize, usize), FormatError> {
    let dims = frames.first().map_or((0, 0), Grid::dims);
    if frames.iter().any(|g| g.dims() != dims) {
        return Err(FormatError::RaggedFrames);
    }
    Ok(dims)
}

fn encode<T>(
    kind: RasterKind,
    frames: &[Grid<T>],
    mut put: impl FnMut(&mut Vec<u8>, &T),
) -> Result<Vec<u8>, FormatError> {
    let (w, h) = common_dims(frames)?;
    let mut out = Vec::with_capacity(RASTER_HEADER_LEN + frames.len() * w * h * kind.cell_bytes());
    out.extend_from_slice(RASTER_MAGIC);
    out.push(kind.code());
    for n in [w, h, frames.len()] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for g in frames {
        for v in g.as_slice() {
            put(&mut out, v);
        }
    }
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<RasterHeader, FormatError> {
    if bytes.len() < RASTER_HEADER_LEN || &bytes[..8] != RASTER_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let kind = RasterKind::from_code(bytes[8])?;
    let word = |k: usize| u32::from_le_bytes(bytes[9 + 4 * k..13 + 4 * k].try_into().unwrap()) as usize;
    Ok(RasterHeader {
        kind,
        width: word(0),
        height: word(1),
        frames: word(2),
    })
}

fn decode<T: Clone>(
    bytes: &[u8],
    kind: RasterKind,
    mut get: impl FnMut(&[u8]) -> Result<T, String>,
) -> Result<(RasterHeader, Vec<Grid<T>>), FormatError> {
    let header = read_header(bytes)?;
    if header.kind != kind {
        return Err(FormatError::WrongKind {
            expected: kind.name(),
            got: header.kind.name(),
        });
    }
    let cells = header.width * header.height;
    let expected = header
        .frames
        .checked_mul(cells)
        .and_then(|n| n.checked_mul(kind.cell_bytes()))
        .map_or(usize::MAX, |n| n.saturating_add(RASTER_HEADER_LEN));
    if bytes.len() != expected {
        return Err(FormatError::Length {
            expected,
            got: bytes.len(),
        });
    }
    let data = &bytes[RASTER_HEADER_LEN..];
    let frame_bytes = cells * kind.cell_bytes();
    let mut frames = Vec::with_capacity(header.frames);
    for f in 0..header.frames {
        let chunk = &data[f * frame_bytes..(f + 1) * frame_bytes];
        let cells: Vec<T> = chunk
            .chunks_exact(kind.cell_bytes())
            .map(&mut get)
            .collect::<Result<_, _>>()
            .map_err(|message| FormatError::Value { frame: f, message })?;
        let grid = Grid::from_vec(header.width, header.height, cells).map_err(|e| FormatError::Value {
            frame: f,
            message: e.to_string(),
        })?;
        frames.push(grid);
    }
    Ok((header, frames))
}

fn f32_at(b: &[u8]) -> f32 {
    f32::from_le_bytes(b[..4].try_into().unwrap())
}

pub fn encode_masks(frames: &[Grid<bool>]) -> Result<Vec<u8>, FormatError> {
    encode(RasterKind::Mask, frames, |out, &v| out.push(v as u8))
}

pub fn decode_masks(bytes: &[u8]) -> Result<(RasterHeader, Vec<Grid<bool>>), FormatError> {
    decode(bytes, RasterKind::Mask, |b| match b[0] {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(format!("mask byte {v} is neither 0 nor 1")),
    })
}

pub fn encode_edges(frames: &[Grid<f32>]) -> Result<Vec<u8>, FormatError> {
    encode(RasterKind::Edge, frames, |out, v| out.extend_from_slice(&v.to_le_bytes()))
}

pub fn decode_edges(bytes: &[u8]) -> Result<(RasterHeader, Vec<Grid<f32>>), FormatError> {
    decode(bytes, RasterKind::Edge, |b| Ok(f32_at(b)))
}

pub fn encode_flows(frames: &[Grid<[f32; 2]>]) -> Result<Vec<u8>, FormatError> {
    encode(RasterKind::Flow, frames, |out, v| {
        out.extend_from_slice(&v[0].to_le_bytes());
        out.extend_from_slice(&v[1].to_le_bytes());
    })
}

pub fn decode_flows(bytes: &[u8]) -> Result<(RasterHeader, Vec<Grid<[f32; 2]>>), FormatError> {
    decode(bytes, RasterKind::Flow, |b| Ok([f32_at(b), f32_at(&b[4..])]))
}

/// The corpus manifest. Feature paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub shots: Vec<ShotEntry>,
    #[serde(default)]
    pub intervals: Vec<Interval>,
    /// Cluster id to indices into `intervals`. Empty means one cluster holding everything.
    #[serde(default)]
    pub clusters: BTreeMap<u32, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotEntry {
    pub id: String,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub masks: PathBuf,
    pub edges: PathBuf,
    pub flows: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward_flows: Option<PathBuf>,
    pub trajectories: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub shot: String,
    pub id: u64,
    pub start_frame: usize,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkRecord {
    pub shot: String,
    pub frame: usize,
    pub points: BTreeMap<u8, [f64; 2]>,
    pub visible: BTreeSet<u8>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let g = Grid::from_vec(3, 2, vec![true, false, true, false, false, true]).unwrap();
        let bytes = encode_masks(&[g.clone(), g.clone()]).unwrap();
        assert_eq!(&bytes[..8], b"CMPRAST1");
        assert_eq!(bytes[8], 0);
        assert_eq!(&bytes[9..13], &3u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), RASTER_HEADER_LEN + 12);
        assert_eq!(&bytes[21..27], &[1, 0, 1, 0, 0, 1]);
        let (h, back) = decode_masks(&bytes).unwrap();
        assert_eq!(h.frames, 2);
        assert_eq!(back, vec![g.clone(), g]);
    }

    #[test]
    fn flow_round_trip_is_bit_exact() {
        let cells: Vec<[f32; 2]> = (0..12).map(|i| [i as f32 * 0.37 - 1.0, -(i as f32) / 7.0]).collect();
        let g = Grid::from_vec(4, 3, cells).unwrap();
        let (_, back) = decode_flows(&encode_flows(&[g.clone()]).unwrap()).unwrap();
        assert_eq!(back[0], g);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = Grid::filled(2, 2, 0.5f32);
        let mut bytes = encode_edges(&[g]).unwrap();
        assert_eq!(
            decode_masks(&bytes).unwrap_err(),
            FormatError::WrongKind { expected: "mask", got: "edge" }
        );
        bytes.pop();
        assert!(matches!(decode_edges(&bytes), Err(FormatError::Length { .. })));
        assert_eq!(decode_edges(b"NOTARAST").unwrap_err(), FormatError::BadMagic);
        let mut m = encode_masks(&[Grid::filled(2, 1, true)]).unwrap();
        m[RASTER_HEADER_LEN] = 7;
        assert!(matches!(decode_masks(&m), Err(FormatError::Value { frame: 0, .. })));
        let ragged = [Grid::filled(2, 2, 0.0f32), Grid::filled(3, 2, 0.0f32)];
        assert_eq!(encode_edges(&ragged).unwrap_err(), FormatError::RaggedFrames);
    }

    #[test]
    fn landmark_record_json_shape() {
        let line = r#"{"shot":"s0","frame":3,"points":{"0":[1.5,2.0],"12":[3.0,4.0]},"visible":[0]}"#;
        let rec: LandmarkRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.points[&12], [3.0, 4.0]);
        assert_eq!(serde_json::to_string(&rec).unwrap(), line);
    }
}
