//! `DFX1` feature files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "DFX1"
//! 3 × { rows: u32, cols: u32, rows·cols × f32 (row-major) }   // text, audio, video
//! ```
//!
//! An absent modality is stored with `rows = 0`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"DFX1";

/// The three per-segment feature matrices, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlocks {
    pub text: Tensor<f32>,
    pub audio: Tensor<f32>,
    pub video: Tensor<f32>,
}

impl FeatureBlocks {
    pub fn blocks(&self) -> [&Tensor<f32>; 3] {
        [&self.text, &self.audio, &self.video]
    }
}

pub fn encode_features(f: &FeatureBlocks) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(4 + f.blocks().iter().map(|b| 8 + 4 * b.numel()).sum::<usize>());
    out.extend_from_slice(FEATURE_MAGIC);
    for block in f.blocks() {
        let [rows, cols] = block.shape() else {
            return Err(Error::usage(format!("feature block must be a matrix, got {:?}", block.shape())));
        };
        let rows = u32::try_from(*rows).map_err(|_| Error::usage("feature block too large"))?;
        let cols = u32::try_from(*cols).map_err(|_| Error::usage("feature block too large"))?;
        out.extend_from_slice(&rows.to_le_bytes());
        out.extend_from_slice(&cols.to_le_bytes());
        for v in block.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Expected column counts, checked for every non-empty block.
#[derive(Clone, Copy, Debug)]
pub struct ExpectedDims {
    pub text: usize,
    pub audio: usize,
    pub video: usize,
}

pub fn decode_features(bytes: &[u8], path: &Path, dims: Option<ExpectedDims>) -> Result<FeatureBlocks> {
    let fail = |offset: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(fail(0, "bad magic (expected \"DFX1\")".into()));
    }
    let mut pos = 4;
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let chunk = bytes
            .get(*pos..*pos + 4)
            .ok_or_else(|| fail(*pos, "truncated header".into()))?;
        *pos += 4;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
    };
    let expected = dims.map(|d| [d.text, d.audio, d.video]);
    let names = ["text", "audio", "video"];
    let mut blocks = Vec::with_capacity(3);
    for (b, name) in names.iter().enumerate() {
        let rows = read_u32(&mut pos)? as usize;
        let cols_at = pos;
        let cols = read_u32(&mut pos)? as usize;
        if let Some(exp) = expected {
            if rows > 0 && cols != exp[b] {
                return Err(fail(cols_at, format!("{name} width {cols} does not match manifest width {}", exp[b])));
            }
        }
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| fail(cols_at, format!("{name} block size overflows")))?;
        let body = bytes
            .get(pos..pos + n)
            .ok_or_else(|| fail(pos, format!("truncated {name} block: need {n} bytes, have {}", bytes.len() - pos)))?;
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect::<Vec<_>>();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(fail(pos + 4 * i, format!("non-finite value in {name} block")));
        }
        pos += n;
        blocks.push(Tensor::from_parts(vec![rows, cols], data));
    }
    if pos != bytes.len() {
        return Err(fail(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    let video = blocks.pop().unwrap();
    let audio = blocks.pop().unwrap();
    let text = blocks.pop().unwrap();
    Ok(FeatureBlocks { text, audio, video })
}

pub fn write_feature_file(path: &Path, f: &FeatureBlocks) -> Result<()> {
    let bytes = encode_features(f)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path, dims: Option<ExpectedDims>) -> Result<FeatureBlocks> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path, dims)
}
