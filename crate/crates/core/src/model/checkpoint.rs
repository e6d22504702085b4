//! `DFM1` checkpoints.
//!
//! ```text
//! "DFM1"
//! u32 config length, config JSON
//! u32 tensor count
//! per tensor: u32 name length, name (UTF-8), u32 rank, rank × u32 dims,
//!             row-major f32 values
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{FusionModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFM1";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::usage("checkpoint field exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &FusionModel<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::usage(format!("config serialization: {e}")))?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    put_u32(&mut out, model.params.len())?;
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail(format!("truncated {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<FusionModel<f32>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic (expected \"DFM1\")"));
    }
    let len = r.u32("config length")?;
    let config_at = r.pos;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: config_at as u64,
        detail: format!("config: {e}"),
    })?;
    let mut model = FusionModel::<f32>::new(config)?;
    let count = r.u32("tensor count")?;
    if count != model.params.len() {
        return Err(r.fail(format!("{count} tensors but the config builds {}", model.params.len())));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let start = r.pos;
        let n = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(n, "name")?).map_err(|_| r.fail("tensor name is not UTF-8"))?;
        if name != model.params.names()[i] {
            r.pos = start;
            return Err(r.fail(format!("tensor {i} is '{name}', expected '{}'", model.params.names()[i])));
        }
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let expected = model.params.tensors()[i].shape();
        if shape != expected {
            return Err(r.fail(format!("tensor '{name}' has shape {shape:?}, expected {expected:?}")));
        }
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 4, name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    model.params.set_all(values)?;
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &FusionModel<f32>) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FusionModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureDims, Modality, SegmentFeatures};
    use crate::model::{build_model, Batch};
    use crate::blocks::Init;

    fn config() -> ModelConfig {
        ModelConfig {
            dims: FeatureDims {
                text: 8,
                audio: 12,
                video: 8,
            },
            num_heads: 2,
            head_hidden: 5,
            seed: 9,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_reproduces_outputs_bitwise() {
        let mut model = build_model::<f32>(&config()).unwrap();
        // perturb so the check does not just re-run the initializer
        for t in model.params.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.125;
            }
        }
        let bytes = encode_checkpoint(&model).unwrap();
        let back = decode_checkpoint(&bytes, Path::new("m.dfm")).unwrap();
        let mut init = Init::new(1);
        let seg = SegmentFeatures {
            segment_id: "s".into(),
            teacher_id: "t".into(),
            lesson_id: "l".into(),
            text: init.normal(vec![3, 8], 1.0),
            audio: init.normal(vec![4, 12], 1.0),
            video: init.normal(vec![4, 8], 1.0),
            duration_s: 960.0,
        };
        let batch = Batch::new(&[&seg], &[Modality::Text, Modality::Audio]).unwrap();
        let a = model.output_values(&batch).unwrap();
        let b = back.output_values(&batch).unwrap();
        for (c, v) in &a {
            assert!(v.iter().zip(&b[c]).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let model = build_model::<f32>(&config()).unwrap();
        let mut bytes = encode_checkpoint(&model).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("m")).is_err());
        bytes[2] = b'X';
        assert!(matches!(
            decode_checkpoint(&bytes, Path::new("m")),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
