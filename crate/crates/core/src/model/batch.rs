use std::collections::BTreeMap;

use crate::blocks::SeqMask;
use crate::data::{Modality, SegmentFeatures};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero-padded `[B, L_max, d]` sequences with validity masks, one per
/// modality.
#[derive(Clone, Debug)]
pub struct Batch {
    pub segment_ids: Vec<String>,
    pub streams: BTreeMap<Modality, (Tensor<f32>, SeqMask)>,
}

impl Batch {
    pub fn new(segments: &[&SegmentFeatures], modalities: &[Modality]) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let mut streams = BTreeMap::new();
        for s in segments {
            s.require(modalities)?;
        }
        for &m in modalities {
            let width = segments[0].get(m).shape()[1];
            let lengths: Vec<usize> = segments.iter().map(|s| s.len(m)).collect();
            let max_len = *lengths.iter().max().unwrap();
            let mut data = vec![0f32; segments.len() * max_len * width];
            for (b, s) in segments.iter().enumerate() {
                let t = s.get(m);
                if t.shape()[1] != width {
                    return Err(Error::data(format!(
                        "segment {}: {} width {} differs from {width} in the same batch",
                        s.segment_id,
                        m.name(),
                        t.shape()[1]
                    )));
                }
                let start = b * max_len * width;
                data[start..start + t.numel()].copy_from_slice(t.data());
            }
            let tensor = Tensor::new(vec![segments.len(), max_len, width], data)?;
            streams.insert(m, (tensor, SeqMask::from_lengths(&lengths, max_len)));
        }
        Ok(Batch {
            segment_ids: segments.iter().map(|s| s.segment_id.clone()).collect(),
            streams,
        })
    }

    pub fn size(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn stream(&self, m: Modality) -> Result<&(Tensor<f32>, SeqMask)> {
        self.streams
            .get(&m)
            .ok_or_else(|| Error::usage(format!("batch has no {} stream", m.name())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(id: &str, lt: usize) -> SegmentFeatures {
        SegmentFeatures {
            segment_id: id.into(),
            teacher_id: "t".into(),
            lesson_id: "l".into(),
            text: Tensor::full(vec![lt, 2], 1.0),
            audio: Tensor::full(vec![2, 3], 2.0),
            video: Tensor::zeros(vec![0, 2]),
            duration_s: 960.0,
        }
    }

    #[test]
    fn pads_and_masks() {
        let (a, b) = (seg("a", 1), seg("b", 3));
        let batch = Batch::new(&[&a, &b], &[Modality::Text, Modality::Audio]).unwrap();
        let (text, mask) = batch.stream(Modality::Text).unwrap();
        assert_eq!(text.shape(), &[2, 3, 2]);
        assert_eq!(text.data()[..6], [1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(mask.lengths(), vec![1, 3]);
    }

    #[test]
    fn missing_modality_names_segment() {
        let a = seg("a", 2);
        let err = Batch::new(&[&a], &[Modality::Video]).unwrap_err();
        assert!(err.to_string().contains("segment a: empty video"), "{err}");
    }
}
