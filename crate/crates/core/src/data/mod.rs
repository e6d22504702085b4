//! Segment features, the dataset manifest, preprocessing rules and the
//! synthetic generator.

pub mod aggregate;
pub mod features;
pub mod manifest;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate_to_chunks, aggregate_words_to_utterances, average_rater_scores, segment_boundaries};
pub use features::{read_feature_file, write_feature_file, ExpectedDims, FeatureBlocks};
pub use manifest::{DatasetManifest, Outcome, RaterRecord, SegmentEntry, SegmentLabels, StudentRecord};
pub use synth::{generate_synthetic, SignalStrength, SynthConfig};

use crate::error::{Error, Result};
use crate::objective::{Component, Rating};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "T")]
    Text,
    #[serde(rename = "A")]
    Audio,
    #[serde(rename = "V")]
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Video];

    pub fn letter(self) -> char {
        match self {
            Modality::Text => 'T',
            Modality::Audio => 'A',
            Modality::Video => 'V',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T" | "TEXT" => Ok(Modality::Text),
            "A" | "AUDIO" => Ok(Modality::Audio),
            "V" | "VIDEO" => Ok(Modality::Video),
            other => Err(Error::usage(format!("unknown modality '{other}'"))),
        }
    }
}

/// Embedding widths of the three upstream feature extractors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub text: usize,
    pub audio: usize,
    pub video: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        FeatureDims {
            text: 768,
            audio: 1024,
            video: 768,
        }
    }
}

impl FeatureDims {
    pub fn of(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Video => self.video,
        }
    }

    pub fn expected(&self) -> ExpectedDims {
        ExpectedDims {
            text: self.text,
            audio: self.audio,
            video: self.video,
        }
    }
}

/// One lesson segment: identifiers plus its three feature sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentFeatures {
    pub segment_id: String,
    pub teacher_id: String,
    pub lesson_id: String,
    /// `[L_t, d_text]` utterance embeddings.
    pub text: Tensor<f32>,
    /// `[L_a, d_audio]` chunk embeddings.
    pub audio: Tensor<f32>,
    /// `[L_v, d_video]` window embeddings.
    pub video: Tensor<f32>,
    pub duration_s: f64,
}

impl SegmentFeatures {
    pub fn get(&self, m: Modality) -> &Tensor<f32> {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    pub fn len(&self, m: Modality) -> usize {
        self.get(m).shape().first().copied().unwrap_or(0)
    }

    /// Checks widths, finiteness and audio/video alignment.
    pub fn validate(&self, dims: &FeatureDims) -> Result<()> {
        for m in Modality::ALL {
            let t = self.get(m);
            if t.rank() != 2 {
                return Err(Error::data(format!("segment {}: {} features must be a matrix", self.segment_id, m.name())));
            }
            if t.shape()[0] > 0 && t.shape()[1] != dims.of(m) {
                return Err(Error::data(format!(
                    "segment {}: {} width {} but expected {}",
                    self.segment_id,
                    m.name(),
                    t.shape()[1],
                    dims.of(m)
                )));
            }
            if !t.all_finite() {
                return Err(Error::data(format!("segment {}: non-finite {} features", self.segment_id, m.name())));
            }
        }
        let (la, lv) = (self.len(Modality::Audio), self.len(Modality::Video));
        if la > 0 && lv > 0 && la != lv {
            return Err(Error::data(format!(
                "segment {}: audio has {la} chunks but video has {lv}",
                self.segment_id
            )));
        }
        Ok(())
    }

    /// Errors unless every listed modality has at least one row.
    pub fn require(&self, modalities: &[Modality]) -> Result<()> {
        for &m in modalities {
            if self.len(m) == 0 {
                return Err(Error::data(format!("segment {}: empty {} sequence", self.segment_id, m.name())));
            }
        }
        Ok(())
    }

    pub fn blocks(&self) -> FeatureBlocks {
        FeatureBlocks {
            text: self.text.clone(),
            audio: self.audio.clone(),
            video: self.video.clone(),
        }
    }
}

/// A manifest together with every segment's features, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub segments: Vec<SegmentFeatures>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, segments: Vec<SegmentFeatures>) -> Result<Self> {
        manifest.validate()?;
        if manifest.segments.len() != segments.len() {
            return Err(Error::data(format!(
                "manifest lists {} segments but {} feature sets were given",
                manifest.segments.len(),
                segments.len()
            )));
        }
        for (entry, seg) in manifest.segments.iter().zip(&segments) {
            if entry.segment_id != seg.segment_id || entry.teacher_id != seg.teacher_id || entry.lesson_id != seg.lesson_id {
                return Err(Error::data(format!("segment {} does not match its manifest entry", seg.segment_id)));
            }
            seg.validate(&manifest.dims)?;
        }
        Ok(Dataset { manifest, segments })
    }

    /// Reads `root/manifest.json` and every referenced feature file.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&root.join(MANIFEST_FILE))?;
        let dims = manifest.dims.expected();
        let mut segments = Vec::with_capacity(manifest.segments.len());
        for entry in &manifest.segments {
            let path = root.join(&entry.features);
            let blocks = read_feature_file(&path, Some(dims)).map_err(|e| match e {
                Error::Format { path, offset, detail } => Error::Format {
                    path,
                    offset,
                    detail: format!("segment {}: {detail}", entry.segment_id),
                },
                other => other,
            })?;
            segments.push(SegmentFeatures {
                segment_id: entry.segment_id.clone(),
                teacher_id: entry.teacher_id.clone(),
                lesson_id: entry.lesson_id.clone(),
                text: blocks.text,
                audio: blocks.audio,
                video: blocks.video,
                duration_s: entry.duration_s,
            });
        }
        Dataset::new(manifest, segments)
    }

    /// Writes the manifest and all feature files under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for (entry, seg) in self.manifest.segments.iter().zip(&self.segments) {
            write_feature_file(&root.join(&entry.features), &seg.blocks())?;
        }
        self.manifest.save(&root.join(MANIFEST_FILE))
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn label(&self, i: usize, c: Component) -> Rating {
        self.manifest.segments[i].labels.get(c)
    }

    /// Segment indices grouped by teacher, in sorted teacher order.
    pub fn by_teacher(&self) -> BTreeMap<String, Vec<usize>> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.segments.iter().enumerate() {
            map.entry(s.teacher_id.clone()).or_default().push(i);
        }
        map
    }

    pub fn teacher_of(&self, i: usize) -> &str {
        &self.segments[i].teacher_id
    }

    pub fn index_of(&self, segment_id: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.segment_id == segment_id)
    }
}

pub fn default_feature_path(segment_id: &str) -> PathBuf {
    Path::new("features").join(format!("{segment_id}.dfx"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(text_rows: usize, audio_rows: usize, video_rows: usize) -> SegmentFeatures {
        SegmentFeatures {
            segment_id: "s1".into(),
            teacher_id: "t1".into(),
            lesson_id: "l1".into(),
            text: Tensor::zeros(vec![text_rows, 4]),
            audio: Tensor::zeros(vec![audio_rows, 6]),
            video: Tensor::zeros(vec![video_rows, 4]),
            duration_s: 960.0,
        }
    }

    const DIMS: FeatureDims = FeatureDims {
        text: 4,
        audio: 6,
        video: 4,
    };

    #[test]
    fn audio_video_alignment_enforced() {
        assert!(seg(2, 3, 3).validate(&DIMS).is_ok());
        assert!(seg(2, 3, 0).validate(&DIMS).is_ok());
        let err = seg(2, 3, 4).validate(&DIMS).unwrap_err();
        assert!(err.to_string().contains("3 chunks"), "{err}");
    }

    #[test]
    fn non_finite_rejected() {
        let mut s = seg(2, 3, 3);
        s.text.data_mut()[1] = f32::NAN;
        assert!(s.validate(&DIMS).is_err());
    }

    #[test]
    fn require_names_segment_and_modality() {
        let err = seg(0, 3, 3).require(&[Modality::Text, Modality::Audio]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s1") && msg.contains("text"), "{msg}");
    }

    #[test]
    fn modality_parsing() {
        assert_eq!("t".parse::<Modality>().unwrap(), Modality::Text);
        assert_eq!("Audio".parse::<Modality>().unwrap(), Modality::Audio);
        assert!("X".parse::<Modality>().is_err());
    }
}
