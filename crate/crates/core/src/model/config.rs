use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::blocks::{HeadMode, HEAD_HIDDEN};
use crate::data::{FeatureDims, Modality};
use crate::error::{Error, Result};
use crate::objective::{Component, LossKind};

/// Largest number of stacked fusion modules.
pub const MAX_MODULES: usize = 5;

/// A nonempty set of modalities in canonical `T, A, V` order, written `T+A`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModalitySet(Vec<Modality>);

impl ModalitySet {
    pub fn new(mut ms: Vec<Modality>) -> Result<Self> {
        ms.sort();
        ms.dedup();
        if ms.is_empty() {
            return Err(Error::config("at least one modality is required"));
        }
        Ok(ModalitySet(ms))
    }

    pub fn all() -> Self {
        ModalitySet(Modality::ALL.to_vec())
    }

    pub fn as_slice(&self) -> &[Modality] {
        &self.0
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0.contains(&m)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|m| m.letter().to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ms = s.split('+').map(str::parse).collect::<Result<Vec<Modality>>>()?;
        ModalitySet::new(ms)
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Attention,
    Lstm,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Attention => "attention",
            EncoderKind::Lstm => "lstm",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "attention" | "attn" => Ok(EncoderKind::Attention),
            "lstm" => Ok(EncoderKind::Lstm),
            other => Err(Error::usage(format!("unknown encoder '{other}'"))),
        }
    }
}

/// One head per component, or a single head for one component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Multi,
    Single(Component),
}

impl TaskMode {
    pub fn components(self) -> Vec<Component> {
        match self {
            TaskMode::Multi => Component::ALL.to_vec(),
            TaskMode::Single(c) => vec![c],
        }
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskMode::Multi => f.write_str("multi"),
            TaskMode::Single(c) => write!(f, "single:{c}"),
        }
    }
}

impl FromStr for TaskMode {
    type Err = Error;

    /// `multi`, `single:<component>` or a bare component name.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        if s == "multi" {
            return Ok(TaskMode::Multi);
        }
        let c = s.strip_prefix("single:").unwrap_or(&s);
        if c == "single" {
            return Err(Error::usage("single-task mode needs a component, e.g. single:nature"));
        }
        Ok(TaskMode::Single(c.parse()?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub modalities: ModalitySet,
    pub encoder: EncoderKind,
    /// Number of stacked fusion modules `M`.
    pub num_modules: usize,
    pub task: TaskMode,
    pub loss: LossKind,
    pub positional: bool,
    pub dropout: f64,
    pub seed: u64,
    pub dims: FeatureDims,
    pub num_heads: usize,
    /// Feed-forward width as a multiple of the model width.
    pub ffn_mult: usize,
    pub head_hidden: usize,
    pub lstm_layers: usize,
    /// Per-component multipliers of the total loss; missing entries are 1.
    pub task_weights: BTreeMap<Component, f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modalities: "T+A".parse().unwrap(),
            encoder: EncoderKind::Attention,
            num_modules: 1,
            task: TaskMode::Multi,
            loss: LossKind::Oll,
            positional: true,
            dropout: 0.1,
            seed: 0,
            dims: FeatureDims::default(),
            num_heads: 12,
            ffn_mult: 2,
            head_hidden: HEAD_HIDDEN,
            lstm_layers: 2,
            task_weights: BTreeMap::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder == EncoderKind::Attention {
            if self.modalities.len() > 1 && !self.modalities.contains(Modality::Text) {
                return Err(Error::config(format!(
                    "attention fusion is text-centered: modalities {} need T",
                    self.modalities
                )));
            }
            if !(1..=MAX_MODULES).contains(&self.num_modules) {
                return Err(Error::config(format!(
                    "number of fusion modules must be in 1..={MAX_MODULES}, got {}",
                    self.num_modules
                )));
            }
            if self.num_heads == 0 || self.model_dim() % self.num_heads != 0 {
                return Err(Error::config(format!(
                    "model width {} is not divisible by {} heads",
                    self.model_dim(),
                    self.num_heads
                )));
            }
            if self.ffn_mult == 0 {
                return Err(Error::config("ffn_mult must be positive"));
            }
        } else if self.lstm_layers == 0 {
            return Err(Error::config("lstm_layers must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.head_hidden == 0 || self.dims.text == 0 || self.dims.audio == 0 || self.dims.video == 0 {
            return Err(Error::config("dimensions must be positive"));
        }
        if self.task_weights.values().any(|&w| !(w.is_finite() && w >= 0.0)) {
            return Err(Error::config("task weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Width of the fused stream: the text embedding width.
    pub fn model_dim(&self) -> usize {
        self.dims.text
    }

    pub fn head_mode(&self) -> HeadMode {
        if self.loss.is_regression() {
            HeadMode::Regress
        } else {
            HeadMode::Classify
        }
    }

    pub fn components(&self) -> Vec<Component> {
        self.task.components()
    }

    /// Width of the pooled vector fed to the heads.
    pub fn pooled_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::Attention => self.model_dim(),
            EncoderKind::Lstm => self.modalities.as_slice().iter().map(|&m| 2 * self.dims.of(m)).sum(),
        }
    }

    /// Short variant label such as `T+A attention M=2 multi oll`.
    pub fn label(&self) -> String {
        format!(
            "{} {} M={} {} {}",
            self.modalities,
            self.encoder,
            self.num_modules,
            self.task,
            self.loss.label()
        )
    }
}
