//! The text-centered fusion model, its unimodal and BiLSTM variants, batching
//! and checkpoints.

mod batch;
mod checkpoint;
mod config;

use std::collections::BTreeMap;

pub use batch::Batch;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{EncoderKind, ModalitySet, ModelConfig, TaskMode, MAX_MODULES};

use crate::blocks::{
    add_positional, prepend_cls, BiLstm, EncoderBlock, Forward, HeadMode, Init, Linear, MlpHead, ParamId, ParamStore,
    SeqMask,
};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::objective::{
    l1_loss, multitask_total, oll_loss, round_to_rating, weighted_ce_loss, ClassWeights, Component, LossKind, Rating,
    NUM_CLASSES,
};
use crate::tensor::{Real, Var};

/// Standard deviation of the CLS embedding initialization.
pub const CLS_INIT_STD: f64 = 0.02;

/// One fusion module: cross-attention to audio, cross-attention to video,
/// then self-attention over the query stream.
#[derive(Clone, Debug)]
pub struct FusionModule {
    pub cross_audio: Option<EncoderBlock>,
    pub cross_video: Option<EncoderBlock>,
    pub self_attn: EncoderBlock,
}

#[derive(Clone, Debug)]
enum Encoder {
    Attention {
        /// The stream that queries and is pooled.
        query: Modality,
        /// Learned input projection when the query stream is not text-width.
        input_proj: Option<Linear>,
        cls: BTreeMap<Modality, ParamId>,
        modules: Vec<FusionModule>,
    },
    Lstm {
        encoders: Vec<(Modality, BiLstm)>,
    },
}

#[derive(Clone, Debug)]
pub struct FusionModel<F: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    encoder: Encoder,
    heads: BTreeMap<Component, MlpHead>,
}

/// Builds and initializes a model from `config.seed`.
pub fn build_model<F: Real>(config: &ModelConfig) -> Result<FusionModel<F>> {
    FusionModel::new(config.clone())
}

impl<F: Real> FusionModel<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let dims = config.dims;
        let encoder = match config.encoder {
            EncoderKind::Attention => {
                let d = config.model_dim();
                let ffn = config.ffn_mult * d;
                let ms = config.modalities.as_slice();
                let query = if ms.contains(&Modality::Text) { Modality::Text } else { ms[0] };
                let input_proj = (dims.of(query) != d)
                    .then(|| Linear::new(&mut store, &mut init, "input_proj", dims.of(query), d));
                let mut cls = BTreeMap::new();
                for &m in ms {
                    let width = if m == query { d } else { dims.of(m) };
                    cls.insert(m, store.add(format!("cls.{}", m.name()), init.normal(vec![width], CLS_INIT_STD)));
                }
                let mut modules = Vec::with_capacity(config.num_modules);
                for k in 0..config.num_modules {
                    let cross = |m: Modality, store: &mut ParamStore<F>, init: &mut Init| -> Result<Option<EncoderBlock>> {
                        if m == query || !ms.contains(&m) {
                            return Ok(None);
                        }
                        let name = format!("fusion{k}.cross_{}", m.name());
                        EncoderBlock::new(store, init, &name, d, Some(dims.of(m)), config.num_heads, ffn).map(Some)
                    };
                    let cross_audio = cross(Modality::Audio, &mut store, &mut init)?;
                    let cross_video = cross(Modality::Video, &mut store, &mut init)?;
                    let self_attn =
                        EncoderBlock::new(&mut store, &mut init, &format!("fusion{k}.self"), d, None, config.num_heads, ffn)?;
                    modules.push(FusionModule {
                        cross_audio,
                        cross_video,
                        self_attn,
                    });
                }
                Encoder::Attention {
                    query,
                    input_proj,
                    cls,
                    modules,
                }
            }
            EncoderKind::Lstm => {
                let encoders = config
                    .modalities
                    .as_slice()
                    .iter()
                    .map(|&m| {
                        let w = dims.of(m);
                        let lstm = BiLstm::new(&mut store, &mut init, &format!("lstm.{}", m.name()), w, w, config.lstm_layers);
                        (m, lstm)
                    })
                    .collect();
                Encoder::Lstm { encoders }
            }
        };
        let pooled = config.pooled_dim();
        let heads = config
            .components()
            .into_iter()
            .map(|c| {
                let head = MlpHead::new(
                    &mut store,
                    &mut init,
                    &format!("head.{}", c.name()),
                    pooled,
                    config.head_hidden,
                    config.head_mode(),
                    NUM_CLASSES,
                );
                (c, head)
            })
            .collect();
        let model = FusionModel {
            config,
            params: store,
            encoder,
            heads,
        };
        log::debug!("built {} with {} parameters", model.config.label(), model.num_parameters());
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn components(&self) -> Vec<Component> {
        self.heads.keys().copied().collect()
    }

    pub fn head(&self, c: Component) -> Option<&MlpHead> {
        self.heads.get(&c)
    }

    pub fn fusion_modules(&self) -> &[FusionModule] {
        match &self.encoder {
            Encoder::Attention { modules, .. } => modules,
            Encoder::Lstm { .. } => &[],
        }
    }

    /// Per-modality BiLSTM encoders of the baseline (empty for attention).
    pub fn lstm_encoders(&self) -> Vec<(Modality, &BiLstm)> {
        match &self.encoder {
            Encoder::Lstm { encoders } => encoders.iter().map(|(m, l)| (*m, l)).collect(),
            Encoder::Attention { .. } => Vec::new(),
        }
    }

    /// Pooled `[B, pooled_dim]` representation of a batch.
    pub fn pooled(&self, fwd: &mut Forward<F>, batch: &Batch) -> Result<Var> {
        match &self.encoder {
            Encoder::Attention {
                query,
                input_proj,
                cls,
                modules,
            } => {
                let (q, q_mask) = self.embed_stream(fwd, batch, *query, input_proj.as_ref(), cls[query])?;
                let mut contexts = BTreeMap::new();
                for (&m, &cls_m) in cls.iter().filter(|(m, _)| *m != query) {
                    contexts.insert(m, self.embed_stream(fwd, batch, m, None, cls_m)?);
                }
                let mut x = q;
                for module in modules {
                    for (block, m) in [(&module.cross_audio, Modality::Audio), (&module.cross_video, Modality::Video)] {
                        if let Some(block) = block {
                            let (ctx, ctx_mask) = &contexts[&m];
                            x = block.forward(fwd, x, &q_mask, Some((*ctx, ctx_mask)))?;
                        }
                    }
                    x = module.self_attn.forward(fwd, x, &q_mask, None)?;
                }
                let b = batch.size();
                let d = self.config.model_dim();
                let first = fwd.tape.slice(x, 1, 0, 1)?;
                fwd.tape.reshape(first, &[b, d])
            }
            Encoder::Lstm { .. } => self.pooled_lstm(fwd, batch),
        }
    }

    /// Positional encoding (if enabled), then a CLS row in front.
    fn embed_stream(
        &self,
        fwd: &mut Forward<F>,
        batch: &Batch,
        m: Modality,
        proj: Option<&Linear>,
        cls: ParamId,
    ) -> Result<(Var, SeqMask)> {
        let (tensor, mask) = batch.stream(m)?;
        let mut x = fwd.tape.constant(tensor.cast());
        if let Some(p) = proj {
            x = p.forward(fwd, x)?;
        }
        let x = add_positional(fwd, x, self.config.positional)?;
        let x = prepend_cls(fwd, x, fwd.p(cls))?;
        Ok((x, mask.with_leading_valid()))
    }

    fn pooled_lstm(&self, fwd: &mut Forward<F>, batch: &Batch) -> Result<Var> {
        let Encoder::Lstm { encoders } = &self.encoder else {
            return Err(Error::usage("model is not an LSTM baseline"));
        };
        let mut parts = Vec::with_capacity(encoders.len());
        for (m, lstm) in encoders {
            let (tensor, mask) = batch.stream(*m)?;
            let x = fwd.tape.constant(tensor.cast());
            parts.push(lstm.forward(fwd, x, mask)?);
        }
        fwd.tape.concat(&parts, 1)
    }

    /// Head outputs per component: `[B, 7]` probabilities, or `[B]` scores
    /// in regression mode.
    pub fn forward(&self, fwd: &mut Forward<F>, batch: &Batch) -> Result<BTreeMap<Component, Var>> {
        let pooled = self.pooled(fwd, batch)?;
        self.heads
            .iter()
            .map(|(&c, head)| Ok((c, head.forward(fwd, pooled)?)))
            .collect()
    }

    /// The BiLSTM baseline's forward; errors for attention models.
    pub fn forward_lstm_baseline(&self, fwd: &mut Forward<F>, batch: &Batch) -> Result<BTreeMap<Component, Var>> {
        if self.config.encoder != EncoderKind::Lstm {
            return Err(Error::usage("forward_lstm_baseline on an attention model"));
        }
        self.forward(fwd, batch)
    }

    /// Weighted multi-task loss of the head outputs against `targets`.
    pub fn loss(
        &self,
        fwd: &mut Forward<F>,
        outputs: &BTreeMap<Component, Var>,
        targets: &BTreeMap<Component, Vec<Rating>>,
        weights: &BTreeMap<Component, ClassWeights>,
    ) -> Result<Var> {
        let uniform = ClassWeights::uniform(NUM_CLASSES);
        let mut losses = Vec::with_capacity(outputs.len());
        for (&c, &out) in outputs {
            let t = targets
                .get(&c)
                .ok_or_else(|| Error::usage(format!("no {c} targets for the loss")))?;
            let w = weights.get(&c).unwrap_or(&uniform);
            let idx: Vec<usize> = t.iter().map(|r| r.index()).collect();
            let l = match self.config.loss {
                LossKind::Oll => oll_loss(&mut fwd.tape, out, &idx, w)?,
                LossKind::Ce => weighted_ce_loss(&mut fwd.tape, out, &idx, w)?,
                LossKind::L1 => l1_loss(&mut fwd.tape, out, t, w)?,
            };
            losses.push((c, l));
        }
        multitask_total(&mut fwd.tape, &losses, &self.config.task_weights)
    }

    /// Ratings per component: argmax class, or the rounded score when
    /// regressing.
    pub fn predict(&self, batch: &Batch) -> Result<BTreeMap<Component, Vec<Rating>>> {
        let mut fwd = Forward::eval(&self.params);
        let outputs = self.forward(&mut fwd, batch)?;
        let mut out = BTreeMap::new();
        for (c, v) in outputs {
            let t = fwd.tape.value(v);
            let ratings = match self.config.head_mode() {
                HeadMode::Regress => t.data().iter().map(|s| round_to_rating(s.as_f64())).collect(),
                HeadMode::Classify => (0..batch.size())
                    .map(|b| Rating::from_index(argmax(t.row(b)) + 1))
                    .collect::<Result<Vec<_>>>()?,
            };
            out.insert(c, ratings);
        }
        Ok(out)
    }

    /// Output values per component, row-major, as `f64`.
    pub fn output_values(&self, batch: &Batch) -> Result<BTreeMap<Component, Vec<f64>>> {
        let mut fwd = Forward::eval(&self.params);
        let outputs = self.forward(&mut fwd, batch)?;
        Ok(outputs
            .into_iter()
            .map(|(c, v)| (c, fwd.tape.value(v).to_f64_vec()))
            .collect())
    }

    /// Same architecture and values at another precision.
    pub fn cast<G: Real>(&self) -> FusionModel<G> {
        FusionModel {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            heads: self.heads.clone(),
        }
    }
}

/// First index of the largest value.
fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureDims, SegmentFeatures};
    use crate::tensor::Tensor;

    pub(crate) fn tiny_config(modalities: &str) -> ModelConfig {
        ModelConfig {
            modalities: modalities.parse().unwrap(),
            dims: FeatureDims {
                text: 8,
                audio: 12,
                video: 8,
            },
            num_heads: 2,
            head_hidden: 6,
            dropout: 0.0,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn seg(id: &str, lt: usize, la: usize, seed: u64) -> SegmentFeatures {
        let mut init = Init::new(seed);
        SegmentFeatures {
            segment_id: id.into(),
            teacher_id: "t".into(),
            lesson_id: "l".into(),
            text: init.normal(vec![lt, 8], 1.0),
            audio: init.normal(vec![la, 12], 1.0),
            video: init.normal(vec![la, 8], 1.0),
            duration_s: 960.0,
        }
    }

    #[test]
    fn block_counts_follow_config() {
        let m = build_model::<f32>(&ModelConfig {
            num_modules: 3,
            ..tiny_config("T+A")
        })
        .unwrap();
        let mods = m.fusion_modules();
        assert_eq!(mods.len(), 3);
        assert!(mods.iter().all(|f| f.cross_audio.is_some() && f.cross_video.is_none()));
        let t = build_model::<f32>(&tiny_config("T")).unwrap();
        assert!(t.fusion_modules().iter().all(|f| f.cross_audio.is_none() && f.cross_video.is_none()));
        assert_eq!(t.components().len(), 3);
        assert!(t.params.find("cls.audio").is_none());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model::<f32>(&tiny_config("T+A+V")).unwrap();
        let b = build_model::<f32>(&tiny_config("T+A+V")).unwrap();
        assert_eq!(a.params.names(), b.params.names());
        assert!(a.params.tensors().iter().zip(b.params.tensors()).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = build_model::<f32>(&tiny_config("T+A")).unwrap();
        let (a, b) = (seg("a", 3, 2, 1), seg("b", 5, 4, 2));
        let batch = Batch::new(&[&a, &b], &[Modality::Text, Modality::Audio]).unwrap();
        let out = m.output_values(&batch).unwrap();
        assert_eq!(out.len(), 3);
        for probs in out.values() {
            for row in probs.chunks(NUM_CLASSES) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn padding_does_not_change_outputs() {
        let m = build_model::<f64>(&tiny_config("T+A+V")).unwrap();
        let (a, b) = (seg("a", 2, 2, 1), seg("b", 5, 4, 2));
        let ms = [Modality::Text, Modality::Audio, Modality::Video];
        let alone = m.output_values(&Batch::new(&[&a], &ms).unwrap()).unwrap();
        let padded = m.output_values(&Batch::new(&[&a, &b], &ms).unwrap()).unwrap();
        for (c, v) in &alone {
            for (x, y) in v.iter().zip(&padded[c][..NUM_CLASSES]) {
                assert!((x - y).abs() < 1e-12, "{c}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn unimodal_audio_projects_to_model_width() {
        let m = build_model::<f32>(&tiny_config("A")).unwrap();
        assert!(m.params.find("input_proj.weight").is_some());
        let a = seg("a", 3, 2, 1);
        let batch = Batch::new(&[&a], &[Modality::Audio]).unwrap();
        assert_eq!(m.predict(&batch).unwrap().len(), 3);
    }

    #[test]
    fn regression_predictions_are_ratings() {
        let m = build_model::<f32>(&ModelConfig {
            loss: LossKind::L1,
            task: TaskMode::Single(Component::Nature),
            ..tiny_config("T")
        })
        .unwrap();
        let a = seg("a", 3, 2, 1);
        let batch = Batch::new(&[&a], &[Modality::Text]).unwrap();
        let p = m.predict(&batch).unwrap();
        assert_eq!(p.keys().copied().collect::<Vec<_>>(), vec![Component::Nature]);
    }

    #[test]
    fn lstm_baseline_width_and_heads() {
        let cfg = ModelConfig {
            encoder: EncoderKind::Lstm,
            lstm_layers: 1,
            ..tiny_config("T+A")
        };
        let m = build_model::<f32>(&cfg).unwrap();
        assert_eq!(m.head(Component::Nature).unwrap().in_dim(), 2 * 8 + 2 * 12);
        let a = seg("a", 3, 2, 1);
        let batch = Batch::new(&[&a], &[Modality::Text, Modality::Audio]).unwrap();
        let mut fwd = Forward::eval(&m.params);
        let out = m.forward_lstm_baseline(&mut fwd, &batch).unwrap();
        assert_eq!(out.len(), 3);
        let attn = build_model::<f32>(&tiny_config("T")).unwrap();
        let mut fwd = Forward::eval(&attn.params);
        assert!(attn.forward_lstm_baseline(&mut fwd, &batch).is_err());
    }

    #[test]
    fn empty_text_rejected() {
        let mut a = seg("a", 3, 2, 1);
        a.text = Tensor::zeros(vec![0, 8]);
        assert!(Batch::new(&[&a], &[Modality::Text]).is_err());
    }
}
