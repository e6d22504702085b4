//! Synthetic datasets with a planted ordinal signal.
//!
//! Per segment a latent quality `q_c ∈ [1, 4]` is drawn for each component as
//! `1 + 3·Φ(√ρ·z₀ + √(1−ρ)·z_c)` with standard normal `z`, so the marginals
//! are uniform and `ρ` is the correlation of the underlying normals. The
//! stored label is the label-set element nearest `q_c`. Every feature row of
//! modality `m` is
//!
//! ```text
//! base_strength·b_m + Σ_c signal[m][c]·q_c·u_{m,c} + noise_sd·ε
//! ```
//!
//! with fixed random directions `b_m`, `u_{m,c}` (entries N(0, 1)) and fresh
//! noise `ε` per row.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use super::aggregate::segment_boundaries;
use super::manifest::{DatasetManifest, RaterRecord, SegmentEntry, SegmentLabels, StudentRecord};
use super::{default_feature_path, Dataset, FeatureDims, Modality, SegmentFeatures};
use crate::error::{Error, Result};
use crate::objective::{round_to_rating, Component, Rating};
use crate::tensor::Tensor;

/// Signal strength per modality, indexed by component
/// `[nature, questioning, explanations]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalStrength {
    pub text: [f64; 3],
    pub audio: [f64; 3],
    pub video: [f64; 3],
}

impl SignalStrength {
    pub fn uniform(s: f64) -> Self {
        SignalStrength {
            text: [s; 3],
            audio: [s; 3],
            video: [s; 3],
        }
    }

    /// Audio carries Nature of Discourse; text carries Questioning and
    /// Explanations; video carries nothing.
    pub fn asymmetric() -> Self {
        SignalStrength {
            text: [0.0, 1.0, 1.0],
            audio: [1.0, 0.0, 0.0],
            video: [0.0; 3],
        }
    }

    pub fn of(&self, m: Modality) -> &[f64; 3] {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_teachers: usize,
    pub segments_per_teacher: usize,
    pub segments_per_lesson: usize,
    /// Inclusive range of utterances per segment.
    pub text_len: (usize, usize),
    /// Inclusive range of audio/video chunks per segment.
    pub chunk_len: (usize, usize),
    pub signal: SignalStrength,
    pub rho: f64,
    pub noise_sd: f64,
    pub base_strength: f64,
    /// Spread of the two synthetic raters around the label.
    pub rater_sd: f64,
    pub students_per_teacher: usize,
    pub outcome_sd: f64,
    pub dims: FeatureDims,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_teachers: 30,
            segments_per_teacher: 4,
            segments_per_lesson: 2,
            text_len: (3, 6),
            chunk_len: (3, 6),
            signal: SignalStrength::uniform(1.0),
            rho: 0.3,
            noise_sd: 0.5,
            base_strength: 2.0,
            rater_sd: 0.4,
            students_per_teacher: 10,
            outcome_sd: 0.1,
            dims: FeatureDims::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        for m in Modality::ALL {
            if !self.signal.of(m).iter().all(|&s| unit(s)) {
                return Err(Error::config(format!("{} signal strengths must lie in [0, 1]", m.name())));
            }
        }
        if !unit(self.rho) {
            return Err(Error::config("rho must lie in [0, 1]"));
        }
        for (name, v) in [
            ("noise_sd", self.noise_sd),
            ("base_strength", self.base_strength),
            ("rater_sd", self.rater_sd),
            ("outcome_sd", self.outcome_sd),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.n_teachers == 0 || self.segments_per_teacher == 0 || self.segments_per_lesson == 0 {
            return Err(Error::config("teacher, segment and lesson counts must be positive"));
        }
        for (name, (lo, hi)) in [("text_len", self.text_len), ("chunk_len", self.chunk_len)] {
            if lo == 0 || lo > hi {
                return Err(Error::config(format!("{name} must be a range with 1 <= min <= max")));
            }
        }
        if self.dims.text == 0 || self.dims.audio == 0 || self.dims.video == 0 {
            return Err(Error::config("feature dims must be positive"));
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Two integer scores in 1..=4 whose mean is `label`, spread by rater noise.
fn rater_pair(rng: &mut ChaCha8Rng, label: Rating, sd: f64) -> (u8, u8) {
    let twice = (2.0 * label.value()).round() as i64;
    let e: f64 = if sd > 0.0 { Normal::new(0.0, sd).unwrap().sample(rng) } else { 0.0 };
    let lo = (twice - 4).max(1);
    let hi = (twice - 1).min(4);
    let a = ((label.value() + e).round() as i64).clamp(lo, hi);
    let b = twice - a;
    if rng.random::<bool>() {
        (a as u8, b as u8)
    } else {
        (b as u8, a as u8)
    }
}

/// Builds a dataset in memory. Same config, same bytes.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut dir_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut base = BTreeMap::new();
    let mut dirs = BTreeMap::new();
    for m in Modality::ALL {
        let d = cfg.dims.of(m);
        base.insert(m, gaussian_vec(&mut dir_rng, d));
        dirs.insert(m, Component::ALL.map(|_| gaussian_vec(&mut dir_rng, d)));
    }

    let phi = StatNormal::standard();
    let mut entries = Vec::new();
    let mut segments = Vec::new();
    let mut rater_records = Vec::new();

    for t in 0..cfg.n_teachers {
        let teacher_id = format!("t{t:03}");
        let raters = [format!("r{:03}", 2 * t % 8), format!("r{:03}", (2 * t + 1) % 8)];
        let mut remaining = cfg.segments_per_teacher;
        let mut lesson = 0;
        let mut k = 0;
        while remaining > 0 {
            let n_seg = remaining.min(cfg.segments_per_lesson);
            remaining -= n_seg;
            let lesson_id = format!("{teacher_id}_l{lesson:02}");
            lesson += 1;
            let duration = n_seg as f64 * 960.0 + rng.random_range(0.0..480.0);
            let bounds = segment_boundaries(duration)?;
            debug_assert_eq!(bounds.len(), n_seg);
            for (start, end) in bounds {
                let segment_id = format!("{teacher_id}_s{k:02}");
                k += 1;

                let z0: f64 = StandardNormal.sample(&mut rng);
                let q = Component::ALL.map(|_| {
                    let zc: f64 = StandardNormal.sample(&mut rng);
                    1.0 + 3.0 * phi.cdf(cfg.rho.sqrt() * z0 + (1.0 - cfg.rho).sqrt() * zc)
                });
                let mut labels = SegmentLabels {
                    nature: Rating::ALL[0],
                    questioning: Rating::ALL[0],
                    explanations: Rating::ALL[0],
                };
                for c in Component::ALL {
                    let label = round_to_rating(q[c.index()]);
                    labels.set(c, label);
                    let (a, b) = rater_pair(&mut rng, label, cfg.rater_sd);
                    for (rater, score) in raters.iter().zip([a, b]) {
                        rater_records.push(RaterRecord {
                            segment_id: segment_id.clone(),
                            rater_id: rater.clone(),
                            component: c,
                            score,
                        });
                    }
                }

                let text_len = rng.random_range(cfg.text_len.0..=cfg.text_len.1);
                let chunk_len = rng.random_range(cfg.chunk_len.0..=cfg.chunk_len.1);
                let mut feats = BTreeMap::new();
                for m in Modality::ALL {
                    let rows = if m == Modality::Text { text_len } else { chunk_len };
                    let d = cfg.dims.of(m);
                    let mut mean = vec![0.0; d];
                    for (j, v) in mean.iter_mut().enumerate() {
                        *v = cfg.base_strength * base[&m][j];
                        for c in Component::ALL {
                            *v += cfg.signal.of(m)[c.index()] * q[c.index()] * dirs[&m][c.index()][j];
                        }
                    }
                    let mut data = Vec::with_capacity(rows * d);
                    for _ in 0..rows {
                        for &mu in &mean {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            data.push((mu + cfg.noise_sd * e) as f32);
                        }
                    }
                    feats.insert(m, Tensor::new(vec![rows, d], data)?);
                }

                entries.push(SegmentEntry {
                    segment_id: segment_id.clone(),
                    teacher_id: teacher_id.clone(),
                    lesson_id: lesson_id.clone(),
                    features: default_feature_path(&segment_id).to_string_lossy().replace('\\', "/"),
                    labels,
                    duration_s: end - start,
                });
                segments.push(SegmentFeatures {
                    segment_id,
                    teacher_id: teacher_id.clone(),
                    lesson_id: lesson_id.clone(),
                    text: feats.remove(&Modality::Text).unwrap(),
                    audio: feats.remove(&Modality::Audio).unwrap(),
                    video: feats.remove(&Modality::Video).unwrap(),
                    duration_s: end - start,
                });
            }
        }
    }

    let mut manifest = DatasetManifest {
        dims: cfg.dims,
        segments: entries,
        rater_records,
        student_records: Vec::new(),
    };
    manifest.student_records = synth_students(cfg, &manifest, &mut rng)?;
    Dataset::new(manifest, segments)
}

/// Students inherit their teacher's classroom-level human score plus noise:
/// test score from Nature, interest from Questioning, self-efficacy from
/// Explanations.
fn synth_students(cfg: &SynthConfig, manifest: &DatasetManifest, rng: &mut ChaCha8Rng) -> Result<Vec<StudentRecord>> {
    if cfg.students_per_teacher == 0 {
        return Ok(Vec::new());
    }
    let mut teacher_scores = Vec::new();
    for c in Component::ALL {
        let scores = manifest
            .segments
            .iter()
            .map(|s| (s.segment_id.clone(), s.labels.get(c).value()))
            .collect();
        teacher_scores.push(crate::eval::classroom_aggregate(&scores, manifest)?);
    }
    let mut out = Vec::new();
    for teacher in manifest.teachers() {
        for p in 0..cfg.students_per_teacher {
            let mut noisy = |c: Component| {
                let e: f64 = StandardNormal.sample(rng);
                teacher_scores[c.index()][&teacher] + cfg.outcome_sd * e
            };
            out.push(StudentRecord {
                student_id: format!("{teacher}_p{p:02}"),
                teacher_id: teacher.clone(),
                test_score: noisy(Component::Nature),
                interest: noisy(Component::Questioning),
                self_efficacy: noisy(Component::Explanations),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_teachers: 4,
            segments_per_teacher: 3,
            dims: FeatureDims {
                text: 6,
                audio: 8,
                video: 6,
            },
            students_per_teacher: 2,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shape_and_counts() {
        let ds = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.manifest.rater_records.len(), 12 * 3 * 2);
        assert_eq!(ds.manifest.student_records.len(), 8);
        for s in &ds.segments {
            assert_eq!(s.audio.shape()[0], s.video.shape()[0]);
            assert!((3..=6).contains(&s.text.shape()[0]));
            assert!(s.duration_s >= 960.0 && s.duration_s < 1440.0);
        }
        // three segments per teacher, two per lesson
        let lessons: std::collections::BTreeSet<_> = ds.segments.iter().map(|s| s.lesson_id.clone()).collect();
        assert_eq!(lessons.len(), 8);
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.manifest, b.manifest);
        for (x, y) in a.segments.iter().zip(&b.segments) {
            assert!(x.text.bit_eq(&y.text) && x.audio.bit_eq(&y.audio) && x.video.bit_eq(&y.video));
        }
    }

    #[test]
    fn rho_one_gives_identical_components() {
        let cfg = SynthConfig {
            rho: 1.0,
            n_teachers: 10,
            ..small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for s in &ds.manifest.segments {
            assert_eq!(s.labels.nature, s.labels.questioning);
            assert_eq!(s.labels.nature, s.labels.explanations);
        }
    }

    #[test]
    fn rater_pairs_average_to_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in Rating::ALL {
            for _ in 0..200 {
                let (a, b) = rater_pair(&mut rng, r, 1.5);
                assert!((1..=4).contains(&a) && (1..=4).contains(&b));
                assert_eq!((a as f64 + b as f64) / 2.0, r.value());
            }
            let (a, b) = rater_pair(&mut rng, r, 0.0);
            assert!(a.abs_diff(b) <= 1, "noise-free raters differ by at most one point");
        }
    }

    #[test]
    fn rejects_out_of_range_signal() {
        let mut cfg = small();
        cfg.signal.audio[1] = 1.5;
        assert!(generate_synthetic(&cfg).is_err());
        let cfg = SynthConfig { rho: -0.1, ..small() };
        assert!(generate_synthetic(&cfg).is_err());
    }
}
