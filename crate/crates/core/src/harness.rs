//! Teacher-grouped nested cross-validation, grid search and ablations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{qwk, EvaluationReport, PredictionRow};
use crate::model::{build_model, EncoderKind, ModelConfig, TaskMode};
use crate::objective::{Component, LossKind, Rating, NUM_CLASSES};
use crate::seed::derive_seed;
use crate::train::{predict, teacher_split, train, TrainConfig};

/// Outer folds of teacher ids and, per outer fold, inner folds of its
/// training teachers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub outer: Vec<Vec<String>>,
    pub inner: Vec<Vec<Vec<String>>>,
}

impl FoldPlan {
    /// Teachers outside outer fold `k`.
    pub fn training_teachers(&self, k: usize) -> BTreeSet<String> {
        self.outer
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }

    /// Checks the partition properties against a dataset.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let all: BTreeSet<String> = data.manifest.teachers();
        let mut seen = BTreeSet::new();
        for fold in &self.outer {
            for t in fold {
                if !seen.insert(t.clone()) {
                    return Err(Error::data(format!("teacher {t} appears in two outer folds")));
                }
            }
        }
        if seen != all {
            return Err(Error::data("outer folds do not cover exactly the dataset's teachers"));
        }
        for (k, inner) in self.inner.iter().enumerate() {
            let train = self.training_teachers(k);
            let mut seen = BTreeSet::new();
            for t in inner.iter().flatten() {
                if !seen.insert(t.clone()) {
                    return Err(Error::data(format!("teacher {t} appears in two inner folds of outer fold {k}")));
                }
            }
            if seen != train {
                return Err(Error::data(format!("inner folds of outer fold {k} do not partition its training teachers")));
            }
        }
        Ok(())
    }
}

/// Greedy largest-first assignment of teachers to `n` folds balanced by
/// segment count, after a seeded shuffle.
fn balanced_folds(counts: &BTreeMap<String, usize>, teachers: &[String], n: usize, seed: u64) -> Vec<Vec<String>> {
    let mut order = teachers.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|t| std::cmp::Reverse(counts[t]));
    let mut folds = vec![Vec::new(); n];
    let mut load = vec![0usize; n];
    for t in order {
        let k = (0..n).min_by_key(|&k| (load[k], k)).unwrap();
        load[k] += counts[&t];
        folds[k].push(t);
    }
    for f in &mut folds {
        f.sort();
    }
    folds
}

pub fn make_folds(data: &Dataset, n_outer: usize, n_inner: usize, seed: u64) -> Result<FoldPlan> {
    let by_teacher = data.by_teacher();
    let counts: BTreeMap<String, usize> = by_teacher.iter().map(|(t, v)| (t.clone(), v.len())).collect();
    let teachers: Vec<String> = counts.keys().cloned().collect();
    if n_outer < 2 || teachers.len() < n_outer {
        return Err(Error::usage(format!(
            "{} teachers cannot form {n_outer} outer folds",
            teachers.len()
        )));
    }
    let outer = balanced_folds(&counts, &teachers, n_outer, derive_seed(seed, &[0]));
    let mut inner = Vec::with_capacity(n_outer);
    for k in 0..n_outer {
        let train: Vec<String> = teachers.iter().filter(|t| !outer[k].contains(t)).cloned().collect();
        if n_inner < 2 || train.len() < n_inner {
            return Err(Error::usage(format!(
                "outer fold {k} leaves {} training teachers, fewer than {n_inner} inner folds",
                train.len()
            )));
        }
        inner.push(balanced_folds(&counts, &train, n_inner, derive_seed(seed, &[1, k as u64])));
    }
    Ok(FoldPlan { seed, outer, inner })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub batch_size: usize,
    pub num_modules: usize,
}

impl GridPoint {
    /// Parsimony order: smaller M, then larger lr, then smaller batch.
    fn preference(&self, other: &GridPoint) -> std::cmp::Ordering {
        self.num_modules
            .cmp(&other.num_modules)
            .then(other.lr.total_cmp(&self.lr))
            .then(self.batch_size.cmp(&other.batch_size))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lr: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub num_modules: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            lr: vec![1e-4, 1e-5],
            batch_size: vec![8, 16, 32],
            num_modules: vec![1, 2, 3, 4, 5],
        }
    }
}

impl Grid {
    pub fn single(p: GridPoint) -> Self {
        Grid {
            lr: vec![p.lr],
            batch_size: vec![p.batch_size],
            num_modules: vec![p.num_modules],
        }
    }

    /// All points, module count collapsed to 1 for the LSTM encoder.
    pub fn points(&self, encoder: EncoderKind) -> Vec<GridPoint> {
        let modules: Vec<usize> = match encoder {
            EncoderKind::Attention => self.num_modules.clone(),
            EncoderKind::Lstm => vec![1],
        };
        let mut out = Vec::new();
        for &num_modules in &modules {
            for &lr in &self.lr {
                for &batch_size in &self.batch_size {
                    let p = GridPoint {
                        lr,
                        batch_size,
                        num_modules,
                    };
                    if !out.contains(&p) {
                        out.push(p);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grid: Grid,
    pub n_outer: usize,
    pub n_inner: usize,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            grid: Grid::default(),
            n_outer: 5,
            n_inner: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub point: GridPoint,
    /// `None` when training failed at this point.
    pub mean_qwk: Option<f64>,
}

/// Trains one configuration on `train_idx` (with a teacher-grouped
/// validation split for scheduling) and predicts `eval_idx`.
fn fit_and_predict(
    data: &Dataset,
    train_idx: &[usize],
    eval_idx: &[usize],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    point: GridPoint,
    seed: u64,
) -> Result<BTreeMap<Component, Vec<Rating>>> {
    let model_cfg = ModelConfig {
        num_modules: point.num_modules,
        seed: derive_seed(seed, &[0]),
        ..model_cfg.clone()
    };
    let train_cfg = TrainConfig {
        lr: point.lr,
        batch_size: point.batch_size,
        seed: derive_seed(seed, &[1]),
        ..train_cfg.clone()
    };
    let (tr, va) = teacher_split(data, train_idx, train_cfg.val_fraction, derive_seed(seed, &[2]))?;
    let mut model = build_model::<f32>(&model_cfg)?;
    train(&mut model, data, &tr, &va, &train_cfg)?;
    predict(&model, data, eval_idx, train_cfg.batch_size)
}

fn indices_of(data: &Dataset, teachers: &BTreeSet<String>) -> Vec<usize> {
    (0..data.len()).filter(|&i| teachers.contains(data.teacher_of(i))).collect()
}

fn mean_qwk(data: &Dataset, idx: &[usize], preds: &BTreeMap<Component, Vec<Rating>>) -> Result<f64> {
    let mut total = 0.0;
    for (c, p) in preds {
        let truth: Vec<usize> = idx.iter().map(|&i| data.label(i, *c).index()).collect();
        let pred: Vec<usize> = p.iter().map(|r| r.index()).collect();
        total += qwk(&truth, &pred, NUM_CLASSES)?;
    }
    Ok(total / preds.len() as f64)
}

/// Selects the grid point with the best mean inner-validation QWK for outer
/// fold `k`. Returns the winner and every point's score.
pub fn grid_search(data: &Dataset, plan: &FoldPlan, k: usize, cfg: &CvConfig) -> Result<(GridPoint, Vec<GridScore>)> {
    let points = cfg.grid.points(cfg.model.encoder);
    if points.is_empty() {
        return Err(Error::config("empty hyperparameter grid"));
    }
    if points.len() == 1 {
        return Ok((
            points[0],
            vec![GridScore {
                point: points[0],
                mean_qwk: None,
            }],
        ));
    }
    let inner = &plan.inner[k];
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..inner.len()).map(move |j| (p, j))).collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(p, j)| {
            let val_teachers: BTreeSet<String> = inner[j].iter().cloned().collect();
            let train_teachers: BTreeSet<String> = inner
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != j)
                .flat_map(|(_, f)| f.iter().cloned())
                .collect();
            let train_idx = indices_of(data, &train_teachers);
            let val_idx = indices_of(data, &val_teachers);
            let seed = derive_seed(cfg.seed, &[k as u64, p as u64, j as u64]);
            let preds = fit_and_predict(data, &train_idx, &val_idx, &cfg.model, &cfg.train, points[p], seed)?;
            mean_qwk(data, &val_idx, &preds)
        })
        .collect();
    let mut scores = Vec::with_capacity(points.len());
    for (p, &point) in points.iter().enumerate() {
        let mut vals = Vec::new();
        let mut failed = None;
        for j in 0..inner.len() {
            match &results[p * inner.len() + j] {
                Ok(v) => vals.push(*v),
                Err(e) => failed = Some(e.to_string()),
            }
        }
        let mean = match failed {
            Some(e) => {
                log::warn!("outer fold {k}: grid point {point:?} skipped: {e}");
                None
            }
            None => Some(vals.iter().sum::<f64>() / vals.len() as f64),
        };
        scores.push(GridScore { point, mean_qwk: mean });
    }
    let best = scores
        .iter()
        .filter_map(|s| s.mean_qwk.map(|q| (q, s.point)))
        .max_by(|(qa, pa), (qb, pb)| qa.total_cmp(qb).then(pb.preference(pa)))
        .map(|(_, p)| p)
        .ok_or_else(|| Error::Numeric {
            op: "grid_search",
            detail: format!("every grid point failed in outer fold {k}"),
        })?;
    Ok((best, scores))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub selected: GridPoint,
    pub grid: Vec<GridScore>,
    pub test_teachers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    pub predictions: Vec<PredictionRow>,
    pub report: EvaluationReport,
}

impl CvResult {
    /// Tab-separated prediction table with a header row.
    pub fn predictions_tsv(&self) -> String {
        let mut s = crate::eval::PREDICTION_COLUMNS.join("\t") + "\n";
        for r in &self.predictions {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.segment_id, r.teacher_id, r.component, r.truth, r.predicted, r.fold
            );
        }
        s
    }
}

/// Runs nested CV with a freshly made fold plan.
pub fn run_nested_cv(data: &Dataset, cfg: &CvConfig) -> Result<CvResult> {
    let plan = make_folds(data, cfg.n_outer, cfg.n_inner, cfg.seed)?;
    run_nested_cv_with_plan(data, cfg, &plan)
}

pub fn run_nested_cv_with_plan(data: &Dataset, cfg: &CvConfig, plan: &FoldPlan) -> Result<CvResult> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    plan.validate(data)?;
    let outcomes: Vec<Result<(FoldResult, Vec<PredictionRow>)>> = (0..plan.outer.len())
        .into_par_iter()
        .map(|k| {
            let (selected, grid) = grid_search(data, plan, k, cfg)?;
            let test: BTreeSet<String> = plan.outer[k].iter().cloned().collect();
            let train_teachers = plan.training_teachers(k);
            if !test.is_disjoint(&train_teachers) {
                return Err(Error::data(format!("outer fold {k} leaks teachers into training")));
            }
            let train_idx = indices_of(data, &train_teachers);
            let test_idx = indices_of(data, &test);
            let seed = derive_seed(cfg.seed, &[k as u64, u64::MAX]);
            let preds = fit_and_predict(data, &train_idx, &test_idx, &cfg.model, &cfg.train, selected, seed)?;
            let mut rows = Vec::new();
            for (pos, &i) in test_idx.iter().enumerate() {
                for (&c, p) in &preds {
                    rows.push(PredictionRow {
                        segment_id: data.segments[i].segment_id.clone(),
                        teacher_id: data.teacher_of(i).to_string(),
                        component: c,
                        truth: data.label(i, c),
                        predicted: p[pos],
                        fold: k,
                    });
                }
            }
            log::info!("outer fold {k}: selected {selected:?}");
            Ok((
                FoldResult {
                    fold: k,
                    selected,
                    grid,
                    test_teachers: plan.outer[k].clone(),
                },
                rows,
            ))
        })
        .collect();
    let mut folds = Vec::new();
    let mut predictions = Vec::new();
    for o in outcomes {
        let (f, rows) = o?;
        folds.push(f);
        predictions.extend(rows);
    }
    let order: BTreeMap<&str, usize> = data
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| (s.segment_id.as_str(), i))
        .collect();
    predictions.sort_by_key(|r| (order[r.segment_id.as_str()], r.component));
    let report = EvaluationReport::from_predictions(&predictions, plan.outer.len())?;
    Ok(CvResult {
        plan: plan.clone(),
        folds,
        predictions,
        report,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Modalities,
    Encoder,
    Task,
    Loss,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "modalities" | "modality" => Ok(AblationAxis::Modalities),
            "encoder" => Ok(AblationAxis::Encoder),
            "task" => Ok(AblationAxis::Task),
            "loss" => Ok(AblationAxis::Loss),
            other => Err(Error::usage(format!("unknown ablation axis '{other}'"))),
        }
    }
}

/// One table row: a named set of configurations whose components are
/// evaluated together (single-task rows train one model per component).
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub axis: AblationAxis,
    pub name: String,
    pub configs: Vec<ModelConfig>,
}

/// The standard rows of each axis, built on `base` (whose modalities are
/// used for the non-modality axes).
pub fn variants(base: &ModelConfig, axes: &[AblationAxis]) -> Vec<Variant> {
    let mut out = Vec::new();
    for &axis in axes {
        match axis {
            AblationAxis::Modalities => {
                for ms in ["T", "A", "V", "T+A", "T+A+V"] {
                    out.push(Variant {
                        axis,
                        name: ms.to_string(),
                        configs: vec![ModelConfig {
                            modalities: ms.parse().unwrap(),
                            ..base.clone()
                        }],
                    });
                }
            }
            AblationAxis::Encoder => {
                for (name, encoder) in [("LSTM", EncoderKind::Lstm), ("Attention", EncoderKind::Attention)] {
                    out.push(Variant {
                        axis,
                        name: name.to_string(),
                        configs: vec![ModelConfig {
                            encoder,
                            ..base.clone()
                        }],
                    });
                }
            }
            AblationAxis::Task => {
                out.push(Variant {
                    axis,
                    name: "Single".to_string(),
                    configs: Component::ALL
                        .iter()
                        .map(|&c| ModelConfig {
                            task: TaskMode::Single(c),
                            ..base.clone()
                        })
                        .collect(),
                });
                out.push(Variant {
                    axis,
                    name: "Multi".to_string(),
                    configs: vec![ModelConfig {
                        task: TaskMode::Multi,
                        ..base.clone()
                    }],
                });
            }
            AblationAxis::Loss => {
                for (name, loss) in [("L1", LossKind::L1), ("CE", LossKind::Ce), ("OLL", LossKind::Oll)] {
                    out.push(Variant {
                        axis,
                        name: name.to_string(),
                        configs: vec![ModelConfig { loss, ..base.clone() }],
                    });
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub variant: String,
    /// `(mean QWK, SE)` per component.
    pub components: BTreeMap<Component, (f64, f64)>,
    pub average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub plan: FoldPlan,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<12} {:<10}", "axis", "variant");
        for c in Component::ALL {
            let _ = write!(s, " {:>22}", c.title());
        }
        let _ = writeln!(s, " {:>8}", "Average");
        for r in &self.rows {
            let axis = format!("{:?}", r.axis).to_lowercase();
            let _ = write!(s, "{axis:<12} {:<10}", r.variant);
            for c in Component::ALL {
                let cell = r.components.get(&c).map_or("-".to_string(), |(m, se)| format!("{m:.3} ({se:.3})"));
                let _ = write!(s, " {cell:>22}");
            }
            let _ = writeln!(s, " {:>8.3}", r.average);
        }
        s
    }
}

/// Nested CV for every variant over one shared fold plan.
pub fn run_ablation(data: &Dataset, base: &CvConfig, variants: &[Variant]) -> Result<AblationReport> {
    let plan = make_folds(data, base.n_outer, base.n_inner, base.seed)?;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut components = BTreeMap::new();
        for model in &v.configs {
            let cfg = CvConfig {
                model: model.clone(),
                ..base.clone()
            };
            let result = run_nested_cv_with_plan(data, &cfg, &plan)?;
            for (c, r) in result.report.components {
                components.insert(c, (r.mean_qwk, r.se));
            }
        }
        let average = components.values().map(|(m, _)| m).sum::<f64>() / components.len() as f64;
        log::info!("ablation {} {}: average QWK {average:.3}", format!("{:?}", v.axis).to_lowercase(), v.name);
        rows.push(AblationRow {
            axis: v.axis,
            variant: v.name.clone(),
            components,
            average,
        });
    }
    Ok(AblationReport { plan, rows })
}

/// Runs `f` on a dedicated pool of `jobs` threads.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
