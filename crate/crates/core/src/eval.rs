//! Agreement metrics, fold summaries, classroom aggregation and correlation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::manifest::{DatasetManifest, Outcome, RaterRecord};
use crate::error::{Error, Result};
use crate::objective::{Component, Rating, NUM_CLASSES};

/// `counts[i][j]` is the number of items with true class `i + 1` predicted
/// as class `j + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![vec![0; k]; k],
        }
    }

    /// Class indices are 1-based.
    pub fn from_pairs(truth: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::usage(format!(
                "qwk: {} true labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut m = ConfusionMatrix::zeros(k);
        for (&t, &p) in truth.iter().zip(pred) {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for v in [truth, pred] {
            if !(1..=self.k).contains(&v) {
                return Err(Error::usage(format!("class index {v} outside 1..={}", self.k)));
            }
        }
        self.counts[truth - 1][pred - 1] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Quadratic weighted kappa of the table.
    pub fn qwk(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(Error::usage("qwk of an empty table"));
        }
        // Integer sums keep the ratio exact for realistic table sizes:
        // QWK = 1 - N·Σw·O / Σw·r_i·c_j.
        let k = self.k;
        let rows: Vec<u128> = self.counts.iter().map(|r| r.iter().map(|&v| v as u128).sum()).collect();
        let cols: Vec<u128> = (0..k).map(|j| self.counts.iter().map(|r| r[j] as u128).sum()).collect();
        let (mut observed, mut expected) = (0u128, 0u128);
        for i in 0..k {
            for j in 0..k {
                let w = (i.abs_diff(j) as u128).pow(2);
                observed += w * self.counts[i][j] as u128;
                expected += w * rows[i] * cols[j];
            }
        }
        if expected == 0 {
            return Ok(if observed == 0 { 1.0 } else { 0.0 });
        }
        Ok(1.0 - (n as u128 * observed) as f64 / expected as f64)
    }
}

/// Quadratic weighted kappa over 1-based class indices in `1..=k`.
pub fn qwk(truth: &[usize], pred: &[usize], k: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::usage("qwk needs at least one item"));
    }
    ConfusionMatrix::from_pairs(truth, pred, k)?.qwk()
}

/// Mean and standard error (sample sd over `√n`; zero for one value).
pub fn fold_summary(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return Err(Error::usage("fold_summary of an empty list"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, var.sqrt() / (n as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrrReport {
    pub component: Component,
    /// `(rater, qwk against co-raters)`, sorted by rater id.
    pub per_rater: Vec<(String, f64)>,
    pub mean: f64,
    pub se: f64,
}

/// Leave-one-rater-out agreement: each rater's raw scores against the other
/// rater of the same segments, QWK with four categories.
pub fn irr_leave_one_rater_out(records: &[RaterRecord], component: Component) -> Result<IrrReport> {
    let mut by_segment: BTreeMap<&str, Vec<(&str, u8)>> = BTreeMap::new();
    let mut raters = BTreeSet::new();
    for r in records.iter().filter(|r| r.component == component) {
        by_segment.entry(&r.segment_id).or_default().push((&r.rater_id, r.score));
        raters.insert(r.rater_id.as_str());
    }
    if raters.len() < 2 {
        return Err(Error::data(format!("irr for {component} needs at least 2 raters")));
    }
    let mut pairs: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (seg, ratings) in &by_segment {
        let [(ra, a), (rb, b)] = ratings.as_slice() else {
            return Err(Error::data(format!(
                "segment {seg}: expected 2 {component} ratings, found {}",
                ratings.len()
            )));
        };
        if ra == rb {
            return Err(Error::data(format!("segment {seg}: rater {ra} rated {component} twice")));
        }
        let ea = pairs.entry(ra).or_default();
        ea.0.push(*a as usize);
        ea.1.push(*b as usize);
        let eb = pairs.entry(rb).or_default();
        eb.0.push(*b as usize);
        eb.1.push(*a as usize);
    }
    let mut per_rater = Vec::new();
    for rater in raters {
        match pairs.get(rater) {
            Some((own, other)) if !own.is_empty() => per_rater.push((rater.to_string(), qwk(own, other, 4)?)),
            _ => log::warn!("rater {rater} has no {component} ratings; skipped"),
        }
    }
    let values: Vec<f64> = per_rater.iter().map(|(_, v)| *v).collect();
    let (mean, se) = fold_summary(&values)?;
    Ok(IrrReport {
        component,
        per_rater,
        mean,
        se,
    })
}

/// Two-stage mean: segments within each lesson, then lessons within each
/// teacher. `scores` maps segment id to score.
pub fn classroom_aggregate(scores: &BTreeMap<String, f64>, manifest: &DatasetManifest) -> Result<BTreeMap<String, f64>> {
    let index: BTreeMap<&str, (&str, &str)> = manifest
        .segments
        .iter()
        .map(|s| (s.segment_id.as_str(), (s.teacher_id.as_str(), s.lesson_id.as_str())))
        .collect();
    let mut lessons: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
    for (seg, &score) in scores {
        let &(teacher, lesson) = index
            .get(seg.as_str())
            .ok_or_else(|| Error::data(format!("segment {seg} is not in the manifest")))?;
        let e = lessons.entry((teacher, lesson)).or_insert((0.0, 0));
        e.0 += score;
        e.1 += 1;
    }
    let mut teachers: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for ((teacher, _), (sum, n)) in lessons {
        let e = teachers.entry(teacher.to_string()).or_insert((0.0, 0));
        e.0 += sum / n as f64;
        e.1 += 1;
    }
    Ok(teachers.into_iter().map(|(t, (sum, n))| (t, sum / n as f64)).collect())
}

/// Sample Pearson correlation and its two-tailed p-value.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::usage(format!("pearson_r: lengths {n} and {} differ", y.len())));
    }
    if n < 3 {
        return Err(Error::usage("pearson_r needs at least 3 pairs"));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric {
            op: "pearson_r",
            detail: "correlation undefined for a zero-variance input".into(),
        });
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric {
            op: "pearson_r",
            detail: e.to_string(),
        })?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok((r, p))
}

/// `*`, `**`, `***` at p < .05, .01, .001.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// One held-out prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub segment_id: String,
    pub teacher_id: String,
    pub component: Component,
    pub truth: Rating,
    pub predicted: Rating,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub fold_qwk: Vec<f64>,
    pub mean_qwk: f64,
    pub se: f64,
    /// Pooled over all folds, 7 classes.
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub components: BTreeMap<Component, ComponentReport>,
    /// Mean of the per-component mean QWKs.
    pub average_qwk: f64,
}

impl EvaluationReport {
    /// Per-fold QWK (7 classes) for every component present in `rows`.
    pub fn from_predictions(rows: &[PredictionRow], n_folds: usize) -> Result<Self> {
        let mut components = BTreeMap::new();
        for c in Component::ALL {
            let rows_c: Vec<&PredictionRow> = rows.iter().filter(|r| r.component == c).collect();
            if rows_c.is_empty() {
                continue;
            }
            let mut confusion = ConfusionMatrix::zeros(NUM_CLASSES);
            let mut folds = vec![ConfusionMatrix::zeros(NUM_CLASSES); n_folds];
            for r in &rows_c {
                confusion.add(r.truth.index(), r.predicted.index())?;
                folds
                    .get_mut(r.fold)
                    .ok_or_else(|| Error::usage(format!("prediction fold {} out of range", r.fold)))?
                    .add(r.truth.index(), r.predicted.index())?;
            }
            let fold_qwk = folds
                .iter()
                .filter(|m| m.total() > 0)
                .map(ConfusionMatrix::qwk)
                .collect::<Result<Vec<_>>>()?;
            let (mean_qwk, se) = fold_summary(&fold_qwk)?;
            components.insert(
                c,
                ComponentReport {
                    fold_qwk,
                    mean_qwk,
                    se,
                    confusion,
                },
            );
        }
        if components.is_empty() {
            return Err(Error::usage("no predictions to evaluate"));
        }
        let average_qwk = components.values().map(|r| r.mean_qwk).sum::<f64>() / components.len() as f64;
        Ok(EvaluationReport {
            components,
            average_qwk,
        })
    }

    /// `mean (se)` per component plus the average, one line per component.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>15}  folds", "component", "QWK mean (SE)");
        for (c, r) in &self.components {
            let folds: Vec<String> = r.fold_qwk.iter().map(|v| format!("{v:.3}")).collect();
            let _ = writeln!(s, "{:<22} {:>7.3} ({:.3})  {}", c.title(), r.mean_qwk, r.se, folds.join(" "));
        }
        let _ = writeln!(s, "{:<22} {:>7.3}", "Average", self.average_qwk);
        s
    }
}

/// Reads a prediction table as written by [`crate::harness::CvResult::predictions_tsv`].
pub fn parse_predictions_tsv(text: &str, path: &Path) -> Result<Vec<PredictionRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.split('\t').collect::<Vec<_>>() == PREDICTION_COLUMNS => {}
        _ => return Err(Error::data(format!("{}: missing prediction table header", path.display()))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::data(format!("{}:{}: {what}", path.display(), i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != PREDICTION_COLUMNS.len() {
            return Err(bad(&format!("expected {} columns, found {}", PREDICTION_COLUMNS.len(), f.len())));
        }
        let rating = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| bad(&format!("bad rating '{v}'")))
                .and_then(|x| Rating::from_value(x).map_err(|e| bad(&e.to_string())))
        };
        rows.push(PredictionRow {
            segment_id: f[0].to_string(),
            teacher_id: f[1].to_string(),
            component: f[2].parse().map_err(|e: Error| bad(&e.to_string()))?,
            truth: rating(f[3])?,
            predicted: rating(f[4])?,
            fold: f[5].parse().map_err(|_| bad(&format!("bad fold '{}'", f[5])))?,
        });
    }
    Ok(rows)
}

pub const PREDICTION_COLUMNS: [&str; 6] = ["segment_id", "teacher_id", "component", "true", "predicted", "fold"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    Human,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub component: Component,
    pub source: ScoreSource,
    pub outcome: Outcome,
    /// Students entering the correlation.
    pub n: usize,
    /// `None` when the correlation is undefined (a constant score column).
    pub r: Option<f64>,
    pub p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub rows: Vec<CorrelationRow>,
}

/// Correlates each student's outcomes with the classroom-level score of
/// their teacher, for human labels and (when given) held-out predictions.
pub fn correlate_outcomes(manifest: &DatasetManifest, predictions: Option<&[PredictionRow]>) -> Result<CorrelationTable> {
    if manifest.student_records.is_empty() {
        return Err(Error::data("the manifest has no student records"));
    }
    let mut rows = Vec::new();
    for c in Component::ALL {
        let mut sources = vec![(
            ScoreSource::Human,
            manifest
                .segments
                .iter()
                .map(|s| (s.segment_id.clone(), s.labels.get(c).value()))
                .collect::<BTreeMap<_, _>>(),
        )];
        if let Some(preds) = predictions {
            let scores: BTreeMap<String, f64> = preds
                .iter()
                .filter(|r| r.component == c)
                .map(|r| (r.segment_id.clone(), r.predicted.value()))
                .collect();
            if scores.is_empty() {
                continue;
            }
            sources.push((ScoreSource::Model, scores));
        }
        for (source, scores) in sources {
            let classroom = classroom_aggregate(&scores, manifest)?;
            for outcome in Outcome::ALL {
                let (x, y): (Vec<f64>, Vec<f64>) = manifest
                    .student_records
                    .iter()
                    .filter_map(|s| classroom.get(&s.teacher_id).map(|&t| (t, outcome.of(s))))
                    .unzip();
                let (r, p) = match pearson_r(&x, &y) {
                    Ok((r, p)) => (Some(r), Some(p)),
                    Err(Error::Numeric { detail, .. }) => {
                        log::warn!("{c} ({source:?}) vs {}: {detail}", outcome.name());
                        (None, None)
                    }
                    Err(e) => return Err(e),
                };
                rows.push(CorrelationRow {
                    component: c,
                    source,
                    outcome,
                    n: x.len(),
                    r,
                    p,
                });
            }
        }
    }
    Ok(CorrelationTable { rows })
}

impl CorrelationTable {
    pub fn get(&self, component: Component, source: ScoreSource, outcome: Outcome) -> Option<&CorrelationRow> {
        self.rows
            .iter()
            .find(|r| r.component == component && r.source == source && r.outcome == outcome)
    }

    /// One line per component and score source, `r` with stars per outcome.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<22} {:<7}", "component", "source");
        for o in Outcome::ALL {
            let _ = write!(s, " {:>14}", o.title());
        }
        let _ = writeln!(s, " {:>6}", "N");
        for c in Component::ALL {
            for source in [ScoreSource::Human, ScoreSource::Model] {
                let cells: Vec<&CorrelationRow> = Outcome::ALL.iter().filter_map(|&o| self.get(c, source, o)).collect();
                if cells.is_empty() {
                    continue;
                }
                let name = format!("{source:?}").to_lowercase();
                let _ = write!(s, "{:<22} {name:<7}", c.title());
                for r in &cells {
                    let cell = match (r.r, r.p) {
                        (Some(v), Some(p)) => format!("{v:.3}{}", significance_stars(p)),
                        _ => "n/a".to_string(),
                    };
                    let _ = write!(s, " {cell:>14}");
                }
                let _ = writeln!(s, " {:>6}", cells[0].n);
            }
        }
        let _ = writeln!(s, "* p < .05, ** p < .01, *** p < .001; n/a: constant scores");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qwk_examples() {
        assert_eq!(qwk(&[1, 2, 3, 2], &[1, 2, 3, 2], 4).unwrap(), 1.0);
        assert_eq!(qwk(&[1, 2, 3], &[3, 2, 1], 3).unwrap(), -1.0);
        assert_eq!(qwk(&[2, 2, 2], &[2, 2, 2], 4).unwrap(), 1.0);
        assert_eq!(qwk(&[2, 2, 2], &[3, 3, 3], 4).unwrap(), 0.0);
        assert!(qwk(&[1, 2], &[1], 3).is_err());
        assert!(qwk(&[1, 5], &[1, 2], 4).is_err());
        assert!(qwk(&[], &[], 4).is_err());
    }

    #[test]
    fn fold_summary_examples() {
        assert_eq!(fold_summary(&[0.5, 0.5, 0.5]).unwrap(), (0.5, 0.0));
        let (m, se) = fold_summary(&[0.3, 0.5]).unwrap();
        assert!((m - 0.4).abs() < 1e-15 && (se - 0.1).abs() < 1e-12);
        assert_eq!(fold_summary(&[0.7]).unwrap(), (0.7, 0.0));
        assert!(fold_summary(&[]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let (r, p) = pearson_r(&x, &x.map(|v| 2.0 * v + 1.0)).unwrap();
        assert!((r - 1.0).abs() < 1e-12 && p < 1e-12);
        let (r, _) = pearson_r(&x, &x.map(|v| -v)).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
        let (r, p) = pearson_r(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert!((p - 0.2).abs() < 1e-3, "p = {p}");
        assert!(pearson_r(&x, &[1.0; 4]).is_err());
        assert!(pearson_r(&x[..2], &x[..2]).is_err());
    }

    #[test]
    fn stars() {
        assert_eq!(significance_stars(0.04), "*");
        assert_eq!(significance_stars(0.005), "**");
        assert_eq!(significance_stars(0.0005), "***");
        assert_eq!(significance_stars(0.2), "");
    }
}
