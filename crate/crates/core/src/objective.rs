//! Rating labels, class weights and the training losses.
//!
//! Ratings live on the half-point scale `{1.0, 1.5, …, 4.0}`; class indices
//! are `1..=7` via `j = 2r - 1`. Ordinal distances in the ordinal log-loss
//! are measured between class indices.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Number of rating classes.
pub const NUM_CLASSES: usize = 7;

/// Floor applied inside every loss logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// The three scored discourse components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Nature,
    Questioning,
    Explanations,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Nature, Component::Questioning, Component::Explanations];

    pub fn name(self) -> &'static str {
        match self {
            Component::Nature => "nature",
            Component::Questioning => "questioning",
            Component::Explanations => "explanations",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Component::Nature => "Nature of Discourse",
            Component::Questioning => "Questioning",
            Component::Explanations => "Explanations",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nature" | "n" => Ok(Component::Nature),
            "questioning" | "q" => Ok(Component::Questioning),
            "explanations" | "e" => Ok(Component::Explanations),
            other => Err(Error::usage(format!("unknown component '{other}'"))),
        }
    }
}

/// One of the seven averaged ratings, stored by class index `1..=7`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rating(u8);

impl Rating {
    pub const ALL: [Rating; NUM_CLASSES] = [Rating(1), Rating(2), Rating(3), Rating(4), Rating(5), Rating(6), Rating(7)];

    /// `r ∈ {1.0, 1.5, …, 4.0}`; anything else is a data error.
    pub fn from_value(r: f64) -> Result<Self> {
        let j = 2.0 * r - 1.0;
        if (1.0..=7.0).contains(&j) && j.fract() == 0.0 {
            Ok(Rating(j as u8))
        } else {
            Err(Error::data(format!("rating {r} is not in {{1.0, 1.5, ..., 4.0}}")))
        }
    }

    pub fn from_index(j: usize) -> Result<Self> {
        if (1..=NUM_CLASSES).contains(&j) {
            Ok(Rating(j as u8))
        } else {
            Err(Error::data(format!("class index {j} is outside 1..={NUM_CLASSES}")))
        }
    }

    /// Class index `1..=7`.
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn value(self) -> f64 {
        (self.0 as f64 + 1.0) / 2.0
    }
}

impl fmt::Display for Rating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}", self.value())
    }
}

impl Serialize for Rating {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Rating {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Rating::from_value(v).map_err(serde::de::Error::custom)
    }
}

pub fn rating_to_index(r: f64) -> Result<usize> {
    Rating::from_value(r).map(Rating::index)
}

pub fn index_to_rating(j: usize) -> Result<f64> {
    Rating::from_index(j).map(Rating::value)
}

/// Clamps to `[1, 4]` and snaps to the nearest half point; midpoints round up.
pub fn round_to_rating(pred: f64) -> Rating {
    let clamped = if pred.is_nan() { 1.0 } else { pred.clamp(1.0, 4.0) };
    let halves = (clamped * 2.0 + 0.5).floor();
    Rating::from_value(halves / 2.0).expect("clamped value snaps onto the label set")
}

/// Per-class sample weights for one component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights { weights: vec![1.0; k] }
    }

    /// Inverse class frequency, renormalized to mean 1 over the classes that
    /// occur. Classes that never occur get the largest present weight.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let present: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| 1.0 / c as f64).collect();
        if present.is_empty() {
            return Err(Error::usage("class weights need at least one training label"));
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        let max = present.iter().copied().fold(0.0, f64::max) / mean;
        let weights = counts
            .iter()
            .map(|&c| if c > 0 { 1.0 / c as f64 / mean } else { max })
            .collect();
        Ok(ClassWeights { weights })
    }

    pub fn from_labels(labels: &[Rating]) -> Result<Self> {
        let mut counts = [0usize; NUM_CLASSES];
        for r in labels {
            counts[r.index() - 1] += 1;
        }
        Self::from_counts(&counts)
    }

    /// Weight of a 1-based class index.
    pub fn of(&self, class: usize) -> f64 {
        self.weights[class - 1]
    }
}

/// Class weights per component, computed from a training set.
pub fn class_weights(labels: &BTreeMap<Component, Vec<Rating>>) -> Result<BTreeMap<Component, ClassWeights>> {
    labels
        .iter()
        .map(|(&c, l)| ClassWeights::from_labels(l).map(|w| (c, w)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Ordinal log-loss over class probabilities.
    Oll,
    /// Weighted cross-entropy over class probabilities.
    Ce,
    /// Weighted mean absolute error of a scalar score, in rating units.
    L1,
}

impl LossKind {
    pub fn is_regression(self) -> bool {
        matches!(self, LossKind::L1)
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Oll => "OLL",
            LossKind::Ce => "CE",
            LossKind::L1 => "L1",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oll" => Ok(LossKind::Oll),
            "ce" => Ok(LossKind::Ce),
            "l1" => Ok(LossKind::L1),
            other => Err(Error::usage(format!("unknown loss '{other}' (expected oll, ce or l1)"))),
        }
    }
}

fn check_targets(probs_shape: &[usize], targets: &[usize], weights: &ClassWeights) -> Result<(usize, usize)> {
    let [n, k] = probs_shape else {
        return Err(Error::usage(format!("loss expects [batch, classes] probabilities, got {probs_shape:?}")));
    };
    if targets.len() != *n || weights.weights.len() != *k {
        return Err(Error::Shape {
            op: "loss targets",
            lhs: probs_shape.to_vec(),
            rhs: vec![targets.len(), weights.weights.len()],
        });
    }
    if let Some(bad) = targets.iter().find(|&&t| t == 0 || t > *k) {
        return Err(Error::data(format!("target class {bad} is outside 1..={k}")));
    }
    Ok((*n, *k))
}

/// Ordinal log-loss:
/// `-(1/N) Σ_i w(y_i) Σ_j log(1 - p_ij) · |y_i - j|`, class indices 1-based.
pub fn oll_loss<F: Real>(tape: &mut Tape<F>, probs: Var, targets: &[usize], weights: &ClassWeights) -> Result<Var> {
    let (n, k) = check_targets(tape.shape(probs), targets, weights)?;
    let mut coef = Vec::with_capacity(n * k);
    for &t in targets {
        let w = weights.of(t);
        coef.extend((1..=k).map(|j| F::from_f64_lossy(w * (t as f64 - j as f64).abs())));
    }
    let coef = tape.constant(Tensor::from_parts(vec![n, k], coef));
    let neg = tape.scale(probs, -F::one());
    let complement = tape.add_scalar(neg, F::one());
    let logs = tape.log_clamped(complement, F::from_f64_lossy(LOG_FLOOR));
    let terms = tape.mul(logs, coef)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, -F::one() / F::from_usize(n).unwrap()))
}

/// Weighted cross-entropy: `-(1/N) Σ_i w(y_i) log p_{i,y_i}`.
pub fn weighted_ce_loss<F: Real>(tape: &mut Tape<F>, probs: Var, targets: &[usize], weights: &ClassWeights) -> Result<Var> {
    let (n, k) = check_targets(tape.shape(probs), targets, weights)?;
    let mut coef = vec![F::zero(); n * k];
    for (i, &t) in targets.iter().enumerate() {
        coef[i * k + t - 1] = F::from_f64_lossy(weights.of(t));
    }
    let coef = tape.constant(Tensor::from_parts(vec![n, k], coef));
    let logs = tape.log_clamped(probs, F::from_f64_lossy(LOG_FLOOR));
    let terms = tape.mul(logs, coef)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, -F::one() / F::from_usize(n).unwrap()))
}

/// Weighted mean absolute error: `(1/N) Σ_i w(y_i) |pred_i - r_i|`.
pub fn l1_loss<F: Real>(tape: &mut Tape<F>, preds: Var, targets: &[Rating], weights: &ClassWeights) -> Result<Var> {
    let shape = tape.shape(preds).to_vec();
    if shape != [targets.len()] {
        return Err(Error::Shape {
            op: "l1 loss",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let n = targets.len();
    let neg_labels = targets.iter().map(|r| F::from_f64_lossy(-r.value())).collect();
    let w = targets.iter().map(|r| F::from_f64_lossy(weights.of(r.index()))).collect();
    let neg_labels = tape.constant(Tensor::from_parts(vec![n], neg_labels));
    let w = tape.constant(Tensor::from_parts(vec![n], w));
    let diff = tape.add(preds, neg_labels)?;
    let dist = tape.abs(diff);
    let weighted = tape.mul(dist, w)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, F::one() / F::from_usize(n).unwrap()))
}

/// `Σ_c μ_c L_c`; components missing from `mu` use weight 1.
pub fn multitask_total<F: Real>(
    tape: &mut Tape<F>,
    losses: &[(Component, Var)],
    mu: &BTreeMap<Component, f64>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(c, loss) in losses {
        let m = mu.get(&c).copied().unwrap_or(1.0);
        if m < 0.0 {
            return Err(Error::config(format!("task weight for {c} is negative")));
        }
        let term = tape.scale(loss, F::from_f64_lossy(m));
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::usage("multi-task total of zero losses"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_loss(probs: &[f64], k: usize, targets: &[usize], w: &ClassWeights, ce: bool) -> f64 {
        let mut tape = Tape::<f64>::new();
        let n = targets.len();
        let p = tape.constant(Tensor::new(vec![n, k], probs.to_vec()).unwrap());
        let l = if ce {
            weighted_ce_loss(&mut tape, p, targets, w).unwrap()
        } else {
            oll_loss(&mut tape, p, targets, w).unwrap()
        };
        tape.value(l).item()
    }

    #[test]
    fn rating_index_mapping() {
        assert_eq!(rating_to_index(1.0).unwrap(), 1);
        assert_eq!(rating_to_index(4.0).unwrap(), 7);
        assert_eq!(rating_to_index(2.5).unwrap(), 4);
        assert!(matches!(rating_to_index(2.25), Err(Error::Data(_))));
        assert!(rating_to_index(4.5).is_err());
        for r in Rating::ALL {
            assert_eq!(index_to_rating(rating_to_index(r.value()).unwrap()).unwrap(), r.value());
        }
    }

    #[test]
    fn rounding_to_ratings() {
        assert_eq!(round_to_rating(2.74).value(), 2.5);
        assert_eq!(round_to_rating(5.2).value(), 4.0);
        assert_eq!(round_to_rating(2.75).value(), 3.0);
        assert_eq!(round_to_rating(-3.0).value(), 1.0);
        assert_eq!(round_to_rating(1.24).value(), 1.0);
    }

    #[test]
    fn class_weight_examples() {
        let w = ClassWeights::from_counts(&[10; 7]).unwrap();
        assert!(w.weights.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let w = ClassWeights::from_counts(&[10, 5]).unwrap();
        assert!((w.weights[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w.weights[1] - 4.0 / 3.0).abs() < 1e-12);

        let w = ClassWeights::from_counts(&[10, 0, 5]).unwrap();
        assert_eq!(w.weights[1], w.weights[2]);
        assert!(ClassWeights::from_counts(&[0, 0]).is_err());
    }

    #[test]
    fn oll_examples() {
        let w = ClassWeights::uniform(3);
        let loss = eval_loss(&[1.0 / 3.0; 3], 3, &[1], &w, false);
        assert!((loss - 3.0 * 1.5f64.ln()).abs() < 1e-9);

        let w7 = ClassWeights::uniform(7);
        let mut onehot = vec![0.0; 7];
        onehot[3] = 1.0;
        assert_eq!(eval_loss(&onehot, 7, &[4], &w7, false), 0.0);
    }

    #[test]
    fn ce_examples_and_invariance() {
        let w7 = ClassWeights::uniform(7);
        let loss = eval_loss(&[1.0 / 7.0; 7], 7, &[2], &w7, true);
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        let mut onehot = vec![0.0; 7];
        onehot[1] = 1.0;
        assert_eq!(eval_loss(&onehot, 7, &[2], &w7, true), 0.0);

        // moving mass between wrong classes: CE unchanged, OLL changes
        let a = [0.4, 0.3, 0.3, 0.0, 0.0, 0.0, 0.0];
        let b = [0.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.6];
        let ce_a = eval_loss(&a, 7, &[1], &w7, true);
        let ce_b = eval_loss(&b, 7, &[1], &w7, true);
        assert!((ce_a - ce_b).abs() < 1e-12);
        let oll_a = eval_loss(&a, 7, &[1], &w7, false);
        let oll_b = eval_loss(&b, 7, &[1], &w7, false);
        assert!(oll_b > oll_a);
    }

    #[test]
    fn l1_examples() {
        let mut tape = Tape::<f64>::new();
        let w = ClassWeights::uniform(7);
        let preds = tape.constant(Tensor::new(vec![2], vec![2.0, 3.5]).unwrap());
        let labels = [Rating::from_value(3.0).unwrap(), Rating::from_value(3.5).unwrap()];
        let l = l1_loss(&mut tape, preds, &labels, &w).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn multitask_total_examples() {
        let mut tape = Tape::<f64>::new();
        let losses: Vec<(Component, Var)> = Component::ALL
            .iter()
            .zip([1.0, 2.0, 3.0])
            .map(|(&c, v)| (c, tape.constant(Tensor::scalar(v))))
            .collect();
        let t = multitask_total(&mut tape, &losses, &BTreeMap::new()).unwrap();
        assert_eq!(tape.value(t).item(), 6.0);
        let mu: BTreeMap<_, _> = [(Component::Nature, 1.0), (Component::Questioning, 0.0), (Component::Explanations, 0.0)].into();
        let t = multitask_total(&mut tape, &losses, &mu).unwrap();
        assert_eq!(tape.value(t).item(), 1.0);
    }

    #[test]
    fn rating_serde_round_trip() {
        let r: Rating = serde_json::from_str("3.5").unwrap();
        assert_eq!(r.index(), 6);
        assert_eq!(serde_json::to_string(&r).unwrap(), "3.5");
        assert!(serde_json::from_str::<Rating>("3.2").is_err());
    }
}
