//! AdamW, learning-rate plateau halving, early stopping and the training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Forward, ParamStore};
use crate::data::{Dataset, SegmentFeatures};
use crate::error::{Error, Result};
use crate::model::{Batch, FusionModel};
use crate::objective::{ClassWeights, Component, Rating};
use crate::seed::derive_seed;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F: Real = f32> {
    pub config: AdamWConfig,
    pub lr: f64,
    pub step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &ParamStore<F>, lr: f64, config: AdamWConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![F::zero(); t.numel()]).collect();
        AdamW {
            config,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Fails without touching anything if a gradient is
    /// non-finite or mis-shaped.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &[Tensor<F>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::usage(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensors()[i].shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: params.tensors()[i].shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::Numeric {
                    op: "adamw",
                    detail: format!("non-finite gradient for parameter '{}'", params.names()[i]),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64_lossy(c.beta1), F::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (F::from_f64_lossy(1.0 - c.beta1), F::from_f64_lossy(1.0 - c.beta2));
        let decay = F::from_f64_lossy(1.0 - self.lr * c.weight_decay);
        let step_size = F::from_f64_lossy(self.lr / bc1);
        let inv_sqrt_bc2 = F::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = F::from_f64_lossy(c.eps);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                *w = *w * decay - step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// Strict-improvement tracker shared by the scheduler and early stopping.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Plateau {
    best: Option<f64>,
    bad_epochs: usize,
}

impl Plateau {
    /// Returns true when `loss` strictly improves on the best so far.
    fn observe(&mut self, loss: f64) -> bool {
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without strict improvement; the count restarts after each cut.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    state: Plateau,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            patience,
            factor: 0.5,
            state: Plateau::default(),
        }
    }

    /// Records one epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if !self.state.observe(val_loss) && self.state.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.state.bad_epochs = 0;
        }
        self.lr
    }
}

/// Signals a stop after `patience` consecutive epochs without strict
/// improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    state: Plateau,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            state: Plateau::default(),
        }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        let improved = self.state.observe(val_loss);
        (improved, self.state.bad_epochs >= self.patience)
    }

    pub fn best(&self) -> Option<f64> {
        self.state.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 8,
            max_epochs: 200,
            plateau_patience: 5,
            early_stop_patience: 15,
            val_fraction: 0.2,
            grad_clip: None,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch size and epoch budget must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction must lie in (0, 1)"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Last epoch run.
    pub stop_epoch: usize,
    pub early_stopped: bool,
}

impl History {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>5}  {:>12}  {:>12}  {:>10}", "epoch", "train_loss", "val_loss", "lr");
        for e in &self.epochs {
            let mark = if e.epoch == self.best_epoch { " *" } else { "" };
            let _ = writeln!(s, "{:>5}  {:>12.6}  {:>12.6}  {:>10.3e}{mark}", e.epoch, e.train_loss, e.val_loss, e.lr);
        }
        let how = if self.early_stopped { "early stop" } else { "epoch budget" };
        let _ = writeln!(
            s,
            "stopped after epoch {} ({how}); best epoch {} with val loss {:.6}",
            self.stop_epoch, self.best_epoch, self.best_val_loss
        );
        s
    }
}

/// Targets for `idx`, one vector per component.
pub fn targets(data: &Dataset, idx: &[usize], components: &[Component]) -> BTreeMap<Component, Vec<Rating>> {
    components
        .iter()
        .map(|&c| (c, idx.iter().map(|&i| data.label(i, c)).collect()))
        .collect()
}

pub fn class_weights_for(data: &Dataset, idx: &[usize], components: &[Component]) -> Result<BTreeMap<Component, ClassWeights>> {
    targets(data, idx, components)
        .into_iter()
        .map(|(c, labels)| Ok((c, ClassWeights::from_labels(&labels)?)))
        .collect()
}

fn make_batch(data: &Dataset, idx: &[usize], model: &FusionModel<f32>) -> Result<Batch> {
    let segs: Vec<&SegmentFeatures> = idx.iter().map(|&i| &data.segments[i]).collect();
    Batch::new(&segs, model.config.modalities.as_slice())
}

/// Mean over batches of the (eval-mode) total loss.
pub fn evaluate_loss(
    model: &FusionModel<f32>,
    data: &Dataset,
    idx: &[usize],
    batch_size: usize,
    weights: &BTreeMap<Component, ClassWeights>,
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::usage("loss over an empty set"));
    }
    let components = model.components();
    let mut total = 0.0;
    let mut n = 0;
    for chunk in idx.chunks(batch_size) {
        let batch = make_batch(data, chunk, model)?;
        let mut fwd = Forward::eval(&model.params);
        let out = model.forward(&mut fwd, &batch)?;
        let loss = model.loss(&mut fwd, &out, &targets(data, chunk, &components), weights)?;
        total += fwd.tape.value(loss).item().as_f64();
        n += 1;
    }
    Ok(total / n as f64)
}

/// Predicted rating per component for each index, in `idx` order.
pub fn predict(
    model: &FusionModel<f32>,
    data: &Dataset,
    idx: &[usize],
    batch_size: usize,
) -> Result<BTreeMap<Component, Vec<Rating>>> {
    let mut out: BTreeMap<Component, Vec<Rating>> = BTreeMap::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = make_batch(data, chunk, model)?;
        for (c, r) in model.predict(&batch)? {
            out.entry(c).or_default().extend(r);
        }
    }
    Ok(out)
}

fn check_disjoint(data: &Dataset, train_idx: &[usize], val_idx: &[usize]) -> Result<()> {
    let train_teachers: BTreeSet<&str> = train_idx.iter().map(|&i| data.teacher_of(i)).collect();
    if let Some(&i) = val_idx.iter().find(|&&i| train_teachers.contains(data.teacher_of(i))) {
        return Err(Error::usage(format!(
            "teacher {} appears in both training and validation sets",
            data.teacher_of(i)
        )));
    }
    Ok(())
}

fn clip_gradients<F: Real>(grads: &mut [Tensor<F>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Trains `model` in place and leaves it holding the best-validation
/// parameters.
pub fn train(
    model: &mut FusionModel<f32>,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::usage("training and validation sets must both be nonempty"));
    }
    check_disjoint(data, train_idx, val_idx)?;
    let components = model.components();
    let weights = class_weights_for(data, train_idx, &components)?;
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.optimizer);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_params = model.params.tensors().to_vec();
    let mut history = History {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stop_epoch: 0,
        early_stopped: false,
    };
    let mut order = train_idx.to_vec();
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        let lr = sched.lr;
        opt.lr = lr;
        let mut batch_losses = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch(data, chunk, model)?;
            let mut fwd = Forward::new(
                &model.params,
                true,
                model.config.dropout,
                derive_seed(cfg.seed, &[epoch as u64, b as u64, 1]),
            );
            let out = model.forward(&mut fwd, &batch)?;
            let loss = model.loss(&mut fwd, &out, &targets(data, chunk, &components), &weights)?;
            let value = fwd.tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric {
                    op: "train",
                    detail: format!("non-finite loss in epoch {epoch}, batch {b}"),
                });
            }
            let mut grads = fwd.tape.backward(loss)?;
            let mut grads = fwd.param_grads(&mut grads);
            if let Some(c) = cfg.grad_clip {
                clip_gradients(&mut grads, c);
            }
            opt.update(&mut model.params, &grads).map_err(|e| match e {
                Error::Numeric { op, detail } => Error::Numeric {
                    op,
                    detail: format!("{detail} (epoch {epoch}, batch {b}); epoch aborted"),
                },
                other => other,
            })?;
            batch_losses.push(value);
        }
        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let val_loss = evaluate_loss(model, data, val_idx, cfg.batch_size, &weights)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        history.stop_epoch = epoch;
        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            history.best_epoch = epoch;
            history.best_val_loss = val_loss;
            best_params = model.params.tensors().to_vec();
        }
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.2e}");
        if stop {
            history.early_stopped = true;
            break;
        }
        sched.observe(val_loss);
    }
    model.params.set_all(best_params)?;
    Ok(history)
}

/// Holds out the nearest whole number of teachers to `fraction` of those in
/// `idx` (at least one, leaving at least one). Returns `(train, val)`.
pub fn teacher_split(data: &Dataset, idx: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let teachers: BTreeSet<&str> = idx.iter().map(|&i| data.teacher_of(i)).collect();
    if teachers.len() < 2 {
        return Err(Error::usage("a teacher-grouped validation split needs at least 2 teachers"));
    }
    let mut teachers: Vec<&str> = teachers.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    teachers.shuffle(&mut rng);
    let n_val = ((teachers.len() as f64 * fraction).round() as usize).clamp(1, teachers.len() - 1);
    let val_teachers: BTreeSet<&str> = teachers[..n_val].iter().copied().collect();
    let (val, train): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| val_teachers.contains(data.teacher_of(i)));
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_scalar_trace() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(0.0));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&store, 0.1, cfg);
        opt.update(&mut store, &[Tensor::scalar(1.0)]).unwrap();
        assert!((store.tensors()[0].item() + 0.1).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_behaviour() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let no_decay = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&store, 0.1, no_decay);
        opt.update(&mut store, &[Tensor::zeros(vec![2])]).unwrap();
        assert_eq!(store.tensors()[0].data(), &[1.0, -2.0]);

        let mut opt = AdamW::new(&store, 0.1, AdamWConfig::default());
        for _ in 0..3 {
            opt.update(&mut store, &[Tensor::zeros(vec![2])]).unwrap();
        }
        let f = (1.0f64 - 0.1 * 0.01).powi(3);
        assert!((store.tensors()[0].data()[0] - f).abs() < 1e-15);
        assert!((store.tensors()[0].data()[1] + 2.0 * f).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::scalar(1.0));
        let mut opt = AdamW::new(&store, 0.1, AdamWConfig::default());
        let err = opt.update(&mut store, &[Tensor::scalar(f32::NAN)]).unwrap_err();
        assert!(err.to_string().contains("'w'"), "{err}");
        assert_eq!(store.tensors()[0].item(), 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn plateau_halving() {
        let mut s = PlateauScheduler::new(1.0, 5);
        for l in [5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.25] {
            assert_eq!(s.observe(l), 1.0);
        }
        let mut s = PlateauScheduler::new(1.0, 5);
        let lrs: Vec<f64> = (0..11).map(|_| s.observe(1.0)).collect();
        assert_eq!(lrs[..5], [1.0; 5]);
        assert_eq!(lrs[5], 0.5, "halves at epoch 6");
        assert_eq!(lrs[10], 0.25, "second plateau of 5 quarters it");
    }

    #[test]
    fn early_stopping_rules() {
        let mut e = EarlyStopping::new(15);
        for i in 0..100 {
            assert!(!e.observe(100.0 - i as f64).1);
        }
        let mut e = EarlyStopping::new(15);
        e.observe(1.0);
        for k in 1..=15 {
            let (_, stop) = e.observe(1.0);
            assert_eq!(stop, k == 15);
        }
        let mut e = EarlyStopping::new(15);
        e.observe(1.0);
        for _ in 0..13 {
            e.observe(1.0);
        }
        assert!(e.observe(0.9).0, "improvement on the 14th plateau epoch");
        for k in 1..=15 {
            assert_eq!(e.observe(0.9).1, k == 15);
        }
    }
}
