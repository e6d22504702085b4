//! Finite-difference gradient checks over every tape primitive and every
//! composite block, in 64-bit precision.
//!
//! Each entry is projected to a scalar as `Σ out ⊙ R` with a fixed random
//! `R`, so every output coordinate contributes to the checked gradient.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::{
    add_positional, prepend_cls, BiLstm, EncoderBlock, Forward, HeadMode, Init, Linear, LstmCell, MlpHead,
    MultiHeadAttention, ParamStore, SeqMask,
};
use crate::data::{FeatureDims, SegmentFeatures};
use crate::error::{Error, Result};
use crate::model::{build_model, Batch, EncoderKind, ModelConfig};
use crate::objective::{l1_loss, multitask_total, oll_loss, weighted_ce_loss, ClassWeights, Component, Rating};
use crate::seed::derive_seed;
use crate::tensor::{grad_check, GradCheckOptions, Tape, Tensor, Var};

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

type Builder = fn(&mut ChaCha8Rng) -> Case;

const KINK_MARGIN_STEPS: f64 = 10.0;
const MAX_DRAWS: u64 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogOptions {
    /// Random input draws per entry.
    pub points: usize,
    pub tol: f64,
    pub step: f64,
    /// Gradients smaller than this are compared absolutely. Structurally
    /// zero gradients (a key bias under softmax) carry roundoff of ~1e-10.
    pub abs_floor: f64,
    pub max_coords: usize,
    pub seed: u64,
    /// Entry whose output is routed through an identity with a deliberately
    /// wrong gradient.
    pub inject_fault: Option<String>,
    /// Restrict to these entries (all when empty).
    pub only: Vec<String>,
}

impl Default for CatalogOptions {
    fn default() -> Self {
        CatalogOptions {
            points: 10,
            tol: 1e-5,
            step: 1e-5,
            abs_floor: 1e-4,
            max_coords: 64,
            seed: 0,
            inject_fault: None,
            only: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogResult {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Normal draws pushed at least `gap` away from zero, for kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let mut t = normal(rng, shape, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (gap + v.abs());
    }
    t
}

fn unary(x: Tensor<f64>, op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Case {
    Case {
        inputs: vec![x],
        f: Box::new(move |t, v| op(t, v[0])),
    }
}

fn binary(a: Tensor<f64>, b: Tensor<f64>, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Case {
    Case {
        inputs: vec![a, b],
        f: Box::new(move |t, v| op(t, v[0], v[1])),
    }
}

fn random_mask(rng: &mut ChaCha8Rng, lengths_max: usize, batch: usize) -> SeqMask {
    let lengths: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=lengths_max)).collect();
    let mut lengths = lengths;
    lengths[0] = lengths_max;
    SeqMask::from_lengths(&lengths, lengths_max)
}

/// Parameters of a freshly built block, perturbed so biases and norms are
/// not at their trivial initial values.
fn perturbed(store: &ParamStore<f64>, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    store
        .tensors()
        .iter()
        .map(|t| {
            let noise = normal(rng, t.shape(), 0.1);
            let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect()
}

/// Runs `body` on a [`Forward`] wrapping `tape`, whose first `n_params`
/// leaves are the block parameters.
fn in_block(
    tape: &mut Tape<f64>,
    vars: &[Var],
    n_params: usize,
    body: impl FnOnce(&mut Forward<f64>, &[Var]) -> Result<Var>,
) -> Result<Var> {
    let owned = std::mem::replace(tape, Tape::new());
    let mut fwd = Forward::with_tape(owned, vars[..n_params].to_vec());
    let out = body(&mut fwd, &vars[n_params..]);
    *tape = fwd.tape;
    out
}

fn block_case(
    rng: &mut ChaCha8Rng,
    store: ParamStore<f64>,
    data: Vec<Tensor<f64>>,
    body: impl Fn(&mut Forward<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let mut inputs = perturbed(&store, rng);
    let n = inputs.len();
    inputs.extend(data);
    Case {
        inputs,
        f: Box::new(move |t, v| in_block(t, v, n, |fwd, d| body(fwd, d))),
    }
}

fn random_weights(rng: &mut ChaCha8Rng) -> ClassWeights {
    let counts: Vec<usize> = (0..7).map(|_| rng.random_range(1..20)).collect();
    ClassWeights::from_counts(&counts).unwrap()
}

fn random_ratings(rng: &mut ChaCha8Rng, n: usize) -> Vec<Rating> {
    (0..n).map(|_| Rating::ALL[rng.random_range(0..7)]).collect()
}

fn segment(rng: &mut ChaCha8Rng, id: &str, dims: FeatureDims, lt: usize, la: usize) -> SegmentFeatures {
    let f = |rng: &mut ChaCha8Rng, r: usize, c: usize| normal(rng, &[r, c], 1.0).cast::<f32>();
    SegmentFeatures {
        segment_id: id.into(),
        teacher_id: "t".into(),
        lesson_id: "l".into(),
        text: f(rng, lt, dims.text),
        audio: f(rng, la, dims.audio),
        video: f(rng, la, dims.video),
        duration_s: 960.0,
    }
}

fn model_case(rng: &mut ChaCha8Rng, encoder: EncoderKind) -> Case {
    let dims = FeatureDims {
        text: 8,
        audio: 6,
        video: 4,
    };
    let (modalities, num_modules) = match encoder {
        EncoderKind::Attention => ("T+A+V", 2),
        EncoderKind::Lstm => ("T+A", 1),
    };
    let cfg = ModelConfig {
        modalities: modalities.parse().unwrap(),
        encoder,
        num_modules,
        dims,
        num_heads: 2,
        head_hidden: 5,
        lstm_layers: 2,
        dropout: 0.0,
        seed: rng.random(),
        ..ModelConfig::default()
    };
    let model = build_model::<f64>(&cfg).unwrap();
    let segs = [segment(rng, "a", dims, 3, 2), segment(rng, "b", dims, 2, 3)];
    let batch = Batch::new(&[&segs[0], &segs[1]], cfg.modalities.as_slice()).unwrap();
    let targets: BTreeMap<Component, Vec<Rating>> = Component::ALL.iter().map(|&c| (c, random_ratings(rng, 2))).collect();
    let weights: BTreeMap<Component, ClassWeights> = Component::ALL.iter().map(|&c| (c, random_weights(rng))).collect();
    let store = model.params.clone();
    block_case(rng, store, vec![], move |fwd, _| {
        let out = model.forward(fwd, &batch)?;
        model.loss(fwd, &out, &targets, &weights)
    })
}

fn builders() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |r| binary(normal(r, &[3, 4], 1.0), normal(r, &[4, 5], 1.0), |t, a, b| t.matmul(a, b))),
        ("matmul_rank3", |r| binary(normal(r, &[2, 3, 4], 1.0), normal(r, &[4, 2], 1.0), |t, a, b| t.matmul(a, b))),
        ("bmm", |r| binary(normal(r, &[2, 3, 4], 1.0), normal(r, &[2, 4, 3], 1.0), |t, a, b| t.bmm(a, b))),
        ("add_broadcast", |r| binary(normal(r, &[2, 3, 4], 1.0), normal(r, &[4], 1.0), |t, a, b| t.add(a, b))),
        ("mul_broadcast", |r| binary(normal(r, &[2, 3, 4], 1.0), normal(r, &[3, 4], 1.0), |t, a, b| t.mul(a, b))),
        ("scale", |r| unary(normal(r, &[3, 4], 1.0), |t, x| Ok(t.scale(x, -1.7)))),
        ("add_scalar", |r| unary(normal(r, &[3, 4], 1.0), |t, x| Ok(t.add_scalar(x, 0.3)))),
        ("relu", |r| unary(away_from_zero(r, &[3, 4], 0.01), |t, x| Ok(t.relu(x)))),
        ("sigmoid", |r| unary(normal(r, &[3, 4], 2.0), |t, x| Ok(t.sigmoid(x)))),
        ("tanh", |r| unary(normal(r, &[3, 4], 1.0), |t, x| Ok(t.tanh(x)))),
        ("abs", |r| unary(away_from_zero(r, &[3, 4], 0.01), |t, x| Ok(t.abs(x)))),
        ("log_clamped", |r| {
            let mut x = normal(r, &[3, 4], 1.0);
            for v in x.data_mut() {
                *v = 0.1 + v.abs();
            }
            unary(x, |t, x| Ok(t.log_clamped(x, 1e-12)))
        }),
        ("softmax_last", |r| unary(normal(r, &[2, 3, 5], 1.0), |t, x| t.softmax(x, 2))),
        ("softmax_inner", |r| unary(normal(r, &[2, 4, 3], 1.0), |t, x| t.softmax(x, 1))),
        ("softmax_masked", |r| {
            let x = normal(r, &[3, 5], 1.0);
            let mask: Vec<bool> = (0..15).map(|i| i % 5 != 0 && r.random_bool(0.4)).collect();
            Case {
                inputs: vec![x],
                f: Box::new(move |t, v| {
                    let m = t.masked_fill(v[0], &mask, f64::NEG_INFINITY)?;
                    t.softmax(m, 1)
                }),
            }
        }),
        ("sum", |r| unary(normal(r, &[3, 4], 1.0), |t, x| Ok(t.sum(x)))),
        ("mean_all", |r| unary(normal(r, &[3, 4], 1.0), |t, x| Ok(t.mean_all(x)))),
        ("mean_axis", |r| unary(normal(r, &[2, 3, 4], 1.0), |t, x| t.mean_axis(x, 1))),
        ("concat", |r| {
            binary(normal(r, &[2, 3, 4], 1.0), normal(r, &[2, 2, 4], 1.0), |t, a, b| t.concat(&[a, b], 1))
        }),
        ("slice", |r| unary(normal(r, &[2, 5, 3], 1.0), |t, x| t.slice(x, 1, 1, 3))),
        ("permute", |r| unary(normal(r, &[2, 3, 4, 5], 1.0), |t, x| t.permute(x, &[0, 2, 1, 3]))),
        ("transpose", |r| unary(normal(r, &[2, 3, 4], 1.0), |t, x| t.transpose(x))),
        ("reshape", |r| unary(normal(r, &[2, 3, 4], 1.0), |t, x| t.reshape(x, &[6, 4]))),
        ("expand", |r| unary(normal(r, &[3, 4], 1.0), |t, x| Ok(t.expand(x, 3)))),
        ("layer_norm", |r| {
            let x = normal(r, &[2, 3, 6], 1.5);
            let g = normal(r, &[6], 1.0);
            let b = normal(r, &[6], 1.0);
            Case {
                inputs: vec![x, g, b],
                f: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
            }
        }),
        ("gather_rows", |r| {
            let idx: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
            Case {
                inputs: vec![normal(r, &[4, 3], 1.0)],
                f: Box::new(move |t, v| t.gather_rows(v[0], &idx)),
            }
        }),
        ("dropout_mask", |r| {
            let mask: Vec<f64> = (0..12).map(|_| if r.random_bool(0.3) { 0.0 } else { 1.0 / 0.7 }).collect();
            Case {
                inputs: vec![normal(r, &[3, 4], 1.0)],
                f: Box::new(move |t, v| t.dropout_with_mask(v[0], mask.clone())),
            }
        }),
        ("linear", |r| {
            let mut store = ParamStore::new();
            let lin = Linear::new(&mut store, &mut Init::new(r.random()), "lin", 4, 3);
            let x = normal(r, &[2, 5, 4], 1.0);
            block_case(r, store, vec![x], move |fwd, d| lin.forward(fwd, d[0]))
        }),
        ("attention_self_masked", |r| {
            let mut store = ParamStore::new();
            let attn = MultiHeadAttention::new(&mut store, &mut Init::new(r.random()), "attn", 6, 6, 2).unwrap();
            let mask = random_mask(r, 4, 3);
            let x = normal(r, &[3, 4, 6], 1.0);
            block_case(r, store, vec![x], move |fwd, d| Ok(attn.forward(fwd, d[0], d[0], &mask)?.output))
        }),
        ("attention_cross", |r| {
            let mut store = ParamStore::new();
            let attn = MultiHeadAttention::new(&mut store, &mut Init::new(r.random()), "attn", 6, 5, 3).unwrap();
            let mask = random_mask(r, 4, 2);
            let q = normal(r, &[2, 3, 6], 1.0);
            let c = normal(r, &[2, 4, 5], 1.0);
            block_case(r, store, vec![q, c], move |fwd, d| Ok(attn.forward(fwd, d[0], d[1], &mask)?.output))
        }),
        ("encoder_block_self", |r| {
            let mut store = ParamStore::new();
            let block = EncoderBlock::new(&mut store, &mut Init::new(r.random()), "enc", 6, None, 2, 8).unwrap();
            let mask = random_mask(r, 4, 2);
            let x = normal(r, &[2, 4, 6], 1.0);
            block_case(r, store, vec![x], move |fwd, d| block.forward(fwd, d[0], &mask, None))
        }),
        ("encoder_block_cross", |r| {
            let mut store = ParamStore::new();
            let block = EncoderBlock::new(&mut store, &mut Init::new(r.random()), "enc", 6, Some(5), 2, 8).unwrap();
            let q_mask = random_mask(r, 3, 2);
            let c_mask = random_mask(r, 4, 2);
            let q = normal(r, &[2, 3, 6], 1.0);
            let c = normal(r, &[2, 4, 5], 1.0);
            block_case(r, store, vec![q, c], move |fwd, d| block.forward(fwd, d[0], &q_mask, Some((d[1], &c_mask))))
        }),
        ("positional_cls", |r| {
            let x = normal(r, &[2, 3, 4], 1.0);
            let cls = normal(r, &[4], 1.0);
            Case {
                inputs: vec![cls, x],
                f: Box::new(|t, v| {
                    in_block(t, v, 0, |fwd, d| {
                        let x = add_positional(fwd, d[1], true)?;
                        prepend_cls(fwd, x, d[0])
                    })
                }),
            }
        }),
        ("mlp_head_classify", |r| {
            let mut store = ParamStore::new();
            let head = MlpHead::new(&mut store, &mut Init::new(r.random()), "head", 6, 5, HeadMode::Classify, 7);
            let x = normal(r, &[3, 6], 1.0);
            block_case(r, store, vec![x], move |fwd, d| head.forward(fwd, d[0]))
        }),
        ("mlp_head_regress", |r| {
            let mut store = ParamStore::new();
            let head = MlpHead::new(&mut store, &mut Init::new(r.random()), "head", 6, 5, HeadMode::Regress, 7);
            let x = normal(r, &[3, 6], 1.0);
            block_case(r, store, vec![x], move |fwd, d| head.forward(fwd, d[0]))
        }),
        ("lstm_cell", |r| {
            let mut store = ParamStore::new();
            let cell = LstmCell::new(&mut store, &mut Init::new(r.random()), "cell", 4, 3);
            let (x, h, c) = (normal(r, &[2, 4], 1.0), normal(r, &[2, 3], 0.5), normal(r, &[2, 3], 0.5));
            block_case(r, store, vec![x, h, c], move |fwd, d| {
                let (h, c) = cell.step(fwd, d[0], d[1], d[2])?;
                fwd.tape.concat(&[h, c], 1)
            })
        }),
        ("bilstm_padded", |r| {
            let mut store = ParamStore::new();
            let lstm = BiLstm::new(&mut store, &mut Init::new(r.random()), "lstm", 3, 3, 2);
            let mask = random_mask(r, 4, 3);
            let x = normal(r, &[3, 4, 3], 1.0);
            block_case(r, store, vec![x], move |fwd, d| lstm.forward(fwd, d[0], &mask))
        }),
        ("oll_loss", |r| {
            let targets: Vec<usize> = (0..4).map(|_| r.random_range(1..=7)).collect();
            let w = random_weights(r);
            Case {
                inputs: vec![normal(r, &[4, 7], 1.0)],
                f: Box::new(move |t, v| {
                    let p = t.softmax(v[0], 1)?;
                    oll_loss(t, p, &targets, &w)
                }),
            }
        }),
        ("ce_loss", |r| {
            let targets: Vec<usize> = (0..4).map(|_| r.random_range(1..=7)).collect();
            let w = random_weights(r);
            Case {
                inputs: vec![normal(r, &[4, 7], 1.0)],
                f: Box::new(move |t, v| {
                    let p = t.softmax(v[0], 1)?;
                    weighted_ce_loss(t, p, &targets, &w)
                }),
            }
        }),
        ("l1_loss", |r| {
            let targets = random_ratings(r, 5);
            let mut preds = away_from_zero(r, &[5], 0.05);
            for (p, t) in preds.data_mut().iter_mut().zip(&targets) {
                *p += t.value();
            }
            let w = random_weights(r);
            Case {
                inputs: vec![preds],
                f: Box::new(move |t, v| l1_loss(t, v[0], &targets, &w)),
            }
        }),
        ("multitask_total", |r| {
            let mu: BTreeMap<Component, f64> = Component::ALL.iter().map(|&c| (c, r.random_range(0.1..2.0))).collect();
            Case {
                inputs: vec![normal(r, &[], 1.0), normal(r, &[], 1.0), normal(r, &[], 1.0)],
                f: Box::new(move |t, v| {
                    let parts: Vec<(Component, Var)> = Component::ALL.iter().copied().zip(v.iter().copied()).collect();
                    multitask_total(t, &parts, &mu)
                }),
            }
        }),
        ("fusion_model", |r| model_case(r, EncoderKind::Attention)),
        ("lstm_baseline_model", |r| model_case(r, EncoderKind::Lstm)),
    ]
}

/// Names of every catalog entry, in run order.
pub fn catalog_names() -> Vec<&'static str> {
    builders().into_iter().map(|(n, _)| n).collect()
}

/// Identity whose backward scales the incoming gradient by 1.01.
fn faulty_identity(tape: &mut Tape<f64>, x: Var) -> Var {
    let value = tape.value(x).clone();
    tape.custom(&[x], value, Box::new(|_, _, g| vec![g.iter().map(|v| v * 1.01).collect()]))
}

/// Draws a point whose kinked ops sit well away from their kinks, so no
/// finite-difference probe crosses one.
fn draw_point(build: Builder, opts: &CatalogOptions, entry: usize, point: usize) -> Result<(u64, Case, u64)> {
    let margin = KINK_MARGIN_STEPS * opts.step;
    for attempt in 0..MAX_DRAWS {
        let seed = derive_seed(opts.seed, &[entry as u64, point as u64, attempt]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = build(&mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = case.inputs.iter().map(|v| tape.param(v.clone())).collect();
        (case.f)(&mut tape, &vars)?;
        if tape.kink_margin() >= margin {
            return Ok((seed, case, rng.random()));
        }
    }
    Err(Error::Numeric {
        op: "gradcheck",
        detail: format!("no point away from kinks after {MAX_DRAWS} draws"),
    })
}

pub fn run_catalog(opts: &CatalogOptions) -> Result<Vec<CatalogResult>> {
    let names = catalog_names();
    for n in opts.only.iter().chain(&opts.inject_fault) {
        if !names.contains(&n.as_str()) {
            return Err(Error::usage(format!("unknown gradcheck entry '{n}'")));
        }
    }
    let mut results = Vec::new();
    for (e, (name, build)) in builders().into_iter().enumerate() {
        if !opts.only.is_empty() && !opts.only.iter().any(|n| n == name) {
            continue;
        }
        let fault = opts.inject_fault.as_deref() == Some(name);
        let mut worst = 0.0f64;
        let mut coords = 0;
        for point in 0..opts.points {
            let (seed, case, projection_seed) = draw_point(build, opts, e, point)?;
            let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
                let mut out = (case.f)(tape, vars)?;
                if fault {
                    out = faulty_identity(tape, out);
                }
                let shape = tape.shape(out).to_vec();
                let r = normal(&mut ChaCha8Rng::seed_from_u64(projection_seed), &shape, 1.0);
                let r = tape.constant(r);
                let weighted = tape.mul(out, r)?;
                Ok(tape.sum(weighted))
            };
            let gc = GradCheckOptions {
                step: opts.step,
                tol: opts.tol,
                max_coords: opts.max_coords,
                abs_floor: opts.abs_floor,
                seed,
            };
            let report = grad_check(f, &case.inputs, &gc)?;
            worst = worst.max(report.max_rel_err);
            coords += report.inputs.iter().map(|i| i.coords_checked).sum::<usize>();
        }
        results.push(CatalogResult {
            name: name.to_string(),
            max_rel_err: worst,
            coords_checked: coords,
            passed: worst < opts.tol,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let names = catalog_names();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }

    #[test]
    fn unknown_entry_rejected() {
        let opts = CatalogOptions {
            only: vec!["nope".into()],
            ..CatalogOptions::default()
        };
        assert!(run_catalog(&opts).is_err());
    }

    #[test]
    fn fault_is_detected() {
        let opts = CatalogOptions {
            only: vec!["tanh".into()],
            inject_fault: Some("tanh".into()),
            points: 1,
            ..CatalogOptions::default()
        };
        let r = run_catalog(&opts).unwrap();
        assert!(!r[0].passed && r[0].max_rel_err > 1e-3);
    }
}

