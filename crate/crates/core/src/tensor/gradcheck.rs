//! Central finite-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Tensors with more elements than this are checked on a random subset
    /// of this many coordinates.
    pub max_coords: usize,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is essentially zero are compared absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-5,
            max_coords: 64,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub input: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Coordinate where the largest error occurred.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
    pub inputs: Vec<InputCheck>,
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences. Every input is treated as a differentiable leaf.
///
/// `f` must be deterministic: it is re-run twice per checked coordinate.
pub fn grad_check<Func>(f: Func, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    Func: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    let mut checks = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every input is a leaf").data().to_vec();
        let numel = inputs[i].numel();
        let coords: Vec<usize> = if numel <= opts.max_coords {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = InputCheck {
            input: i,
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let original = inputs[i].data()[c];
            perturbed[i].data_mut()[c] = original + opts.step;
            let plus = eval(&perturbed)?;
            perturbed[i].data_mut()[c] = original - opts.step;
            let minus = eval(&perturbed)?;
            perturbed[i].data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[c];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let err = (a - numeric).abs() / denom;
            // NaN must count as a failure
            if err > check.max_rel_err || err.is_nan() {
                check.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                check.worst_coord = c;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }

    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        tol: opts.tol,
        passed: max_rel_err < opts.tol,
        inputs: checks,
    })
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let value = tape.value(v);
    if value.numel() != 1 {
        return Err(Error::usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}
