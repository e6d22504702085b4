use super::param::{Forward, Init, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Real, Var};

/// Affine map `x·W + b` applied over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), init.zeros(vec![out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Real>(&self, fwd: &mut Forward<F>, x: Var) -> Result<Var> {
        let y = fwd.tape.matmul(x, fwd.p(self.weight))?;
        fwd.tape.add(y, fwd.p(self.bias))
    }
}
