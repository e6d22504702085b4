use serde::{Deserialize, Serialize};

use super::linear::Linear;
use super::param::{Forward, Init, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

pub const HEAD_HIDDEN: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Softmax distribution over the rating classes.
    Classify,
    /// One unbounded score.
    Regress,
}

/// Three-layer MLP task head: `in -> hidden -> hidden -> out`, ReLU between
/// layers, followed by a softmax in classification mode.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub layers: [Linear; 3],
    pub mode: HeadMode,
}

impl MlpHead {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        hidden: usize,
        mode: HeadMode,
        num_classes: usize,
    ) -> Self {
        let out = match mode {
            HeadMode::Classify => num_classes,
            HeadMode::Regress => 1,
        };
        MlpHead {
            layers: [
                Linear::new(store, init, &format!("{name}.fc1"), in_dim, hidden),
                Linear::new(store, init, &format!("{name}.fc2"), hidden, hidden),
                Linear::new(store, init, &format!("{name}.fc3"), hidden, out),
            ],
            mode,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// `x` is `[B, in]`. Returns `[B, classes]` probabilities or `[B]` scores.
    pub fn forward<F: Real>(&self, fwd: &mut Forward<F>, x: Var) -> Result<Var> {
        let shape = fwd.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(Error::Shape {
                op: "mlp head",
                lhs: shape,
                rhs: vec![self.in_dim()],
            });
        }
        let h = self.layers[0].forward(fwd, x)?;
        let h = fwd.tape.relu(h);
        let h = self.layers[1].forward(fwd, h)?;
        let h = fwd.tape.relu(h);
        let out = self.layers[2].forward(fwd, h)?;
        match self.mode {
            HeadMode::Classify => fwd.tape.softmax(out, 1),
            HeadMode::Regress => fwd.tape.reshape(out, &[shape[0]]),
        }
    }
}
