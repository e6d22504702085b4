use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named learnable tensors.
///
/// Blocks hold [`ParamId`]s into the store, so the optimizer, checkpointing
/// and gradient checking all see one list in a stable order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn set_all(&mut self, values: Vec<Tensor<F>>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::usage(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.tensors[i].shape() {
                return Err(Error::Shape {
                    op: "set parameter",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        self.tensors = values;
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Parameter initializers. All draws come from one seeded stream, so the
/// order of calls fixes the resulting parameters.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Xavier-uniform `[fan_in, fan_out]` matrix.
    pub fn xavier<F: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<F> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let data = (0..fan_in * fan_out)
            .map(|_| F::from_f64_lossy(dist.sample(&mut self.rng)))
            .collect();
        Tensor::from_parts(vec![fan_in, fan_out], data)
    }

    pub fn normal<F: Real>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<F> {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::from_f64_lossy(dist.sample(&mut self.rng))).collect();
        Tensor::from_parts(shape, data)
    }

    pub fn zeros<F: Real>(&mut self, shape: Vec<usize>) -> Tensor<F> {
        Tensor::zeros(shape)
    }

    pub fn ones<F: Real>(&mut self, shape: Vec<usize>) -> Tensor<F> {
        Tensor::full(shape, F::one())
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

/// State of one forward pass: the tape, the parameters registered on it,
/// and the dropout configuration.
pub struct Forward<F: Real = f32> {
    pub tape: Tape<F>,
    params: Vec<Var>,
    pub training: bool,
    pub dropout: f64,
    rng: ChaCha8Rng,
}

impl<F: Real> Forward<F> {
    /// Registers every parameter as a differentiable leaf.
    pub fn new(params: &ParamStore<F>, training: bool, dropout: f64, seed: u64) -> Self {
        let mut tape = Tape::new();
        let vars = params.tensors().iter().map(|t| tape.param(t.clone())).collect();
        Forward {
            tape,
            params: vars,
            training,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Wraps an existing tape whose leading leaves are `params`, in store
    /// order. Used to check gradients of blocks against their parameters.
    pub fn with_tape(tape: Tape<F>, params: Vec<Var>) -> Self {
        Forward {
            tape,
            params,
            training: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Inference pass without dropout.
    pub fn eval(params: &ParamStore<F>) -> Self {
        Self::new(params, false, 0.0, 0)
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Applies dropout when training with a positive rate; identity otherwise.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        if !self.training || self.dropout <= 0.0 {
            return Ok(x);
        }
        self.tape.dropout(x, self.dropout, &mut self.rng)
    }

    /// Per-parameter gradients, in store order.
    pub fn param_grads(&self, grads: &mut Gradients<F>) -> Vec<Tensor<F>> {
        self.params
            .iter()
            .map(|&v| grads.take(v).expect("parameters are differentiable leaves"))
            .collect()
    }
}
