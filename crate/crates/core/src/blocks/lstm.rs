use super::mask::SeqMask;
use super::param::{Forward, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// One direction of one LSTM layer. Gates are packed as `[i, f, g, o]` in a
/// single `[in + hidden, 4·hidden]` weight acting on `concat(x_t, h_{t-1})`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, name: &str, input_dim: usize, hidden: usize) -> Self {
        LstmCell {
            weight: store.add(format!("{name}.weight"), init.xavier(input_dim + hidden, 4 * hidden)),
            bias: store.add(format!("{name}.bias"), init.zeros(vec![4 * hidden])),
            input_dim,
            hidden,
        }
    }

    /// One recurrence step on `[B, in]` input with `[B, hidden]` states.
    pub fn step<F: Real>(&self, fwd: &mut Forward<F>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let z = fwd.tape.concat(&[x, h], 1)?;
        let z = fwd.tape.matmul(z, fwd.p(self.weight))?;
        let z = fwd.tape.add(z, fwd.p(self.bias))?;
        let i = fwd.tape.slice(z, 1, 0, hd)?;
        let f = fwd.tape.slice(z, 1, hd, hd)?;
        let g = fwd.tape.slice(z, 1, 2 * hd, hd)?;
        let o = fwd.tape.slice(z, 1, 3 * hd, hd)?;
        let i = fwd.tape.sigmoid(i);
        let f = fwd.tape.sigmoid(f);
        let g = fwd.tape.tanh(g);
        let o = fwd.tape.sigmoid(o);
        let keep = fwd.tape.mul(f, c)?;
        let write = fwd.tape.mul(i, g)?;
        let c_new = fwd.tape.add(keep, write)?;
        let squashed = fwd.tape.tanh(c_new);
        let h_new = fwd.tape.mul(o, squashed)?;
        Ok((h_new, c_new))
    }
}

/// Multi-layer bidirectional LSTM whose summary is the concatenation of the
/// last layer's final forward and final reverse hidden states.
#[derive(Clone, Debug)]
pub struct BiLstm {
    /// `(forward, reverse)` cells per layer.
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub input_dim: usize,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        input_dim: usize,
        hidden: usize,
        num_layers: usize,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let in_dim = if l == 0 { input_dim } else { 2 * hidden };
                (
                    LstmCell::new(store, init, &format!("{name}.l{l}.fwd"), in_dim, hidden),
                    LstmCell::new(store, init, &format!("{name}.l{l}.rev"), in_dim, hidden),
                )
            })
            .collect();
        BiLstm {
            layers,
            input_dim,
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Encodes a padded `[B, L, input_dim]` batch into `[B, 2·hidden]`.
    ///
    /// Padded steps carry the previous state through unchanged, so the final
    /// forward state is the state after each row's last valid step and the
    /// reverse pass starts at each row's last valid step.
    pub fn forward<F: Real>(&self, fwd: &mut Forward<F>, seq: Var, mask: &SeqMask) -> Result<Var> {
        let shape = fwd.tape.shape(seq).to_vec();
        if shape.len() != 3 || shape[2] != self.input_dim {
            return Err(Error::Shape {
                op: "bilstm",
                lhs: shape,
                rhs: vec![self.input_dim],
            });
        }
        let (batch, len) = (shape[0], shape[1]);
        if len == 0 || mask.lengths().contains(&0) {
            return Err(Error::usage("bilstm needs at least one step per sequence"));
        }

        let mut inputs = Vec::with_capacity(len);
        for t in 0..len {
            let x = fwd.tape.slice(seq, 1, t, 1)?;
            inputs.push(fwd.tape.reshape(x, &[batch, self.input_dim])?);
        }
        let carries = step_carries(fwd, mask, self.hidden);

        let mut summary = None;
        for (layer, (cell_f, cell_r)) in self.layers.iter().enumerate() {
            let (outs_f, last_f) = run_direction(fwd, cell_f, &inputs, &carries, false)?;
            let (outs_r, last_r) = run_direction(fwd, cell_r, &inputs, &carries, true)?;
            if layer + 1 == self.layers.len() {
                summary = Some(fwd.tape.concat(&[last_f, last_r], 1)?);
            } else {
                inputs = outs_f
                    .iter()
                    .zip(&outs_r)
                    .map(|(&a, &b)| fwd.tape.concat(&[a, b], 1))
                    .collect::<Result<_>>()?;
            }
        }
        summary.ok_or_else(|| Error::config("bilstm has no layers"))
    }
}

/// Per step, `None` when every row is valid, else constant `(m, 1 - m)`
/// masks broadcast to `[B, hidden]`.
fn step_carries<F: Real>(fwd: &mut Forward<F>, mask: &SeqMask, hidden: usize) -> Vec<Option<(Var, Var)>> {
    let batch = mask.batch();
    (0..mask.len())
        .map(|t| {
            if (0..batch).all(|b| mask.is_valid(b, t)) {
                return None;
            }
            let mut on = Vec::with_capacity(batch * hidden);
            let mut off = Vec::with_capacity(batch * hidden);
            for b in 0..batch {
                let (m, n) = if mask.is_valid(b, t) { (F::one(), F::zero()) } else { (F::zero(), F::one()) };
                on.extend(std::iter::repeat_n(m, hidden));
                off.extend(std::iter::repeat_n(n, hidden));
            }
            let on = fwd.tape.constant(Tensor::from_parts(vec![batch, hidden], on));
            let off = fwd.tape.constant(Tensor::from_parts(vec![batch, hidden], off));
            Some((on, off))
        })
        .collect()
}

fn run_direction<F: Real>(
    fwd: &mut Forward<F>,
    cell: &LstmCell,
    inputs: &[Var],
    carries: &[Option<(Var, Var)>],
    reverse: bool,
) -> Result<(Vec<Var>, Var)> {
    let batch = fwd.tape.shape(inputs[0])[0];
    let zeros = Tensor::zeros(vec![batch, cell.hidden]);
    let mut h = fwd.tape.constant(zeros.clone());
    let mut c = fwd.tape.constant(zeros);
    let mut outs = vec![h; inputs.len()];
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for t in order {
        let (h_new, c_new) = cell.step(fwd, inputs[t], h, c)?;
        match carries[t] {
            None => {
                h = h_new;
                c = c_new;
            }
            Some((on, off)) => {
                h = blend(fwd, h_new, h, on, off)?;
                c = blend(fwd, c_new, c, on, off)?;
            }
        }
        outs[t] = h;
    }
    Ok((outs, h))
}

fn blend<F: Real>(fwd: &mut Forward<F>, new: Var, old: Var, on: Var, off: Var) -> Result<Var> {
    let a = fwd.tape.mul(new, on)?;
    let b = fwd.tape.mul(old, off)?;
    fwd.tape.add(a, b)
}
