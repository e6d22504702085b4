use super::param::Forward;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Sinusoidal position table `[len, dim]`:
/// `PE[p, 2i] = sin(p / 10000^(2i/dim))`, `PE[p, 2i+1] = cos(p / 10000^(2i/dim))`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Vec<f64> {
    let mut table = vec![0.0; len * dim];
    for p in 0..len {
        for j in 0..dim {
            let pair = (j / 2) as f64;
            let freq = 10000f64.powf(-2.0 * pair / dim as f64);
            let angle = p as f64 * freq;
            table[p * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

/// Adds sinusoidal encodings to `[L, d]` or `[B, L, d]` (same positions for
/// every batch row). Returns the input unchanged when `enabled` is false.
pub fn add_positional<F: Real>(fwd: &mut Forward<F>, seq: Var, enabled: bool) -> Result<Var> {
    if !enabled {
        return Ok(seq);
    }
    let shape = fwd.tape.shape(seq).to_vec();
    let (len, dim) = match shape.as_slice() {
        [l, d] | [_, l, d] => (*l, *d),
        _ => return Err(Error::usage(format!("positional encoding needs [L, d] or [B, L, d], got {shape:?}"))),
    };
    let table = Tensor::from_f64(vec![len, dim], &sinusoidal_table(len, dim))?;
    let table = fwd.tape.constant(table);
    fwd.tape.add(seq, table)
}

/// Prepends a `[d]` CLS vector as row 0 of `[L, d]` or of every batch row of
/// `[B, L, d]`.
pub fn prepend_cls<F: Real>(fwd: &mut Forward<F>, seq: Var, cls: Var) -> Result<Var> {
    let shape = fwd.tape.shape(seq).to_vec();
    let cls_shape = fwd.tape.shape(cls).to_vec();
    let dim = *shape.last().unwrap_or(&0);
    if cls_shape != [dim] || !(2..=3).contains(&shape.len()) {
        return Err(Error::Shape {
            op: "prepend_cls",
            lhs: shape,
            rhs: cls_shape,
        });
    }
    if shape[shape.len() - 2] == 0 {
        return Err(Error::usage("prepend_cls on an empty sequence"));
    }
    let row = fwd.tape.reshape(cls, &[1, dim])?;
    if shape.len() == 2 {
        return fwd.tape.concat(&[row, seq], 0);
    }
    let rows = fwd.tape.expand(row, shape[0]);
    fwd.tape.concat(&[rows, seq], 1)
}
