//! Forward rules for every primitive recorded on a [`Tape`].

use super::tape::Op;
use super::{gemm_into, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::usage(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

/// Splits a shape around `axis` into (outer, axis_len, inner) element counts.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Copies `data` (laid out as `shape`) into the axis order given by `perm`.
pub(crate) fn permute_data<F: Copy>(data: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        out.push(data[offset]);
        // odometer increment over the output index
        let mut axis = rank;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

impl<F: Real> Tape<F> {
    /// Matrix product. `a` may carry leading batch axes, which are flattened:
    /// `[.., k] · [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = sa[..sa.len() - 1].iter().product::<usize>();
        let mut out = vec![F::zero(); m * n];
        gemm_into(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched matrix product `[t, m, k] · [t, k, n] -> [t, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for t in 0..batch {
                gemm_into(
                    m,
                    k,
                    n,
                    &av[t * m * k..(t + 1) * m * k],
                    false,
                    &bv[t * k * n..(t + 1) * k * n],
                    false,
                    &mut out[t * m * n..(t + 1) * m * n],
                    false,
                );
            }
        }
        let op = Op::BatchMatMul { a, b, batch, m, k, n };
        Ok(self.push(Tensor::from_parts(vec![batch, m, n], out), op, &[a, b]))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    /// Elementwise sum; `b` broadcasts when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add", a, b)?;
        let bv = self.value(b).data();
        let nb = bv.len();
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul", a, b)?;
        let bv = self.value(b).data();
        let nb = bv.len();
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a, b }, &[a, b]))
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let value = self.value(x);
        let out = value.data().iter().map(|&v| f(v)).collect();
        let shape = value.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        self.unary(x, Op::Scale { x, s }, |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        self.unary(x, Op::AddScalar { x }, |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu { x }, |v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid { x }, |v| {
            if v >= F::zero() {
                F::one() / (F::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (F::one() + e)
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh { x }, |v| v.tanh())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs { x }, |v| v.abs())
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: F) -> Var {
        self.unary(x, Op::Log { x, floor }, |v| v.max(floor).ln())
    }

    /// Softmax along `axis` with max subtraction.
    ///
    /// `-inf` entries (masked positions) are allowed and map to exactly zero,
    /// but a slice must contain at least one finite entry. NaN and `+inf`
    /// are rejected.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let xv = self.value(x).data();
        if let Some(bad) = xv.iter().find(|v| v.is_nan() || (v.is_infinite() && v.is_sign_positive())) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: format!("non-finite input {bad}"),
            });
        }
        let mut out = vec![F::zero(); xv.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |j: usize| (o * n + j) * inner + r;
                let max = (0..n).map(|j| xv[at(j)]).fold(F::neg_infinity(), F::max);
                if !max.is_finite() {
                    return Err(Error::Numeric {
                        op: "softmax",
                        detail: "every entry along the axis is masked".into(),
                    });
                }
                let mut total = F::zero();
                for j in 0..n {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, outer, n, inner }, &[x]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: F = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, F::one() / F::from_usize(n.max(1)).unwrap())
    }

    /// Mean over `axis`, which is removed from the output shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("mean", &shape, axis)?;
        let (outer, n, inner) = split_at_axis(&shape, axis);
        if n == 0 {
            return Err(Error::usage("mean over an empty axis"));
        }
        let xv = self.value(x).data();
        let scale = F::one() / F::from_usize(n).unwrap();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for r in 0..inner {
                    out[o * inner + r] += xv[(o * n + j) * inner + r];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let op = Op::MeanAxis { x, outer, n, inner };
        Ok(self.push(Tensor::from_parts(out_shape, out), op, &[x]))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &size) in xs.iter().zip(&sizes) {
                let w = size * inner;
                out.extend_from_slice(&self.value(x).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            xs: xs.to_vec(),
            outer,
            inner,
            sizes,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, xs))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if start + len > shape[axis] {
            return Err(Error::usage(format!(
                "slice {start}..{} out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, axis_len, inner) = split_at_axis(&shape, axis);
        let xv = self.value(x).data();
        let w = len * inner;
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            out.extend_from_slice(&xv[o * axis_len * inner + start * inner..][..w]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let op = Op::Slice {
            x,
            outer,
            inner,
            axis_len,
            start,
            len,
        };
        Ok(self.push(Tensor::from_parts(out_shape, out), op, &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::usage(format!("invalid permutation {perm:?} for shape {shape:?}")));
        }
        let out = permute_data(self.value(x).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let op = Op::Permute { x, perm: perm.to_vec() };
        Ok(self.push(Tensor::from_parts(out_shape, out), op, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::usage("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Repeats `x` along a new leading axis of size `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Var {
        let value = self.value(x);
        let mut data = Vec::with_capacity(value.numel() * n);
        for _ in 0..n {
            data.extend_from_slice(value.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(value.shape());
        self.push(Tensor::from_parts(shape, data), Op::Expand { x, n }, &[x])
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::usage("layer_norm of a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d.max(1);
        let inv_d = F::one() / F::from_usize(d).unwrap();
        let mut out = vec![F::zero(); xv.len()];
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            rstd,
            xhat,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, &[x, gamma, beta]))
    }

    /// Selects rows of a `[n, d]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::usage(format!("gather_rows needs a matrix, got {shape:?}")));
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::usage(format!("row index {bad} out of range for {n} rows")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let op = Op::GatherRows {
            table,
            idx: idx.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(vec![idx.len(), d], out), op, &[table]))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: F) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(shape_err("masked_fill", xv.shape(), &[mask.len()]));
        }
        let out = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let shape = xv.shape().to_vec();
        let op = Op::MaskedFill { x, mask: mask.to_vec() };
        Ok(self.push(Tensor::from_parts(shape, out), op, &[x]))
    }

    /// Multiplies by a fixed mask; entries are usually `0` or `1/(1-p)`.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(shape_err("dropout", xv.shape(), &[mask.len()]));
        }
        let out = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { x, mask }, &[x]))
    }

    /// Inverted dropout driven by `rng`. Identity when `p == 0`.
    pub fn dropout<R: rand::Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::usage(format!("dropout rate {p} must be below 1")));
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let expected = [0.0900, 0.2447, 0.6652];
        for (v, e) in tape.value(y).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rejects_nan_and_fully_masked_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric { .. })));
        let x = tape.constant(t(&[2], &[f64::NEG_INFINITY, f64::NEG_INFINITY]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric { .. })));
        let x = tape.constant(t(&[2], &[f64::NEG_INFINITY, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // out[k][i][j] = in[i][j][k]
        assert_eq!(tape.value(p).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), tape.value(b).data());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 8.0]));
        let g = tape.constant(Tensor::full(vec![4], 1.0));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
