use std::fmt;

use super::{gemm_into, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined operation: given the input values, the
/// output value and the upstream gradient, return one gradient per input.
pub type CustomBackward<F> = Box<dyn Fn(&[&Tensor<F>], &Tensor<F>, &[F]) -> Vec<Vec<F>> + Send + Sync>;

pub(crate) enum Op<F: Real> {
    Leaf,
    /// `a` flattened to `m×k` times `b` (`k×n`).
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    /// `b` broadcasts over the leading axes of `a`.
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: F },
    AddScalar { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Abs { x: Var },
    Log { x: Var, floor: F },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    Sum { x: Var },
    MeanAxis { x: Var, outer: usize, n: usize, inner: usize },
    Concat { xs: Vec<Var>, outer: usize, inner: usize, sizes: Vec<usize> },
    Slice { x: Var, outer: usize, inner: usize, axis_len: usize, start: usize, len: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    Expand { x: Var, n: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<F>, xhat: Vec<F> },
    GatherRows { table: Var, idx: Vec<usize> },
    MaskedFill { x: Var, mask: Vec<bool> },
    Dropout { x: Var, mask: Vec<F> },
    Custom { inputs: Vec<Var>, backward: CustomBackward<F> },
}

impl<F: Real> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Abs { .. } => "abs",
            Op::Log { .. } => "log",
            Op::Softmax { .. } => "softmax",
            Op::Sum { .. } => "sum",
            Op::MeanAxis { .. } => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Expand { .. } => "expand",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Dropout { .. } => "dropout",
            Op::Custom { .. } => "custom",
        }
    }
}

pub(crate) struct Node<F: Real> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and the recorded graph is acyclic by construction.
pub struct Tape<F: Real = f32> {
    pub(crate) nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Gradients are reported only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest distance of any differentiable input of a kinked op (relu,
    /// abs, clamped log) from its kink. Finite differences straddling a kink
    /// are meaningless, so gradient checks redraw points where this is small.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let (x, at) = match &node.op {
                Op::Relu { x } | Op::Abs { x } => (*x, 0.0),
                Op::Log { x, floor } => (*x, floor.as_f64()),
                _ => continue,
            };
            if !self.nodes[x.0].requires_grad {
                continue;
            }
            for v in self.nodes[x.0].value.data() {
                margin = margin.min((v.as_f64() - at).abs());
            }
        }
        margin
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation whose forward value was computed by the caller
    /// and whose backward rule is supplied as a closure.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<F>, backward: CustomBackward<F>) -> Var {
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            backward,
        };
        self.push(output, op, inputs)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every `requires_grad` leaf receives a gradient; leaves that do not
    /// influence the loss receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }

        let mut leaves = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let keep = matches!(node.op, Op::Leaf) && node.requires_grad;
            if !keep {
                leaves.push(None);
                continue;
            }
            let shape = node.value.shape().to_vec();
            let g = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![F::zero(); node.value.numel()]);
            leaves.push(Some(Tensor::from_parts(shape, g)));
        }
        Ok(Gradients { grads: leaves })
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: &Var| &nodes[v.0].value;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let out = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(a) {
                    // dA = dC · Bᵀ
                    let bv = val(b).data();
                    accumulate(grads, nodes, *a, |buf| gemm_into(m, n, k, g, false, bv, true, buf, true));
                }
                if wants(b) {
                    // dB = Aᵀ · dC
                    let av = val(a).data();
                    accumulate(grads, nodes, *b, |buf| gemm_into(k, m, n, av, true, g, false, buf, true));
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(a) {
                    let bv = val(b).data();
                    accumulate(grads, nodes, *a, |buf| {
                        for t in 0..*batch {
                            gemm_into(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &bv[t * k * n..(t + 1) * k * n],
                                true,
                                &mut buf[t * m * k..(t + 1) * m * k],
                                true,
                            );
                        }
                    });
                }
                if wants(b) {
                    let av = val(a).data();
                    accumulate(grads, nodes, *b, |buf| {
                        for t in 0..*batch {
                            gemm_into(
                                k,
                                m,
                                n,
                                &av[t * m * k..(t + 1) * m * k],
                                true,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &mut buf[t * k * n..(t + 1) * k * n],
                                true,
                            );
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                if wants(a) {
                    accumulate(grads, nodes, *a, |buf| add_into(buf, g));
                }
                if wants(b) {
                    accumulate(grads, nodes, *b, |buf| {
                        let nb = buf.len();
                        for chunk in g.chunks_exact(nb) {
                            add_into(buf, chunk);
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let av = val(a).data();
                let bv = val(b).data();
                let nb = bv.len();
                if wants(a) {
                    accumulate(grads, nodes, *a, |buf| {
                        for (i, (o, gi)) in buf.iter_mut().zip(g).enumerate() {
                            *o += *gi * bv[i % nb];
                        }
                    });
                }
                if wants(b) {
                    accumulate(grads, nodes, *b, |buf| {
                        for (i, (gi, ai)) in g.iter().zip(av).enumerate() {
                            buf[i % nb] += *gi * *ai;
                        }
                    });
                }
            }
            Op::Scale { x, s } => {
                accumulate(grads, nodes, *x, |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += *gi * *s;
                    }
                });
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                accumulate(grads, nodes, *x, |buf| add_into(buf, g));
            }
            Op::Relu { x } => {
                let xv = val(x).data();
                accumulate(grads, nodes, *x, |buf| {
                    for ((o, gi), xi) in buf.iter_mut().zip(g).zip(xv) {
                        if *xi > F::zero() {
                            *o += *gi;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = out.data();
                accumulate(grads, nodes, *x, |buf| {
                    for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                        *o += *gi * *yi * (F::one() - *yi);
                    }
                });
            }
            Op::Tanh { x } => {
                let y = out.data();
                accumulate(grads, nodes, *x, |buf| {
                    for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                        *o += *gi * (F::one() - *yi * *yi);
                    }
                });
            }
            Op::Abs { x } => {
                let xv = val(x).data();
                accumulate(grads, nodes, *x, |buf| {
                    for ((o, gi), xi) in buf.iter_mut().zip(g).zip(xv) {
                        if *xi > F::zero() {
                            *o += *gi;
                        } else if *xi < F::zero() {
                            *o -= *gi;
                        }
                    }
                });
            }
            Op::Log { x, floor } => {
                let xv = val(x).data();
                accumulate(grads, nodes, *x, |buf| {
                    for ((o, gi), xi) in buf.iter_mut().zip(g).zip(xv) {
                        if *xi > *floor {
                            *o += *gi / *xi;
                        }
                    }
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = out.data();
                let (n, inner) = (*n, *inner);
                accumulate(grads, nodes, *x, |buf| {
                    for o in 0..*outer {
                        for r in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + r;
                            let dot: F = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let g0 = g[0];
                accumulate(grads, nodes, *x, |buf| buf.iter_mut().for_each(|o| *o += g0));
            }
            Op::MeanAxis { x, outer, n, inner } => {
                let (n, inner) = (*n, *inner);
                let scale = F::one() / F::from_usize(n).unwrap();
                accumulate(grads, nodes, *x, |buf| {
                    for o in 0..*outer {
                        for j in 0..n {
                            for r in 0..inner {
                                buf[(o * n + j) * inner + r] += g[o * inner + r] * scale;
                            }
                        }
                    }
                });
            }
            Op::Concat {
                xs,
                outer,
                inner,
                sizes,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (x, &size) in xs.iter().zip(sizes) {
                    if wants(x) {
                        accumulate(grads, nodes, *x, |buf| {
                            let w = size * inner;
                            for o in 0..*outer {
                                let src = &g[o * total * inner + offset * inner..][..w];
                                add_into(&mut buf[o * w..(o + 1) * w], src);
                            }
                        });
                    }
                    offset += size;
                }
            }
            Op::Slice {
                x,
                outer,
                inner,
                axis_len,
                start,
                len,
            } => {
                let w = len * inner;
                accumulate(grads, nodes, *x, |buf| {
                    for o in 0..*outer {
                        let dst = &mut buf[o * axis_len * inner + start * inner..][..w];
                        add_into(dst, &g[o * w..(o + 1) * w]);
                    }
                });
            }
            Op::Permute { x, perm } => {
                let in_shape = val(x).shape();
                let inverse = invert_permutation(perm);
                let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
                let back = super::ops::permute_data(g, &out_shape, &inverse);
                accumulate(grads, nodes, *x, |buf| add_into(buf, &back));
            }
            Op::Expand { x, n } => {
                let _ = n;
                accumulate(grads, nodes, *x, |buf| {
                    let w = buf.len();
                    for chunk in g.chunks_exact(w) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
                xhat,
            } => {
                let gv = val(gamma).data();
                let d = gv.len();
                if wants(gamma) {
                    accumulate(grads, nodes, *gamma, |buf| {
                        for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                buf[j] += gr[j] * xr[j];
                            }
                        }
                    });
                }
                if wants(beta) {
                    accumulate(grads, nodes, *beta, |buf| {
                        for gr in g.chunks_exact(d) {
                            add_into(buf, gr);
                        }
                    });
                }
                if wants(x) {
                    let inv_d = F::one() / F::from_usize(d).unwrap();
                    accumulate(grads, nodes, *x, |buf| {
                        for (row, ((gr, xr), br)) in g
                            .chunks_exact(d)
                            .zip(xhat.chunks_exact(d))
                            .zip(buf.chunks_exact_mut(d))
                            .enumerate()
                        {
                            let mut mean_dx = F::zero();
                            let mut mean_dx_xhat = F::zero();
                            for j in 0..d {
                                let dxh = gr[j] * gv[j];
                                mean_dx += dxh;
                                mean_dx_xhat += dxh * xr[j];
                            }
                            mean_dx *= inv_d;
                            mean_dx_xhat *= inv_d;
                            let r = rstd[row];
                            for j in 0..d {
                                let dxh = gr[j] * gv[j];
                                br[j] += r * (dxh - mean_dx - xr[j] * mean_dx_xhat);
                            }
                        }
                    });
                }
            }
            Op::GatherRows { table, idx } => {
                let d = val(table).shape()[1];
                accumulate(grads, nodes, *table, |buf| {
                    for (i, &row) in idx.iter().enumerate() {
                        add_into(&mut buf[row * d..(row + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::MaskedFill { x, mask } => {
                accumulate(grads, nodes, *x, |buf| {
                    for ((o, gi), m) in buf.iter_mut().zip(g).zip(mask) {
                        if !*m {
                            *o += *gi;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, nodes, *x, |buf| {
                    for ((o, gi), m) in buf.iter_mut().zip(g).zip(mask) {
                        *o += *gi * *m;
                    }
                });
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(val).collect();
                let back = backward(&ins, out, g);
                if back.len() != inputs.len() {
                    return Err(Error::usage(format!(
                        "custom op returned {} gradients for {} inputs",
                        back.len(),
                        inputs.len()
                    )));
                }
                for (x, gx) in inputs.iter().zip(back) {
                    if wants(x) {
                        if gx.len() != val(x).numel() {
                            return Err(Error::Shape {
                                op: "custom backward",
                                lhs: val(x).shape().to_vec(),
                                rhs: vec![gx.len()],
                            });
                        }
                        accumulate(grads, nodes, *x, |buf| add_into(buf, &gx));
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var, f: impl FnOnce(&mut [F])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = &mut grads[v.0];
    let buf = slot.get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.numel()]);
    f(buf);
}

#[inline]
fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a `requires_grad` leaf; `None` for any other node.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
