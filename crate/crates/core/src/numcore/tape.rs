//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every op appends a node whose inputs are strictly earlier nodes, so the
//! record is topologically ordered by construction and `backward` is a
//! single reverse sweep. Forward values are checked for NaN/Inf after
//! every op.

use super::kernels::{self, LayerNormCache};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    DivScalar(NodeId, T),
    /// Keeps the forward `tanh` term for the backward pass.
    Gelu(NodeId, Vec<T>),
    Exp(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        cache: LayerNormCache<T>,
    },
    MeanRows(NodeId),
    PrependRow {
        row: NodeId,
        x: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<T>,
    },
    Sum(NodeId),
    /// Scalar output whose gradient w.r.t. `input` was computed alongside the value.
    Precomputed {
        input: NodeId,
        grad: Vec<T>,
    },
}

struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// The computation record: an append-only tape of tensors and the ops that made them.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

pub type ComputationRecord<T> = Tape<T>;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are kept for it iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<NodeId> {
        Ok(self.leaf(Tensor::new(shape, values)?.with_grad()))
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<NodeId> {
        Ok(self.leaf(Tensor::new(shape, values)?))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].tensor
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].tensor.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.zero_grad();
        }
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, values: Vec<T>, name: &'static str) -> Result<NodeId> {
        let tensor = Tensor::new(shape, values)?;
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { tensor, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, id: NodeId, op: &str) -> Result<(usize, usize)> {
        match self.value(id).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::config(format!("{op} expects a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::config(format!(
                "matmul inner dimensions differ: {m}×{k} · {k2}×{n}"
            )));
        }
        let out = kernels::matmul(self.value(a).values(), self.value(b).values(), m, k, n);
        self.push(Op::MatMul(a, b), vec![m, n], out, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::config(format!(
                "add shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = ta.values().iter().zip(tb.values()).map(|(&x, &y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Add(a, b), shape, out, "add")
    }

    /// Adds a length-C vector to every row of an R×C matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.matrix_dims(x, "add_row")?;
        if self.value(row).len() != c {
            return Err(Error::config(format!(
                "add_row: bias length {} vs width {c}",
                self.value(row).len()
            )));
        }
        let bias = self.value(row).values();
        let out = self
            .value(x)
            .values()
            .chunks_exact(c)
            .flat_map(|xr| xr.iter().zip(bias).map(|(&v, &b)| v + b))
            .collect();
        self.push(Op::AddRow(x, row), vec![r, c], out, "add_row")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::config(format!(
                "mul shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = ta.values().iter().zip(tb.values()).map(|(&x, &y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Mul(a, b), shape, out, "mul")
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let t = self.value(x);
        let out = t.values().iter().map(|&v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Scale(x, c), shape, out, "scale")
    }

    /// `x / c`, kept separate from `scale(x, 1/c)` so results round the same
    /// way as a plain division.
    pub fn div_scalar(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let t = self.value(x);
        let out = t.values().iter().map(|&v| v / c).collect();
        let shape = t.shape().to_vec();
        self.push(Op::DivScalar(x, c), shape, out, "div_scalar")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let (out, th): (Vec<T>, Vec<T>) = t
            .values()
            .iter()
            .map(|&v| {
                let th = kernels::gelu_tanh(v);
                (kernels::gelu_from_tanh(v, th), th)
            })
            .unzip();
        let shape = t.shape().to_vec();
        self.push(Op::Gelu(x, th), shape, out, "gelu")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let out = t.values().iter().map(|&v| v.exp()).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Exp(x), shape, out, "exp")
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.matrix_dims(x, "log_softmax_rows")?;
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite {
                op: "log_softmax_rows input",
            });
        }
        let out = kernels::log_softmax_rows(self.value(x).values(), c);
        self.push(Op::LogSoftmaxRows(x), vec![r, c], out, "log_softmax_rows")
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let (r, c) = self.matrix_dims(x, "layer_norm")?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::config(format!("layer_norm: affine params must have length {c}")));
        }
        if eps <= T::zero() {
            return Err(Error::config("layer_norm: eps must be positive"));
        }
        let (out, cache) = kernels::layer_norm(
            self.value(x).values(),
            c,
            self.value(gain).values(),
            self.value(bias).values(),
            eps,
        );
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            vec![r, c],
            out,
            "layer_norm",
        )
    }

    /// Average of the rows of a T×H matrix, as a 1×H matrix.
    pub fn mean_over_time(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.matrix_dims(x, "mean_over_time")?;
        if r == 0 {
            return Err(Error::EmptyInput { op: "mean_over_time" });
        }
        let mut out = vec![T::zero(); c];
        for row in self.value(x).values().chunks_exact(c) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let inv = T::one() / T::lit(r as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        self.push(Op::MeanRows(x), vec![1, c], out, "mean_over_time")
    }

    /// Stacks a 1×H row on top of a T×H matrix.
    pub fn prepend_row(&mut self, row: NodeId, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.matrix_dims(x, "prepend_row")?;
        if self.value(row).len() != c {
            return Err(Error::config("prepend_row: width mismatch"));
        }
        let mut out = Vec::with_capacity((r + 1) * c);
        out.extend_from_slice(self.value(row).values());
        out.extend_from_slice(self.value(x).values());
        self.push(Op::PrependRow { row, x }, vec![r + 1, c], out, "prepend_row")
    }

    /// Unmasked multi-head attention; queries may have a different length than keys.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (tq, h) = self.matrix_dims(q, "attention")?;
        let (tk, hk) = self.matrix_dims(k, "attention")?;
        let (tv, hv) = self.matrix_dims(v, "attention")?;
        if h != hk || h != hv || tk != tv {
            return Err(Error::config(format!(
                "attention shapes: q {tq}×{h}, k {tk}×{hk}, v {tv}×{hv}"
            )));
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::config(format!("width {h} not divisible by {heads} heads")));
        }
        let (out, probs) = kernels::attention(
            self.value(q).values(),
            self.value(k).values(),
            self.value(v).values(),
            tq,
            tk,
            h,
            heads,
        );
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            vec![tq, h],
            out,
            "attention",
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).values().iter().copied().sum();
        self.push(Op::Sum(x), vec![1], vec![s], "sum")
    }

    /// Records a scalar function of `input` whose gradient the caller has already computed.
    pub fn precomputed(&mut self, input: NodeId, value: T, grad: Vec<T>) -> Result<NodeId> {
        if grad.len() != self.value(input).len() {
            return Err(Error::config("precomputed gradient has wrong length"));
        }
        self.push(Op::Precomputed { input, grad }, vec![1], vec![value], "precomputed")
    }

    /// `x · w + b` for a matrix `x` and a weight/bias pair.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse sweep from `output` seeded with `seed`.
    ///
    /// Gradients are *added* to the grad slots of every `requires_grad` leaf;
    /// call [`Tape::zero_grad`] between independent passes.
    pub fn backward(&mut self, output: NodeId, seed: &Tensor<T>) -> Result<()> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::config(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed.values().to_vec());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let n = self.value(*b).cols();
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(&g, self.value(*b).values(), &mut da, m, n, k);
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(self.value(*a).values(), &g, &mut db, m, k, n);
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::AddRow(x, row) => {
                    let c = self.value(*x).cols();
                    let mut db = vec![T::zero(); c];
                    for gr in g.chunks_exact(c) {
                        db.iter_mut().zip(gr).for_each(|(d, &v)| *d += v);
                    }
                    acc(&mut grads, *x, &g);
                    acc(&mut grads, *row, &db);
                }
                Op::Mul(a, b) => {
                    let va = self.value(*a).values();
                    let vb = self.value(*b).values();
                    let da: Vec<T> = g.iter().zip(vb).map(|(&gi, &y)| gi * y).collect();
                    let db: Vec<T> = g.iter().zip(va).map(|(&gi, &x)| gi * x).collect();
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::Scale(x, c) => {
                    let dx: Vec<T> = g.iter().map(|&gi| gi * *c).collect();
                    acc(&mut grads, *x, &dx);
                }
                Op::DivScalar(x, c) => {
                    let dx: Vec<T> = g.iter().map(|&gi| gi / *c).collect();
                    acc(&mut grads, *x, &dx);
                }
                Op::Gelu(x, th) => {
                    let vx = self.value(*x).values();
                    let dx: Vec<T> = g
                        .iter()
                        .zip(vx)
                        .zip(th)
                        .map(|((&gi, &v), &t)| gi * kernels::gelu_grad_from_tanh(v, t))
                        .collect();
                    acc(&mut grads, *x, &dx);
                }
                Op::Exp(x) => {
                    let y = node.tensor.values();
                    let dx: Vec<T> = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect();
                    acc(&mut grads, *x, &dx);
                }
                Op::LogSoftmaxRows(x) => {
                    let c = node.tensor.cols();
                    let y = node.tensor.values();
                    let mut dx = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks_exact(c).zip(y.chunks_exact(c)) {
                        let s: T = gr.iter().copied().sum();
                        dx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| gi - yi.exp() * s));
                    }
                    acc(&mut grads, *x, &dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    cache,
                } => {
                    let c = node.tensor.cols();
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(&g, c, self.value(*gain).values(), cache);
                    acc(&mut grads, *x, &dx);
                    acc(&mut grads, *gain, &dg);
                    acc(&mut grads, *bias, &db);
                }
                Op::MeanRows(x) => {
                    let (r, c) = self.value(*x).dims2();
                    let inv = T::one() / T::lit(r as f64);
                    let row: Vec<T> = g.iter().map(|&gi| gi * inv).collect();
                    let dx: Vec<T> = (0..r).flat_map(|_| row.iter().copied()).collect();
                    debug_assert_eq!(dx.len(), r * c);
                    acc(&mut grads, *x, &dx);
                }
                Op::PrependRow { row, x } => {
                    let c = node.tensor.cols();
                    acc(&mut grads, *row, &g[..c]);
                    acc(&mut grads, *x, &g[c..]);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (tq, h) = self.value(*q).dims2();
                    let tk = self.value(*k).rows();
                    let (dq, dk, dv) = kernels::attention_backward(
                        &g,
                        self.value(*q).values(),
                        self.value(*k).values(),
                        self.value(*v).values(),
                        probs,
                        tq,
                        tk,
                        h,
                        *heads,
                    );
                    acc(&mut grads, *q, &dq);
                    acc(&mut grads, *k, &dk);
                    acc(&mut grads, *v, &dv);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    acc(&mut grads, *x, &vec![g[0]; n]);
                }
                Op::Precomputed { input, grad } => {
                    let dx: Vec<T> = grad.iter().map(|&d| d * g[0]).collect();
                    acc(&mut grads, *input, &dx);
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if node.tensor.requires_grad() {
                    node.tensor.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward_scalar(&mut self, output: NodeId) -> Result<()> {
        let seed = Tensor::filled(self.value(output).shape().to_vec(), T::one())?;
        self.backward(output, &seed)
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, g: &[T]) {
    match &mut grads[id.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(t: &mut Tape<f64>, r: usize, c: usize, v: &[f64]) -> NodeId {
        t.param(vec![r, c], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::<f64>::new();
        let a = mat(&mut t, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let i = mat(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = mat(&mut t, 2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let ai = t.matmul(a, i).unwrap();
        assert_eq!(t.value(ai).values(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab).values(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_dimension_mismatch_is_config_error() {
        let mut t = Tape::<f64>::new();
        let a = mat(&mut t, 2, 3, &[0.0; 6]);
        let b = mat(&mut t, 2, 3, &[0.0; 6]);
        assert!(matches!(t.matmul(a, b), Err(Error::Config(_))));
    }

    #[test]
    fn log_softmax_examples() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(vec![1, 4], vec![0.0; 4]).unwrap();
        let lz = t.log_softmax_rows(z).unwrap();
        for &v in t.value(lz).values() {
            assert!((v - (0.25f64).ln()).abs() < 1e-15);
        }
        let x = t.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let lx = t.log_softmax_rows(x).unwrap();
        let expected = [-2.407_605_96, -1.407_605_96, -0.407_605_96];
        for (&v, &e) in t.value(lx).values().iter().zip(&expected) {
            assert!((v - e).abs() < 1e-4);
        }
        let shifted = t.constant(vec![1, 3], vec![101.0, 102.0, 103.0]).unwrap();
        let ls = t.log_softmax_rows(shifted).unwrap();
        for (a, b) in t.value(lx).values().iter().zip(t.value(ls).values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::<f64>::new();
        let ones = t.constant(vec![3], vec![1.0; 3]).unwrap();
        let zeros = t.constant(vec![3], vec![0.0; 3]).unwrap();
        let c = t.constant(vec![1, 3], vec![2.5; 3]).unwrap();
        let y = t.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert!(t.value(y).values().iter().all(|&v| v == 0.0));

        let x = t.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.layer_norm(x, ones, zeros, 1e-5).unwrap();
        let e = [-1.224_735_69, 0.0, 1.224_735_69];
        for (&v, &e) in t.value(y).values().iter().zip(&e) {
            assert!((v - e).abs() < 1e-6);
        }

        let bias = t.constant(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = t.layer_norm(x, zeros, bias, 1e-5).unwrap();
        assert_eq!(t.value(y).values(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn mean_over_time_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![2, 2], vec![0.0, 0.0, 2.0, 4.0]).unwrap();
        let m = t.mean_over_time(x).unwrap();
        assert_eq!(t.value(m).values(), &[1.0, 2.0]);
        let one = t.constant(vec![1, 3], vec![7.0, -1.0, 0.5]).unwrap();
        let m1 = t.mean_over_time(one).unwrap();
        assert_eq!(t.value(m1).values(), &[7.0, -1.0, 0.5]);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.param(vec![1], vec![3.0]).unwrap();
        t.backward_scalar(x).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0]);

        let mut t = Tape::<f64>::new();
        let x = t.param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward_scalar(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

        // Without zeroing, a second pass accumulates.
        t.backward_scalar(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
        t.zero_grad();
        t.backward_scalar(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn seed_shape_mismatch_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let seed = Tensor::scalar(1.0);
        assert!(t.backward(x, &seed).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![1], vec![1000.0]).unwrap();
        assert!(matches!(t.exp(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn empty_mean_is_rejected_by_tensor_shape() {
        assert!(Tensor::<f64>::matrix(0, 3, vec![]).is_err());
    }
}
