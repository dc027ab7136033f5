use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Variance floor added inside layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward<T> = Arc<dyn Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + Send + Sync>;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, T, T),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    RowSum(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    RowSlice { x: Var, start: usize },
    Custom { x: Var, backward: CustomBackward<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Named primitive kinds, for callers that dispatch ops dynamically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Tanh,
    Relu,
    LayerNorm,
    Sum,
    Mean,
    SquaredNorm,
    Concat,
    Square,
    Sqrt,
    RowSum,
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "matmul" => Self::MatMul,
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "tanh" => Self::Tanh,
            "relu" => Self::Relu,
            "layernorm" => Self::LayerNorm,
            "sum" => Self::Sum,
            "mean" => Self::Mean,
            "squared_norm" => Self::SquaredNorm,
            "concat" => Self::Concat,
            "square" => Self::Square,
            "sqrt" => Self::Sqrt,
            "row_sum" => Self::RowSum,
            other => return Err(TensorError::UnsupportedOp(other.to_string())),
        })
    }
}

/// Single-use reverse-mode tape.
///
/// Ops are recorded eagerly; [`Graph::backward`] consumes the graph, so a
/// tape can never leak into the next training step.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Leading-1 broadcast: `small` may replace any prefix of `big`'s axes with 1s.
fn broadcastable(big: &[usize], small: &[usize]) -> bool {
    if big.len() != small.len() {
        return false;
    }
    let mut leading = true;
    for (b, s) in big.iter().zip(small) {
        if b == s {
            leading = false;
        } else if !(leading && *s == 1) {
            return false;
        }
    }
    true
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of the value detached from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa == sb {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor { shape: sa.to_vec(), data });
        }
        if broadcastable(sa, sb) {
            let n = tb.len();
            let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, tb.data()[i % n])).collect();
            return Ok(Tensor { shape: sa.to_vec(), data });
        }
        if broadcastable(sb, sa) {
            let n = ta.len();
            let data = tb.data().iter().enumerate().map(|(i, &y)| f(ta.data()[i % n], y)).collect();
            return Ok(Tensor { shape: sb.to_vec(), data });
        }
        Err(mismatch(name, sa, sb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// `a + c` for a scalar constant.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    /// Square root; the derivative at exactly zero is taken as zero so that
    /// distance functions stay differentiable on the diagonal.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()).sqrt());
        let rg = self.rg(a);
        self.push(value, Op::Sqrt(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// Normalize each row (last axis) to zero mean and unit variance.
    /// No affine terms; a constant row maps to zeros.
    pub fn layernorm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let n = T::from_usize(cols).unwrap();
        let eps = T::lit(LAYERNORM_EPS);
        let mut out = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) / n;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let value = Tensor {
            shape: x.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { x: a, inv_std }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v) / T::from_usize(t.len()).unwrap();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Squared L2 norm of all entries.
    pub fn squared_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v * v);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let data = (0..rows)
            .map(|r| t.data()[r * cols..(r + 1) * cols].iter().fold(T::zero(), |acc, &v| acc + v))
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::RowSum(a), rg)
    }

    /// Concatenate along the last axis. Leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Arity {
            op: "concat",
            expected: 1,
            got: 0,
        })?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let cols = t.cols();
        if len == 0 || start + len > cols {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = (0..t.rows()).flat_map(|r| t.row(r)[start..start + len].iter().copied()).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Slice { x: a, start }, rg))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn row_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.shape().len() != 2 || len == 0 || start + len > t.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "row_slice",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: vec![len, cols], data }, Op::RowSlice { x: a, start }, rg))
    }

    /// User-defined elementwise-or-not unary primitive.
    ///
    /// `backward(input, output, grad_output)` must return the gradient with
    /// respect to `input`.
    pub fn custom_unary(
        &mut self,
        a: Var,
        forward: impl Fn(&Tensor<T>) -> Tensor<T>,
        backward: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + Send + Sync + 'static,
    ) -> Var {
        let value = forward(self.value(a));
        let rg = self.rg(a);
        self.push(
            value,
            Op::Custom {
                x: a,
                backward: Arc::new(backward),
            },
            rg,
        )
    }

    /// Dynamic dispatch over [`OpKind`].
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, TensorError> {
        let need = |n: usize, op: &'static str| {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::Arity {
                    op,
                    expected: n,
                    got: inputs.len(),
                })
            }
        };
        match kind {
            OpKind::MatMul => need(2, "matmul").and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => need(2, "add").and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => need(2, "sub").and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => need(2, "mul").and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Tanh => need(1, "tanh").map(|_| self.tanh(inputs[0])),
            OpKind::Relu => need(1, "relu").map(|_| self.relu(inputs[0])),
            OpKind::LayerNorm => need(1, "layernorm").map(|_| self.layernorm(inputs[0])),
            OpKind::Sum => need(1, "sum").map(|_| self.sum(inputs[0])),
            OpKind::Mean => need(1, "mean").map(|_| self.mean(inputs[0])),
            OpKind::SquaredNorm => need(1, "squared_norm").map(|_| self.squared_norm(inputs[0])),
            OpKind::Square => need(1, "square").map(|_| self.square(inputs[0])),
            OpKind::Sqrt => need(1, "sqrt").map(|_| self.sqrt(inputs[0])),
            OpKind::RowSum => need(1, "row_sum").map(|_| self.row_sum(inputs[0])),
            OpKind::Concat => self.concat(inputs),
        }
    }

    // ── composites ──────────────────────────────────────────────────────

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    /// Batch mean of per-row squared L2 distance, `E ||a - b||^2`.
    pub fn mean_sq_dist(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        let per_row = self.row_sum(sq);
        Ok(self.mean(per_row))
    }

    /// Per-row inner product, shape `[rows, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let p = self.mul(a, b)?;
        Ok(self.row_sum(p))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            // Intermediate grads are not needed after propagation.
        }

        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g.unwrap_or_else(|| vec![T::zero(); node.value.len()]),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                slot => *slot = Some(contrib),
            }
        };
        let unary = |v: Var, f: &dyn Fn(usize, T) -> T| -> Vec<T> {
            let _ = v;
            g.iter().enumerate().map(|(j, &gj)| f(j, gj)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, nn) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    // dA = dC @ B^T
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m, nn, k, T::one(), g, nn as isize, 1, tb.data(), 1, nn as isize, T::zero(),
                        &mut da, k as isize, 1,
                    );
                    acc(grads, *a, da);
                }
                if self.rg(*b) {
                    // dB = A^T @ dC
                    let mut db = vec![T::zero(); k * nn];
                    T::gemm(
                        k, m, nn, T::one(), ta.data(), 1, k as isize, g, nn as isize, 1, T::zero(),
                        &mut db, nn as isize, 1,
                    );
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                let is_mul = matches!(node.op, Op::Mul(..));
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (na, nb) = (ta.len(), tb.len());
                for (v, other, scale, len) in [(*a, tb, T::one(), na), (*b, ta, sign, nb)] {
                    if !self.rg(v) {
                        continue;
                    }
                    let mut d = vec![T::zero(); len];
                    for (j, &gj) in g.iter().enumerate() {
                        let local = if is_mul { other.data()[j % other.len()] } else { scale };
                        d[j % len] += gj * local;
                    }
                    acc(grads, v, d);
                }
            }
            Op::Scale(a, c) => acc(grads, *a, unary(*a, &|_, gj| gj * *c)),
            Op::Offset(a) => acc(grads, *a, g.to_vec()),
            Op::Tanh(a) => acc(
                grads,
                *a,
                unary(*a, &|j, gj| {
                    let y = out.data()[j];
                    gj * (T::one() - y * y)
                }),
            ),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(grads, *a, unary(*a, &|j, gj| if x.data()[j] > T::zero() { gj } else { T::zero() }))
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let two = T::lit(2.0);
                acc(grads, *a, unary(*a, &|j, gj| gj * two * x.data()[j]))
            }
            Op::Sqrt(a) => {
                let two = T::lit(2.0);
                acc(
                    grads,
                    *a,
                    unary(*a, &|j, gj| {
                        let y = out.data()[j];
                        if y > T::zero() {
                            gj / (two * y)
                        } else {
                            T::zero()
                        }
                    }),
                )
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                acc(
                    grads,
                    *a,
                    unary(*a, &|j, gj| {
                        let v = x.data()[j];
                        if v >= *lo && v <= *hi {
                            gj
                        } else {
                            T::zero()
                        }
                    }),
                )
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = out.cols();
                let n = T::from_usize(cols).unwrap();
                let mut d = vec![T::zero(); out.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gy = &g[r * cols..(r + 1) * cols];
                    let xh = &out.data()[r * cols..(r + 1) * cols];
                    let sum_g = gy.iter().fold(T::zero(), |s, &v| s + v);
                    let sum_gx = gy.iter().zip(xh).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for c in 0..cols {
                        d[r * cols + c] = is / n * (n * gy[c] - sum_g - xh[c] * sum_gx);
                    }
                }
                acc(grads, *x, d)
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, vec![g[0]; n])
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, vec![g[0] / T::from_usize(n).unwrap(); n])
            }
            Op::SumSquares(a) => {
                let two = T::lit(2.0);
                let d = self.value(*a).data().iter().map(|&x| two * x * g[0]).collect();
                acc(grads, *a, d)
            }
            Op::RowSum(a) => {
                let t = self.value(*a);
                let cols = t.cols();
                let d = (0..t.len()).map(|j| g[j / cols]).collect();
                acc(grads, *a, d)
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let src = self.value(*x);
                let (cols, w) = (src.cols(), out.cols());
                let mut d = vec![T::zero(); src.len()];
                for r in 0..src.rows() {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(grads, *x, d)
            }
            Op::RowSlice { x, start } => {
                let src = self.value(*x);
                let cols = src.cols();
                let mut d = vec![T::zero(); src.len()];
                d[start * cols..start * cols + g.len()].copy_from_slice(g);
                acc(grads, *x, d)
            }
            Op::Custom { x, backward } => {
                let gout = Tensor {
                    shape: out.shape().to_vec(),
                    data: g.to_vec(),
                };
                let d = backward(self.value(*x), out, &gout);
                acc(grads, *x, d.into_data())
            }
        }
    }
}

/// Gradients of every differentiable leaf after a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a differentiable leaf (zeros if it was unreachable).
    ///
    /// Panics if `v` is not a differentiable leaf.
    pub fn get(&self, v: Var) -> &Tensor<T> {
        self.leaves[v.0]
            .as_ref()
            .expect("gradient requested for a node that is not a differentiable leaf")
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_forward() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(a);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn layernorm_of_constant_is_zero() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1, 4], &[3.0; 4]));
        let y = g.layernorm(a);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_finite());
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn product_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.leaf(Tensor::scalar(5.0));
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(x).item(), 5.0);
        assert_eq!(grads.get(y).item(), 2.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn broadcast_only_leading_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[4, 3]));
        let row = g.constant(Tensor::full(&[1, 3], 1.0));
        let col = g.constant(Tensor::full(&[4, 1], 1.0));
        assert!(g.add(a, row).is_ok());
        assert!(g.add(row, a).is_ok());
        assert!(g.add(a, col).is_err());
    }

    #[test]
    fn broadcast_gradient_accumulates_over_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.leaf(t(&[1, 2], &[0.0, 0.0]));
        let y = g.mul(x, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).data(), &[9.0, 12.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let unused = g.leaf(t(&[2], &[1.0, 1.0]));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unsupported_kind_is_an_error() {
        assert_eq!(
            "conv2d".parse::<OpKind>(),
            Err(TensorError::UnsupportedOp("conv2d".into()))
        );
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.apply(OpKind::MatMul, &[x]), Err(TensorError::Arity { .. })));
    }

    #[test]
    fn sqrt_at_zero_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.sqrt(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 0.0);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 1], &[1.0, 2.0]));
        let b = g.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice(c, 1, 1).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 5.0]);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(b).data(), &[1.0, 0.0, 1.0, 0.0]);
    }
}
