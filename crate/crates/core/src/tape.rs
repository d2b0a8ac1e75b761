//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns the nodes of one forward pass; [`Var`] is a handle to a
//! node. Ops validate shapes eagerly, check outputs for non-finite values,
//! and record parents only when a gradient can actually flow (constant
//! subgraphs degrade to value-only leaves, which is what freezes a teacher
//! model). Backward walks the tape once in reverse insertion order, which is
//! already a topological order.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, strides, Real, Tensor};
use std::cell::RefCell;
use std::rc::Rc;

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Add,
    Sub,
    Scale(F),
    Matmul,
    MatmulNT,
    Transpose2d,
    AddBiasRow,
    RepeatFirst,
    Reshape { orig: Vec<usize> },
    Permute { perm: Vec<usize> },
    Narrow { axis: usize, start: usize, orig_len: usize },
    Concat { axis: usize, split: usize },
    Softmax,
    LayerNorm { eps: f64 },
    Gelu,
    Mean,
    Sum,
    Mse,
    SoftCe { tau: F },
    CrossEntropy { labels: Vec<usize> },
}

struct Node<F> {
    value: Tensor<F>,
    parents: Vec<usize>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

struct TapeInner<F> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
    backward_run: bool,
}

/// Recording tape. Cheap to clone (shared handle).
pub struct Tape<F: Real> {
    inner: Rc<RefCell<TapeInner<F>>>,
}

impl<F: Real> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

/// Handle to one tensor on a tape.
pub struct Var<F: Real> {
    tape: Tape<F>,
    id: usize,
}

impl<F: Real> std::fmt::Debug for Var<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<F: Real> Clone for Var<F> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grad_enabled: true,
                backward_run: false,
            })),
        }
    }

    /// A tape that records values only; backward is unavailable.
    pub fn eval() -> Self {
        let t = Tape::new();
        t.inner.borrow_mut().grad_enabled = false;
        t
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register an input tensor.
    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Result<Var<F>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        let rg = requires_grad && self.inner.borrow().grad_enabled;
        Ok(self.push(value, Vec::new(), Op::Leaf, rg))
    }

    pub fn constant(&self, value: Tensor<F>) -> Result<Var<F>> {
        self.leaf(value, false)
    }

    /// Clear all gradients and re-arm backward.
    pub fn reset_gradients(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.backward_run = false;
        for n in inner.nodes.iter_mut() {
            n.grad = None;
        }
    }

    fn push(&self, value: Tensor<F>, parents: Vec<usize>, op: Op<F>, requires_grad: bool) -> Var<F> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        // Constant subgraphs carry no edges; backward never visits them.
        let (parents, op) = if requires_grad {
            (parents, op)
        } else {
            (Vec::new(), Op::Leaf)
        };
        inner.nodes.push(Node {
            value,
            parents,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn record(&self, op_name: &'static str, value: Tensor<F>, parents: Vec<usize>, op: Op<F>) -> Result<Var<F>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name.into() });
        }
        let rg = {
            let inner = self.inner.borrow();
            inner.grad_enabled && parents.iter().any(|&p| inner.nodes[p].requires_grad)
        };
        Ok(self.push(value, parents, op, rg))
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Tape::new()
    }
}

fn same_tape<F: Real>(a: &Var<F>, b: &Var<F>) -> Result<()> {
    if Rc::ptr_eq(&a.tape.inner, &b.tape.inner) {
        Ok(())
    } else {
        Err(Error::TapeMismatch)
    }
}

impl<F: Real> Var<F> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor<F> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn item(&self) -> Result<F> {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Accumulated gradient. `Some(zeros)` for a grad-requiring leaf that did
    /// not participate in the loss; `None` for constants.
    pub fn grad(&self) -> Option<Tensor<F>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        if !n.requires_grad {
            return None;
        }
        Some(match &n.grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(n.value.shape()),
        })
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    // ── elementwise / scalar ───────────────────────────────────────

    pub fn add(&self, other: &Var<F>) -> Result<Var<F>> {
        same_tape(self, other)?;
        let out = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "add",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.record("add", out, vec![self.id, other.id], Op::Add)
    }

    pub fn sub(&self, other: &Var<F>) -> Result<Var<F>> {
        same_tape(self, other)?;
        let out = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sub",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.record("sub", out, vec![self.id, other.id], Op::Sub)
    }

    pub fn scale(&self, c: F) -> Result<Var<F>> {
        let out = self.with_value(|a| {
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x * c).collect())
        })?;
        self.tape.record("scale", out, vec![self.id], Op::Scale(c))
    }

    // ── matrix products ────────────────────────────────────────────

    /// `a @ b` for `[m,k]x[k,n]`, `[b,m,k]x[k,n]`, and `[b,m,k]x[b,k,n]`.
    pub fn matmul(&self, other: &Var<F>) -> Result<Var<F>> {
        same_tape(self, other)?;
        let out = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            matmul_forward(a, b, false)?
        };
        self.tape.record("matmul", out, vec![self.id, other.id], Op::Matmul)
    }

    /// `a @ bᵀ` for `[m,k]x[n,k]` and `[b,m,k]x[b,n,k]`.
    pub fn matmul_nt(&self, other: &Var<F>) -> Result<Var<F>> {
        same_tape(self, other)?;
        let out = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            matmul_forward(a, b, true)?
        };
        self.tape.record("matmul_nt", out, vec![self.id, other.id], Op::MatmulNT)
    }

    pub fn transpose2d(&self) -> Result<Var<F>> {
        let out = self.with_value(|a| a.transposed())?;
        self.tape.record("transpose", out, vec![self.id], Op::Transpose2d)
    }

    /// Adds `bias[d]` to every trailing row of `x[..., d]`. Replication is
    /// explicit here instead of silent broadcasting.
    pub fn add_bias_row(&self, bias: &Var<F>) -> Result<Var<F>> {
        same_tape(self, bias)?;
        let out = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[bias.id].value);
            let d = *a.shape().last().unwrap_or(&0);
            if b.shape() != [d] || d == 0 {
                return Err(Error::ShapeMismatch {
                    op: "add_bias_row",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(d) {
                for (x, &y) in row.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.record("add_bias_row", out, vec![self.id, bias.id], Op::AddBiasRow)
    }

    /// Tiles a leading-1 tensor `[1, ...]` into `[count, ...]`.
    pub fn repeat_first(&self, count: usize) -> Result<Var<F>> {
        let out = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            if a.rank() == 0 || a.shape()[0] != 1 {
                return Err(Error::invalid(
                    "repeat_first",
                    format!("expected leading dimension 1, got shape {:?}", a.shape()),
                ));
            }
            let mut shape = a.shape().to_vec();
            shape[0] = count;
            let mut data = Vec::with_capacity(a.numel() * count);
            for _ in 0..count {
                data.extend_from_slice(a.data());
            }
            Tensor::new(shape, data)?
        };
        self.tape.record("repeat_first", out, vec![self.id], Op::RepeatFirst)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<F>> {
        let (out, orig) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let orig = a.shape().to_vec();
            (a.clone().reshaped(shape)?, orig)
        };
        self.tape.record("reshape", out, vec![self.id], Op::Reshape { orig })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<F>> {
        let out = {
            let inner = self.tape.inner.borrow();
            permute_forward(&inner.nodes[self.id].value, perm)?
        };
        self.tape.record(
            "permute",
            out,
            vec![self.id],
            Op::Permute { perm: perm.to_vec() },
        )
    }

    /// Slice `len` indices starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<F>> {
        let (out, orig_len) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            if axis >= a.rank() || start + len > a.shape()[axis] {
                return Err(Error::invalid(
                    "narrow",
                    format!(
                        "axis {} range {}..{} out of bounds for shape {:?}",
                        axis,
                        start,
                        start + len,
                        a.shape()
                    ),
                ));
            }
            (narrow_forward(a, axis, start, len), a.shape()[axis])
        };
        self.tape.record(
            "narrow",
            out,
            vec![self.id],
            Op::Narrow { axis, start, orig_len },
        )
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(&self, other: &Var<F>, axis: usize) -> Result<Var<F>> {
        same_tape(self, other)?;
        let (out, split) = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            let ok = a.rank() == b.rank()
                && axis < a.rank()
                && a.shape()
                    .iter()
                    .zip(b.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            (concat_forward(a, b, axis)?, a.shape()[axis])
        };
        self.tape.record(
            "concat",
            out,
            vec![self.id, other.id],
            Op::Concat { axis, split },
        )
    }

    // ── nonlinearities ─────────────────────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<F>> {
        let out = self.with_value(|a| softmax_forward(a))?;
        self.tape.record("softmax", out, vec![self.id], Op::Softmax)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Var<F>, beta: &Var<F>, eps: f64) -> Result<Var<F>> {
        same_tape(self, gamma)?;
        same_tape(self, beta)?;
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let g = &inner.nodes[gamma.id].value;
            let b = &inner.nodes[beta.id].value;
            let d = *x.shape().last().unwrap_or(&0);
            if d == 0 || g.shape() != [d] || b.shape() != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            layer_norm_forward(x, g, b, eps)
        };
        self.tape.record(
            "layer_norm",
            out,
            vec![self.id, gamma.id, beta.id],
            Op::LayerNorm { eps },
        )
    }

    pub fn gelu(&self) -> Result<Var<F>> {
        let out = self.with_value(|a| {
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().map(|&x| gelu_scalar(x)).collect(),
            )
        })?;
        self.tape.record("gelu", out, vec![self.id], Op::Gelu)
    }

    // ── reductions and losses ──────────────────────────────────────

    pub fn mean(&self) -> Result<Var<F>> {
        let out = self.with_value(|a| {
            let n = F::from_f64(a.numel() as f64);
            let mut s = F::zero();
            for &v in a.data() {
                s += v;
            }
            Tensor::scalar(s / n)
        });
        self.tape.record("mean", out, vec![self.id], Op::Mean)
    }

    pub fn sum(&self) -> Result<Var<F>> {
        let out = self.with_value(|a| {
            let mut s = F::zero();
            for &v in a.data() {
                s += v;
            }
            Tensor::scalar(s)
        });
        self.tape.record("sum", out, vec![self.id], Op::Sum)
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, other: &Var<F>) -> Result<Var<F>> {
        same_tape(self, other)?;
        let out = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "mse",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let n = F::from_f64(a.numel() as f64);
            let mut s = F::zero();
            for (&x, &y) in a.data().iter().zip(b.data()) {
                let d = x - y;
                s += d * d;
            }
            Tensor::scalar(s / n)
        };
        self.tape.record("mse", out, vec![self.id, other.id], Op::Mse)
    }

    /// Soft cross-entropy between temperature-scaled logit rows: the teacher
    /// softmax is the target distribution, the result is averaged over rows.
    pub fn soft_cross_entropy(&self, student: &Var<F>, tau: F) -> Result<Var<F>> {
        same_tape(self, student)?;
        if tau <= F::zero() {
            return Err(Error::invalid("tau", "temperature must be positive"));
        }
        let out = {
            let inner = self.tape.inner.borrow();
            let (t, s) = (&inner.nodes[self.id].value, &inner.nodes[student.id].value);
            if t.shape() != s.shape() || t.rank() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "soft_cross_entropy",
                    lhs: t.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
            soft_ce_forward(t, s, tau)
        };
        self.tape.record(
            "soft_cross_entropy",
            out,
            vec![self.id, student.id],
            Op::SoftCe { tau },
        )
    }

    /// Mean negative log-likelihood of integer labels under softmax logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<F>> {
        let out = {
            let inner = self.tape.inner.borrow();
            let l = &inner.nodes[self.id].value;
            if l.rank() != 2 || l.shape()[0] != labels.len() {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("logits {:?} vs {} labels", l.shape(), labels.len()),
                ));
            }
            let classes = l.shape()[1];
            if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("label {} out of range for {} classes", bad, classes),
                ));
            }
            cross_entropy_forward(l, labels)
        };
        self.tape.record(
            "cross_entropy",
            out,
            vec![self.id],
            Op::CrossEntropy {
                labels: labels.to_vec(),
            },
        )
    }

    // ── backward ───────────────────────────────────────────────────

    /// Reverse pass from a scalar loss; accumulates gradients into every
    /// grad-requiring node reachable from it.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.tape.inner.borrow();
            if inner.backward_run {
                return Err(Error::RepeatedBackward);
            }
            let node = &inner.nodes[self.id];
            if !node.value.is_scalar() {
                return Err(Error::NonScalarLoss {
                    shape: node.value.shape().to_vec(),
                });
            }
            if !node.requires_grad {
                return Err(Error::invalid("backward", "loss does not require gradients"));
            }
        }
        {
            let mut inner = self.tape.inner.borrow_mut();
            inner.backward_run = true;
            let shape = inner.nodes[self.id].value.shape().to_vec();
            inner.nodes[self.id].grad = Some(Tensor::full(&shape, F::one()));
        }

        for id in (0..=self.id).rev() {
            let contributions = {
                let inner = self.tape.inner.borrow();
                let node = &inner.nodes[id];
                if node.grad.is_none() || node.parents.is_empty() {
                    continue;
                }
                let grad = node.grad.as_ref().unwrap();
                let parent_vals: Vec<&Tensor<F>> =
                    node.parents.iter().map(|&p| &inner.nodes[p].value).collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| inner.nodes[p].requires_grad)
                    .collect();
                backward_op(&node.op, &node.value, grad, &parent_vals, &needs)
            };
            let mut inner = self.tape.inner.borrow_mut();
            let parents = inner.nodes[id].parents.clone();
            for (pi, contrib) in parents.into_iter().zip(contributions) {
                if let Some(c) = contrib {
                    let slot = &mut inner.nodes[pi].grad;
                    match slot {
                        Some(g) => {
                            for (gv, cv) in g.data_mut().iter_mut().zip(c.data()) {
                                *gv += *cv;
                            }
                        }
                        None => *slot = Some(c),
                    }
                }
            }
        }
        Ok(())
    }
}

// ── forward helpers ─────────────────────────────────────────────────

fn matmul_dims(a: &[usize], b: &[usize], nt: bool) -> Option<(usize, usize, usize, usize, bool)> {
    // Returns (batch, m, k, n, shared_rhs).
    match (a.len(), b.len()) {
        (2, 2) => {
            let (m, ka) = (a[0], a[1]);
            let (kb, n) = if nt { (b[1], b[0]) } else { (b[0], b[1]) };
            (ka == kb).then_some((1, m, ka, n, false))
        }
        (3, 2) if !nt => (a[2] == b[0]).then_some((a[0], a[1], a[2], b[1], true)),
        (3, 3) => {
            let (m, ka) = (a[1], a[2]);
            let (kb, n) = if nt { (b[2], b[1]) } else { (b[1], b[2]) };
            (a[0] == b[0] && ka == kb).then_some((a[0], m, ka, n, false))
        }
        _ => None,
    }
}

fn matmul_forward<F: Real>(a: &Tensor<F>, b: &Tensor<F>, nt: bool) -> Result<Tensor<F>> {
    let op: &'static str = if nt { "matmul_nt" } else { "matmul" };
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape(), nt).ok_or_else(|| {
        Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
    })?;
    let mut out = vec![F::zero(); batch * m * n];
    for bi in 0..batch {
        let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bsl = if shared {
            b.data()
        } else {
            &b.data()[bi * k * n..(bi + 1) * k * n]
        };
        let csl = &mut out[bi * m * n..(bi + 1) * m * n];
        if nt {
            matmul_nt_acc(csl, asl, bsl, m, k, n);
        } else {
            matmul_nn_acc(csl, asl, bsl, m, k, n);
        }
    }
    let shape = if a.rank() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    Tensor::new(shape, out)
}

fn permute_forward<F: Real>(a: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let rank = a.rank();
    let mut seen = vec![false; rank];
    let valid = perm.len() == rank && perm.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
    if !valid {
        return Err(Error::invalid(
            "permute",
            format!("{:?} is not a permutation of rank {}", perm, rank),
        ));
    }
    let in_shape = a.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![F::zero(); a.numel()];
    for (i, &v) in a.data().iter().enumerate() {
        // input coordinate along axis p lands on the output axis j with perm[j] == p
        let mut oflat = 0;
        for (j, &p) in perm.iter().enumerate() {
            let c = (i / in_strides[p]) % in_shape[p];
            oflat += c * out_strides[j];
        }
        out[oflat] = v;
    }
    Tensor::new(out_shape, out)
}

fn narrow_forward<F: Real>(a: &Tensor<F>, axis: usize, start: usize, len: usize) -> Tensor<F> {
    let shape = a.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * shape[axis] * inner + start * inner;
        out.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    Tensor::new(out_shape, out).expect("narrow shape consistent")
}

fn concat_forward<F: Real>(a: &Tensor<F>, b: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let shape = a.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let (la, lb) = (shape[axis], b.shape()[axis]);
    let mut out_shape = shape.to_vec();
    out_shape[axis] = la + lb;
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..outer {
        out.extend_from_slice(&a.data()[o * la * inner..(o + 1) * la * inner]);
        out.extend_from_slice(&b.data()[o * lb * inner..(o + 1) * lb * inner]);
    }
    Tensor::new(out_shape, out)
}

fn softmax_forward<F: Real>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let d = *a.shape().last().unwrap_or(&0);
    if d == 0 {
        return Err(Error::invalid("softmax", "empty last axis"));
    }
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(d) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

fn log_softmax_rows<F: Real>(a: &Tensor<F>, tau: F) -> Vec<F> {
    let d = *a.shape().last().unwrap();
    let mut out: Vec<F> = a.data().iter().map(|&v| v / tau).collect();
    for row in out.chunks_mut(d) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for &v in row.iter() {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn layer_norm_stats<F: Real>(x: &[F], d: usize, eps: f64) -> (Vec<F>, Vec<F>) {
    // Per-row (mean, inverse stddev) with biased variance.
    let rows = x.len() / d;
    let mut mu = Vec::with_capacity(rows);
    let mut inv = Vec::with_capacity(rows);
    let dn = F::from_f64(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut m = F::zero();
        for &v in row {
            m += v;
        }
        m /= dn;
        let mut var = F::zero();
        for &v in row {
            let c = v - m;
            var += c * c;
        }
        var /= dn;
        mu.push(m);
        inv.push(F::one() / (var + F::from_f64(eps)).sqrt());
    }
    (mu, inv)
}

fn layer_norm_forward<F: Real>(x: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Tensor<F> {
    let d = *x.shape().last().unwrap();
    let (mu, inv) = layer_norm_stats(x.data(), d, eps);
    let mut out = Vec::with_capacity(x.numel());
    for (r, row) in x.data().chunks(d).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let xhat = (v - mu[r]) * inv[r];
            out.push(gamma.data()[j] * xhat + beta.data()[j]);
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("layer_norm shape consistent")
}

fn gelu_scalar<F: Real>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654);
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + three * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

fn soft_ce_forward<F: Real>(t: &Tensor<F>, s: &Tensor<F>, tau: F) -> Tensor<F> {
    let d = t.shape()[1];
    let rows = t.shape()[0];
    let p = softmax_scaled(t, tau);
    let lq = log_softmax_rows(s, tau);
    let mut total = F::zero();
    for r in 0..rows {
        let mut row = F::zero();
        for j in 0..d {
            row += p[r * d + j] * lq[r * d + j];
        }
        total -= row;
    }
    Tensor::scalar(total / F::from_f64(rows as f64))
}

fn softmax_scaled<F: Real>(a: &Tensor<F>, tau: F) -> Vec<F> {
    let d = *a.shape().last().unwrap();
    let mut out: Vec<F> = a.data().iter().map(|&v| v / tau).collect();
    for row in out.chunks_mut(d) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn cross_entropy_forward<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Tensor<F> {
    let lq = log_softmax_rows(logits, F::one());
    let d = logits.shape()[1];
    let mut total = F::zero();
    for (r, &y) in labels.iter().enumerate() {
        total -= lq[r * d + y];
    }
    Tensor::scalar(total / F::from_f64(labels.len() as f64))
}

// ── backward dispatch ───────────────────────────────────────────────

fn backward_op<F: Real>(
    op: &Op<F>,
    value: &Tensor<F>,
    grad: &Tensor<F>,
    parents: &[&Tensor<F>],
    needs: &[bool],
) -> Vec<Option<Tensor<F>>> {
    match op {
        Op::Leaf => vec![],
        Op::Add => vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ],
        Op::Sub => vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| {
                Tensor::new(
                    grad.shape().to_vec(),
                    grad.data().iter().map(|&g| -g).collect(),
                )
                .unwrap()
            }),
        ],
        Op::Scale(c) => vec![needs[0].then(|| {
            Tensor::new(
                grad.shape().to_vec(),
                grad.data().iter().map(|&g| g * *c).collect(),
            )
            .unwrap()
        })],
        Op::Matmul => matmul_backward(grad, parents[0], parents[1], needs, false),
        Op::MatmulNT => matmul_backward(grad, parents[0], parents[1], needs, true),
        Op::Transpose2d => vec![needs[0].then(|| grad.transposed().unwrap())],
        Op::AddBiasRow => {
            let d = *parents[1].shape().last().unwrap();
            vec![
                needs[0].then(|| grad.clone()),
                needs[1].then(|| {
                    let mut db = vec![F::zero(); d];
                    for row in grad.data().chunks(d) {
                        for (acc, &g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    Tensor::new(vec![d], db).unwrap()
                }),
            ]
        }
        Op::RepeatFirst => vec![needs[0].then(|| {
            let per = parents[0].numel();
            let mut acc = vec![F::zero(); per];
            for copy in grad.data().chunks(per) {
                for (a, &g) in acc.iter_mut().zip(copy) {
                    *a += g;
                }
            }
            Tensor::new(parents[0].shape().to_vec(), acc).unwrap()
        })],
        Op::Reshape { orig } => {
            vec![needs[0].then(|| grad.clone().reshaped(orig.clone()).unwrap())]
        }
        Op::Permute { perm } => vec![needs[0].then(|| {
            let mut inverse = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            permute_forward(grad, &inverse).unwrap()
        })],
        Op::Narrow { axis, start, orig_len } => vec![needs[0].then(|| {
            let shape = parents[0].shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let len = grad.shape()[*axis];
            let mut out = vec![F::zero(); parents[0].numel()];
            for o in 0..outer {
                let dst = o * orig_len * inner + start * inner;
                let src = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
            }
            Tensor::new(shape.to_vec(), out).unwrap()
        })],
        Op::Concat { axis, split } => {
            let shape = grad.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis];
            let lb = total - split;
            let half = |take_first: bool| {
                let (len, off) = if take_first { (*split, 0) } else { (lb, split * inner) };
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = o * total * inner + off;
                    out.extend_from_slice(&grad.data()[base..base + len * inner]);
                }
                let mut s = shape.to_vec();
                s[*axis] = len;
                Tensor::new(s, out).unwrap()
            };
            vec![needs[0].then(|| half(true)), needs[1].then(|| half(false))]
        }
        Op::Softmax => vec![needs[0].then(|| {
            let d = *value.shape().last().unwrap();
            let mut out = Vec::with_capacity(value.numel());
            for (yrow, grow) in value.data().chunks(d).zip(grad.data().chunks(d)) {
                let mut dot = F::zero();
                for (&y, &g) in yrow.iter().zip(grow) {
                    dot += y * g;
                }
                for (&y, &g) in yrow.iter().zip(grow) {
                    out.push(y * (g - dot));
                }
            }
            Tensor::new(value.shape().to_vec(), out).unwrap()
        })],
        Op::LayerNorm { eps } => layer_norm_backward(grad, parents, needs, *eps),
        Op::Gelu => vec![needs[0].then(|| {
            Tensor::new(
                grad.shape().to_vec(),
                parents[0]
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| g * gelu_grad_scalar(x))
                    .collect(),
            )
            .unwrap()
        })],
        Op::Mean => vec![needs[0].then(|| {
            let g = grad.data()[0] / F::from_f64(parents[0].numel() as f64);
            Tensor::full(parents[0].shape(), g)
        })],
        Op::Sum => vec![needs[0].then(|| Tensor::full(parents[0].shape(), grad.data()[0]))],
        Op::Mse => {
            let n = F::from_f64(parents[0].numel() as f64);
            let g = grad.data()[0];
            let two = F::from_f64(2.0);
            let side = |sign: F| {
                Tensor::new(
                    parents[0].shape().to_vec(),
                    parents[0]
                        .data()
                        .iter()
                        .zip(parents[1].data())
                        .map(|(&a, &b)| sign * g * two * (a - b) / n)
                        .collect(),
                )
                .unwrap()
            };
            vec![
                needs[0].then(|| side(F::one())),
                needs[1].then(|| side(-F::one())),
            ]
        }
        Op::SoftCe { tau } => soft_ce_backward(grad, parents, needs, *tau),
        Op::CrossEntropy { labels } => vec![needs[0].then(|| {
            let logits = parents[0];
            let d = logits.shape()[1];
            let g = grad.data()[0] / F::from_f64(labels.len() as f64);
            let mut out = softmax_scaled(logits, F::one());
            for (r, &y) in labels.iter().enumerate() {
                out[r * d + y] -= F::one();
            }
            for v in out.iter_mut() {
                *v *= g;
            }
            Tensor::new(logits.shape().to_vec(), out).unwrap()
        })],
    }
}

fn matmul_backward<F: Real>(
    grad: &Tensor<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
    needs: &[bool],
    nt: bool,
) -> Vec<Option<Tensor<F>>> {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape(), nt).expect("validated");
    let da = needs[0].then(|| Tensor::zeros(a.shape()));
    let db = needs[1].then(|| Tensor::zeros(b.shape()));
    let mut da = da;
    let mut db = db;
    for bi in 0..batch {
        let gsl = &grad.data()[bi * m * n..(bi + 1) * m * n];
        let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
        let brange = if shared { 0..b.data().len() } else { bi * k * n..(bi + 1) * k * n };
        if let Some(da) = da.as_mut() {
            let dsl = &mut da.data_mut()[bi * m * k..(bi + 1) * m * k];
            if nt {
                // da = g @ b   (b is [n,k])
                matmul_nn_acc(dsl, gsl, &b.data()[brange.clone()], m, n, k);
            } else {
                // da = g @ bᵀ  (b is [k,n])
                matmul_nt_acc(dsl, gsl, &b.data()[brange.clone()], m, n, k);
            }
        }
        if let Some(db) = db.as_mut() {
            let dsl = &mut db.data_mut()[brange];
            if nt {
                // db = gᵀ @ a  → [n,k]
                matmul_tn_acc(dsl, gsl, asl, n, m, k);
            } else {
                // db = aᵀ @ g  → [k,n]
                matmul_tn_acc(dsl, asl, gsl, k, m, n);
            }
        }
    }
    vec![da, db]
}

fn layer_norm_backward<F: Real>(
    grad: &Tensor<F>,
    parents: &[&Tensor<F>],
    needs: &[bool],
    eps: f64,
) -> Vec<Option<Tensor<F>>> {
    let (x, gamma) = (parents[0], parents[1]);
    let d = *x.shape().last().unwrap();
    let rows = x.numel() / d;
    let (mu, inv) = layer_norm_stats(x.data(), d, eps);
    let dn = F::from_f64(d as f64);

    let mut dx = needs[0].then(|| vec![F::zero(); x.numel()]);
    let mut dgamma = needs[1].then(|| vec![F::zero(); d]);
    let mut dbeta = needs[2].then(|| vec![F::zero(); d]);

    for r in 0..rows {
        let xrow = &x.data()[r * d..(r + 1) * d];
        let grow = &grad.data()[r * d..(r + 1) * d];
        if let Some(dg) = dgamma.as_mut() {
            for j in 0..d {
                dg[j] += grow[j] * (xrow[j] - mu[r]) * inv[r];
            }
        }
        if let Some(dbt) = dbeta.as_mut() {
            for j in 0..d {
                dbt[j] += grow[j];
            }
        }
        if let Some(dx) = dx.as_mut() {
            let mut mean_dxhat = F::zero();
            let mut mean_dxhat_xhat = F::zero();
            for j in 0..d {
                let xhat = (xrow[j] - mu[r]) * inv[r];
                let dxhat = grow[j] * gamma.data()[j];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
            }
            mean_dxhat /= dn;
            mean_dxhat_xhat /= dn;
            for j in 0..d {
                let xhat = (xrow[j] - mu[r]) * inv[r];
                let dxhat = grow[j] * gamma.data()[j];
                dx[r * d + j] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv[r];
            }
        }
    }
    vec![
        dx.map(|v| Tensor::new(x.shape().to_vec(), v).unwrap()),
        dgamma.map(|v| Tensor::new(vec![d], v).unwrap()),
        dbeta.map(|v| Tensor::new(vec![d], v).unwrap()),
    ]
}

fn soft_ce_backward<F: Real>(
    grad: &Tensor<F>,
    parents: &[&Tensor<F>],
    needs: &[bool],
    tau: F,
) -> Vec<Option<Tensor<F>>> {
    let (t, s) = (parents[0], parents[1]);
    let d = t.shape()[1];
    let rows = t.shape()[0];
    let g = grad.data()[0] / (F::from_f64(rows as f64) * tau);
    let p = softmax_scaled(t, tau);
    let dt = needs[0].then(|| {
        let lq = log_softmax_rows(s, tau);
        let mut out = vec![F::zero(); t.numel()];
        for r in 0..rows {
            let mut dot = F::zero();
            for j in 0..d {
                dot += p[r * d + j] * lq[r * d + j];
            }
            for j in 0..d {
                out[r * d + j] = -g * p[r * d + j] * (lq[r * d + j] - dot);
            }
        }
        Tensor::new(t.shape().to_vec(), out).unwrap()
    });
    let ds = needs[1].then(|| {
        let q = softmax_scaled(s, tau);
        let out: Vec<F> = q
            .iter()
            .zip(p.iter())
            .map(|(&qv, &pv)| g * (qv - pv))
            .collect();
        Tensor::new(s.shape().to_vec(), out).unwrap()
    });
    vec![dt, ds]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_f64(tape: &Tape<f64>, shape: &[usize], data: Vec<f64>, rg: bool) -> Var<f64> {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap(), rg).unwrap()
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let tape = Tape::<f64>::new();
        let eye = tape.constant(Tensor::eye(3)).unwrap();
        let a = leaf_f64(&tape, &[3, 3], (0..9).map(|v| v as f64 * 0.7 - 2.0).collect(), false);
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.value(), a.value());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::new();
        let x = leaf_f64(&tape, &[2, 4], vec![0.3, -1.2, 2.5, 0.0, 5.0, 5.0, 5.0, 5.0], false);
        let y = x.softmax().unwrap().value();
        for row in y.data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {}", s);
        }
    }

    #[test]
    fn layer_norm_normalizes_rows_pre_affine() {
        let tape = Tape::<f64>::new();
        let d = 8;
        let x = leaf_f64(&tape, &[3, d], (0..24).map(|v| (v as f64).sin() * 3.0 + 1.0).collect(), false);
        let gamma = tape.constant(Tensor::full(&[d], 1.0)).unwrap();
        let beta = tape.constant(Tensor::zeros(&[d])).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-12).unwrap().value();
        for row in y.data().chunks(d) {
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-5, "mean {}", mean);
            assert!((var - 1.0).abs() < 1e-4, "var {}", var);
        }
    }

    #[test]
    fn backward_of_linear_sum_broadcasts_x() {
        // loss = sum(W @ x): dW[i][j] = x[j] for every row i.
        let tape = Tape::<f64>::new();
        let w = leaf_f64(&tape, &[3, 2], vec![0.1; 6], true);
        let x = leaf_f64(&tape, &[2, 1], vec![4.0, -1.5], false);
        let loss = w.matmul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        let gw = w.grad().unwrap();
        assert_eq!(gw.data(), &[4.0, -1.5, 4.0, -1.5, 4.0, -1.5]);
    }

    #[test]
    fn mse_gradient_matches_closed_form() {
        let tape = Tape::<f64>::new();
        let a = leaf_f64(&tape, &[4], vec![1.0, 2.0, 3.0, 4.0], true);
        let b = leaf_f64(&tape, &[4], vec![0.0, 1.0, 5.0, 4.0], false);
        let loss = a.mse(&b).unwrap();
        loss.backward().unwrap();
        let ga = a.grad().unwrap();
        let expected: Vec<f64> = [1.0, 1.0, -2.0, 0.0].iter().map(|d| 2.0 * d / 4.0).collect();
        for (g, e) in ga.data().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_without_reset_errors() {
        let tape = Tape::<f64>::new();
        let a = leaf_f64(&tape, &[2], vec![1.0, 2.0], true);
        let loss = a.sum().unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::RepeatedBackward)));
        tape.reset_gradients();
        loss.backward().unwrap();
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let tape = Tape::<f64>::new();
        let a = leaf_f64(&tape, &[2], vec![1.0, 2.0], true);
        let y = a.scale(2.0).unwrap();
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = leaf_f64(&tape, &[2, 3], vec![0.0; 6], false);
        let b = leaf_f64(&tape, &[2, 2], vec![0.0; 4], false);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{}", msg);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::full(&[2], f32::MAX), false).unwrap();
        let err = a.scale(2.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn non_participating_leaf_keeps_zero_grad() {
        let tape = Tape::<f64>::new();
        let a = leaf_f64(&tape, &[2], vec![1.0, 2.0], true);
        let unused = leaf_f64(&tape, &[3], vec![1.0, 2.0, 3.0], true);
        a.sum().unwrap().backward().unwrap();
        let g = unused.grad().unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reused_node_accumulates_once_per_use() {
        // z = x + x: dz/dx = 2 requires visiting the add node once while
        // accumulating both parent slots.
        let tape = Tape::<f64>::new();
        let x = leaf_f64(&tape, &[], vec![3.0], true);
        let z = x.add(&x).unwrap();
        z.backward().unwrap();
        assert_eq!(x.grad().unwrap().data()[0], 2.0);
    }

    #[test]
    fn cross_tape_ops_are_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t1.leaf(Tensor::zeros(&[2]), false).unwrap();
        let b = t2.leaf(Tensor::zeros(&[2]), false).unwrap();
        assert!(matches!(a.add(&b), Err(Error::TapeMismatch)));
    }

    #[test]
    fn eval_tape_freezes_everything() {
        let tape = Tape::<f64>::eval();
        let a = tape.leaf(Tensor::full(&[2], 1.0), true).unwrap();
        assert!(!a.requires_grad());
        let s = a.sum().unwrap();
        assert!(s.backward().is_err());
    }

    #[test]
    fn permute_roundtrip_is_identity() {
        let tape = Tape::<f64>::new();
        let x = leaf_f64(&tape, &[2, 3, 4], (0..24).map(|v| v as f64).collect(), false);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.value(), x.value());
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let tape = Tape::<f64>::new();
        let x = leaf_f64(&tape, &[2, 5, 3], (0..30).map(|v| v as f64).collect(), false);
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        let joined = a.concat(&b, 1).unwrap();
        assert_eq!(joined.value(), x.value());
    }

    #[test]
    fn soft_ce_of_identical_logits_is_softmax_entropy() {
        let tape = Tape::<f64>::new();
        let logits = leaf_f64(&tape, &[1, 3], vec![1.0, 0.0, -1.0], false);
        let l = logits.soft_cross_entropy(&logits, 1.0).unwrap().item().unwrap();
        // entropy of softmax([1,0,-1])
        let mx: f64 = 1.0;
        let exps: Vec<f64> = [1.0f64, 0.0, -1.0].iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let entropy: f64 = exps.iter().map(|e| e / z).map(|p| -p * p.ln()).sum();
        assert!((l - entropy).abs() < 1e-12, "{} vs {}", l, entropy);
    }
}
