//! Dense `f64` arrays and a reverse-mode tape.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! addressed by [`Var`] handles; [`Tape::backward`] replays the record in
//! reverse and routes gradients of parameter leaves into a
//! [`GradStore`](crate::params::GradStore). Leaves created with
//! [`Tape::leaf`] keep their gradient on the tape ([`Tape::grad`]).
//!
//! Broadcasting is deliberately absent: the only mixed-shape operations are
//! [`Tape::scale`] (scalar) and [`Tape::add_row`] (bias added to every row).

use crate::error::{shape_err, Error, Result};
use crate::params::{GradStore, ParamId, ParameterStore};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("Tensor::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of every dimension after the first.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Plain matrix product, no tape.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k, p) = matmul_dims(self.shape(), other.shape(), false)?;
        let mut out = vec![0.0; n * p];
        gemm(n, k, p, &self.data, false, &other.data, false, &mut out, 0.0);
        Tensor::new(&[n, p], out)
    }

    /// `self × otherᵀ`, no tape.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k, p) = matmul_dims(self.shape(), other.shape(), true)?;
        let mut out = vec![0.0; n * p];
        gemm(n, k, p, &self.data, false, &other.data, true, &mut out, 0.0);
        Tensor::new(&[n, p], out)
    }
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 {
        return Err(shape_err("matmul", a, b));
    }
    let (n, k) = (a[0], a[1]);
    let (bk, p) = if trans_b { (b[1], b[0]) } else { (b[0], b[1]) };
    if k != bk {
        return Err(shape_err("matmul", a, b));
    }
    Ok((n, k, p))
}

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `a` is
/// `m×k` after the optional transpose and `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the row-major buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable logistic function. Underflow is clamped to the
/// smallest normal double so the result stays strictly inside (0, 1].
pub fn sigmoid(z: f64) -> f64 {
    let y = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    y.max(f64::MIN_POSITIVE)
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Value<'p> {
    Owned(Tensor),
    Param(&'p Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Param(t) => t,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Elementwise(ElementwiseOp, Var, Var),
    Scale(Var, f64),
    AddRow { x: Var, bias: Var },
    Sigmoid(Var),
    Sum(Var),
    SumRows(Var),
    Gather { src: Var, ids: Vec<usize> },
    Reshape(Var),
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    BceWithLogits { logits: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Parameters are borrowed for the tape's lifetime.
#[derive(Debug)]
pub struct Tape<'p> {
    params: Option<&'p ParameterStore>,
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn with_params(params: &'p ParameterStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a tape-owned leaf (or any node) after backward.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let params = self
            .params
            .ok_or_else(|| Error::Contract("tape has no parameter store".into()))?;
        if id.0 >= params.len() {
            return Err(Error::OutOfRange {
                what: "parameter store",
                index: id.0,
                size: params.len(),
            });
        }
        self.nodes.push(Node {
            value: Value::Param(params.get(id)),
            op: Op::Param(id),
            requires_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a × bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (n, k, p) = matmul_dims(self.shape(a), self.shape(b), trans_b)?;
        let mut out = vec![0.0; n * p];
        gemm(
            n,
            k,
            p,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[n, p], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Batched product of `[B, n, k]` with `[B, k, p]` (or `[B, p, k]` when
    /// `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let (batch, n, k) = (sa[0], sa[1], sa[2]);
        let (bk, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != bk {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let mut out = vec![0.0; batch * n * p];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                n,
                k,
                p,
                &ad[i * n * k..(i + 1) * n * k],
                false,
                &bd[i * k * p..(i + 1) * k * p],
                trans_b,
                &mut out[i * n * p..(i + 1) * n * p],
                0.0,
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(&[batch, n, p], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("elementwise", ta.shape(), tb.shape()));
        }
        let f: fn(f64, f64) -> f64 = match op {
            ElementwiseOp::Add => |x, y| x + y,
            ElementwiseOp::Sub => |x, y| x - y,
            ElementwiseOp::Mul => |x, y| x * y,
        };
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Elementwise(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x * c).collect(),
        };
        let rg = self.requires_grad(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds a `[d]` vector to every row of an `[n, d]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.shape() != [tx.shape()[1]] {
            return Err(shape_err("add_row", tx.shape(), tb.shape()));
        }
        let d = tb.len();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % d])
            .collect();
        let out = Tensor::new(tx.shape(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&z| sigmoid(z)).collect(),
        };
        let rg = self.requires_grad(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `[n, k] -> [n]` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(shape_err("sum_rows", t.shape(), &[]));
        }
        let k = t.shape()[1];
        let data: Vec<f64> = if k == 0 {
            vec![0.0; t.shape()[0]]
        } else {
            t.data().chunks(k).map(|r| r.iter().sum()).collect()
        };
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::vector(data), Op::SumRows(a), rg))
    }

    /// Row lookup: `src` is `[n, ...]`, output is `[ids.len(), ...]`.
    pub fn gather(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if t.shape().is_empty() {
            return Err(shape_err("gather", t.shape(), &[]));
        }
        let (n, w) = (t.shape()[0], t.cols());
        let mut data = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            if i >= n {
                return Err(Error::OutOfRange {
                    what: "gather source",
                    index: i,
                    size: n,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = ids.len();
        let out = Tensor::new(&shape, data)?;
        let rg = self.requires_grad(src);
        Ok(self.push(
            out,
            Op::Gather {
                src,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Columns `start..start+len` of an `[n, k]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || start + len > t.shape()[1] {
            return Err(shape_err("slice_cols", t.shape(), &[start, len]));
        }
        let k = t.shape()[1];
        let n = t.shape()[0];
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&t.data()[r * k + start..r * k + start + len]);
        }
        let out = Tensor::new(&[n, len], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::SliceCols { x, start, len }, rg))
    }

    /// Horizontal concatenation of `[n, k_i]` matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let n = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(shape_err("concat_cols", self.shape(*first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(&[n, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let k = *t
            .shape()
            .last()
            .ok_or_else(|| shape_err("softmax_rows", t.shape(), &[]))?;
        let mut data = t.data().to_vec();
        if k > 0 {
            for row in data.chunks_mut(k) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    s += *x;
                }
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Scales each row of a matrix to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(shape_err("normalize_rows", t.shape(), &[]));
        }
        let k = t.shape()[1];
        let mut data = t.data().to_vec();
        if k > 0 {
            for row in data.chunks_mut(k) {
                let n = row_norm(row);
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::NormalizeRows(a), rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`,
    /// evaluated in the logit domain.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != labels.shape() {
            return Err(shape_err("bce_with_logits", t.shape(), labels.shape()));
        }
        if let Some(y) = labels.data().iter().find(|y| !(0.0..=1.0).contains(*y)) {
            return Err(Error::Contract(format!("label {y} outside [0, 1]")));
        }
        let n = t.len().max(1) as f64;
        let loss: f64 = t
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / n;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.data().to_vec(),
            },
            rg,
        ))
    }

    /// Forgets gradients from a previous backward so it may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Backward pass for a tape without parameter leaves.
    pub fn backward_local(&mut self, loss: Var) -> Result<()> {
        self.backward(loss, &mut GradStore::empty())
    }

    /// Propagates d(loss)/d(node) through the tape. Parameter gradients are
    /// accumulated into `store`; tape-owned leaves keep theirs on the tape.
    pub fn backward(&mut self, loss: Var, store: &mut GradStore) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, store)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut GradStore,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.tensor();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate(*id, g)?,
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let p = out.shape()[1];
                if self.requires_grad(*a) {
                    let ga = self.slot(grads, *a);
                    // dA = dC · op(B)ᵀ
                    gemm(n, p, k, g, false, tb.data(), !*trans_b, ga, 1.0);
                }
                if self.requires_grad(*b) {
                    let gb = self.slot(grads, *b);
                    if *trans_b {
                        // B is p×k: dB = dCᵀ · A
                        gemm(p, n, k, g, true, ta.data(), false, gb, 1.0);
                    } else {
                        gemm(k, n, p, ta.data(), true, g, false, gb, 1.0);
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, n, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let p = out.shape()[2];
                if self.requires_grad(*a) {
                    let ga = self.slot(grads, *a);
                    for s in 0..batch {
                        gemm(
                            n,
                            p,
                            k,
                            &g[s * n * p..(s + 1) * n * p],
                            false,
                            &tb.data()[s * k * p..(s + 1) * k * p],
                            !*trans_b,
                            &mut ga[s * n * k..(s + 1) * n * k],
                            1.0,
                        );
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.slot(grads, *b);
                    for s in 0..batch {
                        let gs = &g[s * n * p..(s + 1) * n * p];
                        let as_ = &ta.data()[s * n * k..(s + 1) * n * k];
                        let dst = &mut gb[s * k * p..(s + 1) * k * p];
                        if *trans_b {
                            gemm(p, n, k, gs, true, as_, false, dst, 1.0);
                        } else {
                            gemm(k, n, p, as_, true, gs, false, dst, 1.0);
                        }
                    }
                }
            }
            Op::Elementwise(op, a, b) => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    let other = self.value(b).data();
                    let ga = self.slot(grads, a);
                    match op {
                        ElementwiseOp::Add | ElementwiseOp::Sub => add_into(ga, g),
                        ElementwiseOp::Mul => {
                            for ((d, gi), o) in ga.iter_mut().zip(g).zip(other) {
                                *d += gi * o;
                            }
                        }
                    }
                }
                if self.requires_grad(b) {
                    let other = self.value(a).data();
                    let gb = self.slot(grads, b);
                    match op {
                        ElementwiseOp::Add => add_into(gb, g),
                        ElementwiseOp::Sub => gb.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi),
                        ElementwiseOp::Mul => {
                            for ((d, gi), o) in gb.iter_mut().zip(g).zip(other) {
                                *d += gi * o;
                            }
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.requires_grad(*a) {
                    let ga = self.slot(grads, *a);
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c);
                }
            }
            Op::AddRow { x, bias } => {
                if self.requires_grad(*x) {
                    add_into(self.slot(grads, *x), g);
                }
                if self.requires_grad(*bias) {
                    let gb = self.slot(grads, *bias);
                    let d = gb.len();
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.requires_grad(*a) {
                    let ga = self.slot(grads, *a);
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Sum(a) => {
                if self.requires_grad(*a) {
                    let ga = self.slot(grads, *a);
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumRows(a) => {
                if self.requires_grad(*a) {
                    let ga = self.slot(grads, *a);
                    let k = ga.len() / g.len().max(1);
                    if k > 0 {
                        for (row, gi) in ga.chunks_mut(k).zip(g) {
                            row.iter_mut().for_each(|d| *d += gi);
                        }
                    }
                }
            }
            Op::Gather { src, ids } => {
                if self.requires_grad(*src) {
                    let w = self.value(*src).cols();
                    if let Op::Param(pid) = self.nodes[src.0].op {
                        for (r, &id) in ids.iter().enumerate() {
                            store.accumulate_row(pid, id, &g[r * w..(r + 1) * w])?;
                        }
                    } else {
                        let gs = self.slot(grads, *src);
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut gs[id * w..(id + 1) * w], &g[r * w..(r + 1) * w]);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.requires_grad(*a) {
                    add_into(self.slot(grads, *a), g);
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.requires_grad(*x) {
                    let k = self.value(*x).shape()[1];
                    let gx = self.slot(grads, *x);
                    if *len > 0 {
                        for (r, row) in g.chunks(*len).enumerate() {
                            add_into(&mut gx[r * k + start..r * k + start + len], row);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let n = out.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.requires_grad(p) {
                        let gp = self.slot(grads, p);
                        for r in 0..n {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SoftmaxRows(a) => {
                if self.requires_grad(*a) {
                    let k = *out.shape().last().unwrap_or(&0);
                    let ga = self.slot(grads, *a);
                    if k > 0 {
                        for ((dst, gr), yr) in
                            ga.chunks_mut(k).zip(g.chunks(k)).zip(out.data().chunks(k))
                        {
                            let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                            for ((d, gi), y) in dst.iter_mut().zip(gr).zip(yr) {
                                *d += y * (gi - dot);
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows(a) => {
                if self.requires_grad(*a) {
                    let k = out.shape()[1];
                    let input = self.value(*a).data();
                    let ga = self.slot(grads, *a);
                    if k > 0 {
                        for (((dst, gr), yr), xr) in ga
                            .chunks_mut(k)
                            .zip(g.chunks(k))
                            .zip(out.data().chunks(k))
                            .zip(input.chunks(k))
                        {
                            let n = row_norm(xr);
                            let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                            for ((d, gi), y) in dst.iter_mut().zip(gr).zip(yr) {
                                *d += (gi - y * dot) / n;
                            }
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, labels } => {
                if self.requires_grad(*logits) {
                    let z = self.value(*logits).data();
                    let n = z.len().max(1) as f64;
                    let gl = self.slot(grads, *logits);
                    for ((d, &zi), &yi) in gl.iter_mut().zip(z).zip(labels) {
                        *d += g[0] * (sigmoid_exact(zi) - yi) / n;
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient buffer of `v`, allocated on first use.
    #[allow(clippy::mut_from_ref)]
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn sigmoid_exact(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
