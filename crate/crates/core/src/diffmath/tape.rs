//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node whose inputs already live on the tape, so
//! the node list is a topological order by construction. [`Tape::backward`]
//! walks it once in reverse.

use std::borrow::Cow;

use rand::Rng;

use super::kernels::{self, axpy, dot};
use super::{MathError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulRows(Var, Var),
    ScaleRows(Var, Var),
    ScaleBy(Var, Var),
    Combine(Var, Vec<Var>),
    Mix(Var, Var, Var),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Slice(Var, usize),
    Concat(Vec<Var>),
    Row(Var, usize),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Index(Var, usize),
    MaskMul(Var, Vec<f64>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Record of primitive operations. Parameters can be borrowed so that a
/// forward pass does not copy the model.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Per-node gradient accumulators produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> MathError {
    MathError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf borrowed from the caller.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = kernels::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var, MathError> {
        let out = kernels::matvec(self.value(m), self.value(v))?;
        Ok(self.derived(out, Op::MatVec(m, v), &[m, v]))
    }

    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var, MathError> {
        let out = kernels::vecmat(self.value(v), self.value(m))?;
        Ok(self.derived(out, Op::VecMat(v, m), &[v, m]))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, MathError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = kernels::map(self.value(a), |x| x * k);
        self.derived(out, Op::Scale(a, k), &[a])
    }

    /// `m[r×c] ∘ v[c]`, broadcasting `v` over every row.
    pub fn mul_rows(&mut self, m: Var, v: Var) -> Result<Var, MathError> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.rank() != 2 || tv.rank() != 1 || tm.cols() != tv.len() {
            return Err(shape_err("mul_rows", tm, tv));
        }
        let c = tm.cols();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * tv.data()[i % c])
            .collect();
        let out = Tensor::new(tm.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::MulRows(m, v), &[m, v]))
    }

    /// Scales row `i` of `m[r×c]` by `s[i]`.
    pub fn scale_rows(&mut self, m: Var, s: Var) -> Result<Var, MathError> {
        let (tm, ts) = (self.value(m), self.value(s));
        if tm.rank() != 2 || ts.rank() != 1 || tm.rows() != ts.len() {
            return Err(shape_err("scale_rows", tm, ts));
        }
        let c = tm.cols();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * ts.data()[i / c])
            .collect();
        let out = Tensor::new(tm.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::ScaleRows(m, s), &[m, s]))
    }

    /// Multiplies every entry of `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, MathError> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(shape_err("scale_by", self.value(x), ts));
        }
        let k = ts.item();
        let out = kernels::map(self.value(x), |v| v * k);
        Ok(self.derived(out, Op::ScaleBy(x, s), &[x, s]))
    }

    /// `Σ_k weights[k] · items[k]` for equally shaped items.
    pub fn combine(&mut self, weights: Var, items: &[Var]) -> Result<Var, MathError> {
        let tw = self.value(weights);
        if tw.rank() != 1 || tw.len() != items.len() || items.is_empty() {
            return Err(MathError::Shape {
                op: "combine",
                left: tw.shape().to_vec(),
                right: vec![items.len()],
            });
        }
        let first = self.value(items[0]);
        let mut out = Tensor::zeros(first.shape());
        for (k, &it) in items.iter().enumerate() {
            let t = self.value(it);
            if !t.same_shape(first) {
                return Err(shape_err("combine", first, t));
            }
            axpy(self.value(weights).data()[k], t.data(), out.data_mut());
        }
        let mut inputs = items.to_vec();
        inputs.push(weights);
        Ok(self.derived(out, Op::Combine(weights, items.to_vec()), &inputs))
    }

    /// `g·a + (1−g)·b` for a scalar gate `g`.
    pub fn mix(&mut self, gate: Var, a: Var, b: Var) -> Result<Var, MathError> {
        let g = self.value(gate);
        if !g.is_scalar() {
            return Err(shape_err("mix", g, self.value(a)));
        }
        let g = g.item();
        let out = self.zip_with("mix", a, b, |x, y| g * x + (1.0 - g) * y)?;
        Ok(self.derived(out, Op::Mix(gate, a, b), &[gate, a, b]))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = kernels::elu(self.value(a));
        self.derived(out, Op::Elu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = kernels::sigmoid(self.value(a));
        self.derived(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = kernels::tanh(self.value(a));
        self.derived(out, Op::Tanh(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, MathError> {
        let out = kernels::softmax(self.value(a))?;
        Ok(self.derived(out, Op::Softmax(a), &[a]))
    }

    /// Contiguous range `[start, start+len)` of a vector.
    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Result<Var, MathError> {
        let t = self.value(v);
        if t.rank() != 1 || len == 0 || start + len > t.len() {
            return Err(MathError::Shape {
                op: "slice",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let out = Tensor::vector(t.data()[start..start + len].to_vec());
        Ok(self.derived(out, Op::Slice(v, start), &[v]))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, MathError> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(shape_err("concat", t, t));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![data.len()], data)?;
        Ok(self.derived(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn row(&mut self, m: Var, r: usize) -> Result<Var, MathError> {
        let t = self.value(m);
        if t.rank() != 2 || r >= t.rows() {
            return Err(MathError::Shape {
                op: "row",
                left: t.shape().to_vec(),
                right: vec![r],
            });
        }
        let out = Tensor::vector(t.row(r).to_vec());
        Ok(self.derived(out, Op::Row(m, r), &[m]))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, MathError> {
        let vals: Vec<Vec<f64>> = rows
            .iter()
            .map(|&r| self.value(r).data().to_vec())
            .collect();
        if rows.iter().any(|&r| self.value(r).rank() != 1) {
            return Err(MathError::Domain("stack_rows expects vectors".into()));
        }
        let out = Tensor::from_rows(&vals)?;
        Ok(self.derived(out, Op::StackRows(rows.to_vec()), rows))
    }

    pub fn gather_rows(&mut self, m: Var, idx: &[usize]) -> Result<Var, MathError> {
        let t = self.value(m);
        if t.rank() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= t.rows()) {
            return Err(MathError::Shape {
                op: "gather_rows",
                left: t.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.derived(out, Op::GatherRows(m, idx.to_vec()), &[m]))
    }

    pub fn gather(&mut self, v: Var, idx: &[usize]) -> Result<Var, MathError> {
        let t = self.value(v);
        if t.rank() != 1 || idx.is_empty() || idx.iter().any(|&i| i >= t.len()) {
            return Err(MathError::Shape {
                op: "gather",
                left: t.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let out = Tensor::vector(idx.iter().map(|&i| t.data()[i]).collect());
        Ok(self.derived(out, Op::Gather(v, idx.to_vec()), &[v]))
    }

    /// `out[idx[e]] += m[e]` into a fresh `[rows × c]` matrix.
    pub fn scatter_add_rows(
        &mut self,
        m: Var,
        idx: &[usize],
        rows: usize,
    ) -> Result<Var, MathError> {
        let t = self.value(m);
        if t.rank() != 2 || idx.len() != t.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(MathError::Shape {
                op: "scatter_add_rows",
                left: t.shape().to_vec(),
                right: vec![idx.len(), rows],
            });
        }
        let c = t.cols();
        let mut out = Tensor::zeros(&[rows, c]);
        for (e, &i) in idx.iter().enumerate() {
            axpy(1.0, t.row(e), out.row_mut(i));
        }
        Ok(self.derived(out, Op::ScatterAddRows(m, idx.to_vec()), &[m]))
    }

    /// Scalar entry `v[i]`.
    pub fn index(&mut self, v: Var, i: usize) -> Result<Var, MathError> {
        let t = self.value(v);
        if i >= t.len() {
            return Err(MathError::Shape {
                op: "index",
                left: t.shape().to_vec(),
                right: vec![i],
            });
        }
        let out = Tensor::scalar(t.data()[i]);
        Ok(self.derived(out, Op::Index(v, i), &[v]))
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, v: Var, mask: Vec<f64>) -> Result<Var, MathError> {
        let t = self.value(v);
        if mask.len() != t.len() {
            return Err(MathError::Shape {
                op: "mask_mul",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::MaskMul(v, mask), &[v]))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and rescales
    /// the survivors by `1/(1−rate)`. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        v: Var,
        rate: f64,
        rng: &mut R,
    ) -> Result<Var, MathError> {
        if rate <= 0.0 {
            return Ok(v);
        }
        if rate >= 1.0 {
            return Err(MathError::Domain(format!(
                "dropout rate {rate} must be < 1"
            )));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(v).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        self.mask_mul(v, mask)
    }

    pub fn mean_rows(&mut self, m: Var) -> Result<Var, MathError> {
        let t = self.value(m);
        if t.rank() != 2 {
            return Err(shape_err("mean_rows", t, t));
        }
        let r = t.rows() as f64;
        let mut out = vec![0.0; t.cols()];
        for i in 0..t.rows() {
            axpy(1.0 / r, t.row(i), &mut out);
        }
        let out = Tensor::vector(out);
        Ok(self.derived(out, Op::MeanRows(m), &[m]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.derived(out, Op::Sum(a), &[a])
    }

    /// Softmax cross-entropy `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, MathError> {
        let t = self.value(logits);
        if t.rank() != 1 || target >= t.len() {
            return Err(MathError::Shape {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![target],
            });
        }
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[target];
        let probs = kernels::softmax_slice(t.data())?;
        let out = Tensor::scalar(loss);
        Ok(self.derived(
            out,
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            &[logits],
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients, MathError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(MathError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = kernels::matmul_bt(g, tb).expect("matmul backward");
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = kernels::matmul(&ta.transpose(), g).expect("matmul backward");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = kernels::matmul(g, tb).expect("matmul_bt backward");
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = kernels::matmul(&g.transpose(), ta).expect("matmul_bt backward");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatVec(m, v) => {
                let (tm, tv) = (self.value(*m), self.value(*v));
                let c = tm.cols();
                self.accumulate_with(grads, *m, |acc| {
                    for (i, gi) in g.data().iter().enumerate() {
                        axpy(*gi, tv.data(), &mut acc[i * c..(i + 1) * c]);
                    }
                });
                self.accumulate_with(grads, *v, |acc| {
                    for (i, gi) in g.data().iter().enumerate() {
                        axpy(*gi, tm.row(i), acc);
                    }
                });
            }
            Op::VecMat(v, m) => {
                let (tv, tm) = (self.value(*v), self.value(*m));
                let c = tm.cols();
                self.accumulate_with(grads, *v, |acc| {
                    for (i, a) in acc.iter_mut().enumerate() {
                        *a += dot(tm.row(i), g.data());
                    }
                });
                self.accumulate_with(grads, *m, |acc| {
                    for (i, w) in tv.data().iter().enumerate() {
                        axpy(*w, g.data(), &mut acc[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate_with(grads, *a, |acc| axpy(1.0, g.data(), acc));
                self.accumulate_with(grads, *b, |acc| axpy(1.0, g.data(), acc));
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, *a, |acc| axpy(1.0, g.data(), acc));
                self.accumulate_with(grads, *b, |acc| axpy(-1.0, g.data(), acc));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |acc| {
                    for ((x, gi), y) in acc.iter_mut().zip(g.data()).zip(tb.data()) {
                        *x += gi * y;
                    }
                });
                self.accumulate_with(grads, *b, |acc| {
                    for ((x, gi), y) in acc.iter_mut().zip(g.data()).zip(ta.data()) {
                        *x += gi * y;
                    }
                });
            }
            Op::Scale(a, k) => {
                self.accumulate_with(grads, *a, |acc| axpy(*k, g.data(), acc));
            }
            Op::MulRows(m, v) => {
                let (tm, tv) = (self.value(*m), self.value(*v));
                let c = tm.cols();
                self.accumulate_with(grads, *m, |acc| {
                    for (i, x) in acc.iter_mut().enumerate() {
                        *x += g.data()[i] * tv.data()[i % c];
                    }
                });
                self.accumulate_with(grads, *v, |acc| {
                    for (i, (gi, mi)) in g.data().iter().zip(tm.data()).enumerate() {
                        acc[i % c] += gi * mi;
                    }
                });
            }
            Op::ScaleRows(m, s) => {
                let (tm, ts) = (self.value(*m), self.value(*s));
                let c = tm.cols();
                self.accumulate_with(grads, *m, |acc| {
                    for (i, x) in acc.iter_mut().enumerate() {
                        *x += g.data()[i] * ts.data()[i / c];
                    }
                });
                self.accumulate_with(grads, *s, |acc| {
                    for (r, a) in acc.iter_mut().enumerate() {
                        *a += dot(&g.data()[r * c..(r + 1) * c], tm.row(r));
                    }
                });
            }
            Op::ScaleBy(x, s) => {
                let (tx, k) = (self.value(*x), self.value(*s).item());
                self.accumulate_with(grads, *x, |acc| axpy(k, g.data(), acc));
                self.accumulate_with(grads, *s, |acc| acc[0] += dot(g.data(), tx.data()));
            }
            Op::Combine(w, items) => {
                let tw = self.value(*w);
                for (k, it) in items.iter().enumerate() {
                    let wk = tw.data()[k];
                    self.accumulate_with(grads, *it, |acc| axpy(wk, g.data(), acc));
                }
                self.accumulate_with(grads, *w, |acc| {
                    for (k, it) in items.iter().enumerate() {
                        acc[k] += dot(g.data(), self.value(*it).data());
                    }
                });
            }
            Op::Mix(gate, a, b) => {
                let gv = self.value(*gate).item();
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |acc| axpy(gv, g.data(), acc));
                self.accumulate_with(grads, *b, |acc| axpy(1.0 - gv, g.data(), acc));
                self.accumulate_with(grads, *gate, |acc| {
                    acc[0] += g
                        .data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(gi, (x, y))| gi * (x - y))
                        .sum::<f64>();
                });
            }
            Op::Elu(a) => {
                let ta = self.value(*a);
                self.accumulate_with(grads, *a, |acc| {
                    for ((x, gi), xi) in acc.iter_mut().zip(g.data()).zip(ta.data()) {
                        *x += gi * kernels::elu_grad_scalar(*xi);
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate_with(grads, *a, |acc| {
                    for ((x, gi), y) in acc.iter_mut().zip(g.data()).zip(out.data()) {
                        *x += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate_with(grads, *a, |acc| {
                    for ((x, gi), y) in acc.iter_mut().zip(g.data()).zip(out.data()) {
                        *x += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Softmax(a) => {
                let c = out.cols();
                self.accumulate_with(grads, *a, |acc| {
                    for ((ac, gc), yc) in acc
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(out.data().chunks(c))
                    {
                        let s = dot(gc, yc);
                        for ((x, gi), y) in ac.iter_mut().zip(gc).zip(yc) {
                            *x += y * (gi - s);
                        }
                    }
                });
            }
            Op::Slice(v, start) => {
                self.accumulate_with(grads, *v, |acc| {
                    axpy(1.0, g.data(), &mut acc[*start..*start + g.len()]);
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate_with(grads, *p, |acc| axpy(1.0, &g.data()[off..off + n], acc));
                    off += n;
                }
            }
            Op::Row(m, r) => {
                let c = self.value(*m).cols();
                self.accumulate_with(grads, *m, |acc| {
                    axpy(1.0, g.data(), &mut acc[r * c..(r + 1) * c]);
                });
            }
            Op::StackRows(rows) => {
                for (i, r) in rows.iter().enumerate() {
                    self.accumulate_with(grads, *r, |acc| axpy(1.0, g.row(i), acc));
                }
            }
            Op::GatherRows(m, idx) => {
                let c = self.value(*m).cols();
                self.accumulate_with(grads, *m, |acc| {
                    for (e, &i) in idx.iter().enumerate() {
                        axpy(1.0, g.row(e), &mut acc[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Gather(v, idx) => {
                self.accumulate_with(grads, *v, |acc| {
                    for (e, &i) in idx.iter().enumerate() {
                        acc[i] += g.data()[e];
                    }
                });
            }
            Op::ScatterAddRows(m, idx) => {
                let c = g.cols();
                self.accumulate_with(grads, *m, |acc| {
                    for (e, &i) in idx.iter().enumerate() {
                        axpy(1.0, g.row(i), &mut acc[e * c..(e + 1) * c]);
                    }
                });
            }
            Op::Index(v, i) => {
                self.accumulate_with(grads, *v, |acc| acc[*i] += g.item());
            }
            Op::MaskMul(v, mask) => {
                self.accumulate_with(grads, *v, |acc| {
                    for ((x, gi), m) in acc.iter_mut().zip(g.data()).zip(mask) {
                        *x += gi * m;
                    }
                });
            }
            Op::MeanRows(m) => {
                let t = self.value(*m);
                let (r, c) = (t.rows(), t.cols());
                self.accumulate_with(grads, *m, |acc| {
                    for i in 0..r {
                        axpy(1.0 / r as f64, g.data(), &mut acc[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate_with(grads, *a, |acc| acc.iter_mut().for_each(|x| *x += gv));
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let gv = g.item();
                self.accumulate_with(grads, *logits, |acc| {
                    for (k, (x, p)) in acc.iter_mut().zip(probs).enumerate() {
                        let onehot = if k == *target { 1.0 } else { 0.0 };
                        *x += gv * (p - onehot);
                    }
                });
            }
        }
    }
}
