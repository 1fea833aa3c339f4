//! Dense `f64` tensors and a tape-recorded reverse-mode autodiff engine.
//!
//! A [`Tensor`] is plain storage: parameters keep their data, optional
//! gradient buffer and `requires_grad` flag there. Computation happens on a
//! [`Tape`]: leaves are copied onto the tape, every operation appends a node
//! holding its output value, and [`Tape::backward`] walks the nodes in
//! reverse to produce [`Gradients`]. Gradients are then added into the
//! parameter tensors with [`Gradients::accumulate_into`], so running
//! backward twice without clearing accumulates additively.
//!
//! Values on the tape are never mutated after they are recorded.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that `data` has `shape.iter().product()` entries.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Row-major matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    /// One-hot matrix `[labels.len() × n_classes]`.
    pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Self> {
        let mut data = vec![0.0; labels.len() * n_classes];
        for (i, &k) in labels.iter().enumerate() {
            if k >= n_classes {
                return Err(Error::contract(format!(
                    "label {k} out of range for {n_classes} classes"
                )));
            }
            data[i * n_classes + k] = 1.0;
        }
        Self::new(&[labels.len(), n_classes], data)
    }

    /// Marks the tensor as a trainable leaf.
    pub fn into_parameter(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Drops the gradient buffer.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient of {} values for tensor of {}", g.len(), self.data.len()),
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Copy of the selected rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Row-wise argmax with lowest-index tie-break.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows()).map(|i| math::argmax(self.row(i))).collect()
    }

    /// FNV-1a over the bit patterns of `data`; used to detect any change.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    ConcatCols(Var, Var),
    MixRows { xs: Var, xt: Var, lam: Var },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, target: Vec<f64> },
    Entropy(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Eager computation graph recorded in evaluation order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Copies a tensor onto the tape, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Detached copy of a node as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (Some((m, k)), Some((k2, n))) = (dims2(self.shape(a)), dims2(self.shape(b))) else {
            return Err(Error::shape("matmul", "operands must be matrices"));
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}×{k}] × [{k2}×{n}]: inner dimensions differ"),
            ));
        }
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Adds a `[n]` bias vector to every row of an `[m×n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let Some((m, n)) = dims2(self.shape(x)) else {
            return Err(Error::shape("add_bias", "input must be a matrix"));
        };
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for {n} columns", self.shape(bias)),
            ));
        }
        let (xv, bv) = (&self.node(x).value, &self.node(bias).value);
        let mut out = xv.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bv[j];
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(vec![m, n], out, Op::AddBias(x, bias), rg))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op_name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.node(a).value.iter().map(|&x| c * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.node(a).value.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Relu(a), rg)
    }

    /// Row-wise softmax of an `[m×n]` matrix, stabilised by max subtraction.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let Some((m, n)) = dims2(self.shape(logits)) else {
            return Err(Error::shape("softmax", "input must be a matrix"));
        };
        if n == 0 {
            return Err(Error::shape("softmax", "zero columns"));
        }
        let zv = &self.node(logits).value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            math::softmax_row(&zv[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(vec![m, n], out, Op::Softmax(logits), rg))
    }

    /// `[m×a] ⊕ [m×b] → [m×(a+b)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (Some((m, ca)), Some((m2, cb))) = (dims2(self.shape(a)), dims2(self.shape(b))) else {
            return Err(Error::shape("concat_cols", "operands must be matrices"));
        };
        if m != m2 {
            return Err(Error::shape("concat_cols", format!("{m} rows vs {m2} rows")));
        }
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let mut out = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, ca + cb], out, Op::ConcatCols(a, b), rg))
    }

    /// Row-wise convex combination `out_i = (1 − lam_i)·xs_i + lam_i·xt_i`.
    ///
    /// `lam` has shape `[m]`; it is the fraction of the second operand.
    pub fn mix_rows(&mut self, xs: Var, xt: Var, lam: Var) -> Result<Var> {
        let Some((m, d)) = dims2(self.shape(xs)) else {
            return Err(Error::shape("mix_rows", "inputs must be matrices"));
        };
        if self.shape(xt) != [m, d] {
            return Err(Error::shape(
                "mix_rows",
                format!("{:?} vs {:?}", self.shape(xs), self.shape(xt)),
            ));
        }
        if self.shape(lam) != [m] {
            return Err(Error::shape(
                "mix_rows",
                format!("ratio shape {:?} for {m} rows", self.shape(lam)),
            ));
        }
        let (sv, tv, lv) = (
            &self.node(xs).value,
            &self.node(xt).value,
            &self.node(lam).value,
        );
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let l = lv[i];
            for j in 0..d {
                out[i * d + j] = (1.0 - l) * sv[i * d + j] + l * tv[i * d + j];
            }
        }
        let rg = self.rg(&[xs, xt, lam]);
        Ok(self.push(vec![m, d], out, Op::MixRows { xs, xt, lam }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.node(a).value.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} into {:?}", self.shape(a), shape),
            ));
        }
        let value = self.node(a).value.clone();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).value.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.node(a).value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Mean(a), rg)
    }

    /// Batch-mean cross-entropy `−(1/m) Σ_i Σ_j target_ij · log softmax(logits)_ij`.
    ///
    /// `target` may hold soft labels; every row must be nonnegative and sum
    /// to one within `1e-6`. The target is a constant.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let Some((m, n)) = dims2(self.shape(logits)) else {
            return Err(Error::shape("cross_entropy", "logits must be a matrix"));
        };
        if target.shape() != [m, n] {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {:?} for logits [{m}×{n}]", target.shape()),
            ));
        }
        if m == 0 {
            return Err(Error::contract("cross_entropy of an empty batch"));
        }
        for i in 0..m {
            let row = target.row(i);
            let s: f64 = row.iter().sum();
            if row.iter().any(|&t| t < 0.0 || !t.is_finite()) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "target row {i} is not a probability vector (sum {s})"
                )));
            }
        }
        let zv = &self.node(logits).value;
        let mut logp = vec![0.0; n];
        let mut total = 0.0;
        for i in 0..m {
            math::log_softmax_row(&zv[i * n..(i + 1) * n], &mut logp);
            let t = target.row(i);
            for j in 0..n {
                if t[j] != 0.0 {
                    total -= t[j] * logp[j];
                }
            }
        }
        let loss = total / m as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Batch-mean Shannon entropy of `softmax(logits)` (natural log).
    pub fn entropy(&mut self, logits: Var) -> Result<Var> {
        let Some((m, n)) = dims2(self.shape(logits)) else {
            return Err(Error::shape("entropy", "logits must be a matrix"));
        };
        if n < 2 {
            return Err(Error::contract("entropy needs at least two classes"));
        }
        if m == 0 {
            return Err(Error::contract("entropy of an empty batch"));
        }
        let rows = row_entropies(&self.node(logits).value, m, n);
        let h = rows.iter().sum::<f64>() / m as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(Vec::new(), vec![h], Op::Entropy(logits), rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].shape).unwrap();
                let n = node.shape[1];
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                // dA = G Bᵀ
                send(*a, &|buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ G
                send(*b, &|buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                buf[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                let (m, n) = dims2(&node.shape).unwrap();
                send(*x, &|buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
                send(*b, &|buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                send(*a, &|buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
                send(*b, &|buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
            }
            Op::Sub(a, b) => {
                send(*a, &|buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
                send(*b, &|buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o -= gi));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                send(*a, &|buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += g[i] * bv[i];
                    }
                });
                send(*b, &|buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                send(*a, &|buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi));
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                send(*a, &|buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        if av[i] > 0.0 {
                            *o += g[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (m, n) = dims2(&node.shape).unwrap();
                let p = &node.value;
                send(*a, &|buf| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = g[r.clone()].iter().zip(&p[r.clone()]).map(|(x, y)| x * y).sum();
                        for j in r {
                            buf[j] += p[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let m = node.shape[0];
                let ca = self.nodes[a.0].shape[1];
                let cb = self.nodes[b.0].shape[1];
                let w = ca + cb;
                send(*a, &|buf| {
                    for i in 0..m {
                        for j in 0..ca {
                            buf[i * ca + j] += g[i * w + j];
                        }
                    }
                });
                send(*b, &|buf| {
                    for i in 0..m {
                        for j in 0..cb {
                            buf[i * cb + j] += g[i * w + ca + j];
                        }
                    }
                });
            }
            Op::MixRows { xs, xt, lam } => {
                let (m, d) = dims2(&node.shape).unwrap();
                let (sv, tv, lv) = (
                    &self.nodes[xs.0].value,
                    &self.nodes[xt.0].value,
                    &self.nodes[lam.0].value,
                );
                send(*xs, &|buf| {
                    for i in 0..m {
                        for j in 0..d {
                            buf[i * d + j] += (1.0 - lv[i]) * g[i * d + j];
                        }
                    }
                });
                send(*xt, &|buf| {
                    for i in 0..m {
                        for j in 0..d {
                            buf[i * d + j] += lv[i] * g[i * d + j];
                        }
                    }
                });
                send(*lam, &|buf| {
                    for i in 0..m {
                        let mut s = 0.0;
                        for j in 0..d {
                            s += g[i * d + j] * (tv[i * d + j] - sv[i * d + j]);
                        }
                        buf[i] += s;
                    }
                });
            }
            Op::Reshape(a) => {
                send(*a, &|buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
            }
            Op::Sum(a) => {
                send(*a, &|buf| buf.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let inv = 1.0 / self.nodes[a.0].value.len() as f64;
                send(*a, &|buf| buf.iter_mut().for_each(|o| *o += g[0] * inv));
            }
            Op::CrossEntropy { logits, target } => {
                let (m, n) = dims2(&self.nodes[logits.0].shape).unwrap();
                let zv = &self.nodes[logits.0].value;
                let scale = g[0] / m as f64;
                send(*logits, &|buf| {
                    let mut p = vec![0.0; n];
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        math::softmax_row(&zv[r.clone()], &mut p);
                        let t = &target[r];
                        let tsum: f64 = t.iter().sum();
                        for j in 0..n {
                            buf[i * n + j] += scale * (p[j] * tsum - t[j]);
                        }
                    }
                });
            }
            Op::Entropy(logits) => {
                let (m, n) = dims2(&self.nodes[logits.0].shape).unwrap();
                let zv = &self.nodes[logits.0].value;
                let scale = g[0] / m as f64;
                send(*logits, &|buf| {
                    let mut logp = vec![0.0; n];
                    for i in 0..m {
                        math::log_softmax_row(&zv[i * n..(i + 1) * n], &mut logp);
                        let h: f64 = -logp.iter().map(|&lp| math::exp(lp) * lp).sum::<f64>();
                        for j in 0..n {
                            let p = math::exp(logp[j]);
                            buf[i * n + j] -= scale * p * (logp[j] + h);
                        }
                    }
                });
            }
        }
    }
}

/// Per-row entropy of `softmax(logits)` for an `[m×n]` row-major buffer.
pub fn row_entropies(logits: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut logp = vec![0.0; n];
    (0..m)
        .map(|i| {
            math::log_softmax_row(&logits[i * n..(i + 1) * n], &mut logp);
            -logp.iter().map(|&lp| math::exp(lp) * lp).sum::<f64>()
        })
        .collect()
}

/// Row-wise softmax of a detached `[m×n]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (m, n) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        math::softmax_row(logits.row(i), &mut out[i * n..(i + 1) * n]);
    }
    Tensor {
        shape: vec![m, n],
        data: out,
        grad: None,
        requires_grad: false,
    }
}

/// Result of [`Tape::backward`]: one optional buffer per tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` lies on a
    /// `requires_grad` path to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds `scale · ∂loss/∂v` into `t`'s gradient buffer. A node that the
    /// loss does not depend on contributes zeros.
    pub fn accumulate_scaled(&self, v: Var, t: &mut Tensor, scale: f64) -> Result<()> {
        match self.get(v) {
            Some(g) if scale == 1.0 => t.accumulate_grad(g),
            Some(g) => {
                let scaled: Vec<f64> = g.iter().map(|x| scale * x).collect();
                t.accumulate_grad(&scaled)
            }
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
    }

    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        self.accumulate_scaled(v, t, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(&mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn orthogonal_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(&mat(&[&[1.0, 0.0]]));
        let b = tape.constant(&mat(&[&[0.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 1]);
        assert_eq!(tape.value(c), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let z = tape.constant(&mat(&[&[3.0; 4], &[0.0, 1000.0, 0.0, 0.0]]));
        let p = tape.softmax(z).unwrap();
        let v = tape.value(p);
        assert_eq!(&v[..4], &[0.25; 4]);
        assert!(v[4] < 1e-300 && (v[5] - 1.0).abs() < 1e-15);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_n() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(&[3, 5]));
        let t = Tensor::one_hot(&[0, 2, 4], 5).unwrap();
        let l = tape.cross_entropy(z, &t).unwrap();
        assert!((tape.scalar(l) - libm::log(5.0)).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_confident_match_is_small() {
        let mut tape = Tape::new();
        let z = tape.constant(&mat(&[&[10.0, -10.0], &[-10.0, 10.0]]));
        let t = Tensor::one_hot(&[0, 1], 2).unwrap();
        let l = tape.cross_entropy(z, &t).unwrap();
        assert!(tape.scalar(l) < 0.01);
    }

    #[test]
    fn cross_entropy_rejects_unnormalised_target() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(&[1, 2]));
        let t = mat(&[&[0.7, 0.7]]);
        assert!(matches!(tape.cross_entropy(z, &t), Err(Error::Contract(_))));
    }

    #[test]
    fn soft_label_ce_is_linear_in_target() {
        let z = mat(&[&[0.3, -1.2]]);
        let ce = |t: Tensor| {
            let mut tape = Tape::new();
            let zv = tape.constant(&z);
            let l = tape.cross_entropy(zv, &t).unwrap();
            tape.scalar(l)
        };
        let soft = ce(mat(&[&[0.7, 0.3]]));
        let lin = 0.7 * ce(mat(&[&[1.0, 0.0]])) + 0.3 * ce(mat(&[&[0.0, 1.0]]));
        assert!((soft - lin).abs() < 1e-12);
    }

    #[test]
    fn entropy_limits() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(&[2, 11]));
        let h = tape.entropy(z).unwrap();
        assert!((tape.scalar(h) - libm::log(11.0)).abs() < 1e-14);
        assert!((tape.scalar(h) - 2.3979).abs() < 1e-4);

        let z = tape.constant(&mat(&[&[50.0, 0.0, 0.0]]));
        let h = tape.entropy(z).unwrap();
        assert!(tape.scalar(h) < 1e-18);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap().into_parameter());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0).into_parameter());
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2]).into_parameter());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn accumulation_is_additive() {
        let mut p = Tensor::new(&[2], vec![0.5, -1.5]).unwrap().into_parameter();
        let mut tape = Tape::new();
        let x = tape.leaf(&p);
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        g.accumulate_into(x, &mut p).unwrap();
        let once = p.grad().unwrap().to_vec();
        let g2 = tape.backward(l).unwrap();
        g2.accumulate_into(x, &mut p).unwrap();
        let twice = p.grad().unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0).into_parameter());
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0]);
        assert!(g.get(d).is_none());
    }

    #[test]
    fn mix_rows_identities() {
        let mut tape = Tape::new();
        let xs = tape.constant(&mat(&[&[2.0, 0.0], &[1.0, 1.0], &[0.3, 0.7]]));
        let xt = tape.constant(&mat(&[&[0.0, 2.0], &[5.0, 6.0], &[0.9, 0.1]]));
        let lam = tape.constant(&Tensor::new(&[3], vec![0.5, 0.0, 1.0]).unwrap());
        let mx = tape.mix_rows(xs, xt, lam).unwrap();
        assert_eq!(tape.value(mx), &[1.0, 1.0, 1.0, 1.0, 0.9, 0.1]);
    }
}
