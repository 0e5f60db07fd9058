//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar replays the list in reverse and returns the
//! gradient of every parameter leaf. A tape is single-use: the second
//! `backward` fails with [`NumericsError::GraphConsumed`].

use std::cell::{Cell, Ref, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::tensor::{matmul_into, Tensor};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors plus their accumulated gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    grads: Vec<Option<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.grads.push(None);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| self.values[i].as_ref())
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Mutable access; clones the buffer if a live tape still shares it.
    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        let slot = &self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "set",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds `grads` into the per-parameter gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.by_param {
            match &mut self.grads[id.0] {
                Some(buf) => buf.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    /// Records parameter `name` as a leaf of `tape`.
    pub fn var<'t>(&self, tape: &'t Tape, name: &str) -> Result<Var<'t>> {
        let id = self
            .id(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        Ok(tape.push(Arc::clone(&self.values[id.0]), Op::Leaf { param: Some(id) }))
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    /// Elementwise sum; parameters missing on one side are copied.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (id, g) in &other.by_param {
            match self.by_param.get_mut(id) {
                Some(buf) => buf.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    self.by_param.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, Arc<Vec<f64>>),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        x: usize,
        index: Arc<Vec<usize>>,
    },
    Sum {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Mean {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Bce {
        p: usize,
        target: f64,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Probability clamp used by log-losses.
pub const PROB_EPS: f64 = 1e-12;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Arc<Tensor>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn node_value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Non-trainable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf { param: None })
    }

    /// Leaf standing for parameter `id`; its gradient is reported by `backward`.
    pub fn leaf(&self, value: Tensor, id: ParamId) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf { param: Some(id) })
    }

    /// Backpropagates from scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(NumericsError::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            self.consumed.set(false);
            return Err(NumericsError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if let Op::Leaf { param: Some(p) } = node.op {
                let g = grads[id].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                let g = Tensor::new(node.value.shape().to_vec(), g)?;
                let mut single = Gradients::default();
                single.by_param.insert(p, g);
                out.add_assign(&single);
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &gy, &mut grads);
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn backprop_node(nodes: &[Node], node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| nodes[id].value.as_ref();
    let y = node.value.data();
    match &node.op {
        Op::Leaf { .. } => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            // dA = dY · Bᵀ
            let bt = bv.transpose().expect("rank-2");
            matmul_into(gy, bt.data(), acc(grads, *a, m * k), m, n, k);
            // dB = Aᵀ · dY
            let at = av.transpose().expect("rank-2");
            matmul_into(at.data(), gy, acc(grads, *b, k * n), k, m, n);
        }
        Op::Transpose(a) => {
            let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
            let g = acc(grads, *a, r * c);
            for i in 0..r {
                for j in 0..c {
                    g[j * r + i] += gy[i * c + j];
                }
            }
        }
        Op::Add(a, b) => {
            add_into(acc(grads, *a, gy.len()), gy, 1.0);
            add_into(acc(grads, *b, gy.len()), gy, 1.0);
        }
        Op::Sub(a, b) => {
            add_into(acc(grads, *a, gy.len()), gy, 1.0);
            add_into(acc(grads, *b, gy.len()), gy, -1.0);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let ga = acc(grads, *a, gy.len());
            for i in 0..gy.len() {
                ga[i] += gy[i] * bv[i];
            }
            let gb = acc(grads, *b, gy.len());
            for i in 0..gy.len() {
                gb[i] += gy[i] * av[i];
            }
        }
        Op::AddRow(a, row) => {
            add_into(acc(grads, *a, gy.len()), gy, 1.0);
            let n = val(*row).numel();
            let gr = acc(grads, *row, n);
            for chunk in gy.chunks(n) {
                add_into(gr, chunk, 1.0);
            }
        }
        Op::Scale(a, c) => add_into(acc(grads, *a, gy.len()), gy, *c),
        Op::ScaleBy(a, f) => {
            let ga = acc(grads, *a, gy.len());
            for i in 0..gy.len() {
                ga[i] += gy[i] * f[i];
            }
        }
        Op::Sigmoid(a) => {
            let ga = acc(grads, *a, gy.len());
            for i in 0..gy.len() {
                ga[i] += gy[i] * y[i] * (1.0 - y[i]);
            }
        }
        Op::Tanh(a) => {
            let ga = acc(grads, *a, gy.len());
            for i in 0..gy.len() {
                ga[i] += gy[i] * (1.0 - y[i] * y[i]);
            }
        }
        Op::Gelu(a) => {
            let xv = val(*a).data();
            let ga = acc(grads, *a, gy.len());
            for i in 0..gy.len() {
                ga[i] += gy[i] * gelu_grad(xv[i]);
            }
        }
        Op::Softmax { x, outer, len, inner } => {
            let gx = acc(grads, *x, gy.len());
            for o in 0..*outer {
                for i in 0..*inner {
                    let idx = |k: usize| o * len * inner + k * inner + i;
                    let dot: f64 = (0..*len).map(|k| gy[idx(k)] * y[idx(k)]).sum();
                    for k in 0..*len {
                        gx[idx(k)] += y[idx(k)] * (gy[idx(k)] - dot);
                    }
                }
            }
        }
        Op::MaskedSoftmax(x) => {
            let cols = *node.value.shape().last().expect("rank>=1");
            let gx = acc(grads, *x, gy.len());
            for (r, (grow, yrow)) in gy.chunks(cols).zip(y.chunks(cols)).enumerate() {
                let dot: f64 = grow.iter().zip(yrow).map(|(g, p)| g * p).sum();
                let out = &mut gx[r * cols..(r + 1) * cols];
                for k in 0..cols {
                    out[k] += yrow[k] * (grow[k] - dot);
                }
            }
        }
        Op::LogSoftmax(x) => {
            let cols = *node.value.shape().last().expect("rank>=1");
            let gx = acc(grads, *x, gy.len());
            for (r, (grow, yrow)) in gy.chunks(cols).zip(y.chunks(cols)).enumerate() {
                let total: f64 = grow.iter().sum();
                let out = &mut gx[r * cols..(r + 1) * cols];
                for k in 0..cols {
                    out[k] += grow[k] - yrow[k].exp() * total;
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma).data();
            let cols = gv.len();
            let rows = gy.len() / cols;
            {
                let gg = acc(grads, *gamma, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        gg[c] += gy[r * cols + c] * xhat[r * cols + c];
                    }
                }
            }
            {
                let gb = acc(grads, *beta, cols);
                for chunk in gy.chunks(cols) {
                    add_into(gb, chunk, 1.0);
                }
            }
            let gx = acc(grads, *x, gy.len());
            for (r, &rs) in rstd.iter().enumerate().take(rows) {
                let off = r * cols;
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for c in 0..cols {
                    let d = gy[off + c] * gv[c];
                    mean_d += d;
                    mean_dx += d * xhat[off + c];
                }
                mean_d /= cols as f64;
                mean_dx /= cols as f64;
                for c in 0..cols {
                    let d = gy[off + c] * gv[c];
                    gx[off + c] += rs * (d - mean_d - xhat[off + c] * mean_dx);
                }
            }
        }
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let dim = tv.shape()[1];
            let gt = acc(grads, *table, tv.numel());
            for (r, &id) in ids.iter().enumerate() {
                add_into(&mut gt[id * dim..(id + 1) * dim], &gy[r * dim..(r + 1) * dim], 1.0);
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let (outer, _, inner) = split_axis(out_shape, *axis);
            let total = out_shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let plen = pv.shape()[*axis];
                let gp = acc(grads, p, pv.numel());
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    let dst = o * plen * inner;
                    add_into(&mut gp[dst..dst + plen * inner], &gy[src..src + plen * inner], 1.0);
                }
                offset += plen;
            }
        }
        Op::Slice { x, axis, start } => {
            let xv = val(*x);
            let (outer, total, inner) = split_axis(xv.shape(), *axis);
            let len = node.value.shape()[*axis];
            let gx = acc(grads, *x, xv.numel());
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                add_into(&mut gx[dst..dst + len * inner], &gy[src..src + len * inner], 1.0);
            }
        }
        Op::Gather { x, index } => {
            let n = val(*x).numel();
            let gx = acc(grads, *x, n);
            for (i, &src) in index.iter().enumerate() {
                gx[src] += gy[i];
            }
        }
        Op::Sum { x, outer, len, inner } | Op::Mean { x, outer, len, inner } => {
            let scale = if matches!(node.op, Op::Mean { .. }) {
                1.0 / *len as f64
            } else {
                1.0
            };
            let gx = acc(grads, *x, outer * len * inner);
            for o in 0..*outer {
                for k in 0..*len {
                    for i in 0..*inner {
                        gx[o * len * inner + k * inner + i] += gy[o * inner + i] * scale;
                    }
                }
            }
        }
        Op::Bce { p, target } => {
            let pc = val(*p).item().clamp(PROB_EPS, 1.0 - PROB_EPS);
            let d = -target / pc + (1.0 - target) / (1.0 - pc);
            acc(grads, *p, 1)[0] += gy[0] * d;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.node_value(self.id)
    }

    /// Borrow of the recorded value without bumping the refcount.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes: Ref<'_, Vec<Node>> = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    fn unary(&self, op: Op, value: Tensor) -> Var<'t> {
        self.tape.push(Arc::new(value), op)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        self.with_value(|t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
        })
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch("matmul", &a, &b));
        }
        let out = a.matmul(&b)?;
        Ok(self.unary(Op::MatMul(self.id, other.id), out))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(NumericsError::RankMismatch {
                expected: 2,
                shape: a.shape().to_vec(),
            });
        }
        let out = a.transpose()?;
        Ok(self.unary(Op::Transpose(self.id), out))
    }

    fn zip(&self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(name, &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip(other, "add", |x, y| x + y)?;
        Ok(self.unary(Op::Add(self.id, other.id), out))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip(other, "sub", |x, y| x - y)?;
        Ok(self.unary(Op::Sub(self.id, other.id), out))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip(other, "mul", |x, y| x * y)?;
        Ok(self.unary(Op::Mul(self.id, other.id), out))
    }

    /// Adds a row vector (length = last extent) to every row.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        let n = *a.shape().last().expect("rank>=1");
        if r.numel() != n {
            return Err(mismatch("add_row", &a, &r));
        }
        let mut out = a.as_ref().clone();
        for chunk in out.data_mut().chunks_mut(n) {
            add_into(chunk, r.data(), 1.0);
        }
        Ok(self.unary(Op::AddRow(self.id, row.id), out))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.map(|x| x * c);
        self.unary(Op::Scale(self.id, c), out)
    }

    /// Elementwise multiply by fixed factors (dropout masks).
    pub fn scale_by(&self, factors: Vec<f64>) -> Result<Var<'t>> {
        let a = self.value();
        if factors.len() != a.numel() {
            return Err(NumericsError::DataLength {
                shape: a.shape().to_vec(),
                len: factors.len(),
            });
        }
        let data = a.data().iter().zip(&factors).map(|(x, f)| x * f).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(Op::ScaleBy(self.id, Arc::new(factors)), out))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = self.map(sigmoid_scalar);
        self.unary(Op::Sigmoid(self.id), out)
    }

    pub fn tanh(&self) -> Var<'t> {
        let out = self.map(f64::tanh);
        self.unary(Op::Tanh(self.id), out)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        let out = self.map(gelu);
        self.unary(Op::Gelu(self.id), out)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(NumericsError::BadAxis {
                axis,
                shape: a.shape().to_vec(),
            });
        }
        let (outer, len, inner) = split_axis(a.shape(), axis);
        let x = a.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (x[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[idx(k)] /= sum;
                }
            }
        }
        let out = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.unary(
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
            out,
        ))
    }

    /// Row softmax over entries where `mask` is true; masked entries are
    /// exactly zero and rows with no visible entry are all zero.
    pub fn masked_softmax(&self, mask: &[bool]) -> Result<Var<'t>> {
        let a = self.value();
        if mask.len() != a.numel() {
            return Err(NumericsError::DataLength {
                shape: a.shape().to_vec(),
                len: mask.len(),
            });
        }
        let cols = *a.shape().last().expect("rank>=1");
        let mut out = vec![0.0; a.numel()];
        for ((orow, xrow), mrow) in out.chunks_mut(cols).zip(a.data().chunks(cols)).zip(mask.chunks(cols)) {
            let max = xrow
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for k in 0..cols {
                if mrow[k] {
                    let e = (xrow[k] - max).exp();
                    orow[k] = e;
                    sum += e;
                }
            }
            for k in 0..cols {
                if mrow[k] {
                    orow[k] /= sum;
                }
            }
        }
        let out = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.unary(Op::MaskedSoftmax(self.id), out))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> Var<'t> {
        let a = self.value();
        let cols = *a.shape().last().expect("rank>=1");
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let out = Tensor::new(a.shape().to_vec(), out).expect("same shape");
        self.unary(Op::LogSoftmax(self.id), out)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (a, g, b) = (self.value(), gamma.value(), beta.value());
        let cols = *a.shape().last().expect("rank>=1");
        if g.numel() != cols || b.numel() != cols {
            return Err(mismatch("layer_norm", &a, &g));
        }
        let mut xhat = vec![0.0; a.numel()];
        let mut rstd = Vec::with_capacity(a.numel() / cols);
        let mut out = vec![0.0; a.numel()];
        for (r, row) in a.data().chunks(cols).enumerate() {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = g.data()[c] * xh + b.data()[c];
            }
        }
        let out = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.unary(
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            out,
        ))
    }

    /// Row lookup: `self` is a `[vocab, dim]` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        let (v, dim) = match t.shape() {
            [v, d] => (*v, *d),
            s => {
                return Err(NumericsError::RankMismatch {
                    expected: 2,
                    shape: s.to_vec(),
                })
            }
        };
        if ids.is_empty() {
            return Err(NumericsError::InvalidShape(vec![0, dim]));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::IndexOutOfRange { index: id, len: v });
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.unary(
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            out,
        ))
    }

    /// Flat gather: `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var<'t>> {
        let t = self.value();
        let src = t.data();
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i >= src.len() {
                return Err(NumericsError::IndexOutOfRange {
                    index: i,
                    len: src.len(),
                });
            }
            out.push(src[i]);
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.unary(Op::Gather { x: self.id, index }, out))
    }

    /// Selects whole rows of a rank-2 value.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let (_, cols) = self.with_value(|t| t.dims2())?;
        let index: Vec<usize> = rows.iter().flat_map(|&r| (r * cols)..(r + 1) * cols).collect();
        self.gather(Arc::new(index), vec![rows.len(), cols])
    }

    /// `out[i] = self[i, cols[i]]`, shape `[rows]`.
    pub fn pick(&self, cols: &[usize]) -> Result<Var<'t>> {
        let (rows, ncols) = self.with_value(|t| t.dims2())?;
        if cols.len() != rows {
            return Err(NumericsError::DataLength {
                shape: vec![rows, ncols],
                len: cols.len(),
            });
        }
        let index: Vec<usize> = cols.iter().enumerate().map(|(r, &c)| r * ncols + c).collect();
        if cols.iter().any(|&c| c >= ncols) {
            return Err(NumericsError::IndexOutOfRange {
                index: *cols.iter().max().expect("non-empty"),
                len: ncols,
            });
        }
        self.gather(Arc::new(index), vec![rows])
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let t = self.value();
        if axis >= t.rank() {
            return Err(NumericsError::BadAxis {
                axis,
                shape: t.shape().to_vec(),
            });
        }
        if len == 0 || start + len > t.shape()[axis] {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                len: t.shape()[axis],
            });
        }
        let (outer, total, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            out.extend_from_slice(&t.data()[s..s + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        Ok(self.unary(
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            out,
        ))
    }

    /// Full reduction to a scalar.
    pub fn sum(&self) -> Var<'t> {
        let t = self.value();
        let s = t.data().iter().sum();
        self.unary(
            Op::Sum {
                x: self.id,
                outer: 1,
                len: t.numel(),
                inner: 1,
            },
            Tensor::scalar(s),
        )
    }

    pub fn mean(&self) -> Var<'t> {
        let t = self.value();
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.unary(
            Op::Mean {
                x: self.id,
                outer: 1,
                len: t.numel(),
                inner: 1,
            },
            Tensor::scalar(s),
        )
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let t = self.value();
        if axis >= t.rank() {
            return Err(NumericsError::BadAxis {
                axis,
                shape: t.shape().to_vec(),
            });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += t.data()[o * len * inner + k * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|x| *x /= len as f64);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(shape, out)?;
        let op = if mean {
            Op::Mean {
                x: self.id,
                outer,
                len,
                inner,
            }
        } else {
            Op::Sum {
                x: self.id,
                outer,
                len,
                inner,
            }
        };
        Ok(self.unary(op, out))
    }

    /// Sum along `axis`, keeping it as an extent of 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    /// Mean along `axis`, keeping it as an extent of 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    /// Binary cross-entropy of a probability against a 0/1 target, with the
    /// probability clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce(&self, target: f64) -> Result<Var<'t>> {
        let p = self.value();
        if !p.is_scalar() {
            return Err(NumericsError::NonScalarLoss(p.shape().to_vec()));
        }
        let loss = super::bce_loss(p.item(), target)?;
        Ok(self.unary(Op::Bce { p: self.id, target }, Tensor::scalar(loss)))
    }
}

/// Concatenates rank-2 values along `axis` (0 = rows, 1 = columns).
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or(NumericsError::Ragged)?;
    let tape = first.tape;
    let values: Vec<Arc<Tensor>> = parts.iter().map(Var::value).collect();
    let rank = values[0].rank();
    if axis >= rank {
        return Err(NumericsError::BadAxis {
            axis,
            shape: values[0].shape().to_vec(),
        });
    }
    for v in &values[1..] {
        let ok = v.rank() == rank && (0..rank).all(|d| d == axis || v.shape()[d] == values[0].shape()[d]);
        if !ok {
            return Err(mismatch("concat", &values[0], v));
        }
    }
    let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let (outer, _, inner) = split_axis(values[0].shape(), axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis] * inner;
            out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = values[0].shape().to_vec();
    shape[axis] = total;
    let out = Tensor::new(shape, out)?;
    Ok(tape.push(
        Arc::new(out),
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        },
    ))
}
