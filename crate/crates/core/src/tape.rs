//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. Nodes are appended in evaluation order, so walking them
//! backwards is a valid topological order for gradient propagation.
//! Parameters enter the tape through [`Tape::param`]; frozen parameters come
//! in as constants and never receive gradients.
//!
//! Shape misuse inside the tape is a programming error and panics. Modules
//! validate user-facing shapes before they reach it.

use ndarray::{s, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};

/// Probabilities are clamped below by this before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Array2<f64>),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Rows(Var, usize, usize),
    Gather(Var, Vec<usize>),
    SumRows(Var, usize, usize),
    Broadcast(Var),
    OuterAdd(Var, Var),
    Softmax(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Normalize(Var, f64),
    Nll(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self::with_seed(store, mode, 0)
    }

    /// `seed` drives dropout masks; it is irrelevant in eval mode.
    pub fn with_seed(store: &'s ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.dim(), (1, 1), "not a scalar");
        value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let op = if self.store.is_trainable(id) {
            Op::Param(id)
        } else {
            Op::Leaf
        };
        let v = self.push(value, op);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// `x + row`, with the `1 × m` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (_, m) = self.shape(x);
        assert_eq!(self.shape(row), (1, m), "add_row: shape mismatch");
        let value = self.value(x) + self.value(row);
        self.push(value, Op::AddRow(x, row))
    }

    /// `x + s` for a `1 × 1` scalar node `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "add_scalar: not a scalar");
        let k = self.scalar(s);
        let value = self.value(x).mapv(|v| v + k);
        self.push(value, Op::AddScalar(x, s))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (_, m) = self.shape(x);
        assert_eq!(self.shape(row), (1, m), "mul_row: shape mismatch");
        let value = self.value(x) * self.value(row);
        self.push(value, Op::MulRow(x, row))
    }

    pub fn mul_const(&mut self, x: Var, c: Array2<f64>) -> Var {
        assert_eq!(self.shape(x), c.dim(), "mul_const: shape mismatch");
        let value = self.value(x) * &c;
        self.push(value, Op::MulConst(x, c))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        self.push(value, Op::Scale(x, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).0, "matmul: inner dims");
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).1, "matmul_nt: inner dims");
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNt(a, b))
    }

    /// `x · wᵀ + b` with `w` of shape `out × in` and `b` of shape `1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul_nt(x, w);
        self.add_row(y, b)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut c = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), rows, "concat_cols: row mismatch");
            value.slice_mut(s![.., c..c + v.ncols()]).assign(v);
            c += v.ncols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        assert!(start <= end && end <= self.shape(x).1, "slice_cols: range");
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(x, start, end))
    }

    /// Rows `[start, end)`.
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        assert!(start <= end && end <= self.shape(x).0, "rows: range");
        let value = self.value(x).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::Rows(x, start, end))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Var {
        self.rows(x, i, i + 1)
    }

    /// Row lookup, as for an embedding table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Array2::zeros((indices.len(), t.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).assign(&t.row(i));
        }
        self.push(value, Op::Gather(table, indices.to_vec()))
    }

    /// Sum of rows `[start, end)` as a `1 × m` row.
    pub fn sum_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        assert!(start < end && end <= self.shape(x).0, "sum_rows: range");
        let value = self
            .value(x)
            .slice(s![start..end, ..])
            .sum_axis(Axis(0))
            .insert_axis(Axis(0));
        self.push(value, Op::SumRows(x, start, end))
    }

    /// Repeats a `1 × m` row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        assert_eq!(self.shape(row).0, 1, "broadcast_rows: not a row");
        let r = self.value(row).row(0).to_owned();
        let value = r.broadcast((n, r.len())).unwrap().to_owned();
        self.push(value, Op::Broadcast(row))
    }

    /// `out[i, j] = a[i] + b[j]` for column vectors `a` (`n × 1`) and `b` (`m × 1`).
    pub fn outer_add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, 1, "outer_add: a not a column");
        assert_eq!(self.shape(b).1, 1, "outer_add: b not a column");
        let av = self.value(a).column(0).to_owned();
        let bv = self.value(b).column(0).to_owned();
        let value = Array2::from_shape_fn((av.len(), bv.len()), |(i, j)| av[i] + bv[j]);
        self.push(value, Op::OuterAdd(a, b))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        self.push(value, Op::Softmax(x))
    }

    /// Row-wise softmax restricted to entries where `mask` is true; the rest
    /// are exactly zero. A row with no admissible entry is all zero.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &Array2<bool>) -> Var {
        assert_eq!(self.shape(x), mask.dim(), "masked_softmax: shape mismatch");
        let mut value = self.value(x).clone();
        for (mut row, m) in value.rows_mut().into_iter().zip(mask.rows()) {
            let max = row
                .iter()
                .zip(m.iter())
                .filter(|(_, &keep)| keep)
                .fold(f64::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
            let mut z = 0.0;
            for (v, &keep) in row.iter_mut().zip(m.iter()) {
                *v = if keep { (*v - max).exp() } else { 0.0 };
                z += *v;
            }
            if z > 0.0 {
                row.mapv_inplace(|v| v / z);
            }
        }
        // The gradient of a masked softmax only involves its output values,
        // which are already zero at masked positions.
        self.push(value, Op::Softmax(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(elu);
        self.push(value, Op::Elu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        self.push(value, Op::Gelu(x))
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        self.push(value, Op::Normalize(x, eps))
    }

    /// `Σ_i −ln(max(p[i, targets[i]], 1e-12))` as a `1 × 1` node.
    pub fn nll(&mut self, probs: Var, targets: &[usize]) -> Var {
        let p = self.value(probs);
        assert_eq!(p.nrows(), targets.len(), "nll: one target per row");
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -p[[i, t]].max(LOG_CLAMP).ln())
            .sum();
        self.push(Array2::from_elem((1, 1), total), Op::Nll(probs, targets.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(x))
    }

    /// Inverted dropout. Identity in eval mode or when `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let dim = self.shape(x);
        let rng = &mut self.rng;
        let mask = Array2::from_shape_simple_fn(dim, || {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.mul_const(x, mask)
    }

    /// Gradients of the sum of `output`'s entries with respect to every
    /// trainable parameter reached by the tape.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones(self.shape(output)));
        let mut out = Gradients::new(self.store.len());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(x, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *x, g);
                }
                Op::AddScalar(x, sc) => {
                    acc(&mut grads, *sc, Array2::from_elem((1, 1), g.sum()));
                    acc(&mut grads, *x, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulRow(x, row) => {
                    let gx = &g * self.value(*row);
                    let grow = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *row, grow);
                }
                Op::MulConst(x, c) => acc(&mut grads, *x, &g * c),
                Op::Scale(x, k) => acc(&mut grads, *x, g * *k),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut grads, p, g.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::SliceCols(x, start, end) => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    gx.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::Rows(x, start, end) => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    gx.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::Gather(table, indices) => {
                    let mut gt = Array2::zeros(self.shape(*table));
                    for (r, &idx) in indices.iter().enumerate() {
                        let mut dst = gt.row_mut(idx);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::SumRows(x, start, end) => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    for mut r in gx.slice_mut(s![*start..*end, ..]).rows_mut() {
                        r.assign(&g.row(0));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Broadcast(row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::OuterAdd(a, b) => {
                    acc(&mut grads, *a, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(1)));
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.dim());
                    for ((mut dst, yr), gr) in gx.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let dot = yr.dot(&gr);
                        Zip::from(&mut dst)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|d, &yv, &gv| *d = yv * (gv - dot));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|d, &xv| if xv <= 0.0 { *d *= *slope });
                    acc(&mut grads, *x, gx);
                }
                Op::Elu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|d, &xv| if xv <= 0.0 { *d *= xv.exp() });
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|d, &xv| *d *= gelu_grad(xv));
                    acc(&mut grads, *x, gx);
                }
                Op::Normalize(x, eps) => {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.dim());
                    for (((mut dst, xr), yr), gr) in gx
                        .rows_mut()
                        .into_iter()
                        .zip(xv.rows())
                        .zip(y.rows())
                        .zip(g.rows())
                    {
                        let n = xr.len() as f64;
                        let mean = xr.sum() / n;
                        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = gr.sum() / n;
                        let gy_mean = gr.dot(&yr) / n;
                        Zip::from(&mut dst)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|d, &yv, &gv| *d = inv * (gv - g_mean - yv * gy_mean));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Nll(probs, targets) => {
                    let p = self.value(*probs);
                    let upstream = g[[0, 0]];
                    let mut gp = Array2::zeros(p.dim());
                    for (i, &t) in targets.iter().enumerate() {
                        let pv = p[[i, t]];
                        if pv > LOG_CLAMP {
                            gp[[i, t]] = -upstream / pv;
                        }
                    }
                    acc(&mut grads, *probs, gp);
                }
                Op::Sum(x) => {
                    let gx = Array2::from_elem(self.shape(*x), g[[0, 0]]);
                    acc(&mut grads, *x, gx);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        slot => *slot = Some(delta),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Per-parameter gradients, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: Array2<f64>) {
        match &mut self.grads[id.index()] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads[id.index()].as_ref()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Array2<f64>> {
        self.grads[id.index()].as_mut()
    }

    /// Gradient entry, treating an unreached parameter as zero.
    pub fn entry(&self, id: ParamId, idx: (usize, usize)) -> f64 {
        self.get(id).map_or(0.0, |g| g[idx])
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * k);
        }
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store_with(values: &[(&str, Array2<f64>)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, v)| store.add_trainable(n, v.clone()))
            .collect();
        (store, ids)
    }

    /// Central differences of `f` over every entry of every parameter.
    fn numeric(store: &ParamStore, f: &dyn Fn(&mut Tape) -> Var) -> Vec<Array2<f64>> {
        let h = 1e-6;
        let mut out = Vec::new();
        for id in store.ids() {
            let mut g = Array2::zeros(store.get(id).dim());
            for idx in ndarray::indices(store.get(id).dim()) {
                let mut plus = store.clone();
                plus.get_mut(id)[idx] += h;
                let mut minus = store.clone();
                minus.get_mut(id)[idx] -= h;
                let fp = {
                    let mut t = Tape::new(&plus, Mode::Eval);
                    let v = f(&mut t);
                    t.scalar(v)
                };
                let fm = {
                    let mut t = Tape::new(&minus, Mode::Eval);
                    let v = f(&mut t);
                    t.scalar(v)
                };
                g[idx] = (fp - fm) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn assert_grads(store: &ParamStore, f: &dyn Fn(&mut Tape) -> Var) {
        let mut tape = Tape::new(store, Mode::Eval);
        let out = f(&mut tape);
        let grads = tape.backward(out);
        for (id, num) in store.ids().zip(numeric(store, f)) {
            for idx in ndarray::indices(num.dim()) {
                let a = grads.entry(id, idx);
                let n = num[idx];
                assert!(
                    (a - n).abs() <= 1e-6 * (1.0 + n.abs()),
                    "{} {:?}: analytic {a}, numeric {n}",
                    store.name(id),
                    idx
                );
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_ops() {
        let (store, ids) = store_with(&[
            ("a", array![[0.3, -1.2, 0.5], [0.9, 0.1, -0.4]]),
            ("b", array![[1.1, -0.3, 0.2], [-0.7, 0.6, 0.8]]),
            ("r", array![[0.2, -0.5, 1.5]]),
            ("w", array![[0.4, -0.2], [0.3, 0.7], [-0.6, 0.1]]),
        ]);
        assert_grads(&store, &|t: &mut Tape| {
            let a = t.param(ids[0]);
            let b = t.param(ids[1]);
            let r = t.param(ids[2]);
            let w = t.param(ids[3]);
            let x = t.mul(a, b);
            let x = t.add_row(x, r);
            let x = t.mul_row(x, r);
            let y = t.matmul(x, w);
            let z = t.matmul_nt(a, b);
            let y = t.elu(y);
            let z = t.sigmoid(z);
            let z = t.gelu(z);
            let z = t.tanh(z);
            let q = t.leaky_relu(b, 0.2);
            let q = t.scale(q, 0.7);
            let s1 = t.sum(y);
            let s2 = t.sum(z);
            let s3 = t.sum(q);
            let s = t.add(s1, s2);
            t.add(s, s3)
        });
    }

    #[test]
    fn structural_ops() {
        let (store, ids) = store_with(&[
            ("x", array![[0.3, -1.2, 0.5], [0.9, 0.1, -0.4], [0.2, 0.2, 0.7]]),
            ("c", array![[0.5], [-0.25], [1.0]]),
            ("s", array![[0.3]]),
        ]);
        let weights = array![[0.1, 0.9, -0.3], [1.3, -0.2, 0.4], [0.6, 0.5, -1.1]];
        assert_grads(&store, &|t: &mut Tape| {
            let x = t.param(ids[0]);
            let c = t.param(ids[1]);
            let s = t.param(ids[2]);
            let left = t.slice_cols(x, 0, 2);
            let right = t.slice_cols(x, 1, 3);
            let cat = t.concat_cols(&[left, right, c]);
            let sub = t.rows(cat, 1, 3);
            let sr = t.sum_rows(x, 0, 2);
            let bc = t.broadcast_rows(sr, 3);
            let g = t.gather(x, &[2, 0, 2]);
            let o = t.outer_add(c, c);
            let o = t.add_scalar(o, s);
            let mixed = t.mul(bc, g);
            let mixed = t.add(mixed, o);
            let wc = t.constant(weights.clone());
            let mixed = t.mul(mixed, wc);
            let a = t.sum(sub);
            let b = t.sum(mixed);
            t.add(a, b)
        });
    }

    #[test]
    fn softmax_normalize_and_nll() {
        let (store, ids) = store_with(&[(
            "x",
            array![[0.3, -1.2, 0.5, 0.1], [0.9, 0.1, -0.4, 2.0]],
        )]);
        let mask = array![[true, false, true, true], [true, true, false, false]];
        assert_grads(&store, &|t: &mut Tape| {
            let x = t.param(ids[0]);
            let n = t.normalize_rows(x, 1e-5);
            let w = t.constant(array![[0.3, 1.0, -0.5, 0.2], [0.1, -0.4, 0.9, 0.6]]);
            let n = t.mul(n, w);
            let p = t.softmax_rows(n);
            let m = t.masked_softmax_rows(x, &mask);
            let a = t.nll(p, &[2, 0]);
            let b = t.nll(m, &[3, 1]);
            t.add(a, b)
        });
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store, Mode::Eval);
        let x = t.constant(array![[1.0, 5.0, 2.0]]);
        let p = t.masked_softmax_rows(x, &array![[true, false, true]]);
        let v = t.value(p);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add_trainable("w", array![[1.0, 2.0]]);
        let f = store.add_frozen("f", array![[3.0, 4.0]]);
        let mut t = Tape::new(&store, Mode::Eval);
        let a = t.param(w);
        let b = t.param(f);
        let p = t.mul(a, b);
        let s = t.sum(p);
        let g = t.backward(s);
        assert_eq!(g.get(w).unwrap(), &array![[3.0, 4.0]]);
        assert!(g.get(f).is_none());
    }

    #[test]
    fn dropout_is_seeded_and_eval_identity() {
        let store = ParamStore::new();
        let run = |mode, seed| {
            let mut t = Tape::with_seed(&store, mode, seed);
            let x = t.constant(Array2::ones((4, 8)));
            let y = t.dropout(x, 0.5);
            t.value(y).clone()
        };
        assert_eq!(run(Mode::Train, 3), run(Mode::Train, 3));
        assert_ne!(run(Mode::Train, 3), run(Mode::Train, 4));
        assert_eq!(run(Mode::Eval, 3), Array2::ones((4, 8)));
        assert!(run(Mode::Train, 3).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn nll_clamps_zero_probability() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store, Mode::Eval);
        let p = t.constant(array![[1.0, 0.0]]);
        let l = t.nll(p, &[1]);
        assert!((t.scalar(l) - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn clip_global_norm_rescales() {
        let mut g = Gradients::new(1);
        g.accumulate(ParamId(0), array![[3.0, 4.0]]);
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
