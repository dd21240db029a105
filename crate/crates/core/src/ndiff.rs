//! Define-by-run reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a `1×1` output walks the tape in reverse and
//! accumulates vector-Jacobian products. The tape is rebuilt for every
//! training step because the imputation path makes the graph depend on the
//! observation mask.
//!
//! ```
//! use ndarray::array;
//! use trajcast::ndiff::Tape;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(array![[1.0, 2.0]]);
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap(), &array![[2.0, 4.0]]);
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::container::{self, PARAMS_TAG};
use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Lower and upper clamp applied to probabilities inside the cross-entropy.
pub const PROB_CLAMP: (f64, f64) = (1e-12, 1.0 - 1e-12);

/// Handle to a node on a [`Tape`]. Indices are topological.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SelectCols(Var, usize),
    Sum(Var),
    SumSquares(Var),
    MeanOver {
        x: Var,
        mask: Matrix,
        count: usize,
    },
    MaskFill {
        pred: Var,
        mask: Matrix,
    },
    MaskedSqErr {
        pred: Var,
        target: Matrix,
        mask: Matrix,
    },
    Bce {
        p: Var,
        labels: Matrix,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::AddRow(..) => "rowwise_broadcast_add",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Scale(..) => "scale",
            Op::ConcatCols(..) => "concat_columns",
            Op::SelectCols(..) => "select_columns",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
            Op::MeanOver { .. } => "mean_over",
            Op::MaskFill { .. } => "mask_fill",
            Op::MaskedSqErr { .. } => "masked_squared_error",
            Op::Bce { .. } => "binary_cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims(m: &Matrix) -> (usize, usize) {
    m.dim()
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        left: dims(a),
        right: dims(b),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `(r×k)·(k×c) -> r×c`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", va, vb));
        }
        let out = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err(op, va, vb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("subtract", a, b)?;
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("multiply", a, b)?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(shape_err("rowwise_broadcast_add", va, vr));
        }
        let out = va + vr;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Numerical("concat_columns of zero parts".into()))?;
        let rows = self.value(*first).nrows();
        for p in parts {
            if self.value(*p).nrows() != rows {
                return Err(shape_err(
                    "concat_columns",
                    self.value(*first),
                    self.value(*p),
                ));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Numerical(format!("concat_columns: {e}")))?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn select_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.ncols() || len == 0 {
            return Err(shape_err(
                "select_columns",
                va,
                &Matrix::zeros((0, start + len)),
            ));
        }
        let out = va.slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(out, Op::SelectCols(a, start), rg))
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Sum of squared entries, as a `1×1` node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a).iter().map(|v| v * v).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumSquares(a), rg)
    }

    /// Mean of the entries where `mask != 0`; zero when the mask is empty.
    /// Entries outside the mask are never read.
    pub fn mean_over(&mut self, x: Var, mask: Matrix) -> Result<Var> {
        let vx = self.value(x);
        if vx.dim() != mask.dim() {
            return Err(shape_err("mean_over", vx, &mask));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        Zip::from(vx).and(&mask).for_each(|&v, &m| {
            if m != 0.0 {
                total += v;
                count += 1;
            }
        });
        let mean = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let rg = self.rg(x);
        Ok(self.push(
            Matrix::from_elem((1, 1), mean),
            Op::MeanOver { x, mask, count },
            rg,
        ))
    }

    /// `observed` where `mask != 0`, `pred` elsewhere. Only the `pred`
    /// cells that are used receive gradient.
    pub fn mask_fill(&mut self, pred: Var, observed: &Matrix, mask: &Matrix) -> Result<Var> {
        let vp = self.value(pred);
        if vp.dim() != observed.dim() {
            return Err(shape_err("mask_fill", vp, observed));
        }
        if vp.dim() != mask.dim() {
            return Err(shape_err("mask_fill", vp, mask));
        }
        let mut out = vp.clone();
        Zip::from(&mut out)
            .and(observed)
            .and(mask)
            .for_each(|o, &y, &m| {
                if m != 0.0 {
                    *o = y;
                }
            });
        let rg = self.rg(pred);
        Ok(self.push(
            out,
            Op::MaskFill {
                pred,
                mask: mask.clone(),
            },
            rg,
        ))
    }

    /// `Σ (pred − target)²` over cells with `mask != 0`, as `1×1`. Target
    /// cells outside the mask are never read.
    pub fn masked_sq_err(&mut self, pred: Var, target: &Matrix, mask: &Matrix) -> Result<Var> {
        let vp = self.value(pred);
        if vp.dim() != target.dim() {
            return Err(shape_err("masked_squared_error", vp, target));
        }
        if vp.dim() != mask.dim() {
            return Err(shape_err("masked_squared_error", vp, mask));
        }
        let mut total = 0.0;
        Zip::from(vp).and(target).and(mask).for_each(|&p, &y, &m| {
            if m != 0.0 {
                total += (p - y) * (p - y);
            }
        });
        let rg = self.rg(pred);
        Ok(self.push(
            Matrix::from_elem((1, 1), total),
            Op::MaskedSqErr {
                pred,
                target: target.clone(),
                mask: mask.clone(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` (`r×1`) against
    /// labels (`r×1`, values in {0, 1}), with `p` clamped to
    /// [`PROB_CLAMP`].
    pub fn bce(&mut self, p: Var, labels: &Matrix) -> Result<Var> {
        let vp = self.value(p);
        if vp.dim() != labels.dim() || vp.ncols() != 1 || vp.nrows() == 0 {
            return Err(shape_err("binary_cross_entropy", vp, labels));
        }
        let (lo, hi) = PROB_CLAMP;
        let mut total = 0.0;
        Zip::from(vp).and(labels).for_each(|&p, &z| {
            let pc = p.clamp(lo, hi);
            total -= z * pc.ln() + (1.0 - z) * (1.0 - pc).ln();
        });
        let n = vp.nrows() as f64;
        let rg = self.rg(p);
        Ok(self.push(
            Matrix::from_elem((1, 1), total / n),
            Op::Bce {
                p,
                labels: labels.clone(),
            },
            rg,
        ))
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.dim() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: out_val.dim(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, contrib: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.rg(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.rg(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.rg(*p) {
                        acc(*p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SelectCols(a, start) => {
                let mut d = Matrix::zeros(self.value(*a).dim());
                let w = g.ncols();
                d.slice_mut(s![.., *start..*start + w]).assign(g);
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Matrix::from_elem(self.value(*a).dim(), g[[0, 0]])),
            Op::SumSquares(a) => acc(*a, self.value(*a) * (2.0 * g[[0, 0]])),
            Op::MeanOver { x, mask, count } => {
                let scale = if *count == 0 {
                    0.0
                } else {
                    g[[0, 0]] / *count as f64
                };
                acc(*x, mask.mapv(|m| if m != 0.0 { scale } else { 0.0 }));
            }
            Op::MaskFill { pred, mask } => {
                let mut d = g.clone();
                Zip::from(&mut d).and(mask).for_each(|d, &m| {
                    if m != 0.0 {
                        *d = 0.0;
                    }
                });
                acc(*pred, d);
            }
            Op::MaskedSqErr { pred, target, mask } => {
                let g0 = g[[0, 0]];
                let mut d = Matrix::zeros(target.dim());
                Zip::from(&mut d)
                    .and(self.value(*pred))
                    .and(target)
                    .and(mask)
                    .for_each(|d, &p, &y, &m| {
                        if m != 0.0 {
                            *d = 2.0 * g0 * (p - y);
                        }
                    });
                acc(*pred, d);
            }
            Op::Bce { p, labels } => {
                let (lo, hi) = PROB_CLAMP;
                let scale = g[[0, 0]] / labels.nrows() as f64;
                let mut d = Matrix::zeros(labels.dim());
                Zip::from(&mut d)
                    .and(self.value(*p))
                    .and(labels)
                    .for_each(|d, &p, &z| {
                        if p > lo && p < hi {
                            *d = scale * (-z / p + (1.0 - z) / (1.0 - p));
                        }
                    });
                acc(*p, d);
            }
        }
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or `None` when `v` does not influence the
    /// output (or is a constant).
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

// ---------------------------------------------------------------------------
// Parameters

/// Named parameter matrices. Iteration and flattening use lexicographic
/// name order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
}

/// Tape handles for every entry of a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was not registered"),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|m| m.iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::Config(format!(
                "flat vector has {} values, store has {}",
                flat.len(),
                self.count()
            )));
        }
        let mut cursor = 0;
        for m in self.params.values_mut() {
            for v in m.iter_mut() {
                *v = flat[cursor];
                cursor += 1;
            }
        }
        Ok(())
    }

    /// Places every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Gradients collected into a store shaped like `self`; parameters that
    /// do not reach the output get exact zeros.
    pub fn collect_grads(&self, vars: &ParamVars, grads: &Gradients) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| {
                    let g = grads
                        .get(vars.get(k))
                        .cloned()
                        .unwrap_or_else(|| Matrix::zeros(v.dim()));
                    (k.clone(), g)
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .values()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|m| m.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Named-tensor text format: tag line, then per tensor a
    /// `name rows cols` line followed by one line per row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{PARAMS_TAG}");
        for (name, m) in &self.params {
            let _ = writeln!(out, "{name} {} {}", m.nrows(), m.ncols());
            for row in m.rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body = container::expect_tag(text, PARAMS_TAG)?;
        let bad = |msg: String| Error::Container(format!("{PARAMS_TAG}: {msg}"));
        let mut lines = body.lines().filter(|l| !l.trim().is_empty());
        let mut store = ParamStore::new();
        while let Some(head) = lines.next() {
            let parts: Vec<&str> = head.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(bad(format!("bad tensor header `{head}`")));
            };
            let rows: usize = rows
                .parse()
                .map_err(|_| bad(format!("bad rows in `{head}`")))?;
            let cols: usize = cols
                .parse()
                .map_err(|_| bad(format!("bad cols in `{head}`")))?;
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let line = lines
                    .next()
                    .ok_or_else(|| bad(format!("`{name}` truncated at row {r}")))?;
                let vals = line
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| bad(format!("bad value `{t}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if vals.len() != cols {
                    return Err(bad(format!("`{name}` row {r} has {} values", vals.len())));
                }
                data.extend(vals);
            }
            let m = Matrix::from_shape_vec((rows, cols), data).map_err(|e| bad(e.to_string()))?;
            store.insert(name, m);
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Finite-difference checking

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat offset within it of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares analytic gradients with central differences.
///
/// `loss_and_grad` returns the loss and its analytic gradient at the given
/// parameters. Relative error per coordinate is
/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(loss_and_grad: F, params: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, ParamStore)>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let (_, analytic) = loss_and_grad(params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name).map_or(0, |m| m.len());
        for k in 0..len {
            let original = params.get(&name).and_then(|m| m.iter().nth(k).copied());
            let original = original.unwrap_or_default();
            let mut eval = |x: f64| -> Result<f64> {
                if let Some(m) = probe.get_mut(&name) {
                    if let Some(slot) = m.iter_mut().nth(k) {
                        *slot = x;
                    }
                }
                let (f, _) = loss_and_grad(&probe)?;
                if !f.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss while probing `{name}`[{k}]"
                    )));
                }
                Ok(f)
            };
            let plus = eval(original + eps)?;
            let minus = eval(original - eps)?;
            eval(original)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic
                .get(&name)
                .and_then(|m| m.iter().nth(k).copied())
                .unwrap_or_default();
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Optimization

/// Adaptive moment estimation over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (name, p) in params.iter_mut() {
            let (Some(g), Some(m), Some(v)) = (
                grads.get(name),
                self.m.params.get_mut(name),
                self.v.params.get_mut(name),
            ) else {
                continue;
            };
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

/// Rescales `grads` so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}
