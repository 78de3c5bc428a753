use super::array::{gemm, Array, MatRef};
use super::lstm::{self, LstmCache};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    UnitNorm(Var, f64),
    RowSoftmax(Var),
    SumRows(Var),
    MeanRows(Var),
    SumAll(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SoftmaxXent(Var, usize),
    LstmSum(Box<LstmCache>),
}

struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
}

/// A tape of dense-matrix operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape index is already a
/// topological order; [`Graph::backward`] walks it in reverse. Every node
/// accumulates gradient additively, so a value consumed several times
/// receives the sum of its contributions.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Parameters and constants are both leaves; a leaf's
    /// gradient is available after [`Graph::backward`].
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copies the value of `x` into a fresh leaf. Gradient does not flow
    /// back through the copy.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass, or `None` when no path reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Array {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                Array::zeros(r, c)
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Array::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |p, q| p + q)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |p, q| p - q)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |p, q| p * q)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `x + bias` where `bias` is a single row added to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err("add_row", xv, bv));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    /// Multiplies row `r` of `x` by `s[r]`, with `s` a column of matching height.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.cols() != 1 || sv.rows() != xv.rows() {
            return Err(shape_err("scale_rows", xv, sv));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let k = sv.data()[r];
            for o in value.row_mut(r) {
                *o *= k;
            }
        }
        Ok(self.push(value, Op::ScaleRows(x, s)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale(x, k))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    /// `x / ‖x‖₂` over all entries.
    pub fn unit_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let norm = xv.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Degenerate(format!(
                "cannot normalize a vector of norm {norm}"
            )));
        }
        let value = xv.map(|v| v / norm);
        Ok(self.push(value, Op::UnitNorm(x, norm)))
    }

    pub fn rowsoftmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::NonFinite("rowsoftmax input".into()));
        }
        let mut value = Array::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            softmax_row(xv.row(r), value.row_mut(r));
        }
        Ok(self.push(value, Op::RowSoftmax(x)))
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.column_totals(x, "sum_rows")?;
        Ok(self.push(value, Op::SumRows(x)))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let mut value = self.column_totals(x, "mean_rows")?;
        value.scale_in_place(1.0 / self.value(x).rows() as f64);
        Ok(self.push(value, Op::MeanRows(x)))
    }

    fn column_totals(&self, x: Var, op: &'static str) -> Result<Array> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::EmptyReduction(op));
        }
        let mut out = Array::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        Ok(out)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::EmptyReduction("sum_all"));
        }
        let value = Array::scalar(xv.sum());
        Ok(self.push(value, Op::SumAll(x)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err("concat_cols", av, bv));
        }
        let cols = av.cols() + bv.cols();
        let mut data = Vec::with_capacity(av.rows() * cols);
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let value = Array::from_vec(av.rows(), cols, data)?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Columns `start..start + width` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + width > xv.cols() {
            return Err(Error::Index(format!(
                "column slice {start}..{} out of range for {:?}",
                start + width,
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(xv.rows() * width);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let value = Array::from_vec(xv.rows(), width, data)?;
        Ok(self.push(value, Op::SliceCols(x, start)))
    }

    /// Rows of `x` in the order given by `idx`. Indices must be distinct.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = vec![false; xv.rows()];
        let mut data = Vec::with_capacity(idx.len() * xv.cols());
        for &i in idx {
            if i >= xv.rows() {
                return Err(Error::Index(format!(
                    "row {i} out of range for {} rows",
                    xv.rows()
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Index(format!("duplicate row index {i}")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let value = Array::from_vec(idx.len(), xv.cols(), data)?;
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec())))
    }

    /// Cross-entropy of a single row of logits against a class label.
    pub fn softmax_xent(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != 1 || lv.cols() < 2 {
            return Err(Error::Input(format!(
                "softmax_xent expects 1×C logits with C ≥ 2, got {:?}",
                lv.shape()
            )));
        }
        if label >= lv.cols() {
            return Err(Error::Index(format!(
                "label {label} out of range for {} classes",
                lv.cols()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("softmax_xent logits".into()));
        }
        // log Σ exp(l − max) = log1p(Σ_{k ≠ argmax} exp(l_k − max)), which keeps
        // full relative precision when the label dominates.
        let (arg, max) = lv
            .data()
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, l)| if l > best.1 { (k, l) } else { best });
        let rest: f64 = lv
            .data()
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != arg)
            .map(|(_, l)| (l - max).exp())
            .sum();
        let value = Array::scalar((max - lv.data()[label]) + rest.ln_1p());
        Ok(self.push(value, Op::SoftmaxXent(logits, label)))
    }

    /// Runs one LSTM direction over every row of `x` (one sequence per row,
    /// time along columns) and returns the sum of the hidden states over
    /// time. Gate blocks in `w`, `u`, `b` are ordered input, forget, cell,
    /// output. With `reverse` the sequence is consumed from the last column.
    pub fn lstm_sum(&mut self, x: Var, w: Var, u: Var, b: Var, reverse: bool) -> Result<Var> {
        let (value, cache) = lstm::forward(
            self.value(x),
            self.value(w),
            self.value(u),
            self.value(b),
            reverse,
            [x, w, u, b],
        )?;
        Ok(self.push(value, Op::LstmSum(Box::new(cache))))
    }

    /// Reverse pass from a scalar node. Gradients from any earlier pass are
    /// discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                lhs: lv.shape(),
                rhs: (1, 1),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Array::ones(1, 1));

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            propagate(before, &node.op, &node.value, g);
        }
        Ok(())
    }
}

fn grad_slot(nodes: &mut [Node], v: Var) -> &mut Array {
    let node = &mut nodes[v.0];
    let (r, c) = node.value.shape();
    node.grad.get_or_insert_with(|| Array::zeros(r, c))
}

fn accumulate(nodes: &mut [Node], v: Var, contribution: &Array) {
    grad_slot(nodes, v).add_assign(contribution);
}

fn accumulate_with(nodes: &mut [Node], v: Var, g: &Array, f: impl Fn(f64, usize) -> f64) {
    let slot = grad_slot(nodes, v);
    for (k, (s, &gv)) in slot.data_mut().iter_mut().zip(g.data()).enumerate() {
        *s += f(gv, k);
    }
}

fn propagate(nodes: &mut [Node], op: &Op, out: &Array, g: &Array) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let mut ga = Array::zeros(av.rows(), av.cols());
            gemm(1.0, MatRef::normal(g), MatRef::transposed(bv), 0.0, &mut ga);
            let mut gb = Array::zeros(bv.rows(), bv.cols());
            gemm(1.0, MatRef::transposed(av), MatRef::normal(g), 0.0, &mut gb);
            accumulate(nodes, *a, &ga);
            accumulate(nodes, *b, &gb);
        }
        Op::Transpose(a) => accumulate(nodes, *a, &g.transpose()),
        Op::Add(a, b) => {
            accumulate(nodes, *a, g);
            accumulate(nodes, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, *a, g);
            accumulate_with(nodes, *b, g, |gv, _| -gv);
        }
        Op::Mul(a, b) => {
            let ga = mul_elems(g, &nodes[b.0].value);
            let gb = mul_elems(g, &nodes[a.0].value);
            accumulate(nodes, *a, &ga);
            accumulate(nodes, *b, &gb);
        }
        Op::AddRow(x, bias) => {
            accumulate(nodes, *x, g);
            let gb = grad_slot(nodes, *bias);
            for r in 0..g.rows() {
                for (s, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                    *s += v;
                }
            }
        }
        Op::ScaleRows(x, s) => {
            let xv = nodes[x.0].value.clone();
            let sv = nodes[s.0].value.clone();
            let cols = g.cols();
            accumulate_with(nodes, *x, g, |gv, k| gv * sv.data()[k / cols]);
            let gs = grad_slot(nodes, *s);
            for r in 0..g.rows() {
                let dot: f64 = g.row(r).iter().zip(xv.row(r)).map(|(p, q)| p * q).sum();
                gs.data_mut()[r] += dot;
            }
        }
        Op::Scale(x, k) => accumulate_with(nodes, *x, g, |gv, _| gv * k),
        Op::Sigmoid(x) => {
            accumulate_with(nodes, *x, g, |gv, k| {
                let y = out.data()[k];
                gv * y * (1.0 - y)
            });
        }
        Op::Tanh(x) => {
            accumulate_with(nodes, *x, g, |gv, k| {
                let y = out.data()[k];
                gv * (1.0 - y * y)
            });
        }
        Op::UnitNorm(x, norm) => {
            let dot: f64 = g.data().iter().zip(out.data()).map(|(p, q)| p * q).sum();
            accumulate_with(nodes, *x, g, |gv, k| (gv - out.data()[k] * dot) / norm);
        }
        Op::RowSoftmax(x) => {
            let mut gx = Array::zeros(out.rows(), out.cols());
            for r in 0..out.rows() {
                let (y, gr) = (out.row(r), g.row(r));
                let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(y.iter().zip(gr)) {
                    *o = yv * (gv - dot);
                }
            }
            accumulate(nodes, *x, &gx);
        }
        Op::SumRows(x) | Op::MeanRows(x) => {
            let rows = nodes[x.0].value.rows();
            let k = if matches!(op, Op::MeanRows(_)) {
                1.0 / rows as f64
            } else {
                1.0
            };
            let slot = grad_slot(nodes, *x);
            for r in 0..rows {
                for (s, v) in slot.row_mut(r).iter_mut().zip(g.data()) {
                    *s += k * v;
                }
            }
        }
        Op::SumAll(x) => {
            let gv = g.item();
            for s in grad_slot(nodes, *x).data_mut() {
                *s += gv;
            }
        }
        Op::ConcatCols(a, b) => {
            let left = nodes[a.0].value.cols();
            {
                let ga = grad_slot(nodes, *a);
                for r in 0..g.rows() {
                    for (s, v) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..left]) {
                        *s += v;
                    }
                }
            }
            let gb = grad_slot(nodes, *b);
            for r in 0..g.rows() {
                for (s, v) in gb.row_mut(r).iter_mut().zip(&g.row(r)[left..]) {
                    *s += v;
                }
            }
        }
        Op::SliceCols(x, start) => {
            let slot = grad_slot(nodes, *x);
            for r in 0..g.rows() {
                for (s, v) in slot.row_mut(r)[*start..].iter_mut().zip(g.row(r)) {
                    *s += v;
                }
            }
        }
        Op::GatherRows(x, idx) => {
            let slot = grad_slot(nodes, *x);
            for (k, &i) in idx.iter().enumerate() {
                for (s, v) in slot.row_mut(i).iter_mut().zip(g.row(k)) {
                    *s += v;
                }
            }
        }
        Op::SoftmaxXent(logits, label) => {
            let lv = &nodes[logits.0].value;
            let mut p = vec![0.0; lv.cols()];
            softmax_row(lv.data(), &mut p);
            p[*label] -= 1.0;
            let upstream = g.item();
            for (s, pk) in grad_slot(nodes, *logits).data_mut().iter_mut().zip(&p) {
                *s += upstream * pk;
            }
        }
        Op::LstmSum(cache) => {
            let [x, w, u, b] = cache.inputs;
            let grads = lstm::backward(
                cache,
                g,
                &nodes[x.0].value,
                &nodes[w.0].value,
                &nodes[u.0].value,
            );
            accumulate(nodes, x, &grads.x);
            accumulate(nodes, w, &grads.w);
            accumulate(nodes, u, &grads.u);
            accumulate(nodes, b, &grads.b);
        }
    }
}

fn mul_elems(a: &Array, b: &Array) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect();
    Array::from_vec(a.rows(), a.cols(), data).expect("same shape")
}
