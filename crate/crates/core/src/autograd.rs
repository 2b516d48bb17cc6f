//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every forward op records its inputs; [`Tape::backward`] walks the tape in
//! reverse and accumulates gradients. Nodes that do not depend on any
//! gradient-requiring leaf are skipped during the backward sweep.

use std::rc::Rc;

use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reading of the contrastive objective; see [`crate::afem::ClipReading`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ContrastiveForm {
    PerSample,
    LogOfSum,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Rc<Vec<f64>>),
    Gather(Var, Rc<Vec<Option<usize>>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Sum(Var),
    NormalizeRows(Var, Rc<Vec<f64>>),
    CrossEntropySum(Var, Rc<Vec<usize>>),
    Contrastive(Var, ContrastiveForm),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape(), (1, av.cols()), "add_row expects a 1 x cols row");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        self.push(value, Op::AddRow(a, b), &[a, b])
    }

    /// Multiplies every row of `a` elementwise by the `1 x c` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape(), (1, av.cols()), "mul_row expects a 1 x cols row");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *x *= y;
            }
        }
        self.push(value, Op::MulRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale(a, k), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        let c = av.cols() as f64;
        for r in 0..av.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(value, Op::LayerNormRows(a, Rc::new(inv_std)), &[a])
    }

    /// Builds a `rows x cols` matrix whose flat element `k` is `a.flat[index[k]]`,
    /// or zero where the index is `None`.
    pub fn gather(&mut self, a: Var, rows: usize, cols: usize, index: Rc<Vec<Option<usize>>>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length mismatch");
        let src = self.value(a).data();
        let data = index
            .iter()
            .map(|i| i.map_or(0.0, |i| src[i]))
            .collect();
        let value = Matrix::from_vec(rows, cols, data);
        self.push(value, Op::Gather(a, index), &[a])
    }

    /// Selects whole rows of `a` by index.
    pub fn gather_rows(&mut self, a: Var, row_ids: &[usize]) -> Var {
        let cols = self.value(a).cols();
        let nrows = self.value(a).rows();
        let mut index = Vec::with_capacity(row_ids.len() * cols);
        for &r in row_ids {
            assert!(r < nrows, "row index {r} out of range {nrows}");
            index.extend((0..cols).map(|c| Some(r * cols + c)));
        }
        self.gather(a, row_ids.len(), cols, Rc::new(index))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::vstack(&mats);
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|v| self.value(*v).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        assert!(start + width <= av.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(av.rows(), width);
        for r in 0..av.rows() {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + width]);
        }
        self.push(value, Op::SliceCols(a, start), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Scales each row to unit L2 norm. Callers must reject zero rows first.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = value.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        self.push(value, Op::NormalizeRows(a, Rc::new(norms)), &[a])
    }

    /// Sum over rows of `-log softmax(logits)[row, target[row]]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross entropy target count mismatch");
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            total += log_sum_exp(row) - row[t];
        }
        self.push(Matrix::scalar(total), Op::CrossEntropySum(logits, targets), &[logits])
    }

    pub(crate) fn contrastive(&mut self, sim: Var, form: ContrastiveForm) -> Var {
        let value = Matrix::scalar(contrastive_value(self.value(sim), form));
        self.push(value, Op::Contrastive(sim, form), &[sim])
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, column_sums(g));
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, y) in ga.row_mut(r).iter_mut().zip(bv.data()) {
                            *x *= y;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, column_sums(&g.zip_map(av, |x, y| x * y)));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k)),
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |gx, x| if x > 0.0 { gx } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gx, x| gx * gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dotp: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (c, out) in ga.row_mut(r).iter_mut().enumerate() {
                        *out = yr[c] * (gr[c] - dotp);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNormRows(a, inv_std) => {
                let y = &node.value;
                let c = y.cols() as f64;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = yr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / c;
                    for (i, out) in ga.row_mut(r).iter_mut().enumerate() {
                        *out = inv_std[r] * (gr[i] - mean_g - yr[i] * mean_gy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gather(a, index) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let dst = ga.data_mut();
                for (k, i) in index.iter().enumerate() {
                    if let Some(i) = i {
                        dst[*i] += g.data()[k];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.value(*p).shape();
                    if self.requires_grad(*p) {
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(grads, *p, Matrix::from_vec(rows, cols, slice));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.value(*p).shape();
                    if self.requires_grad(*p) {
                        let mut gp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Sum(a) => {
                let (rows, cols) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(rows, cols, g.item()));
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dotp: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (i, out) in ga.row_mut(r).iter_mut().enumerate() {
                        *out = (gr[i] - yr[i] * dotp) / norms[r];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::CrossEntropySum(logits, targets) => {
                let lv = self.value(*logits);
                let mut gl = softmax_rows(lv);
                for (r, &t) in targets.iter().enumerate() {
                    let row = gl.row_mut(r);
                    row[t] -= 1.0;
                }
                self.accumulate(grads, *logits, gl.scale(g.item()));
            }
            Op::Contrastive(sim, form) => {
                let gs = contrastive_grad(self.value(*sim), *form).scale(g.item());
                self.accumulate(grads, *sim, gs);
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let s = softmax(m.row(r));
        out.row_mut(r).copy_from_slice(&s);
    }
    out
}

/// Per-row log-sum-exp over off-diagonal entries.
fn off_diagonal_lse(sim: &Matrix, i: usize) -> f64 {
    let row: Vec<f64> = (0..sim.cols()).filter(|&j| j != i).map(|j| sim.get(i, j)).collect();
    log_sum_exp(&row)
}

fn contrastive_value(sim: &Matrix, form: ContrastiveForm) -> f64 {
    let b = sim.rows();
    let log_ratios: Vec<f64> = (0..b).map(|i| sim.get(i, i) - off_diagonal_lse(sim, i)).collect();
    match form {
        ContrastiveForm::PerSample => -log_ratios.iter().sum::<f64>() / b as f64,
        ContrastiveForm::LogOfSum => -log_sum_exp(&log_ratios) / b as f64,
    }
}

fn contrastive_grad(sim: &Matrix, form: ContrastiveForm) -> Matrix {
    let b = sim.rows();
    let bf = b as f64;
    let log_ratios: Vec<f64> = (0..b).map(|i| sim.get(i, i) - off_diagonal_lse(sim, i)).collect();
    // Weight of each per-sample log ratio in the loss.
    let coeff: Vec<f64> = match form {
        ContrastiveForm::PerSample => vec![1.0; b],
        ContrastiveForm::LogOfSum => softmax(&log_ratios),
    };
    let mut g = Matrix::zeros(b, b);
    for i in 0..b {
        let lse = off_diagonal_lse(sim, i);
        for j in 0..b {
            let d = if i == j {
                -1.0
            } else {
                (sim.get(i, j) - lse).exp()
            };
            g.set(i, j, coeff[i] * d / bf);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Matrix) -> f64, x: &Matrix) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for k in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            out.data_mut()[k] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn check(build: impl Fn(&mut Tape, Var) -> Var, x: Matrix) {
        let mut tape = Tape::new();
        let v = tape.variable(x.clone());
        let out = build(&mut tape, v);
        let grads = tape.backward(out);
        let analytic = grads.get(v).unwrap().clone();
        let numeric = numeric_grad(
            |m| {
                let mut t = Tape::new();
                let v = t.variable(m.clone());
                let o = build(&mut t, v);
                t.value(o).item()
            },
            &x,
        );
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-7, "gradient mismatch {err}: {analytic:?} vs {numeric:?}");
    }

    fn sample() -> Matrix {
        Matrix::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.1, 0.4, -0.5]])
    }

    #[test]
    fn softmax_layer_norm_gelu_grads() {
        check(
            |t, x| {
                let w = t.constant(Matrix::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.5, -0.3, 2.0]]));
                let s = t.softmax_rows(x);
                let l = t.layer_norm_rows(x);
                let g = t.gelu(l);
                let a = t.add(s, g);
                let m = t.mul(a, w);
                t.sum(m)
            },
            sample(),
        );
    }

    #[test]
    fn matmul_gather_concat_grads() {
        check(
            |t, x| {
                let xt = t.transpose(x);
                let p = t.matmul(x, xt);
                let q = t.matmul_t(x, x);
                let s = t.sub(p, q);
                let r = t.gather_rows(x, &[1, 0, 1]);
                let c = t.concat_cols(&[r, r]);
                let sl = t.slice_cols(c, 2, 3);
                let n = t.normalize_rows(sl);
                let cr = t.concat_rows(&[n, x]);
                let sq = t.mul(cr, cr);
                let ss = t.mul(s, p);
                let a = t.sum(sq);
                let b = t.sum(ss);
                t.add(a, b)
            },
            sample(),
        );
    }

    #[test]
    fn cross_entropy_and_contrastive_grads() {
        check(
            |t, x| t.cross_entropy_sum(x, Rc::new(vec![2, 0])),
            sample(),
        );
        let sim = Matrix::from_rows(&[vec![0.3, -0.2, 0.7], vec![0.1, 0.4, -0.5], vec![0.9, 0.2, 0.0]]);
        check(|t, x| t.contrastive(x, ContrastiveForm::PerSample), sim.clone());
        check(|t, x| t.contrastive(x, ContrastiveForm::LogOfSum), sim);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::scalar(2.0));
        let v = t.variable(Matrix::scalar(3.0));
        let m = t.mul(c, v);
        let g = t.backward(m);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(v).unwrap().item(), 2.0);
    }
}
