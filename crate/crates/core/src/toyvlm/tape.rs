//! Matrix-valued reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated; calling
//! [`Tape::backward`] on a `1x1` node walks the record in reverse and returns
//! the partial derivative of that scalar with respect to every node.
//!
//! ```
//! use rsalign::toyvlm::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::row(vec![1.0, -2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let f = tape.sum(sq);
//! let grads = tape.backward(f).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 6.0]);
//! ```

use crate::error::{invalid, shape_err, Result};

use super::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    /// `a * b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// Broadcast a `1 x c` row onto every row of `a`.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    /// Summed negative log-likelihood of `targets` under row softmax; keeps
    /// the softmax probabilities for the backward pass.
    CrossEntropy(Var, Vec<usize>, Matrix),
    LayerNormRows(Var, f64),
    L2NormalizeRows(Var),
    /// Scalar node with caller-supplied local gradients.
    Custom(Vec<(Var, Matrix)>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of one scalar with respect to every recorded node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, zero when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Number of scalar entries held across all nodes.
    pub fn scalar_count(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Records an input. Parameters and constants are both leaves; the
    /// caller decides which gradients to use.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(&self.value(b).transpose())?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_assign_scaled(self.value(b), 1.0);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if self.value(row).shape() != (1, c) {
            return Err(shape_err!(
                "add_row: {:?} onto {r}x{c}",
                self.value(row).shape()
            ));
        }
        let mut v = self.value(a).clone();
        let b = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, y) in v.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (r, c) = self.value(a).shape();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Matrix::new(r, c, data)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a).reshape(rows, cols)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let m = self.value(a);
        if start + width > m.cols() || width == 0 {
            return Err(invalid!(
                "slice_cols {start}..{} of {} columns",
                start + width,
                m.cols()
            ));
        }
        let mut data = Vec::with_capacity(m.rows() * width);
        for r in 0..m.rows() {
            data.extend_from_slice(&m.row_slice(r)[start..start + width]);
        }
        let v = Matrix::new(m.rows(), width, data)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| invalid!("concat of nothing"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err!("concat_cols row mismatch"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let v = Matrix::new(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| invalid!("concat of nothing"))?;
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(shape_err!("concat_rows column mismatch"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Matrix::new(data.len() / cols, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if let Some(bad) = rows.iter().find(|&&r| r >= m.rows()) {
            return Err(invalid!("row {bad} out of range for {} rows", m.rows()));
        }
        let mut data = Vec::with_capacity(rows.len() * m.cols());
        for &r in rows {
            data.extend_from_slice(m.row_slice(r));
        }
        let v = Matrix::new(rows.len(), m.cols(), data)?;
        Ok(self.push(v, Op::SelectRows(a, rows.to_vec())))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// `-sum_r log softmax(a)_r[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let m = self.value(logits);
        if targets.len() != m.rows() {
            return Err(shape_err!(
                "{} targets for {} logit rows",
                targets.len(),
                m.rows()
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= m.cols()) {
            return Err(invalid!("target {bad} outside vocabulary of {}", m.cols()));
        }
        let probs = softmax_rows(m);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = m.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy(logits, targets.to_vec(), probs),
        ))
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let c = m.cols() as f64;
        let mut out = m.clone();
        for r in 0..m.rows() {
            let row = m.row_slice(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c;
            let s = (var + eps).sqrt();
            for (j, x) in row.iter().enumerate() {
                out.set(r, j, (x - mean) / s);
            }
        }
        self.push(out, Op::LayerNormRows(a, eps))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let mut out = m.clone();
        for r in 0..m.rows() {
            let n = m.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return Err(crate::error::Error::DegenerateVector(format!(
                    "row {r} has zero norm"
                )));
            }
            for j in 0..m.cols() {
                out.set(r, j, m.get(r, j) / n);
            }
        }
        Ok(self.push(out, Op::L2NormalizeRows(a)))
    }

    /// Scalar node whose value and local gradients were computed elsewhere.
    pub fn custom_scalar(&mut self, value: f64, locals: Vec<(Var, Matrix)>) -> Result<Var> {
        for (v, g) in &locals {
            if self.value(*v).shape() != g.shape() {
                return Err(shape_err!(
                    "custom gradient {:?} for node of shape {:?}",
                    g.shape(),
                    self.value(*v).shape()
                ));
            }
        }
        Ok(self.push(Matrix::scalar(value), Op::Custom(locals)))
    }

    /// Reverse sweep from a `1x1` node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            return Err(invalid!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign_scaled(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(&bv.transpose())?);
                acc(*b, av.transpose().matmul(g)?);
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(bv)?);
                acc(*b, g.transpose().matmul(av)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut sums = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (s, x) in sums.iter_mut().zip(g.row_slice(r)) {
                        *s += x;
                    }
                }
                acc(*row, Matrix::row(sums));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                acc(*a, Matrix::new(g.rows(), g.cols(), ga)?);
                acc(*b, Matrix::new(g.rows(), g.cols(), gb)?);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::new(r, c, vec![g.item(); r * c])?);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, g.reshape(r, c)?);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..g.cols() {
                        d.set(i, start + j, g.get(i, j));
                    }
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.value(*p).shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            d.set(i, j, g.get(i, offset + j));
                        }
                    }
                    offset += c;
                    acc(*p, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.value(*p).shape();
                    let d = Matrix::new(r, c, g.data()[offset * c..(offset + r) * c].to_vec())?;
                    offset += r;
                    acc(*p, d);
                }
            }
            Op::SelectRows(a, rows) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for (i, &src) in rows.iter().enumerate() {
                    for j in 0..c {
                        let cur = d.get(src, j);
                        d.set(src, j, cur + g.get(i, j));
                    }
                }
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = out.clone();
                for r in 0..out.rows() {
                    let y = out.row_slice(r);
                    let gy = g.row_slice(r);
                    let inner: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..out.cols() {
                        d.set(r, j, y[j] * (gy[j] - inner));
                    }
                }
                acc(*a, d);
            }
            Op::CrossEntropy(a, targets, probs) => {
                let mut d = probs.map(|p| p * g.item());
                for (r, &t) in targets.iter().enumerate() {
                    let cur = d.get(r, t);
                    d.set(r, t, cur - g.item());
                }
                acc(*a, d);
            }
            Op::LayerNormRows(a, eps) => {
                let x = self.value(*a);
                let n = x.cols() as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let row = x.row_slice(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let s = (var + eps).sqrt();
                    let yhat = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(yhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..x.cols() {
                        d.set(r, j, (gr[j] - g_mean - yhat[j] * gy_mean) / s);
                    }
                }
                acc(*a, d);
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let inner: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..x.cols() {
                        d.set(r, j, (gr[j] - y[j] * inner) / n);
                    }
                }
                acc(*a, d);
            }
            Op::Custom(locals) => {
                for (v, local) in locals {
                    acc(*v, local.map(|x| x * g.item()));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = m.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            out.set(r, j, e / z);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_gradient_is_exact() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::new(2, 2, vec![0.5, -1.5, 2.0, 3.25]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let f = t.sum(sq);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, -3.0, 4.0, 6.5]);
    }

    #[test]
    fn constant_graph_and_non_scalar_terminal() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::row(vec![1.0, 2.0]));
        let unused = t.leaf(Matrix::row(vec![7.0]));
        let c = t.leaf(Matrix::scalar(4.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.wrt(a).data(), &[0.0, 0.0]);
        assert_eq!(g.wrt(unused).data(), &[0.0]);
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let y = t.add(x, x).unwrap();
        let z = t.mul(y, x).unwrap(); // 2x^2
        let g = t.backward(z).unwrap();
        assert_eq!(g.wrt(x).item(), 12.0);
    }
}
