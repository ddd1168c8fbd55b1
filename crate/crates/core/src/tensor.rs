//! Dense row-major matrices and a reverse-mode tape over them.
//!
//! Only the primitives the attention MIL graph needs are provided. All shapes
//! are explicit; the single broadcast is a `1×c` bias added to every row.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix {rows}x{cols}");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Matrix::new(1, n, data)
    }

    pub fn scalar(v: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_finite(self, op: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::Numeric(format!("non-finite output from {op}")))
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(self.rows, other.cols, out)?.check_finite("matmul")
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Adds the `1×cols` row `bias` to every row.
    pub fn add_bias(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Dimension(format!(
                "bias {}x{} for {}x{}",
                bias.rows, bias.cols, self.rows, self.cols
            )));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(self.cols) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Matrix::new(self.rows, self.cols, out)?.check_finite("add_bias")
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{op} {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Matrix::new(self.rows, self.cols, data)?.check_finite(op)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn elementwise_mul(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "elementwise_mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn tanh(&self) -> Matrix {
        self.map(f64::tanh)
    }

    pub fn log(&self) -> Result<Matrix> {
        self.map(f64::ln).check_finite("log")
    }

    pub fn scale(&self, s: f64) -> Result<Matrix> {
        self.map(|v| v * s).check_finite("scale")
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Matrix> {
        let mut out = self.data.clone();
        for row in out.chunks_mut(self.cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Matrix::new(self.rows, self.cols, out)?.check_finite("softmax_rows")
    }

    /// `weights` (1×N) times `x` (N×d): the weighted sum of the rows of `x`.
    pub fn weighted_sum_rows(weights: &Matrix, x: &Matrix) -> Result<Matrix> {
        if weights.rows != 1 {
            return Err(Error::Dimension(format!(
                "weights must be a row vector, got {}x{}",
                weights.rows, weights.cols
            )));
        }
        weights.matmul(x)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    Log(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Pick(NodeId, usize, usize),
    ClampMin(NodeId, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Records operations in topological order so gradients can be propagated
/// backward from a scalar node.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Number of leaves recorded so far.
    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Leaf)).count()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input: a parameter or a constant.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn weighted_sum_rows(&mut self, weights: NodeId, x: NodeId) -> Result<NodeId> {
        let v = Matrix::weighted_sum_rows(self.value(weights), self.value(x))?;
        Ok(self.push(v, Op::MatMul(weights, x)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_bias(self.value(bias))?;
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn elementwise_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).elementwise_mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).tanh();
        self.push(v, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).softmax_rows()?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).log()?;
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).scale(s)?;
        Ok(self.push(v, Op::Scale(a, s)))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        if !s.is_finite() {
            return Err(Error::Numeric("non-finite output from sum".into()));
        }
        Ok(self.push(Matrix::scalar(s), Op::Sum(a)))
    }

    /// Selects entry `(r, c)` as a 1×1 node.
    pub fn pick(&mut self, a: NodeId, r: usize, c: usize) -> Result<NodeId> {
        let m = self.value(a);
        if r >= m.rows || c >= m.cols {
            return Err(Error::Dimension(format!(
                "pick ({r},{c}) from {}x{}",
                m.rows, m.cols
            )));
        }
        let v = m.get(r, c);
        Ok(self.push(Matrix::scalar(v), Op::Pick(a, r, c)))
    }

    /// `max(a, floor)` elementwise; the gradient is blocked where the floor binds.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.value(a).map(|x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor))
    }

    /// Propagates d(loss)/d(node) to every node that feeds `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = self.value(loss);
        if root.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                root.rows, root.cols
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(a);
                    let bv = self.value(b);
                    accumulate(&mut grads, a, g.matmul(&bv.transpose())?);
                    accumulate(&mut grads, b, av.transpose().matmul(&g)?);
                }
                Op::Transpose(a) => accumulate(&mut grads, a, g.transpose()),
                Op::AddBias(a, bias) => {
                    let mut gb = vec![0.0; g.cols];
                    for row in g.data.chunks(g.cols) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, bias, Matrix::new(1, g.cols, gb)?);
                    accumulate(&mut grads, a, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, b, g.clone());
                    accumulate(&mut grads, a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, g.map(|v| -v));
                    accumulate(&mut grads, a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.elementwise_mul(self.value(b))?;
                    let gb = g.elementwise_mul(self.value(a))?;
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = g.data.iter().zip(&y.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads, a, Matrix::new(y.rows, y.cols, data)?);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut data = vec![0.0; y.data.len()];
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for c in 0..y.cols {
                            data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, a, Matrix::new(y.rows, y.cols, data)?);
                }
                Op::Log(a) => {
                    let x = self.value(a);
                    let data = g.data.iter().zip(&x.data).map(|(g, x)| g / x).collect();
                    accumulate(&mut grads, a, Matrix::new(x.rows, x.cols, data)?);
                }
                Op::Scale(a, s) => accumulate(&mut grads, a, g.map(|v| v * s)),
                Op::Sum(a) => {
                    let (r, c) = self.value(a).shape();
                    accumulate(&mut grads, a, Matrix::new(r, c, vec![g.data[0]; r * c])?);
                }
                Op::Pick(a, r, c) => {
                    let (rows, cols) = self.value(a).shape();
                    let mut m = Matrix::zeros(rows, cols);
                    m.set(r, c, g.data[0]);
                    accumulate(&mut grads, a, m);
                }
                Op::ClampMin(a, floor) => {
                    let x = self.value(a);
                    let data = g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, x)| if *x > floor { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a, Matrix::new(x.rows, x.cols, data)?);
                }
            }
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data.iter_mut().zip(&g.data) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random_matrix(rng: &mut seed::Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let m = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(m.softmax_rows().unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn tanh_of_zero() {
        assert_eq!(Matrix::scalar(0.0).tanh().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = seed::rng(11);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 2, 3);
            let b = random_matrix(&mut rng, 3, 2);
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
        assert!(matches!(a.add_bias(&Matrix::zeros(1, 2)), Err(Error::Dimension(_))));
        assert!(matches!(a.add(&Matrix::zeros(3, 2)), Err(Error::Dimension(_))));
    }

    #[test]
    fn log_of_zero_is_a_numeric_error() {
        assert!(matches!(Matrix::scalar(0.0).log(), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let mut rng = seed::rng(3);
        for _ in 0..100 {
            let m = random_matrix(&mut rng, 3, 5).scale(10.0).unwrap();
            let shift: f64 = rng.random_range(-50.0..50.0);
            let a = m.softmax_rows().unwrap();
            let b = m.map(|v| v + shift).softmax_rows().unwrap();
            for r in 0..3 {
                let s: f64 = a.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(a.row(r).iter().all(|v| *v > 0.0));
            }
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_of_linear_map_broadcasts_input() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::new(2, 3, vec![0.3, -0.2, 0.1, 0.5, 0.4, -0.7]).unwrap());
        let x = tape.leaf(Matrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Matrix::new(1, 2, vec![0.0, 0.0]).unwrap());
        let probs = tape.softmax_rows(logits).unwrap();
        let p = tape.pick(probs, 0, 0).unwrap();
        let lp = tape.log(p).unwrap();
        let loss = tape.scale(lp, -1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits).unwrap();
        assert!((g.data()[0] + 0.5).abs() < 1e-15);
        assert!((g.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = seed::rng(5);
        let a = random_matrix(&mut rng, 4, 7);
        let b = random_matrix(&mut rng, 7, 3);
        let x = a.matmul(&b).unwrap().tanh().softmax_rows().unwrap();
        let y = a.matmul(&b).unwrap().tanh().softmax_rows().unwrap();
        assert_eq!(x, y);
    }

    /// Every primitive against central differences through a composite graph.
    #[test]
    fn composite_graph_gradient_check() {
        let mut rng = seed::rng(99);
        let a0 = random_matrix(&mut rng, 3, 4);
        let b0 = random_matrix(&mut rng, 4, 2);
        let bias0 = random_matrix(&mut rng, 1, 2);
        let c0 = random_matrix(&mut rng, 3, 2);

        let eval = |a: &Matrix, tape_out: bool| -> (f64, Option<Matrix>) {
            let mut t = Tape::new();
            let an = t.leaf(a.clone());
            let bn = t.leaf(b0.clone());
            let biasn = t.leaf(bias0.clone());
            let cn = t.leaf(c0.clone());
            let h = t.matmul(an, bn).unwrap();
            let h = t.add_bias(h, biasn).unwrap();
            let h = t.tanh(h);
            let h = t.elementwise_mul(h, cn).unwrap();
            let ht = t.transpose(h);
            let s = t.softmax_rows(ht).unwrap();
            let s2 = t.sub(s, ht).unwrap();
            let s3 = t.add(s2, s).unwrap();
            let sq = t.elementwise_mul(s3, s3).unwrap();
            let p = t.pick(s, 1, 2).unwrap();
            let p = t.clamp_min(p, 1e-12);
            let lp = t.log(p).unwrap();
            let tot = t.sum(sq).unwrap();
            let tot = t.add(tot, lp).unwrap();
            let loss = t.scale(tot, 0.7).unwrap();
            let v = t.value(loss).data()[0];
            let g = if tape_out {
                Some(t.backward(loss).unwrap().get(an).unwrap().clone())
            } else {
                None
            };
            (v, g)
        };

        let (_, g) = eval(&a0, true);
        let g = g.unwrap();
        let step = 1e-5;
        for i in 0..a0.data().len() {
            let mut plus = a0.clone();
            plus.data_mut()[i] += step;
            let mut minus = a0.clone();
            minus.data_mut()[i] -= step;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * step);
            let an = g.data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-5, "coordinate {i}: analytic {an} vs numeric {fd}");
        }
    }
}
