use super::gemm::gemm;
use super::params::ParamSet;
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

/// Backward rule of a custom operation: receives the parent values, the
/// output value and the output gradient, returns one gradient per parent.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Relu(Var),
    Exp(Var),
    Log { x: Var, floor: f64 },
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LogSumExpCols(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    SegmentMean { x: Var, lens: Vec<usize> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    Dot(Var, Var),
    Sum(Var),
    Reshape(Var),
    MeanAxis1(Var),
    PairConcat(Var),
    PairDiff(Var),
    GatherMean { table: Var, groups: Vec<Vec<usize>> },
    Pick { x: Var, idx: Vec<usize> },
    Custom { parents: Vec<Var>, backward: BackwardFn },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Nodes are appended in evaluation order, so
/// every node's inputs precede it and a single reverse sweep suffices.
///
/// A tape supports exactly one [`backward`](Tape::backward) call; a second call
/// returns [`TensorError::TapeConsumed`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward target with respect to `v`, if `v`
    /// received any. Tracked leaves that the loss never touched return zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        match self.grads.get(v.0) {
            Some(Some(g)) => Some(Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap()),
            _ if self.consumed && node.requires_grad => Some(Tensor::zeros(node.value.shape())),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies every parameter onto the tape. The returned vector is indexed by
    /// [`ParamId`](super::ParamId). Parameters for which `trainable` returns
    /// false become constants.
    pub fn bind_with(&mut self, params: &ParamSet, trainable: impl Fn(&str) -> bool) -> Vec<Var> {
        params
            .iter()
            .map(|p| {
                if trainable(&p.name) {
                    self.leaf(p.value.clone())
                } else {
                    self.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn bind(&mut self, params: &ParamSet) -> Vec<Var> {
        self.bind_with(params, |_| true)
    }

    /// Binds every parameter as a constant (inference).
    pub fn bind_frozen(&mut self, params: &ParamSet) -> Vec<Var> {
        self.bind_with(params, |_| false)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !is_matrix(av) || !is_matrix(bv) || av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !is_matrix(av) {
            return Err(TensorError::Usage(format!(
                "transpose needs a matrix, got {:?}",
                av.shape()
            )));
        }
        let (r, c) = (av.rows(), av.cols());
        let out = transpose_data(r, c, av.data());
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    // ---- elementwise ------------------------------------------------------

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        Ok(av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(av.shape().to_vec(), out).unwrap();
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x + c).collect();
        let value = Tensor::new(av.shape().to_vec(), out).unwrap();
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// `x[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if !is_matrix(xv) || bv.numel() != xv.cols() {
            return Err(shape_err("add_row", xv, bv));
        }
        let n = xv.cols();
        let out = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % n])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[m×n] + u[m]`, broadcasting `u` over columns.
    pub fn add_col(&mut self, x: Var, u: Var) -> Result<Var> {
        let (xv, uv) = (self.value(x), self.value(u));
        if !is_matrix(xv) || uv.numel() != xv.rows() {
            return Err(shape_err("add_col", xv, uv));
        }
        let n = xv.cols();
        let out = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + uv.data()[i / n])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddCol(x, u), &[x, u]))
    }

    /// Rectifier. The subgradient at exactly zero is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(av.shape().to_vec(), out).unwrap();
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x.exp()).collect();
        let value = Tensor::new(av.shape().to_vec(), out).unwrap();
        self.push(value, Op::Exp(a), &[a])
    }

    /// `ln(max(x, floor))`; entries at or below the floor get zero gradient.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x.max(floor).ln()).collect();
        let value = Tensor::new(av.shape().to_vec(), out).unwrap();
        self.push(value, Op::Log { x: a, floor }, &[a])
    }

    // ---- row-wise normalisations ------------------------------------------

    /// Numerically stable softmax of every row of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !is_matrix(av) || av.numel() == 0 {
            return Err(TensorError::Empty { op: "softmax_rows" });
        }
        let n = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    /// `log Σ_j exp(x_ij)` for each row, giving a vector of length `m`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !is_matrix(av) || av.numel() == 0 {
            return Err(TensorError::Empty { op: "logsumexp_rows" });
        }
        let out = av.data().chunks(av.cols()).map(logsumexp).collect();
        Ok(self.push(Tensor::vector(out), Op::LogSumExpRows(a), &[a]))
    }

    /// `log Σ_i exp(x_ij)` for each column, giving a vector of length `n`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !is_matrix(av) || av.numel() == 0 {
            return Err(TensorError::Empty { op: "logsumexp_cols" });
        }
        let (r, c) = (av.rows(), av.cols());
        let t = transpose_data(r, c, av.data());
        let out = t.chunks(r).map(logsumexp).collect();
        Ok(self.push(Tensor::vector(out), Op::LogSumExpCols(a), &[a]))
    }

    /// Per-row layer normalisation with affine scale `gamma` and shift `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Usage("layer_norm: eps must be positive".into()));
        }
        let xv = self.value(x);
        if !is_matrix(xv) || xv.cols() == 0 {
            return Err(TensorError::Empty { op: "layer_norm" });
        }
        let d = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != d || bv.numel() != d {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- structural -------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_cols" })?;
        let rows = self.value(*first).rows();
        for p in parts {
            let pv = self.value(*p);
            if !is_matrix(pv) || pv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), pv));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_rows" })?;
        let cols = self.value(*first).cols();
        for p in parts {
            let pv = self.value(*p);
            if !is_matrix(pv) || pv.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), pv));
            }
        }
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if !is_matrix(xv) || start + len > xv.cols() {
            return Err(TensorError::Shape {
                op: "slice_cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = (0..xv.rows())
            .flat_map(|r| xv.row(r)[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(vec![xv.rows(), len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if !is_matrix(xv) || start + len > xv.rows() {
            return Err(TensorError::Shape {
                op: "slice_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let c = xv.cols();
        let out = xv.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], out)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    // ---- reductions -------------------------------------------------------

    /// Mean over axis 0 of a matrix: `[m×n] → [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).rows();
        let pooled = self.segment_mean_rows(x, &[m])?;
        self.reshape(pooled, vec![self.value(x).cols()])
    }

    /// Max over axis 0 of a matrix: `[m×n] → [n]`. The gradient goes to the
    /// first row attaining the maximum.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).rows();
        let pooled = self.segment_max_rows(x, &[m])?;
        self.reshape(pooled, vec![self.value(x).cols()])
    }

    /// Mean-pools consecutive row segments of the given lengths:
    /// `[Σlens × n] → [len(lens) × n]`.
    pub fn segment_mean_rows(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        check_segments("segment_mean_rows", xv, lens)?;
        let n = xv.cols();
        let mut out = vec![0.0; lens.len() * n];
        let mut start = 0;
        for (s, &len) in lens.iter().enumerate() {
            let dst = &mut out[s * n..(s + 1) * n];
            for r in start..start + len {
                for (d, v) in dst.iter_mut().zip(xv.row(r)) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d /= len as f64);
            start += len;
        }
        let value = Tensor::new(vec![lens.len(), n], out)?;
        Ok(self.push(
            value,
            Op::SegmentMean {
                x,
                lens: lens.to_vec(),
            },
            &[x],
        ))
    }

    /// Max-pools consecutive row segments; ties go to the lowest row index.
    pub fn segment_max_rows(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        check_segments("segment_max_rows", xv, lens)?;
        let n = xv.cols();
        let mut out = vec![f64::NEG_INFINITY; lens.len() * n];
        let mut argmax = vec![0usize; lens.len() * n];
        let mut start = 0;
        for (s, &len) in lens.iter().enumerate() {
            for r in start..start + len {
                for (c, v) in xv.row(r).iter().enumerate() {
                    let k = s * n + c;
                    if *v > out[k] {
                        out[k] = *v;
                        argmax[k] = r;
                    }
                }
            }
            start += len;
        }
        let value = Tensor::new(vec![lens.len(), n], out)?;
        Ok(self.push(value, Op::SegmentMax { x, argmax }, &[x]))
    }

    /// Inner product of two equal-length tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.numel() != bv.numel() {
            return Err(shape_err("dot", av, bv));
        }
        let s = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over the second axis of an `[N×M×d]` tensor, giving `[N×d]`.
    pub fn mean_axis1(&mut self, r: Var) -> Result<Var> {
        let rv = self.value(r);
        let &[n, m, d] = rv.shape() else {
            return Err(TensorError::Usage(format!(
                "mean_axis1 needs a rank-3 tensor, got {:?}",
                rv.shape()
            )));
        };
        if m == 0 {
            return Err(TensorError::Empty { op: "mean_axis1" });
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let dst = &mut out[i * d..(i + 1) * d];
            for j in 0..m {
                let src = &rv.data()[(i * m + j) * d..(i * m + j + 1) * d];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|o| *o /= m as f64);
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::MeanAxis1(r), &[r]))
    }

    /// All ordered row pairs: `[N×d] → [N²×2d]`, row `i·N+j` is `[x_i ; x_j]`.
    pub fn pair_concat(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !is_matrix(xv) {
            return Err(TensorError::Usage("pair_concat needs a matrix".into()));
        }
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(n * n * 2 * d);
        for i in 0..n {
            for j in 0..n {
                out.extend_from_slice(xv.row(i));
                out.extend_from_slice(xv.row(j));
            }
        }
        let value = Tensor::new(vec![n * n, 2 * d], out)?;
        Ok(self.push(value, Op::PairConcat(x), &[x]))
    }

    /// All ordered row differences: `[N×d] → [N²×d]`, row `i·N+j` is `x_i − x_j`.
    pub fn pair_diff(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !is_matrix(xv) {
            return Err(TensorError::Usage("pair_diff needs a matrix".into()));
        }
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(n * n * d);
        for i in 0..n {
            for j in 0..n {
                out.extend(xv.row(i).iter().zip(xv.row(j)).map(|(a, b)| a - b));
            }
        }
        let value = Tensor::new(vec![n * n, d], out)?;
        Ok(self.push(value, Op::PairDiff(x), &[x]))
    }

    /// Row `g` of the output is the mean of the `table` rows listed in
    /// `groups[g]` (embedding lookup with averaging).
    pub fn gather_mean(&mut self, table: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let tv = self.value(table);
        if !is_matrix(tv) {
            return Err(TensorError::Usage("gather_mean needs a matrix table".into()));
        }
        let (v, d) = (tv.rows(), tv.cols());
        let mut out = vec![0.0; groups.len() * d];
        for (g, idx) in groups.iter().enumerate() {
            if idx.is_empty() {
                return Err(TensorError::Empty { op: "gather_mean" });
            }
            let dst = &mut out[g * d..(g + 1) * d];
            for &i in idx {
                if i >= v {
                    return Err(TensorError::Usage(format!(
                        "gather_mean: row {i} out of range for table with {v} rows"
                    )));
                }
                for (o, x) in dst.iter_mut().zip(tv.row(i)) {
                    *o += x;
                }
            }
            dst.iter_mut().for_each(|o| *o /= idx.len() as f64);
        }
        let value = Tensor::new(vec![groups.len(), d], out)?;
        Ok(self.push(
            value,
            Op::GatherMean {
                table,
                groups: groups.to_vec(),
            },
            &[table],
        ))
    }

    /// Selects entries by flat (row-major) index into a vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= xv.numel()) {
            return Err(TensorError::Usage(format!(
                "pick: index {bad} out of range for {:?}",
                xv.shape()
            )));
        }
        let out = idx.iter().map(|&i| xv.data()[i]).collect();
        Ok(self.push(
            Tensor::vector(out),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Operation with a caller-supplied forward value and backward rule.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(
            value,
            Op::Custom {
                parents: parents.to_vec(),
                backward,
            },
            parents,
        )
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Populates gradients of `loss` (a one-element tensor) for every tracked
    /// node. Fan-out contributions accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &mut |ga| gemm(m, n, k, g, false, bv.data(), true, ga, true));
                acc(*b, &mut |gb| gemm(k, m, n, av.data(), true, g, false, gb, true));
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let t = transpose_data(r, c, g);
                acc(*a, &mut |ga| add_into(ga, &t));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::AddRow(x, b) => {
                let n = out.cols();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::AddCol(x, u) => {
                let n = out.cols();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*u, &mut |gu| {
                    for (i, row) in g.chunks(n).enumerate() {
                        gu[i] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out.data()[i];
                }
            }),
            Op::Log { x, floor } => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > *floor {
                            gx[i] += g[i] / xv[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                acc(*a, &mut |ga| {
                    for ((gr, yr), dr) in ga.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                        let dotp: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dotp);
                        }
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let av = self.value(*a);
                let n = av.cols();
                acc(*a, &mut |ga| {
                    for (i, (gr, xr)) in ga.chunks_mut(n).zip(av.data().chunks(n)).enumerate() {
                        let lse = out.data()[i];
                        for j in 0..n {
                            gr[j] += g[i] * (xr[j] - lse).exp();
                        }
                    }
                });
            }
            Op::LogSumExpCols(a) => {
                let av = self.value(*a);
                let n = av.cols();
                acc(*a, &mut |ga| {
                    for (k, (gk, xk)) in ga.iter_mut().zip(av.data()).enumerate() {
                        let j = k % n;
                        *gk += g[j] * (xk - out.data()[j]).exp();
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let gam = self.value(*gamma).data();
                acc(*x, &mut |gx| {
                    for (r, (gxr, (gr, hr))) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d).zip(xhat.chunks(d)))
                        .enumerate()
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            gxr[j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, &mut |gp| {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            add_into(row, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    acc(*p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let total = self.value(*x).cols();
                let w = out.cols();
                acc(*x, &mut |gx| {
                    for (r, row) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * total + start..r * total + start + w], row);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                acc(*x, &mut |gx| add_into(&mut gx[start * c..start * c + g.len()], g));
            }
            Op::SegmentMean { x, lens } => {
                let n = out.cols();
                acc(*x, &mut |gx| {
                    let mut r = 0;
                    for (s, &len) in lens.iter().enumerate() {
                        let src = &g[s * n..(s + 1) * n];
                        for _ in 0..len {
                            for (o, v) in gx[r * n..(r + 1) * n].iter_mut().zip(src) {
                                *o += v / len as f64;
                            }
                            r += 1;
                        }
                    }
                });
            }
            Op::SegmentMax { x, argmax } => {
                let n = out.cols();
                acc(*x, &mut |gx| {
                    for (k, &r) in argmax.iter().enumerate() {
                        gx[r * n + k % n] += g[k];
                    }
                });
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| ga.iter_mut().zip(bv).for_each(|(x, y)| *x += g[0] * y));
                acc(*b, &mut |gb| gb.iter_mut().zip(av).for_each(|(x, y)| *x += g[0] * y));
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::MeanAxis1(r) => {
                let &[n, m, d] = self.value(*r).shape() else { unreachable!() };
                acc(*r, &mut |gr| {
                    for i in 0..n {
                        let src = &g[i * d..(i + 1) * d];
                        for j in 0..m {
                            for (o, v) in gr[(i * m + j) * d..(i * m + j + 1) * d].iter_mut().zip(src) {
                                *o += v / m as f64;
                            }
                        }
                    }
                });
            }
            Op::PairConcat(x) => {
                let (n, d) = (self.value(*x).rows(), self.value(*x).cols());
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        for j in 0..n {
                            let row = &g[(i * n + j) * 2 * d..(i * n + j + 1) * 2 * d];
                            add_into(&mut gx[i * d..(i + 1) * d], &row[..d]);
                            add_into(&mut gx[j * d..(j + 1) * d], &row[d..]);
                        }
                    }
                });
            }
            Op::PairDiff(x) => {
                let (n, d) = (self.value(*x).rows(), self.value(*x).cols());
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        for j in 0..n {
                            let row = &g[(i * n + j) * d..(i * n + j + 1) * d];
                            add_into(&mut gx[i * d..(i + 1) * d], row);
                            for (o, v) in gx[j * d..(j + 1) * d].iter_mut().zip(row) {
                                *o -= v;
                            }
                        }
                    }
                });
            }
            Op::GatherMean { table, groups } => {
                let d = out.cols();
                acc(*table, &mut |gt| {
                    for (gi, idx) in groups.iter().enumerate() {
                        let src = &g[gi * d..(gi + 1) * d];
                        let w = 1.0 / idx.len() as f64;
                        for &i in idx {
                            for (o, v) in gt[i * d..(i + 1) * d].iter_mut().zip(src) {
                                *o += v * w;
                            }
                        }
                    }
                });
            }
            Op::Pick { x, idx } => acc(*x, &mut |gx| {
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g[k];
                }
            }),
            Op::Custom { parents, backward } => {
                let vals: Vec<&Tensor> = parents.iter().map(|p| self.value(*p)).collect();
                let pg = backward(&vals, out, g);
                for (p, gp) in parents.iter().zip(pg) {
                    acc(*p, &mut |buf| add_into(buf, &gp));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn transpose_data(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

fn check_segments(op: &'static str, x: &Tensor, lens: &[usize]) -> Result<()> {
    if !is_matrix(x) || lens.iter().sum::<usize>() != x.rows() {
        return Err(TensorError::Shape {
            op,
            lhs: x.shape().to_vec(),
            rhs: lens.to_vec(),
        });
    }
    if lens.contains(&0) {
        return Err(TensorError::Empty { op });
    }
    Ok(())
}
