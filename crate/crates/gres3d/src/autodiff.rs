//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Every operation executed through a [`Tape`] records enough information to
//! replay the chain rule backwards. Gradients are accumulated in reverse
//! execution order, which makes repeated backward passes over the same tape
//! bit-identical. The op set is deliberately small: matrix products, row
//! softmaxes, elementwise maps, reductions, row gathers and group pooling are
//! all a query/mask decoder needs.

use crate::error::{Error, Result};

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Leaves with `requires_grad` keep their gradient after `backward`.
    pub requires_grad: bool,
    /// Filled in by `Tape::backward`; same layout as `values`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("from_rows needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("from_rows got ragged rows".into()));
        }
        let values = rows.iter().flatten().copied().collect();
        Tensor::new(&[rows.len(), cols], values)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows of a 2-d tensor (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a 2-d tensor (the length for vectors).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    /// `a · bᵀ`
    MatmulNt { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    AddScalar { a: TensorId },
    MulScalar { a: TensorId, c: f64 },
    Relu { a: TensorId },
    Sigmoid { a: TensorId },
    Exp { a: TensorId },
    Ln { a: TensorId },
    Softplus { a: TensorId },
    SoftmaxRows { a: TensorId },
    LogSoftmaxRows { a: TensorId },
    NormalizeRows { a: TensorId },
    CenterColumns { a: TensorId },
    SumAll { a: TensorId },
    MeanRows { a: TensorId },
    GatherRows { a: TensorId, indices: Vec<usize> },
    PoolRows { a: TensorId, groups: Vec<usize>, counts: Vec<usize> },
    AddRowBroadcast { a: TensorId, bias: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Records executed operations for one forward pass plus its backward sweep.
///
/// A tape and its tensors belong to a single thread of execution; distinct
/// tapes are independent.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// Accumulating matmul kernels used by forward and backward passes. All
// reductions run in a fixed index order so replays are bit-identical.
fn mm_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where `a` is m×k and `b` is n×k.
fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += aᵀ · b` where `a` is m×k and `b` is m×n.
fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Squared-norm floor for `normalize_rows`.
const NORM_FLOOR: f64 = 1e-12;

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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
        Tape { nodes: Vec::new() }
    }

    /// Puts a tensor on the tape as an input node.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Convenience leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape, values)?))
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].tensor.values()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    /// Gradient of the last `backward` target w.r.t. this node.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    fn out_of(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> TensorId {
        let tensor = Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        };
        self.push(tensor, op)
    }

    fn dims2(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what} must be 2-d, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a · b` for a m×k and b k×n.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {m}x{k} vs {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        mm_nn_acc(self.values(a), self.values(b), m, k, n, &mut out);
        Ok(self.out_of(vec![m, n], out, Op::Matmul { a, b }))
    }

    /// `a · bᵀ` for a m×k and b n×k.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul_nt lhs")?;
        let (n, k2) = self.dims2(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt inner dimensions disagree: {m}x{k} vs {n}x{k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        mm_nt_acc(self.values(a), self.values(b), m, k, n, &mut out);
        Ok(self.out_of(vec![m, n], out, Op::MatmulNt { a, b }))
    }

    fn zip_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{name} needs equal shapes, got {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.out_of(self.shape(a).to_vec(), values, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape(a, b, "div", |x, y| x / y, Op::Div { a, b })
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let values = self.values(a).iter().map(|&x| x + c).collect();
        self.out_of(self.shape(a).to_vec(), values, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let values = self.values(a).iter().map(|&x| x * c).collect();
        self.out_of(self.shape(a).to_vec(), values, Op::MulScalar { a, c })
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let values = self.values(a).iter().map(|&x| f(x)).collect();
        self.out_of(self.shape(a).to_vec(), values, op)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::ln, Op::Ln { a })
    }

    /// Numerically stable `ln(1 + eˣ)`.
    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        self.unary(a, stable_softplus, Op::Softplus { a })
    }

    /// Row-wise softmax with the row maximum subtracted before
    /// exponentiation so large logits cannot overflow.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "softmax_rows input")?;
        if self.values(a).iter().any(|v| !v.is_finite()) {
            return Err(Error::Computation(
                "softmax_rows got a non-finite input".into(),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.values(a)[i * n..(i + 1) * n];
            let max = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let mut sum = 0.0;
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= sum;
            }
        }
        Ok(self.out_of(vec![m, n], out, Op::SoftmaxRows { a }))
    }

    /// Row-wise `x - logsumexp(x)`, stabilized the same way as
    /// `softmax_rows`.
    pub fn log_softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "log_softmax_rows input")?;
        if self.values(a).iter().any(|v| !v.is_finite()) {
            return Err(Error::Computation(
                "log_softmax_rows got a non-finite input".into(),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.values(a)[i * n..(i + 1) * n];
            let max = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        Ok(self.out_of(vec![m, n], out, Op::LogSoftmaxRows { a }))
    }

    /// Subtracts each column's mean over the rows of a m×n tensor.
    pub fn center_columns(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "center_columns input")?;
        let mut means = vec![0.0; n];
        for row in self.values(a).chunks(n) {
            for (mu, &v) in means.iter_mut().zip(row) {
                *mu += v;
            }
        }
        for mu in &mut means {
            *mu /= m as f64;
        }
        let mut out = vec![0.0; m * n];
        for (orow, row) in out.chunks_mut(n).zip(self.values(a).chunks(n)) {
            for ((o, &v), &mu) in orow.iter_mut().zip(row).zip(&means) {
                *o = v - mu;
            }
        }
        Ok(self.out_of(vec![m, n], out, Op::CenterColumns { a }))
    }

    /// Scales each row of a m×n tensor to (nearly) unit Euclidean norm;
    /// rows close to zero stay close to zero.
    pub fn normalize_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "normalize_rows input")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.values(a)[i * n..(i + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<f64>().max(NORM_FLOOR).sqrt();
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        Ok(self.out_of(vec![m, n], out, Op::NormalizeRows { a }))
    }

    /// Sum of every entry, as a 1-element tensor.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.values(a).iter().sum();
        self.out_of(vec![1], vec![s], Op::SumAll { a })
    }

    /// Per-row mean of a m×n tensor, as a length-m vector.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "mean_rows input")?;
        if n == 0 {
            return Err(Error::Shape("mean_rows over zero columns".into()));
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = self.values(a)[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
        }
        Ok(self.out_of(vec![m], out, Op::MeanRows { a }))
    }

    /// Selects rows of a 2-d tensor. Duplicate indices are allowed; their
    /// gradients accumulate back into the same source row.
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "gather_rows input")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&self.values(a)[i * n..(i + 1) * n]);
        }
        Ok(self.out_of(
            vec![indices.len(), n],
            out,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Mean-pools rows of a m×n tensor into `n_groups` rows; `groups[i]`
    /// names the output row that input row `i` belongs to. Every group
    /// must be non-empty.
    pub fn pool_rows(&mut self, a: TensorId, groups: &[usize], n_groups: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "pool_rows input")?;
        if groups.len() != m {
            return Err(Error::Shape(format!(
                "pool_rows got {} group labels for {m} rows",
                groups.len()
            )));
        }
        if let Some(&bad) = groups.iter().find(|&&g| g >= n_groups) {
            return Err(Error::InvalidArgument(format!(
                "pool_rows group {bad} out of range for {n_groups} groups"
            )));
        }
        let mut counts = vec![0usize; n_groups];
        for &g in groups {
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Structure(format!("pool_rows group {empty} is empty")));
        }
        let mut out = vec![0.0; n_groups * n];
        for (i, &g) in groups.iter().enumerate() {
            let row = &self.values(a)[i * n..(i + 1) * n];
            for (o, &v) in out[g * n..(g + 1) * n].iter_mut().zip(row) {
                *o += v;
            }
        }
        for (g, &c) in counts.iter().enumerate() {
            for o in &mut out[g * n..(g + 1) * n] {
                *o /= c as f64;
            }
        }
        Ok(self.out_of(
            vec![n_groups, n],
            out,
            Op::PoolRows {
                a,
                groups: groups.to_vec(),
                counts,
            },
        ))
    }

    /// Adds a length-n bias vector to every row of a m×n tensor.
    pub fn add_row_broadcast(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "add_row_broadcast input")?;
        let blen = self.tensor(bias).len();
        if blen != n {
            return Err(Error::Shape(format!(
                "bias of length {blen} cannot broadcast over {m}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.values(a)[i * n..(i + 1) * n];
            for ((o, &v), &b) in out[i * n..(i + 1) * n].iter_mut().zip(row).zip(self.values(bias)) {
                *o = v + b;
            }
        }
        Ok(self.out_of(vec![m, n], out, Op::AddRowBroadcast { a, bias }))
    }

    /// Affine–rectifier chain: every layer is `x·W + b`, with a rectifier
    /// between layers and none after the last.
    pub fn mlp_forward(&mut self, x: TensorId, layers: &[(TensorId, TensorId)]) -> Result<TensorId> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("mlp_forward needs at least one layer".into()));
        }
        let mut h = x;
        for (li, &(w, b)) in layers.iter().enumerate() {
            let a = self.matmul(h, w)?;
            h = self.add_row_broadcast(a, b)?;
            if li + 1 < layers.len() {
                h = self.relu(h);
            }
        }
        Ok(h)
    }

    /// Backpropagates from a scalar node, filling `grad` on every node.
    /// Gradient accumulation follows reverse tape order exactly, so
    /// repeating `backward` on the same tape is bit-identical.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensor(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward target must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.values(loss)[0].is_finite() {
            return Err(Error::Computation(format!(
                "backward target is non-finite: {}",
                self.values(loss)[0]
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.tensor.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            let op = self.nodes[idx].op.clone();
            let go = std::mem::take(&mut grads[idx]);
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    // dA += dC · Bᵀ ; dB += Aᵀ · dC
                    mm_nt_acc(&go, self.values(b), m, n, k, &mut grads[a.0]);
                    mm_tn_acc(self.values(a), &go, m, k, n, &mut grads[b.0]);
                }
                Op::MatmulNt { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[0];
                    // C = A·Bᵀ: dA += dC · B ; dB += dCᵀ · A
                    mm_nn_acc(&go, self.values(b), m, n, k, &mut grads[a.0]);
                    mm_tn_acc(&go, self.values(a), m, n, k, &mut grads[b.0]);
                }
                Op::Add { a, b } => {
                    for (g, &d) in grads[a.0].iter_mut().zip(&go) {
                        *g += d;
                    }
                    for (g, &d) in grads[b.0].iter_mut().zip(&go) {
                        *g += d;
                    }
                }
                Op::Sub { a, b } => {
                    for (g, &d) in grads[a.0].iter_mut().zip(&go) {
                        *g += d;
                    }
                    for (g, &d) in grads[b.0].iter_mut().zip(&go) {
                        *g -= d;
                    }
                }
                Op::Mul { a, b } => {
                    for i in 0..go.len() {
                        grads[a.0][i] += go[i] * self.values(b)[i];
                    }
                    for i in 0..go.len() {
                        grads[b.0][i] += go[i] * self.values(a)[i];
                    }
                }
                Op::Div { a, b } => {
                    for i in 0..go.len() {
                        let bv = self.values(b)[i];
                        grads[a.0][i] += go[i] / bv;
                        grads[b.0][i] -= go[i] * self.values(a)[i] / (bv * bv);
                    }
                }
                Op::AddScalar { a } => {
                    for (g, &d) in grads[a.0].iter_mut().zip(&go) {
                        *g += d;
                    }
                }
                Op::MulScalar { a, c } => {
                    for (g, &d) in grads[a.0].iter_mut().zip(&go) {
                        *g += d * c;
                    }
                }
                Op::Relu { a } => {
                    for i in 0..go.len() {
                        if self.values(a)[i] > 0.0 {
                            grads[a.0][i] += go[i];
                        }
                    }
                }
                Op::Sigmoid { a } => {
                    for i in 0..go.len() {
                        let y = self.nodes[idx].tensor.values()[i];
                        grads[a.0][i] += go[i] * y * (1.0 - y);
                    }
                }
                Op::Exp { a } => {
                    for i in 0..go.len() {
                        grads[a.0][i] += go[i] * self.nodes[idx].tensor.values()[i];
                    }
                }
                Op::Ln { a } => {
                    for i in 0..go.len() {
                        grads[a.0][i] += go[i] / self.values(a)[i];
                    }
                }
                Op::Softplus { a } => {
                    for i in 0..go.len() {
                        grads[a.0][i] += go[i] * sigmoid(self.values(a)[i]);
                    }
                }
                Op::SoftmaxRows { a } => {
                    let n = self.shape(a)[1];
                    let y = self.nodes[idx].tensor.values();
                    for (r, chunk) in go.chunks(n).enumerate() {
                        let yrow = &y[r * n..(r + 1) * n];
                        let dot: f64 = chunk.iter().zip(yrow).map(|(&d, &v)| d * v).sum();
                        for (j, (&d, &v)) in chunk.iter().zip(yrow).enumerate() {
                            grads[a.0][r * n + j] += v * (d - dot);
                        }
                    }
                }
                Op::LogSoftmaxRows { a } => {
                    let n = self.shape(a)[1];
                    let y = self.nodes[idx].tensor.values();
                    for (r, chunk) in go.chunks(n).enumerate() {
                        let total: f64 = chunk.iter().sum();
                        for (j, &d) in chunk.iter().enumerate() {
                            let p = y[r * n + j].exp();
                            grads[a.0][r * n + j] += d - p * total;
                        }
                    }
                }
                Op::NormalizeRows { a } => {
                    let n = self.shape(a)[1];
                    for (r, chunk) in go.chunks(n).enumerate() {
                        let row = &self.values(a)[r * n..(r + 1) * n];
                        let norm = row.iter().map(|&v| v * v).sum::<f64>().max(NORM_FLOOR).sqrt();
                        let y: Vec<f64> = row.iter().map(|&v| v / norm).collect();
                        let dot: f64 = chunk.iter().zip(&y).map(|(&d, &v)| d * v).sum();
                        for (j, (&d, &v)) in chunk.iter().zip(&y).enumerate() {
                            grads[a.0][r * n + j] += (d - v * dot) / norm;
                        }
                    }
                }
                Op::CenterColumns { a } => {
                    let n = self.shape(a)[1];
                    let m = go.len() / n;
                    let mut col_sums = vec![0.0; n];
                    for chunk in go.chunks(n) {
                        for (s, &d) in col_sums.iter_mut().zip(chunk) {
                            *s += d;
                        }
                    }
                    for (i, &d) in go.iter().enumerate() {
                        grads[a.0][i] += d - col_sums[i % n] / m as f64;
                    }
                }
                Op::SumAll { a } => {
                    let d = go[0];
                    for g in grads[a.0].iter_mut() {
                        *g += d;
                    }
                }
                Op::MeanRows { a } => {
                    let n = self.shape(a)[1];
                    for (r, &d) in go.iter().enumerate() {
                        for g in grads[a.0][r * n..(r + 1) * n].iter_mut() {
                            *g += d / n as f64;
                        }
                    }
                }
                Op::GatherRows { a, indices } => {
                    let n = self.shape(a)[1];
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..n {
                            grads[a.0][src * n + j] += go[r * n + j];
                        }
                    }
                }
                Op::PoolRows { a, groups, counts } => {
                    let n = self.shape(a)[1];
                    for (i, &g) in groups.iter().enumerate() {
                        let c = counts[g] as f64;
                        for j in 0..n {
                            grads[a.0][i * n + j] += go[g * n + j] / c;
                        }
                    }
                }
                Op::AddRowBroadcast { a, bias } => {
                    let n = self.shape(bias)[self.shape(bias).len() - 1];
                    for (g, &d) in grads[a.0].iter_mut().zip(&go) {
                        *g += d;
                    }
                    for (i, &d) in go.iter().enumerate() {
                        grads[bias.0][i % n] += d;
                    }
                }
            }
            self.nodes[idx].tensor.grad = Some(go);
        }
        Ok(())
    }
}

/// Compares the reverse-mode gradient of a scalar-valued graph against
/// central finite differences, coordinate by coordinate, and returns the
/// worst relative error (denominator `max(|analytic|, |numeric|, 1e-8)`).
pub fn grad_check<F>(params: &[Tensor], build: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.tensor(loss).len() != 1 {
            return Err(Error::Shape("grad_check target must be scalar".into()));
        }
        let v = tape.values(loss)[0];
        if !v.is_finite() {
            return Err(Error::Computation(format!("grad_check loss is non-finite: {v}")));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("backward fills every grad").to_vec())
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for ei in 0..grads.len() {
            let orig = work[pi].values()[ei];
            work[pi].values_mut()[ei] = orig + step;
            let up = eval(&work)?;
            work[pi].values_mut()[ei] = orig - step;
            let down = eval(&work)?;
            work[pi].values_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * step);
            let denom = grads[ei].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((grads[ei] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape, values.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = tape
            .constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.values(c), tape.values(a));
    }

    #[test]
    fn matmul_one_by_one() {
        let mut tape = Tape::new();
        let a = tape.constant(&[1, 1], vec![2.0]).unwrap();
        let b = tape.constant(&[1, 1], vec![3.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(c), &[6.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = 1234u64;
        let mut next = move || {
            // xorshift; values in [-1, 1)
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 52) as f64 * 2.0 - 1.0
        };
        let a: Vec<f64> = (0..20).map(|_| next()).collect();
        let b: Vec<f64> = (0..15).map(|_| next()).collect();

        // independent triple loop
        let mut expect = vec![0.0; 4 * 3];
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for l in 0..5 {
                    acc += a[i * 5 + l] * b[l * 3 + j];
                }
                expect[i * 3 + j] = acc;
            }
        }

        let mut tape = Tape::new();
        let ta = tape.constant(&[4, 5], a).unwrap();
        let tb = tape.constant(&[5, 3], b).unwrap();
        let c = tape.matmul(ta, tb).unwrap();
        for (got, want) in tape.values(c).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_backward_satisfies_adjoint_identity() {
        // loss = <W, A·B> gives dB = Aᵀ·W, so <W, A·B> must equal <dB, B>.
        let mut rng = 99u64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 52) as f64 * 2.0 - 1.0
        };
        let a: Vec<f64> = (0..12).map(|_| next()).collect();
        let b: Vec<f64> = (0..20).map(|_| next()).collect();
        let w: Vec<f64> = (0..15).map(|_| next()).collect();

        let mut tape = Tape::new();
        let ta = tape.leaf(tensor(&[3, 4], &a).with_grad());
        let tb = tape.leaf(tensor(&[4, 5], &b).with_grad());
        let tw = tape.constant(&[3, 5], w).unwrap();
        let c = tape.matmul(ta, tb).unwrap();
        let prod = tape.mul(tw, c).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();

        let lhs = tape.values(loss)[0];
        let rhs: f64 = tape
            .grad(tb)
            .unwrap()
            .iter()
            .zip(&b)
            .map(|(&g, &v)| g * v)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 4], vec![3.0; 4]).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        for &v in tape.values(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let vals = vec![0.3, -1.2, 4.0, 2.2, 0.0, -0.5];
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 3], vals.clone()).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.values(y).chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted: Vec<f64> = vals.iter().map(|v| v + 7.5).collect();
        let xs = tape.constant(&[2, 3], shifted).unwrap();
        let ys = tape.softmax_rows(xs).unwrap();
        for (a, b) in tape.values(y).to_vec().iter().zip(tape.values(ys)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(tape.softmax_rows(x), Err(Error::Computation(_))));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        // random 3x4 input, random linear functional on the output
        let x = tensor(
            &[3, 4],
            &[0.1, -0.4, 0.9, 0.3, 1.4, -1.0, 0.2, 0.0, -0.7, 0.5, 0.8, -0.2],
        );
        let w: Vec<f64> = vec![0.3, -0.8, 0.5, 1.1, -0.2, 0.9, 0.4, -1.3, 0.7, 0.1, -0.6, 0.2];
        let err = grad_check(
            &[x],
            |tape, ids| {
                let c = tape.constant(&[3, 4], w.clone())?;
                let y = tape.softmax_rows(ids[0])?;
                let p = tape.mul(c, y)?;
                Ok(tape.sum_all(p))
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax jvp error {err}");
    }

    #[test]
    fn mlp_zero_weights_gives_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 3], vec![1.0; 6]).unwrap();
        let w1 = tape.constant(&[3, 4], vec![0.0; 12]).unwrap();
        let b1 = tape.constant(&[4], vec![0.0; 4]).unwrap();
        let w2 = tape.constant(&[4, 2], vec![0.0; 8]).unwrap();
        let b2 = tape.constant(&[2], vec![0.0; 2]).unwrap();
        let y = tape.mlp_forward(x, &[(w1, b1), (w2, b2)]).unwrap();
        assert!(tape.values(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_identity_passes_nonnegative_input_through() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 2], vec![1.0, 0.0, 2.0, 3.0]).unwrap();
        let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = tape.constant(&[2], vec![0.0; 2]).unwrap();
        let y = tape.mlp_forward(x, &[(eye, b), (eye, b)]).unwrap();
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn mlp_matches_straight_line_oracle() {
        let x: Vec<f64> = vec![0.5, -1.0, 2.0];
        let w1: Vec<f64> = vec![0.2, -0.3, 0.7, 0.1, -0.4, 0.6];
        let b1: Vec<f64> = vec![0.05, -0.1];
        let w2: Vec<f64> = vec![1.5, -0.8];
        let b2: Vec<f64> = vec![0.3];

        // by hand: h = relu(x·W1 + b1); y = h·W2 + b2
        let mut h = vec![0.0; 2];
        for j in 0..2 {
            let mut acc = b1[j];
            for l in 0..3 {
                acc += x[l] * w1[l * 2 + j];
            }
            h[j] = acc.max(0.0);
        }
        let want = h[0] * w2[0] + h[1] * w2[1] + b2[0];

        let mut tape = Tape::new();
        let tx = tape.constant(&[1, 3], x).unwrap();
        let tw1 = tape.constant(&[3, 2], w1).unwrap();
        let tb1 = tape.constant(&[2], b1).unwrap();
        let tw2 = tape.constant(&[2, 1], w2).unwrap();
        let tb2 = tape.constant(&[1], b2).unwrap();
        let y = tape.mlp_forward(tx, &[(tw1, tb1), (tw2, tb2)]).unwrap();
        assert!((tape.values(y)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn normalize_rows_unit_norm_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 3], vec![3.0, 0.0, 4.0, 0.0, 0.0, 0.0]).unwrap();
        let y = tape.normalize_rows(x).unwrap();
        assert!((tape.values(y)[0] - 0.6).abs() < 1e-15);
        assert!((tape.values(y)[2] - 0.8).abs() < 1e-15);
        assert!(tape.values(y)[3..].iter().all(|&v| v == 0.0));

        let w: Vec<f64> = vec![0.4, -0.9, 0.3, 1.2, 0.2, -0.5];
        let err = grad_check(
            &[tensor(&[2, 3], &[0.7, -1.1, 0.4, 2.0, 0.3, -0.8])],
            |tape, ids| {
                let c = tape.constant(&[2, 3], w.clone())?;
                let y = tape.normalize_rows(ids[0])?;
                let p = tape.mul(c, y)?;
                Ok(tape.sum_all(p))
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "normalize_rows gradient error {err}");
    }

    #[test]
    fn grad_check_quadratic() {
        let x = tensor(&[1, 3], &[1.0, -2.0, 3.0]);
        let err = grad_check(
            &[x],
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                Ok(tape.sum_all(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "quadratic error {err}");
    }

    #[test]
    fn bce_gradient_at_zero_logit() {
        // softplus(x) - x*y at x=0, y=1 has gradient sigmoid(0) - 1 = -0.5
        let x = tensor(&[1, 1], &[0.0]).with_grad();
        let mut tape = Tape::new();
        let id = tape.leaf(x);
        let label = tape.constant(&[1, 1], vec![1.0]).unwrap();
        let sp = tape.softplus(id);
        let xy = tape.mul(id, label).unwrap();
        let diff = tape.sub(sp, xy).unwrap();
        let loss = tape.sum_all(diff);
        tape.backward(loss).unwrap();
        assert!((tape.grad(id).unwrap()[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2, 2], &[0.3, -0.7, 1.2, 0.4]).with_grad());
        let w = tape.leaf(tensor(&[2, 2], &[0.9, 0.1, -0.5, 0.8]).with_grad());
        let c = tape.matmul(x, w).unwrap();
        let s = tape.sigmoid(c);
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        let g1x = tape.grad(x).unwrap().to_vec();
        let g1w = tape.grad(w).unwrap().to_vec();
        tape.zero_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &g1x[..]);
        assert_eq!(tape.grad(w).unwrap(), &g1w[..]);
    }

    #[test]
    fn gather_rows_accumulates_duplicate_indices() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let g = tape.gather_rows(x, &[0, 0, 1]).unwrap();
        let loss = tape.sum_all(g);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn pool_rows_rejects_empty_group() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 1], vec![1.0, 3.0]).unwrap();
        assert!(matches!(
            tape.pool_rows(x, &[0, 0], 2),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn pool_rows_group_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3, 1], vec![1.0, 3.0, 5.0]).unwrap();
        let y = tape.pool_rows(x, &[0, 0, 1], 2).unwrap();
        assert_eq!(tape.values(y), &[2.0, 5.0]);
    }
}
