//! Dense tensors with reverse-mode differentiation on a per-job tape.
//!
//! Values are plain row-major `f64` buffers. Differentiable computations are
//! recorded on a [`Graph`]; `backward` walks the tape in reverse and
//! accumulates gradients into every node that requires them. One graph is
//! confined to a single thread; independent graphs may run in parallel over
//! shared read-only weights.

use crate::error::{Error, Result};
use crate::Real;

/// Dense n-dimensional array of 64-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: Real) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: Real) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor (a 1-D tensor is treated as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Last-dimension size.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn item(&self) -> Real {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

pub type VarId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, Real),
    AddScalar(VarId),
    Matmul(VarId, VarId),
    /// a (m x k) times b^T where b is (n x k)
    MatmulNt(VarId, VarId),
    AddBias(VarId, VarId),
    /// y[i, j] = x[i, j] * s[i]
    RowScale(VarId, VarId),
    /// y[i, j] = x[i, j] + s[i]
    RowAdd(VarId, VarId),
    /// y[i, j] = (x[i, j] - mu[j]) / sigma[j], mu/sigma constant
    NormalizeChannels { x: VarId, sigma: Vec<Real> },
    Gelu(VarId),
    Sigmoid(VarId),
    Softplus(VarId),
    Exp(VarId),
    Log(VarId),
    SoftmaxRows(VarId),
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, eps: Real },
    CrossEntropy { logits: VarId, target: usize },
    Sum(VarId),
    Mean(VarId),
    SliceRows { x: VarId, start: usize, len: usize },
    SliceCols { x: VarId, start: usize, len: usize },
    ConcatRows(Vec<VarId>),
    ConcatCols(Vec<VarId>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

/// Tape of operations with one scalar root per backward pass.
///
/// Nodes are appended in execution order, so the vector index order is a
/// topological order and the reverse sweep visits each node exactly once.
/// Gradients accumulate across repeated `backward` calls until
/// [`Graph::zero_grads`] resets them.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        self.nodes.len() - 1
    }

    /// Insert a value that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf, false)
    }

    /// Insert a trainable leaf.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: VarId) -> Option<&[Real]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_shape(&self, a: VarId, b: VarId) -> Result<()> {
        if self.nodes[a].value.shape != self.nodes[b].value.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch: {:?} vs {:?}",
                self.nodes[a].value.shape, self.nodes[b].value.shape
            )));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b)?;
        let data = zip_map(&self.nodes[a].value.data, &self.nodes[b].value.data, |x, y| x + y);
        let t = Tensor { shape: self.nodes[a].value.shape.clone(), data };
        Ok(self.push(t, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b)?;
        let data = zip_map(&self.nodes[a].value.data, &self.nodes[b].value.data, |x, y| x - y);
        let t = Tensor { shape: self.nodes[a].value.shape.clone(), data };
        Ok(self.push(t, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b)?;
        let data = zip_map(&self.nodes[a].value.data, &self.nodes[b].value.data, |x, y| x * y);
        let t = Tensor { shape: self.nodes[a].value.shape.clone(), data };
        Ok(self.push(t, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&mut self, a: VarId, k: Real) -> VarId {
        let data = self.nodes[a].value.data.iter().map(|x| x * k).collect();
        let t = Tensor { shape: self.nodes[a].value.shape.clone(), data };
        let rg = self.nodes[a].requires_grad;
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: VarId, k: Real) -> VarId {
        let data = self.nodes[a].value.data.iter().map(|x| x + k).collect();
        let t = Tensor { shape: self.nodes[a].value.shape.clone(), data };
        let rg = self.nodes[a].requires_grad;
        self.push(t, Op::AddScalar(a), rg)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        if k != kb {
            return Err(Error::Dimension(format!(
                "matmul inner dims differ: {}x{} vs {}x{}",
                m, k, kb, n
            )));
        }
        let data = matmul_raw(&ta.data, &tb.data, m, k, n);
        let t = Tensor { shape: vec![m, n], data };
        Ok(self.push(t, Op::Matmul(a, b), self.rg(&[a, b])))
    }

    /// `a (m x k)` times `b^T`, with `b (n x k)`.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (n, kb) = (tb.rows(), tb.cols());
        if k != kb {
            return Err(Error::Dimension(format!(
                "matmul_nt inner dims differ: {}x{} vs ({}x{})^T",
                m, k, n, kb
            )));
        }
        let data = matmul_nt_raw(&ta.data, &tb.data, m, k, n);
        let t = Tensor { shape: vec![m, n], data };
        Ok(self.push(t, Op::MatmulNt(a, b), self.rg(&[a, b])))
    }

    /// Broadcast a length-`n` bias over the rows of an `m x n` tensor.
    pub fn add_bias(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let (tx, tb) = (&self.nodes[x].value, &self.nodes[b].value);
        let (m, n) = (tx.rows(), tx.cols());
        if tb.numel() != n {
            return Err(Error::Dimension(format!(
                "bias length {} does not match {} columns",
                tb.numel(),
                n
            )));
        }
        let mut data = tx.data.clone();
        for i in 0..m {
            for (d, bv) in data[i * n..(i + 1) * n].iter_mut().zip(&tb.data) {
                *d += bv;
            }
        }
        let t = Tensor { shape: tx.shape.clone(), data };
        Ok(self.push(t, Op::AddBias(x, b), self.rg(&[x, b])))
    }

    /// Broadcast a per-row scalar multiplicatively: `y[i, j] = x[i, j] * s[i]`.
    pub fn row_scale(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        let (tx, ts) = (&self.nodes[x].value, &self.nodes[s].value);
        let (m, n) = (tx.rows(), tx.cols());
        if ts.numel() != m {
            return Err(Error::Dimension(format!(
                "row factor length {} does not match {} rows",
                ts.numel(),
                m
            )));
        }
        let mut data = tx.data.clone();
        for i in 0..m {
            let sv = ts.data[i];
            for d in &mut data[i * n..(i + 1) * n] {
                *d *= sv;
            }
        }
        let t = Tensor { shape: tx.shape.clone(), data };
        Ok(self.push(t, Op::RowScale(x, s), self.rg(&[x, s])))
    }

    /// Broadcast a per-row scalar additively: `y[i, j] = x[i, j] + s[i]`.
    pub fn row_add(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        let (tx, ts) = (&self.nodes[x].value, &self.nodes[s].value);
        let (m, n) = (tx.rows(), tx.cols());
        if ts.numel() != m {
            return Err(Error::Dimension(format!(
                "row offset length {} does not match {} rows",
                ts.numel(),
                m
            )));
        }
        let mut data = tx.data.clone();
        for i in 0..m {
            let sv = ts.data[i];
            for d in &mut data[i * n..(i + 1) * n] {
                *d += sv;
            }
        }
        let t = Tensor { shape: tx.shape.clone(), data };
        Ok(self.push(t, Op::RowAdd(x, s), self.rg(&[x, s])))
    }

    /// Per-channel standardization against fixed statistics:
    /// `y[i, j] = (x[i, j] - mu[j]) / sigma[j]`.
    pub fn normalize_channels(&mut self, x: VarId, mu: &[Real], sigma: &[Real]) -> Result<VarId> {
        let tx = &self.nodes[x].value;
        let (m, n) = (tx.rows(), tx.cols());
        if mu.len() != n || sigma.len() != n {
            return Err(Error::Dimension(format!(
                "stats length {}/{} does not match {} channels",
                mu.len(),
                sigma.len(),
                n
            )));
        }
        let mut data = tx.data.clone();
        for i in 0..m {
            for (j, d) in data[i * n..(i + 1) * n].iter_mut().enumerate() {
                *d = (*d - mu[j]) / sigma[j];
            }
        }
        let t = Tensor { shape: tx.shape.clone(), data };
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, Op::NormalizeChannels { x, sigma: sigma.to_vec() }, rg))
    }

    // ---- nonlinearities ----

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let data = self.nodes[x].value.data.iter().map(|&v| gelu_f(v)).collect();
        let t = Tensor { shape: self.nodes[x].value.shape.clone(), data };
        let rg = self.nodes[x].requires_grad;
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let data = self.nodes[x].value.data.iter().map(|&v| sigmoid_f(v)).collect();
        let t = Tensor { shape: self.nodes[x].value.shape.clone(), data };
        let rg = self.nodes[x].requires_grad;
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn softplus(&mut self, x: VarId) -> VarId {
        let data = self.nodes[x].value.data.iter().map(|&v| softplus_f(v)).collect();
        let t = Tensor { shape: self.nodes[x].value.shape.clone(), data };
        let rg = self.nodes[x].requires_grad;
        self.push(t, Op::Softplus(x), rg)
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let data = self.nodes[x].value.data.iter().map(|v| v.exp()).collect();
        let t = Tensor { shape: self.nodes[x].value.shape.clone(), data };
        let rg = self.nodes[x].requires_grad;
        self.push(t, Op::Exp(x), rg)
    }

    /// Natural log. Non-positive inputs produce NaN/-inf which propagate.
    pub fn log(&mut self, x: VarId) -> VarId {
        let data = self.nodes[x].value.data.iter().map(|v| v.ln()).collect();
        let t = Tensor { shape: self.nodes[x].value.shape.clone(), data };
        let rg = self.nodes[x].requires_grad;
        self.push(t, Op::Log(x), rg)
    }

    /// Row-wise softmax over the last dimension, max-subtracted for stability.
    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let tx = &self.nodes[x].value;
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = tx.data.clone();
        for i in 0..m {
            softmax_row(&mut data[i * n..(i + 1) * n]);
        }
        let t = Tensor { shape: tx.shape.clone(), data };
        let rg = self.nodes[x].requires_grad;
        self.push(t, Op::SoftmaxRows(x), rg)
    }

    /// Last-dimension layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: Real) -> Result<VarId> {
        let tx = &self.nodes[x].value;
        let (m, n) = (tx.rows(), tx.cols());
        if n == 0 {
            return Err(Error::Dimension("layer_norm over zero channels".into()));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        if self.nodes[gamma].value.numel() != n || self.nodes[beta].value.numel() != n {
            return Err(Error::Dimension(format!(
                "layer_norm affine params must have length {}",
                n
            )));
        }
        let gam = &self.nodes[gamma].value.data;
        let bet = &self.nodes[beta].value.data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data[i * n..(i + 1) * n];
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv_std * gam[j] + bet[j];
            }
        }
        let t = Tensor { shape: tx.shape.clone(), data };
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: VarId, target: usize) -> Result<VarId> {
        let tl = &self.nodes[logits].value;
        let c = tl.numel();
        if target >= c {
            return Err(Error::Index(format!("target {} out of range for {} classes", target, c)));
        }
        let m = tl.data.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let lse = m + tl.data.iter().map(|v| (v - m).exp()).sum::<Real>().ln();
        let loss = lse - tl.data[target];
        let rg = self.nodes[logits].requires_grad;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }, rg))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: VarId) -> VarId {
        let s = self.nodes[x].value.data.iter().sum();
        let rg = self.nodes[x].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        let t = &self.nodes[x].value;
        let s = t.data.iter().sum::<Real>() / t.numel() as Real;
        let rg = self.nodes[x].requires_grad;
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    // ---- shape surgery ----

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let tx = &self.nodes[x].value;
        let (m, n) = (tx.rows(), tx.cols());
        if start + len > m {
            return Err(Error::Index(format!("row slice {}..{} out of {} rows", start, start + len, m)));
        }
        let data = tx.data[start * n..(start + len) * n].to_vec();
        let t = Tensor { shape: vec![len, n], data };
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, Op::SliceRows { x, start, len }, rg))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let tx = &self.nodes[x].value;
        let (m, n) = (tx.rows(), tx.cols());
        if start + len > n {
            return Err(Error::Index(format!("col slice {}..{} out of {} cols", start, start + len, n)));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&tx.data[i * n + start..i * n + start + len]);
        }
        let t = Tensor { shape: vec![m, len], data };
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, Op::SliceCols { x, start, len }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        let n = self.nodes[parts[0]].value.cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = &self.nodes[p].value;
            if t.cols() != n {
                return Err(Error::Dimension("concat_rows column mismatch".into()));
            }
            m += t.rows();
            data.extend_from_slice(&t.data);
        }
        let t = Tensor { shape: vec![m, n], data };
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let m = self.nodes[parts[0]].value.rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].value.cols()).collect();
        for &p in parts {
            if self.nodes[p].value.rows() != m {
                return Err(Error::Dimension("concat_cols row mismatch".into()));
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.nodes[p].value.data[i * w..(i + 1) * w];
                data[i * n + off..i * n + off + w].copy_from_slice(src);
                off += w;
            }
        }
        let t = Tensor { shape: vec![m, n], data };
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Existing gradients are cleared
    /// first, so repeated calls recompute rather than accumulate.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root].value.shape
            )));
        }
        self.zero_grads();
        self.accum(root, &[1.0]);
        for id in (0..=root).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let g = self.nodes[id].grad.clone().unwrap();
            let op = self.nodes[id].op.clone();
            self.backprop_one(id, &op, &g)?;
        }
        Ok(())
    }

    fn accum(&mut self, id: VarId, g: &[Real]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let n = self.nodes[id].value.numel();
        let buf = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; n]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    fn backprop_one(&mut self, id: VarId, op: &Op, g: &[Real]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(a, g);
                self.accum(b, g);
            }
            Op::Sub(a, b) => {
                self.accum(a, g);
                let neg: Vec<Real> = g.iter().map(|v| -v).collect();
                self.accum(b, &neg);
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, &self.nodes[b].value.data, |gv, bv| gv * bv);
                let gb = zip_map(g, &self.nodes[a].value.data, |gv, av| gv * av);
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            Op::Scale(a, k) => {
                let ga: Vec<Real> = g.iter().map(|v| v * k).collect();
                self.accum(a, &ga);
            }
            Op::AddScalar(a) => self.accum(a, g),
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.cols();
                if self.nodes[a].requires_grad {
                    // dA = g . B^T
                    let ga = matmul_nt_raw(g, &self.nodes[b].value.data, m, n, k);
                    self.accum(a, &ga);
                }
                if self.nodes[b].requires_grad {
                    // dB = A^T . g
                    let gb = matmul_tn_raw(&self.nodes[a].value.data, g, m, k, n);
                    self.accum(b, &gb);
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.rows();
                if self.nodes[a].requires_grad {
                    // dA = g . B
                    let ga = matmul_raw(g, &self.nodes[b].value.data, m, n, k);
                    self.accum(a, &ga);
                }
                if self.nodes[b].requires_grad {
                    // dB = g^T . A
                    let gb = matmul_tn_raw(g, &self.nodes[a].value.data, m, n, k);
                    self.accum(b, &gb);
                }
            }
            Op::AddBias(x, b) => {
                self.accum(x, g);
                if self.nodes[b].requires_grad {
                    let n = self.nodes[b].value.numel();
                    let mut gb = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (s, v) in gb.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    self.accum(b, &gb);
                }
            }
            Op::RowScale(x, s) => {
                let (m, n) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                if self.nodes[x].requires_grad {
                    let mut gx = g.to_vec();
                    for i in 0..m {
                        let sv = self.nodes[s].value.data[i];
                        for d in &mut gx[i * n..(i + 1) * n] {
                            *d *= sv;
                        }
                    }
                    self.accum(x, &gx);
                }
                if self.nodes[s].requires_grad {
                    let mut gs = vec![0.0; m];
                    for i in 0..m {
                        gs[i] = g[i * n..(i + 1) * n]
                            .iter()
                            .zip(&self.nodes[x].value.data[i * n..(i + 1) * n])
                            .map(|(gv, xv)| gv * xv)
                            .sum();
                    }
                    self.accum(s, &gs);
                }
            }
            Op::RowAdd(x, s) => {
                self.accum(x, g);
                if self.nodes[s].requires_grad {
                    let (m, n) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                    let gs: Vec<Real> = (0..m).map(|i| g[i * n..(i + 1) * n].iter().sum()).collect();
                    self.accum(s, &gs);
                }
            }
            Op::NormalizeChannels { x, ref sigma } => {
                let n = sigma.len();
                let gx: Vec<Real> = g.iter().enumerate().map(|(i, v)| v / sigma[i % n]).collect();
                self.accum(x, &gx);
            }
            Op::Gelu(x) => {
                let gx = zip_map(g, &self.nodes[x].value.data, |gv, xv| gv * gelu_grad_f(xv));
                self.accum(x, &gx);
            }
            Op::Sigmoid(x) => {
                let gx = zip_map(g, &self.nodes[id].value.data, |gv, y| gv * y * (1.0 - y));
                self.accum(x, &gx);
            }
            Op::Softplus(x) => {
                let gx = zip_map(g, &self.nodes[x].value.data, |gv, xv| gv * sigmoid_f(xv));
                self.accum(x, &gx);
            }
            Op::Exp(x) => {
                let gx = zip_map(g, &self.nodes[id].value.data, |gv, y| gv * y);
                self.accum(x, &gx);
            }
            Op::Log(x) => {
                let gx = zip_map(g, &self.nodes[x].value.data, |gv, xv| gv / xv);
                self.accum(x, &gx);
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = (self.nodes[id].value.rows(), self.nodes[id].value.cols());
                let y = &self.nodes[id].value.data;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(x, &gx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (m, n) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                let xd = self.nodes[x].value.data.clone();
                let gam = self.nodes[gamma].value.data.clone();
                let mut gx = vec![0.0; m * n];
                let mut ggam = vec![0.0; n];
                let mut gbet = vec![0.0; n];
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let (mean, inv_std) = row_moments(row, eps);
                    let xhat: Vec<Real> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let gy: Vec<Real> = (0..n).map(|j| gr[j] * gam[j]).collect();
                    let mean_gy = gy.iter().sum::<Real>() / n as Real;
                    let mean_gy_xhat =
                        gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<Real>() / n as Real;
                    for j in 0..n {
                        gx[i * n + j] = (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) * inv_std;
                        ggam[j] += gr[j] * xhat[j];
                        gbet[j] += gr[j];
                    }
                }
                self.accum(x, &gx);
                self.accum(gamma, &ggam);
                self.accum(beta, &gbet);
            }
            Op::CrossEntropy { logits, target } => {
                let tl = &self.nodes[logits].value;
                let mut p = tl.data.clone();
                softmax_row(&mut p);
                p[target] -= 1.0;
                for v in &mut p {
                    *v *= g[0];
                }
                self.accum(logits, &p);
            }
            Op::Sum(x) => {
                let n = self.nodes[x].value.numel();
                self.accum(x, &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x].value.numel();
                self.accum(x, &vec![g[0] / n as Real; n]);
            }
            Op::SliceRows { x, start, len } => {
                let n = self.nodes[x].value.cols();
                let m = self.nodes[x].value.rows();
                let mut gx = vec![0.0; m * n];
                gx[start * n..(start + len) * n].copy_from_slice(g);
                self.accum(x, &gx);
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accum(x, &gx);
            }
            Op::ConcatRows(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let sz = self.nodes[p].value.numel();
                    let chunk = g[off..off + sz].to_vec();
                    self.accum(p, &chunk);
                    off += sz;
                }
            }
            Op::ConcatCols(ref parts) => {
                let m = self.nodes[id].value.rows();
                let n = self.nodes[id].value.cols();
                let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].value.cols()).collect();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.nodes[p].requires_grad {
                        let mut gp = vec![0.0; m * w];
                        for i in 0..m {
                            gp[i * w..(i + 1) * w].copy_from_slice(&g[i * n + off..i * n + off + w]);
                        }
                        self.accum(p, &gp);
                    }
                    off += w;
                }
            }
        }
        Ok(())
    }
}

// ---- scalar kernels ----

const FRAC_1_SQRT_2PI: Real = 0.398_942_280_401_432_7;

/// Exact-erf GELU: `x * Phi(x)`.
pub fn gelu_f(x: Real) -> Real {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_f(x: Real) -> Real {
    let phi_cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    phi_cdf + x * phi_pdf
}

pub fn sigmoid_f(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large |x|.
pub fn softplus_f(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_row(row: &mut [Real]) {
    let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn row_moments(row: &[Real], eps: Real) -> (Real, Real) {
    let n = row.len() as Real;
    let mean = row.iter().sum::<Real>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn zip_map(a: &[Real], b: &[Real], f: impl Fn(Real, Real) -> Real) -> Vec<Real> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_raw(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a (m x k)` times `b^T` with `b (n x k)`.
fn matmul_nt_raw(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a^T (k x m) . b` with `a (m x k)`, `b (m x n)` -> `k x n`.
fn matmul_tn_raw(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences over a scalar function of a flat parameter
    /// vector; independent of the tape.
    fn finite_diff(f: &mut dyn FnMut(&[Real]) -> Real, x: &[Real], h: Real) -> Vec<Real> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(analytic: &[Real], numeric: &[Real]) -> Real {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, Real::max)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<Real> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.matmul(i2, i2).unwrap();
        assert_eq!(g.value(y).data, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_computed() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = rand_vec(&mut rng, 12);
        let b0 = rand_vec(&mut rng, 8);
        let mut f = |av: &[Real]| {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::new(vec![3, 4], av.to_vec()).unwrap());
            let b = g.constant(Tensor::new(vec![4, 2], b0.clone()).unwrap());
            let y = g.matmul(a, b).unwrap();
            let sq = g.mul(y, y).unwrap();
            g.sum(sq);
            g.value(g.nodes.len() - 1).item()
        };
        let numeric = finite_diff(&mut f, &a0, 1e-6);

        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![3, 4], a0.clone()).unwrap());
        let b = g.constant(Tensor::new(vec![4, 2], b0.clone()).unwrap());
        let y = g.matmul(a, b).unwrap();
        let sq = g.mul(y, y).unwrap();
        let root = g.sum(sq);
        g.backward(root).unwrap();
        assert!(max_rel_err(g.grad(a).unwrap(), &numeric) < 1e-6);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 8], 3.5));
        let gamma = g.constant(Tensor::full(vec![8], 1.0));
        let beta = g.constant(Tensor::zeros(vec![8]));
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        for v in &g.value(y).data {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let gamma = g.constant(Tensor::full(vec![2], 1.0));
        let beta = g.constant(Tensor::zeros(vec![2]));
        let y = g.layer_norm(x, gamma, beta, 1e-14).unwrap();
        assert!((g.value(y).data[0] - 1.0).abs() < 1e-6);
        assert!((g.value(y).data[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_vec(&mut rng, 16);
        let gam0 = rand_vec(&mut rng, 8);
        let bet0 = rand_vec(&mut rng, 8);
        let build = |g: &mut Graph, xv: &[Real]| {
            let x = g.leaf(Tensor::new(vec![2, 8], xv.to_vec()).unwrap());
            let gamma = g.leaf(Tensor::new(vec![8], gam0.clone()).unwrap());
            let beta = g.leaf(Tensor::new(vec![8], bet0.clone()).unwrap());
            let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
            let w = g.exp(y);
            let root = g.mean(w);
            (x, root)
        };
        let mut f = |xv: &[Real]| {
            let mut g = Graph::new();
            let (_, root) = build(&mut g, xv);
            g.value(root).item()
        };
        let numeric = finite_diff(&mut f, &x0, 1e-6);
        let mut g = Graph::new();
        let (x, root) = build(&mut g, &x0);
        g.backward(root).unwrap();
        assert!(max_rel_err(g.grad(x).unwrap(), &numeric) < 1e-5);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y).data, vec![0.5, 0.5]);

        let x = g.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax_rows(x);
        assert!(g.value(y).data[0] > 1.0 - 1e-12);
        assert!(g.value(y).data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 6], rand_vec(&mut rng, 24)).unwrap());
        let y = g.softmax_rows(x);
        for i in 0..4 {
            let s: Real = g.value(y).data[i * 6..(i + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_vec(&mut rng, 6);
        let w0 = rand_vec(&mut rng, 6);
        let mut f = |xv: &[Real]| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![6], xv.to_vec()).unwrap());
            let y = g.softmax_rows(x);
            let w = g.constant(Tensor::new(vec![6], w0.clone()).unwrap());
            let p = g.mul(y, w).unwrap();
            let root = g.sum(p);
            g.value(root).item()
        };
        let numeric = finite_diff(&mut f, &x0, 1e-6);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![6], x0.clone()).unwrap());
        let y = g.softmax_rows(x);
        let w = g.constant(Tensor::new(vec![6], w0.clone()).unwrap());
        let p = g.mul(y, w).unwrap();
        let root = g.sum(p);
        g.backward(root).unwrap();
        assert!(max_rel_err(g.grad(x).unwrap(), &numeric) < 1e-6);
    }

    #[test]
    fn elementwise_fixpoints() {
        assert_eq!(gelu_f(0.0), 0.0);
        assert!((sigmoid_f(5.0) - 0.993307).abs() < 1e-6);
        assert!((softplus_f(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_strictly_in_unit_interval() {
        for &x in &[-30.0, -5.0, 0.0, 5.0, 30.0] {
            let y = sigmoid_f(x);
            assert!(y > 0.0 && y < 1.0, "sigmoid({}) = {}", x, y);
        }
        // Saturation to the exact endpoints is expected in f64 and is what
        // makes the lambda = 1 transparency check bitwise.
        assert_eq!(sigmoid_f(800.0), 1.0);
        assert_eq!(sigmoid_f(-800.0), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.cross_entropy(l, 0).unwrap();
        assert!((g.value(y).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let l = g.constant(Tensor::new(vec![2], vec![500.0, -500.0]).unwrap());
        let y = g.cross_entropy(l, 0).unwrap();
        assert!(g.value(y).item().abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        assert!(matches!(g.cross_entropy(l, 3), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_vec(&mut rng, 5);
        let mut f = |xv: &[Real]| {
            let mut g = Graph::new();
            let l = g.leaf(Tensor::new(vec![5], xv.to_vec()).unwrap());
            let y = g.cross_entropy(l, 2).unwrap();
            g.value(y).item()
        };
        let numeric = finite_diff(&mut f, &x0, 1e-6);
        let mut g = Graph::new();
        let l = g.leaf(Tensor::new(vec![5], x0.clone()).unwrap());
        let y = g.cross_entropy(l, 2).unwrap();
        g.backward(y).unwrap();
        assert!(max_rel_err(g.grad(l).unwrap(), &numeric) < 1e-6);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let root = g.sum(x);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_half_mean_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq);
        let root = g.scale(m, 0.5);
        g.backward(root).unwrap();
        let got = g.grad(x).unwrap();
        for (i, expect) in [1.0 / 3.0, 2.0 / 3.0, 1.0].iter().enumerate() {
            assert!((got[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_recomputes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let root = g.sum(x);
        g.backward(root).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn gelu_softplus_row_ops_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = rand_vec(&mut rng, 12);
        let s0 = rand_vec(&mut rng, 3);
        let build = |g: &mut Graph, xv: &[Real], sv: &[Real]| {
            let x = g.leaf(Tensor::new(vec![3, 4], xv.to_vec()).unwrap());
            let s = g.leaf(Tensor::new(vec![3], sv.to_vec()).unwrap());
            let a = g.gelu(x);
            let sp = g.softplus(s);
            let b = g.row_scale(a, sp).unwrap();
            let c = g.row_add(b, s).unwrap();
            let root = g.mean(c);
            (x, s, root)
        };
        let mut fx = |xv: &[Real]| {
            let mut g = Graph::new();
            let (_, _, root) = build(&mut g, xv, &s0);
            g.value(root).item()
        };
        let nx = finite_diff(&mut fx, &x0, 1e-6);
        let mut fs = |sv: &[Real]| {
            let mut g = Graph::new();
            let (_, _, root) = build(&mut g, &x0, sv);
            g.value(root).item()
        };
        let ns = finite_diff(&mut fs, &s0, 1e-6);
        let mut g = Graph::new();
        let (x, s, root) = build(&mut g, &x0, &s0);
        g.backward(root).unwrap();
        assert!(max_rel_err(g.grad(x).unwrap(), &nx) < 1e-5);
        assert!(max_rel_err(g.grad(s).unwrap(), &ns) < 1e-5);
    }

    #[test]
    fn slice_concat_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0 = rand_vec(&mut rng, 12);
        let build = |g: &mut Graph, xv: &[Real]| {
            let x = g.leaf(Tensor::new(vec![3, 4], xv.to_vec()).unwrap());
            let top = g.slice_rows(x, 0, 1).unwrap();
            let rest = g.slice_rows(x, 1, 2).unwrap();
            let left = g.slice_cols(rest, 0, 2).unwrap();
            let right = g.slice_cols(rest, 2, 2).unwrap();
            let swapped = g.concat_cols(&[right, left]).unwrap();
            let back = g.concat_rows(&[swapped, top]).unwrap();
            let e = g.exp(back);
            let root = g.mean(e);
            (x, root)
        };
        let mut f = |xv: &[Real]| {
            let mut g = Graph::new();
            let (_, root) = build(&mut g, xv);
            g.value(root).item()
        };
        let numeric = finite_diff(&mut f, &x0, 1e-6);
        let mut g = Graph::new();
        let (x, root) = build(&mut g, &x0);
        g.backward(root).unwrap();
        assert!(max_rel_err(g.grad(x).unwrap(), &numeric) < 1e-5);
    }

    #[test]
    fn matmul_nt_and_normalize_channels_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let a0 = rand_vec(&mut rng, 8);
        let b0 = rand_vec(&mut rng, 12);
        let mu = rand_vec(&mut rng, 3);
        let sig: Vec<Real> = rand_vec(&mut rng, 3).iter().map(|v| v.abs() + 0.5).collect();
        let build = |g: &mut Graph, av: &[Real], bv: &[Real]| {
            let a = g.leaf(Tensor::new(vec![2, 4], av.to_vec()).unwrap());
            let b = g.leaf(Tensor::new(vec![3, 4], bv.to_vec()).unwrap());
            let c = g.matmul_nt(a, b).unwrap();
            let z = g.normalize_channels(c, &mu, &sig).unwrap();
            let sq = g.mul(z, z).unwrap();
            let root = g.mean(sq);
            (a, b, root)
        };
        let mut fa = |av: &[Real]| {
            let mut g = Graph::new();
            let (_, _, root) = build(&mut g, av, &b0);
            g.value(root).item()
        };
        let na = finite_diff(&mut fa, &a0, 1e-6);
        let mut fb = |bv: &[Real]| {
            let mut g = Graph::new();
            let (_, _, root) = build(&mut g, &a0, bv);
            g.value(root).item()
        };
        let nb = finite_diff(&mut fb, &b0, 1e-6);
        let mut g = Graph::new();
        let (a, b, root) = build(&mut g, &a0, &b0);
        g.backward(root).unwrap();
        assert!(max_rel_err(g.grad(a).unwrap(), &na) < 1e-5);
        assert!(max_rel_err(g.grad(b).unwrap(), &nb) < 1e-5);
    }
}
