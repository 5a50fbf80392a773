//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! The tape is rebuilt for every forward pass: leaves are pushed first
//! (parameters and constants), every operation appends a node, and
//! [`Tape::backward`] walks the nodes in reverse creation order. Nothing is
//! shared across passes, so there is no graph-reuse bookkeeping to get wrong.
//!
//! All values are 64-bit floats and every op output is checked for
//! NaN/infinity on creation; a non-finite value is reported as a numeric
//! error naming the op that produced it.

pub mod checkpoint;
pub mod init;
pub mod optim;
pub mod params;
pub mod rng;

use crate::error::{Error, Result};

/// Dense multi-dimensional float array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    /// Populated by [`Tape::backward`]; same shape as `data`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value {bad} in tensor data")));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Padding behavior for [`Tape::unfold1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Symmetric zero padding; output position l sees inputs centered on l.
    Same,
    /// Left-only zero padding; output position l sees inputs l-k+1..=l.
    Causal,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { m: usize, row: usize },
    Scale { x: usize, c: f64 },
    ScaleByScalar { x: usize, s: usize },
    Relu { x: usize },
    Softsign { x: usize },
    Embed { table: usize, ids: Vec<usize> },
    // Masked inputs need no record here: masked outputs are exactly zero,
    // which already zeroes their gradient in the softmax backward rule.
    Softmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Dropout { x: usize, mask: Vec<f64> },
    Unfold1d { x: usize, k: usize, pad: Pad },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    SumAll { x: usize },
    MeanAll { x: usize },
    MeanAbsErr { pred: usize, target: Vec<f64> },
    BceWithLogits { logits: usize, targets: Vec<f64>, pos_weight: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::ScaleByScalar { .. } => "scale_by_scalar",
            Op::Relu { .. } => "relu",
            Op::Softsign { .. } => "softsign",
            Op::Embed { .. } => "embed",
            Op::Softmax { .. } => "softmax_lastdim",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Unfold1d { .. } => "unfold1d",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::MeanAbsErr { .. } => "mean_abs_err",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

/// Raw 2-D matrix multiply: A[m,k] * B[k,n] -> C[m,n].
///
/// i-k-j loop order keeps B and C accesses sequential; this is the hot
/// kernel of the whole crate.
pub fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
    c
}

/// Growable record of one forward pass.
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    backward_ran: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), backward_ran: false }
    }

    /// Push a leaf tensor; `requires_grad` marks it as a parameter to
    /// differentiate against.
    pub fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> TensorId {
        t.requires_grad = requires_grad;
        t.grad = None;
        let id = self.nodes.len();
        self.nodes.push(t);
        self.ops.push(Op::Leaf);
        TensorId(id)
    }

    /// Leaf from raw parts, without gradient tracking.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape, data)?, false))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: TensorId) -> f64 {
        self.nodes[id.0].data[0]
    }

    /// Gradient of the last `backward` call with respect to this node.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Result<TensorId> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("op {} produced non-finite value {bad}", op.name())));
        }
        let id = self.nodes.len();
        self.nodes.push(Tensor { shape, data, requires_grad, grad: None });
        self.ops.push(op);
        Ok(TensorId(id))
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn dims2(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what}: expected 2-D tensor, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims disagree: {k} vs {k2}")));
        }
        let data = matmul_2d(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], data, Op::Matmul { a: a.0, b: b.0 }, rg)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(x, "transpose")?;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push(vec![c, r], data, Op::Transpose { x: x.0 }, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::Shape(format!("add: shapes {sa:?} vs {sb:?}")));
        }
        let shape = sa.clone();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, data, Op::Add { a: a.0, b: b.0 }, rg)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::Shape(format!("mul: shapes {sa:?} vs {sb:?}")));
        }
        let shape = sa.clone();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, data, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    /// `[l,d] + [d]`, the row broadcast used for biases and per-sequence offsets.
    pub fn add_row(&mut self, m: TensorId, row: TensorId) -> Result<TensorId> {
        let (l, d) = self.dims2(m, "add_row matrix")?;
        let rs = &self.nodes[row.0].shape;
        if *rs != vec![d] {
            return Err(Error::Shape(format!("add_row: row shape {rs:?} vs matrix width {d}")));
        }
        let rd = self.nodes[row.0].data.clone();
        let mut data = self.nodes[m.0].data.clone();
        for i in 0..l {
            for j in 0..d {
                data[i * d + j] += rd[j];
            }
        }
        let rg = self.rg(m) || self.rg(row);
        self.push(vec![l, d], data, Op::AddRow { m: m.0, row: row.0 }, rg)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(shape, data, Op::Scale { x: x.0, c }, rg)
    }

    /// Multiply every element of `x` by the single element of `s` (shape `[1]`).
    pub fn scale_by_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.nodes[s.0].numel() != 1 {
            return Err(Error::Shape(format!(
                "scale_by_scalar: scalar operand has shape {:?}",
                self.nodes[s.0].shape
            )));
        }
        let sv = self.nodes[s.0].data[0];
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * sv).collect();
        let rg = self.rg(x) || self.rg(s);
        self.push(shape, data, Op::ScaleByScalar { x: x.0, s: s.0 }, rg)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(shape, data, Op::Relu { x: x.0 }, rg)
    }

    /// x / (1 + |x|), bounded in (-1, 1).
    pub fn softsign(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v / (1.0 + v.abs())).collect();
        let rg = self.rg(x);
        self.push(shape, data, Op::Softsign { x: x.0 }, rg)
    }

    /// Row lookup: `table[ids[i], :]` stacked into an `[ids.len(), d]` matrix.
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (rows, d) = self.dims2(table, "embed table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Parameter(format!("embed: id {bad} out of range 0..{rows}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&self.nodes[table.0].data[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(vec![ids.len(), d], data, Op::Embed { table: table.0, ids: ids.to_vec() }, rg)
    }

    /// Softmax along the last dimension, stabilized by max subtraction.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> Result<TensorId> {
        self.softmax_impl(x, None)
    }

    /// Softmax along the last dimension with a keep-mask: positions where
    /// `mask` is false get weight exactly 0 and receive no gradient. The mask
    /// has the same element count as `x`. Every slice must keep at least one
    /// position.
    pub fn masked_softmax_lastdim(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId> {
        if mask.len() != self.nodes[x.0].numel() {
            return Err(Error::Shape(format!(
                "masked_softmax: mask length {} vs {} elements",
                mask.len(),
                self.nodes[x.0].numel()
            )));
        }
        self.softmax_impl(x, Some(mask.to_vec()))
    }

    fn softmax_impl(&mut self, x: TensorId, mask: Option<Vec<bool>>) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::Shape("softmax: rank-0 input".into()))?;
        if d == 0 {
            return Err(Error::Shape("softmax: empty last dimension".into()));
        }
        let xd = &self.nodes[x.0].data;
        let numel = xd.len();
        let mut data = vec![0.0; numel];
        for start in (0..numel).step_by(d) {
            let row = &xd[start..start + d];
            let keep = |j: usize| mask.as_ref().map_or(true, |m| m[start + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Parameter("masked_softmax: a slice has no kept positions".into()));
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    data[start + j] = e;
                    sum += e;
                }
            }
            for j in 0..d {
                data[start + j] /= sum;
            }
        }
        let rg = self.rg(x);
        self.push(shape, data, Op::Softmax { x: x.0 }, rg)
    }

    /// Per-vector layer normalization over the last dimension with population
    /// variance: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm: rank-0 input".into()))?;
        if d == 0 {
            return Err(Error::Shape("layer_norm: empty last dimension".into()));
        }
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm: epsilon must be > 0, got {eps}")));
        }
        for (pid, label) in [(gamma, "gamma"), (beta, "beta")] {
            if self.nodes[pid.0].shape != vec![d] {
                return Err(Error::Shape(format!(
                    "layer_norm: {label} shape {:?} vs feature dim {d}",
                    self.nodes[pid.0].shape
                )));
            }
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut data = vec![0.0; xd.len()];
        for start in (0..xd.len()).step_by(d) {
            let row = &xd[start..start + d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[start + j] = gd[j] * (row[j] - mean) * inv_std + bd[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(shape, data, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }, rg)
    }

    /// Inverted dropout: when `active`, each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`; when
    /// inactive this is the identity. Deterministic for a given seed.
    pub fn dropout(&mut self, x: TensorId, rate: f64, active: bool, rng_seed: u64) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout: rate must be in [0,1), got {rate}")));
        }
        let shape = self.nodes[x.0].shape.clone();
        let n = self.nodes[x.0].numel();
        let mask: Vec<f64> = if active && rate > 0.0 {
            let keep_scale = 1.0 / (1.0 - rate);
            let mut r = rng::stream(rng_seed);
            (0..n).map(|_| if rng::uniform(&mut r) < rate { 0.0 } else { keep_scale }).collect()
        } else {
            vec![1.0; n]
        };
        let data: Vec<f64> = self.nodes[x.0].data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        self.push(shape, data, Op::Dropout { x: x.0, mask }, rg)
    }

    /// im2col for 1-D convolution over the sequence dimension: input `[l, c]`
    /// becomes `[l, k*c]` where output row `l` concatenates the `k` input rows
    /// in its receptive field (zero rows outside the sequence). A convolution
    /// is then `unfold1d` followed by `matmul` with a `[k*c, c_out]` weight.
    pub fn unfold1d(&mut self, x: TensorId, k: usize, pad: Pad) -> Result<TensorId> {
        let (l, c) = self.dims2(x, "unfold1d")?;
        if k == 0 {
            return Err(Error::Parameter("unfold1d: kernel size 0".into()));
        }
        let left = match pad {
            Pad::Same => (k - 1) / 2,
            Pad::Causal => k - 1,
        };
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; l * k * c];
        for i in 0..l {
            for dk in 0..k {
                let src = i as isize + dk as isize - left as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let src = src as usize;
                let dst = i * k * c + dk * c;
                data[dst..dst + c].copy_from_slice(&xd[src * c..(src + 1) * c]);
            }
        }
        let rg = self.rg(x);
        self.push(vec![l, k * c], data, Op::Unfold1d { x: x.0, k, pad }, rg)
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (l, d) = self.dims2(x, "slice_cols")?;
        if start + len > d {
            return Err(Error::Shape(format!("slice_cols: columns {start}..{} of width {d}", start + len)));
        }
        let xd = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(l * len);
        for i in 0..l {
            data.extend_from_slice(&xd[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(x);
        self.push(vec![l, len], data, Op::SliceCols { x: x.0, start, len }, rg)
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Parameter("concat_cols: empty part list".into()));
        }
        let (l, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (lp, dp) = self.dims2(p, "concat_cols")?;
            if lp != l {
                return Err(Error::Shape(format!("concat_cols: row counts {l} vs {lp}")));
            }
            widths.push(dp);
            total += dp;
        }
        let mut data = vec![0.0; l * total];
        let mut offset = 0usize;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = &self.nodes[p.0].data;
            for i in 0..l {
                data[i * total + offset..i * total + offset + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(vec![l, total], data, Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }, rg)
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::SumAll { x: x.0 }, rg)
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.nodes[x.0].numel();
        if n == 0 {
            return Err(Error::Shape("mean_all: empty tensor".into()));
        }
        let s: f64 = self.nodes[x.0].data.iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::MeanAll { x: x.0 }, rg)
    }

    /// Mean absolute error against a constant target of the same size.
    pub fn mean_abs_err(&mut self, pred: TensorId, target: &[f64]) -> Result<TensorId> {
        let n = self.nodes[pred.0].numel();
        if n != target.len() || n == 0 {
            return Err(Error::Shape(format!("mean_abs_err: {n} predictions vs {} targets", target.len())));
        }
        let s: f64 = self.nodes[pred.0]
            .data
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(pred);
        self.push(vec![1], vec![s], Op::MeanAbsErr { pred: pred.0, target: target.to_vec() }, rg)
    }

    /// Mean squared error against a constant target, built from existing ops.
    pub fn mean_sq_err(&mut self, pred: TensorId, target: &[f64]) -> Result<TensorId> {
        let shape = self.nodes[pred.0].shape.clone();
        let neg_t: Vec<f64> = target.iter().map(|t| -t).collect();
        let neg = self.constant(shape, neg_t)?;
        let diff = self.add(pred, neg)?;
        let sq = self.mul(diff, diff)?;
        self.mean_all(sq)
    }

    /// Numerically stable binary cross-entropy on logits, averaged over
    /// elements, with positive targets weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: &[f64], pos_weight: f64) -> Result<TensorId> {
        let n = self.nodes[logits.0].numel();
        if n != targets.len() || n == 0 {
            return Err(Error::Shape(format!("bce_with_logits: {n} logits vs {} targets", targets.len())));
        }
        let mut total = 0.0;
        for (&z, &y) in self.nodes[logits.0].data.iter().zip(targets) {
            let w = if y > 0.5 { pos_weight } else { 1.0 };
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            total += w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
        }
        let rg = self.rg(logits);
        self.push(
            vec![1],
            vec![total / n as f64],
            Op::BceWithLogits { logits: logits.0, targets: targets.to_vec(), pos_weight },
            rg,
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populate `grad` on every node reachable from `loss` that requires it.
    /// `loss` must be a scalar, and a tape accepts only one backward pass.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if self.backward_ran {
            return Err(Error::Parameter("backward already ran on this tape; record a new pass instead".into()));
        }
        self.backward_ran = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = self.ops[i].clone();
            self.propagate(i, &g, &op)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, node: usize, delta: &[f64], op_name: &'static str) -> Result<()> {
        if !self.nodes[node].requires_grad {
            return Ok(());
        }
        if let Some(bad) = delta.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("backward through {op_name} produced non-finite gradient {bad}")));
        }
        match &mut self.nodes[node].grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => self.nodes[node].grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    fn propagate(&mut self, out: usize, g: &[f64], op: &Op) -> Result<()> {
        let name = op.name();
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].requires_grad {
                    // dA = G * B^T
                    let bd = &self.nodes[*b].data;
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bd[p * n + j];
                        }
                    }
                    let da = matmul_2d(g, &bt, m, n, k);
                    self.accumulate(*a, &da, name)?;
                }
                if self.nodes[*b].requires_grad {
                    // dB = A^T * G
                    let ad = &self.nodes[*a].data;
                    let mut at = vec![0.0; k * m];
                    for i in 0..m {
                        for p in 0..k {
                            at[p * m + i] = ad[i * k + p];
                        }
                    }
                    let db = matmul_2d(&at, g, k, m, n);
                    self.accumulate(*b, &db, name)?;
                }
            }

            Op::Transpose { x } => {
                let (c, r) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = g[i * r + j];
                    }
                }
                self.accumulate(*x, &dx, name)?;
            }

            Op::Add { a, b } => {
                self.accumulate(*a, g, name)?;
                self.accumulate(*b, g, name)?;
            }

            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[*b].data).map(|(g, v)| g * v).collect();
                    self.accumulate(*a, &da, name)?;
                }
                if self.nodes[*b].requires_grad {
                    let db: Vec<f64> = g.iter().zip(&self.nodes[*a].data).map(|(g, v)| g * v).collect();
                    self.accumulate(*b, &db, name)?;
                }
            }

            Op::AddRow { m, row } => {
                self.accumulate(*m, g, name)?;
                if self.nodes[*row].requires_grad {
                    let d = self.nodes[*row].numel();
                    let mut dr = vec![0.0; d];
                    for (i, gv) in g.iter().enumerate() {
                        dr[i % d] += gv;
                    }
                    self.accumulate(*row, &dr, name)?;
                }
            }

            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|g| g * c).collect();
                self.accumulate(*x, &dx, name)?;
            }

            Op::ScaleByScalar { x, s } => {
                let sv = self.nodes[*s].data[0];
                if self.nodes[*x].requires_grad {
                    let dx: Vec<f64> = g.iter().map(|g| g * sv).collect();
                    self.accumulate(*x, &dx, name)?;
                }
                if self.nodes[*s].requires_grad {
                    let ds: f64 = g.iter().zip(&self.nodes[*x].data).map(|(g, v)| g * v).sum();
                    self.accumulate(*s, &[ds], name)?;
                }
            }

            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*x].data)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx, name)?;
            }

            Op::Softsign { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*x].data)
                    .map(|(g, &v)| {
                        let denom = 1.0 + v.abs();
                        g / (denom * denom)
                    })
                    .collect();
                self.accumulate(*x, &dx, name)?;
            }

            Op::Embed { table, ids } => {
                if self.nodes[*table].requires_grad {
                    let d = self.nodes[*table].shape[1];
                    let mut dt = vec![0.0; self.nodes[*table].numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                    self.accumulate(*table, &dt, name)?;
                }
            }

            Op::Softmax { x } => {
                // ds_j = s_j * (g_j - sum_i g_i s_i); masked positions have s = 0.
                let sd = &self.nodes[out].data;
                let d = *self.nodes[out].shape.last().unwrap();
                let mut dx = vec![0.0; sd.len()];
                for start in (0..sd.len()).step_by(d) {
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += g[start + j] * sd[start + j];
                    }
                    for j in 0..d {
                        dx[start + j] = sd[start + j] * (g[start + j] - dot);
                    }
                }
                self.accumulate(*x, &dx, name)?;
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.nodes[*x].shape.last().unwrap();
                let xd = self.nodes[*x].data.clone();
                let gd = self.nodes[*gamma].data.clone();
                let n = xd.len();
                let mut dx = vec![0.0; n];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for start in (0..n).step_by(d) {
                    let row = &xd[start..start + d];
                    let grow = &g[start..start + d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gd[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[start + j] = inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(*x, &dx, name)?;
                self.accumulate(*gamma, &dgamma, name)?;
                self.accumulate(*beta, &dbeta, name)?;
            }

            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(*x, &dx, name)?;
            }

            Op::Unfold1d { x, k, pad } => {
                let (l, c) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let left = match pad {
                    Pad::Same => (k - 1) / 2,
                    Pad::Causal => k - 1,
                };
                let mut dx = vec![0.0; l * c];
                for i in 0..l {
                    for dk in 0..*k {
                        let src = i as isize + dk as isize - left as isize;
                        if src < 0 || src >= l as isize {
                            continue;
                        }
                        let src = src as usize;
                        let from = i * k * c + dk * c;
                        for j in 0..c {
                            dx[src * c + j] += g[from + j];
                        }
                    }
                }
                self.accumulate(*x, &dx, name)?;
            }

            Op::SliceCols { x, start, len } => {
                let (l, d) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let mut dx = vec![0.0; l * d];
                for i in 0..l {
                    for j in 0..*len {
                        dx[i * d + start + j] = g[i * len + j];
                    }
                }
                self.accumulate(*x, &dx, name)?;
            }

            Op::ConcatCols { parts } => {
                let total = self.nodes[out].shape[1];
                let l = self.nodes[out].shape[0];
                let mut offset = 0usize;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    if self.nodes[p].requires_grad {
                        let mut dp = vec![0.0; l * w];
                        for i in 0..l {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(p, &dp, name)?;
                    }
                    offset += w;
                }
            }

            Op::SumAll { x } => {
                let dx = vec![g[0]; self.nodes[*x].numel()];
                self.accumulate(*x, &dx, name)?;
            }

            Op::MeanAll { x } => {
                let n = self.nodes[*x].numel() as f64;
                let dx = vec![g[0] / n; self.nodes[*x].numel()];
                self.accumulate(*x, &dx, name)?;
            }

            Op::MeanAbsErr { pred, target } => {
                let n = target.len() as f64;
                let dx: Vec<f64> = self.nodes[*pred]
                    .data
                    .iter()
                    .zip(target)
                    .map(|(p, t)| g[0] * (p - t).signum() / n)
                    .collect();
                self.accumulate(*pred, &dx, name)?;
            }

            Op::BceWithLogits { logits, targets, pos_weight } => {
                let n = targets.len() as f64;
                let dx: Vec<f64> = self.nodes[*logits]
                    .data
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| {
                        let w = if y > 0.5 { *pos_weight } else { 1.0 };
                        let sig = 1.0 / (1.0 + (-z).exp());
                        g[0] * w * (sig - y) / n
                    })
                    .collect();
                self.accumulate(*logits, &dx, name)?;
            }
        }
        Ok(())
    }
}
