//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A `Graph` is a Wengert tape: forward calls record one node per
//! primitive, `backward` replays the tape in reverse and accumulates
//! vector-Jacobian products. Tensors are rank-1 or rank-2, stored as
//! `Vec<f64>`; scalars have shape `[1]`.
//!
//! Precision: carriers are always f64. In `Precision::F32` mode every
//! primitive output is rounded through f32, so values match a 32-bit
//! pipeline while the tape code stays monomorphic. Oracles and
//! determinism tests run in `Precision::F64`.

use crate::ctc;
use crate::error::{CoreError, Result};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Numeric precision of forward results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

/// A persistent tensor: parameter or buffer living across steps.
///
/// Gradient accumulation is additive; callers zero grads between steps.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(CoreError::Shape {
                op: "tensor",
                detail: format!("shape {:?} does not fit {} elements", shape, data.len()),
            });
        }
        Ok(Tensor {
            data,
            shape,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            data: vec![0.0; numel],
            shape,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }
}

/// Recorded primitive. Inputs always precede the output on the tape.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    BroadcastAddRow { a: usize, bias: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    SliceCols { a: usize, start: usize, len: usize },
    SliceRows { a: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Gelu { a: usize },
    Embedding { table: usize, indices: Vec<usize> },
    MaskRows { x: usize, rows: Vec<usize>, embed: usize },
    FramePatches { x: usize, kernel: usize, stride: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    GatherNllMean { logp: usize, targets: Vec<usize>, rows: Vec<usize> },
    CtcNll { logp: usize, label: Vec<usize>, blank: usize },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// The tape. One per training step or evaluation forward.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    /// Persistent per-leaf gradients, accumulated across backward calls.
    leaf_grads: Vec<Option<Vec<f64>>>,
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_raw(a: &[f64], m: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

const GELU_C: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * s * (1.0 + 3.0 * GELU_C * x * x)
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            leaf_grads: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.leaf_grads[id.0].as_deref()
    }

    /// Register a persistent tensor as a leaf. Data is copied in.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push_unchecked(t.data.clone(), t.shape.clone(), t.requires_grad, Op::Leaf)
    }

    /// A leaf that never takes gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(CoreError::Shape {
                op: "constant",
                detail: format!("shape {:?} does not fit {} elements", shape, data.len()),
            });
        }
        Ok(self.push_unchecked(data, shape, false, Op::Leaf))
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.push_unchecked(vec![v], vec![1], false, Op::Leaf)
    }

    fn push_unchecked(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op,
    ) -> TensorId {
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    /// Finalize a primitive output: round to the graph precision, reject
    /// non-finite values, record the node.
    fn finish(
        &mut self,
        op_name: &'static str,
        mut data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op,
    ) -> Result<TensorId> {
        if self.precision == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op: op_name });
        }
        Ok(self.push_unchecked(data, shape, requires_grad, op))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn rows_cols(&self, id: TensorId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => unreachable!("tensors are rank 1 or 2"),
        }
    }

    fn shape_err(&self, op: &'static str, ids: &[TensorId], extra: &str) -> CoreError {
        let shapes: Vec<String> = ids
            .iter()
            .map(|id| format!("{:?}", self.nodes[id.0].shape))
            .collect();
        CoreError::Shape {
            op,
            detail: format!("{} (operands: {})", extra, shapes.join(", ")),
        }
    }

    // ── Primitives ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rows_cols(a);
        let (kb, n) = self.rows_cols(b);
        if ka != kb || self.nodes[a.0].shape.len() != 2 || self.nodes[b.0].shape.len() != 2 {
            return Err(self.shape_err("matmul", &[a, b], "inner dimensions must agree"));
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut out);
        let rg = self.rg(&[a.0, b.0]);
        self.finish("matmul", out, vec![m, n], rg, Op::Matmul { a: a.0, b: b.0 })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.shape_err("add", &[a, b], "shapes must match"));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        self.finish("add", out, shape, rg, Op::Add { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.shape_err("mul", &[a, b], "shapes must match"));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        self.finish("mul", out, shape, rg, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| c * x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.finish("scale", out, shape, rg, Op::Scale { a: a.0, c })
    }

    /// Add a length-n bias vector to every row of an [m, n] tensor.
    pub fn broadcast_add_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.rows_cols(a);
        let (bm, bn) = self.rows_cols(bias);
        if bm != 1 || bn != n {
            return Err(self.shape_err("broadcast_add_row", &[a, bias], "bias must be [n]"));
        }
        let bdata = &self.nodes[bias.0].data;
        let mut out = Vec::with_capacity(m * n);
        for row in self.nodes[a.0].data.chunks(n) {
            out.extend(row.iter().zip(bdata).map(|(x, y)| x + y));
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, bias.0]);
        self.finish(
            "broadcast_add_row",
            out,
            shape,
            rg,
            Op::BroadcastAddRow { a: a.0, bias: bias.0 },
        )
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape.len() != 2 {
            return Err(self.shape_err("transpose", &[a], "expects rank 2"));
        }
        let (m, n) = self.rows_cols(a);
        let mut out = vec![0.0; m * n];
        transpose_raw(&self.nodes[a.0].data, m, n, &mut out);
        let rg = self.nodes[a.0].requires_grad;
        self.finish("transpose", out, vec![n, m], rg, Op::Transpose { a: a.0 })
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() || shape.iter().any(|&e| e == 0) {
            return Err(self.shape_err("reshape", &[a], &format!("target {:?}", shape)));
        }
        let out = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.finish("reshape", out, shape, rg, Op::Reshape { a: a.0 })
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.rows_cols(a);
        if start + len > n || len == 0 {
            return Err(self.shape_err(
                "slice_cols",
                &[a],
                &format!("cols {}..{} of {}", start, start + len, n),
            ));
        }
        let mut out = Vec::with_capacity(m * len);
        for row in self.nodes[a.0].data.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.finish(
            "slice_cols",
            out,
            vec![m, len],
            rg,
            Op::SliceCols { a: a.0, start, len },
        )
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.rows_cols(a);
        if start + len > m || len == 0 {
            return Err(self.shape_err(
                "slice_rows",
                &[a],
                &format!("rows {}..{} of {}", start, start + len, m),
            ));
        }
        let out = self.nodes[a.0].data[start * n..(start + len) * n].to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.finish(
            "slice_rows",
            out,
            vec![len, n],
            rg,
            Op::SliceRows { a: a.0, start, len },
        )
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CoreError::Shape {
                op: "concat_cols",
                detail: "no operands".into(),
            });
        }
        let (m, _) = self.rows_cols(parts[0]);
        let widths: Vec<usize> = parts.iter().map(|&p| self.rows_cols(p).1).collect();
        if parts.iter().any(|&p| self.rows_cols(p).0 != m) {
            return Err(self.shape_err("concat_cols", parts, "row counts must match"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].data[r * w..(r + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.finish(
            "concat_cols",
            out,
            vec![m, total],
            rg,
            Op::ConcatCols { parts: ids },
        )
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CoreError::Shape {
                op: "concat_rows",
                detail: "no operands".into(),
            });
        }
        let (_, n) = self.rows_cols(parts[0]);
        if parts.iter().any(|&p| self.rows_cols(p).1 != n) {
            return Err(self.shape_err("concat_rows", parts, "column counts must match"));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
            rows += self.rows_cols(p).0;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.finish(
            "concat_rows",
            out,
            vec![rows, n],
            rg,
            Op::ConcatRows { parts: ids },
        )
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.rows_cols(a);
        let mut out = Vec::with_capacity(m * n);
        for row in self.nodes[a.0].data.chunks(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / sum));
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.finish("softmax", out, shape, rg, Op::Softmax { a: a.0 })
    }

    pub fn log_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.rows_cols(a);
        let mut out = Vec::with_capacity(m * n);
        for row in self.nodes[a.0].data.chunks(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
            out.extend(row.iter().map(|&v| v - lse));
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.finish("log_softmax", out, shape, rg, Op::LogSoftmax { a: a.0 })
    }

    /// Row-wise layer normalization with affine gain and bias.
    ///
    /// Zero-variance rows normalize to 0, so the output is the affine
    /// shift alone.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (m, n) = self.rows_cols(x);
        if self.rows_cols(gain) != (1, n) || self.rows_cols(bias) != (1, n) {
            return Err(self.shape_err("layer_norm", &[x, gain, bias], "gain/bias must be [n]"));
        }
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = Vec::with_capacity(m * n);
        for row in self.nodes[x.0].data.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out.push((row[j] - mean) * rstd * g[j] + b[j]);
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        self.finish(
            "layer_norm",
            out,
            shape,
            rg,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        )
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.finish("gelu", out, shape, rg, Op::Gelu { a: a.0 })
    }

    /// Look up rows of a [vocab, d] table.
    pub fn embedding(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (v, d) = self.rows_cols(table);
        if indices.is_empty() {
            return Err(self.shape_err("embedding", &[table], "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(CoreError::Index {
                op: "embedding",
                detail: format!("index {} outside table of {} rows", bad, v),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&self.nodes[table.0].data[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        self.finish(
            "embedding",
            out,
            vec![indices.len(), d],
            rg,
            Op::Embedding {
                table: table.0,
                indices: indices.to_vec(),
            },
        )
    }

    /// Replace the given rows of x with a single learned embedding row.
    pub fn mask_rows(&mut self, x: TensorId, rows: &[usize], embed: TensorId) -> Result<TensorId> {
        let (m, n) = self.rows_cols(x);
        let (em, en) = self.rows_cols(embed);
        if em != 1 || en != n {
            return Err(self.shape_err("mask_rows", &[x, embed], "embedding must be [n]"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(CoreError::Index {
                op: "mask_rows",
                detail: format!("row {} outside {} rows", bad, m),
            });
        }
        debug_assert!(rows.windows(2).all(|w| w[0] < w[1]), "rows sorted unique");
        let mut out = self.nodes[x.0].data.clone();
        let e = &self.nodes[embed.0].data;
        for &r in rows {
            out[r * n..(r + 1) * n].copy_from_slice(e);
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x.0, embed.0]);
        self.finish(
            "mask_rows",
            out,
            shape,
            rg,
            Op::MaskRows {
                x: x.0,
                rows: rows.to_vec(),
                embed: embed.0,
            },
        )
    }

    /// Strided sliding windows over the time axis of a [t, c] tensor,
    /// flattened per window to [t', c*kernel]. Window rows are laid out
    /// time-major: out[w, j*c + ch] = x[w*stride + j, ch].
    pub fn frame_patches(&mut self, x: TensorId, kernel: usize, stride: usize) -> Result<TensorId> {
        let (t, c) = self.rows_cols(x);
        if kernel == 0 || stride == 0 || t < kernel {
            return Err(self.shape_err(
                "frame_patches",
                &[x],
                &format!("kernel {} stride {} over {} rows", kernel, stride, t),
            ));
        }
        let tw = (t - kernel) / stride + 1;
        let data = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(tw * kernel * c);
        for w in 0..tw {
            let start = w * stride;
            out.extend_from_slice(&data[start * c..(start + kernel) * c]);
        }
        let rg = self.nodes[x.0].requires_grad;
        self.finish(
            "frame_patches",
            out,
            vec![tw, kernel * c],
            rg,
            Op::FramePatches {
                x: x.0,
                kernel,
                stride,
            },
        )
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.finish("sum_all", vec![s], vec![1], rg, Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum::<f64>() / n;
        let rg = self.nodes[a.0].requires_grad;
        self.finish("mean_all", vec![s], vec![1], rg, Op::MeanAll { a: a.0 })
    }

    /// Mean negative log-likelihood over the selected rows of a
    /// [m, v] log-probability matrix: -(1/|rows|) Σ logp[r, targets[r]].
    pub fn gather_nll_mean(
        &mut self,
        logp: TensorId,
        targets: &[usize],
        rows: &[usize],
    ) -> Result<TensorId> {
        let (m, v) = self.rows_cols(logp);
        if targets.len() != m {
            return Err(self.shape_err(
                "gather_nll_mean",
                &[logp],
                &format!("{} targets for {} rows", targets.len(), m),
            ));
        }
        if rows.is_empty() {
            return Err(CoreError::Shape {
                op: "gather_nll_mean",
                detail: "no rows selected".into(),
            });
        }
        for &r in rows {
            if r >= m || targets[r] >= v {
                return Err(CoreError::Index {
                    op: "gather_nll_mean",
                    detail: format!("row {} / target {} outside [{}, {}]", r, targets[r], m, v),
                });
            }
        }
        let data = &self.nodes[logp.0].data;
        let s: f64 = rows.iter().map(|&r| data[r * v + targets[r]]).sum();
        let loss = -s / rows.len() as f64;
        let rg = self.nodes[logp.0].requires_grad;
        self.finish(
            "gather_nll_mean",
            vec![loss],
            vec![1],
            rg,
            Op::GatherNllMean {
                logp: logp.0,
                targets: targets.to_vec(),
                rows: rows.to_vec(),
            },
        )
    }

    /// CTC negative log-likelihood of `label` under a [t, c+1] matrix of
    /// per-frame log-probabilities (blank class included). Runs the
    /// forward recursion over the blank-interleaved label entirely in
    /// log space.
    pub fn ctc_nll(&mut self, logp: TensorId, label: &[usize], blank: usize) -> Result<TensorId> {
        let (t, c) = self.rows_cols(logp);
        ctc::check_admissible(label, blank, c, t)?;
        let loss = ctc::forward_nll(&self.nodes[logp.0].data, t, c, label, blank);
        let rg = self.nodes[logp.0].requires_grad;
        self.finish(
            "ctc_nll",
            vec![loss],
            vec![1],
            rg,
            Op::CtcNll {
                logp: logp.0,
                label: label.to_vec(),
                blank,
            },
        )
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse traversal from a scalar loss. Each call uses fresh
    /// intermediate accumulators; leaf gradients add up across calls.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(CoreError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if self.nodes.is_empty() {
            return Err(CoreError::Shape {
                op: "backward",
                detail: "empty tape".into(),
            });
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        acc[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dout) = acc[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                match &mut self.leaf_grads[idx] {
                    Some(g) => {
                        for (gi, di) in g.iter_mut().zip(&dout) {
                            *gi += di;
                        }
                    }
                    None => self.leaf_grads[idx] = Some(dout),
                }
                continue;
            }
            self.backward_op(idx, &dout, &mut acc);
        }
        Ok(())
    }

    fn backward_op(&self, idx: usize, dout: &[f64], acc: &mut [Option<Vec<f64>>]) {
        let add_into = |acc: &mut [Option<Vec<f64>>], target: usize, delta: Vec<f64>| {
            match &mut acc[target] {
                Some(g) => {
                    for (gi, di) in g.iter_mut().zip(&delta) {
                        *gi += di;
                    }
                }
                None => acc[target] = Some(delta),
            }
        };
        // Contributions flow only into inputs that want gradient.
        let wants = |s: &Self, i: usize| s.nodes[i].requires_grad;

        match &self.nodes[idx].op {
            Op::Leaf => unreachable!("handled by caller"),
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = &self.nodes[*a].shape;
                    (s[0], s[1])
                };
                let n = self.nodes[*b].shape[1];
                if wants(self, *a) {
                    // dA = dY · Bᵀ
                    let mut bt = vec![0.0; k * n];
                    transpose_raw(&self.nodes[*b].data, k, n, &mut bt);
                    let mut da = vec![0.0; m * k];
                    matmul_raw(dout, &bt, m, n, k, &mut da);
                    add_into(acc, *a, da);
                }
                if wants(self, *b) {
                    // dB = Aᵀ · dY
                    let mut at = vec![0.0; k * m];
                    transpose_raw(&self.nodes[*a].data, m, k, &mut at);
                    let mut db = vec![0.0; k * n];
                    matmul_raw(&at, dout, k, m, n, &mut db);
                    add_into(acc, *b, db);
                }
            }
            Op::Add { a, b } => {
                if wants(self, *a) {
                    add_into(acc, *a, dout.to_vec());
                }
                if wants(self, *b) {
                    add_into(acc, *b, dout.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if wants(self, *a) {
                    let d: Vec<f64> = dout
                        .iter()
                        .zip(&self.nodes[*b].data)
                        .map(|(d, y)| d * y)
                        .collect();
                    add_into(acc, *a, d);
                }
                if wants(self, *b) {
                    let d: Vec<f64> = dout
                        .iter()
                        .zip(&self.nodes[*a].data)
                        .map(|(d, x)| d * x)
                        .collect();
                    add_into(acc, *b, d);
                }
            }
            Op::Scale { a, c } => {
                if wants(self, *a) {
                    add_into(acc, *a, dout.iter().map(|d| c * d).collect());
                }
            }
            Op::BroadcastAddRow { a, bias } => {
                let n = *self.nodes[idx].shape.last().unwrap();
                if wants(self, *a) {
                    add_into(acc, *a, dout.to_vec());
                }
                if wants(self, *bias) {
                    let mut db = vec![0.0; n];
                    for row in dout.chunks(n) {
                        for (gi, di) in db.iter_mut().zip(row) {
                            *gi += di;
                        }
                    }
                    add_into(acc, *bias, db);
                }
            }
            Op::Transpose { a } => {
                if wants(self, *a) {
                    let (m, n) = {
                        let s = &self.nodes[*a].shape;
                        (s[0], s[1])
                    };
                    let mut d = vec![0.0; m * n];
                    transpose_raw(dout, n, m, &mut d);
                    add_into(acc, *a, d);
                }
            }
            Op::Reshape { a } => {
                if wants(self, *a) {
                    add_into(acc, *a, dout.to_vec());
                }
            }
            Op::SliceCols { a, start, len } => {
                if wants(self, *a) {
                    let (m, n) = {
                        let s = &self.nodes[*a].shape;
                        match s.len() {
                            1 => (1, s[0]),
                            _ => (s[0], s[1]),
                        }
                    };
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        d[r * n + start..r * n + start + len]
                            .copy_from_slice(&dout[r * len..(r + 1) * len]);
                    }
                    add_into(acc, *a, d);
                }
            }
            Op::SliceRows { a, start, len } => {
                if wants(self, *a) {
                    let (m, n) = {
                        let s = &self.nodes[*a].shape;
                        match s.len() {
                            1 => (1, s[0]),
                            _ => (s[0], s[1]),
                        }
                    };
                    let mut d = vec![0.0; m * n];
                    d[start * n..(start + len) * n].copy_from_slice(dout);
                    add_into(acc, *a, d);
                }
            }
            Op::ConcatCols { parts } => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.nodes[p].shape.last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let m = self.nodes[idx].shape[0];
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if wants(self, p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&dout[r * total + offset..r * total + offset + w]);
                        }
                        add_into(acc, p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let n = *self.nodes[idx].shape.last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let rows = match self.nodes[p].shape.len() {
                        1 => 1,
                        _ => self.nodes[p].shape[0],
                    };
                    if wants(self, p) {
                        add_into(acc, p, dout[offset * n..(offset + rows) * n].to_vec());
                    }
                    offset += rows;
                }
            }
            Op::Softmax { a } => {
                if wants(self, *a) {
                    let n = *self.nodes[idx].shape.last().unwrap();
                    let y = &self.nodes[idx].data;
                    let mut d = Vec::with_capacity(y.len());
                    for (yrow, drow) in y.chunks(n).zip(dout.chunks(n)) {
                        let dot: f64 = yrow.iter().zip(drow).map(|(yi, di)| yi * di).sum();
                        d.extend(yrow.iter().zip(drow).map(|(yi, di)| yi * (di - dot)));
                    }
                    add_into(acc, *a, d);
                }
            }
            Op::LogSoftmax { a } => {
                if wants(self, *a) {
                    let n = *self.nodes[idx].shape.last().unwrap();
                    let y = &self.nodes[idx].data;
                    let mut d = Vec::with_capacity(y.len());
                    for (yrow, drow) in y.chunks(n).zip(dout.chunks(n)) {
                        let dsum: f64 = drow.iter().sum();
                        d.extend(yrow.iter().zip(drow).map(|(yi, di)| di - yi.exp() * dsum));
                    }
                    add_into(acc, *a, d);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let n = *self.nodes[idx].shape.last().unwrap();
                let nf = n as f64;
                let xv = &self.nodes[*x].data;
                let g = &self.nodes[*gain].data;
                let mut dx = if wants(self, *x) { Some(vec![0.0; xv.len()]) } else { None };
                let mut dg = if wants(self, *gain) { Some(vec![0.0; n]) } else { None };
                let mut db = if wants(self, *bias) { Some(vec![0.0; n]) } else { None };
                for (r, (xrow, drow)) in xv.chunks(n).zip(dout.chunks(n)).enumerate() {
                    let mean = xrow.iter().sum::<f64>() / nf;
                    let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let yhat: Vec<f64> = xrow.iter().map(|&v| (v - mean) * rstd).collect();
                    if let Some(db) = &mut db {
                        for (bi, di) in db.iter_mut().zip(drow) {
                            *bi += di;
                        }
                    }
                    if let Some(dg) = &mut dg {
                        for j in 0..n {
                            dg[j] += drow[j] * yhat[j];
                        }
                    }
                    if let Some(dx) = &mut dx {
                        // dŷ = dY ∘ g; dx = rstd (dŷ − mean(dŷ) − ŷ·mean(dŷ∘ŷ))
                        let dyhat: Vec<f64> = drow.iter().zip(g).map(|(d, gi)| d * gi).collect();
                        let m1 = dyhat.iter().sum::<f64>() / nf;
                        let m2 = dyhat.iter().zip(&yhat).map(|(d, y)| d * y).sum::<f64>() / nf;
                        for j in 0..n {
                            dx[r * n + j] += rstd * (dyhat[j] - m1 - yhat[j] * m2);
                        }
                    }
                }
                if let Some(d) = dx {
                    add_into(acc, *x, d);
                }
                if let Some(d) = dg {
                    add_into(acc, *gain, d);
                }
                if let Some(d) = db {
                    add_into(acc, *bias, d);
                }
            }
            Op::Gelu { a } => {
                if wants(self, *a) {
                    let d: Vec<f64> = self.nodes[*a]
                        .data
                        .iter()
                        .zip(dout)
                        .map(|(&x, d)| d * gelu_grad_scalar(x))
                        .collect();
                    add_into(acc, *a, d);
                }
            }
            Op::Embedding { table, indices } => {
                if wants(self, *table) {
                    let d = *self.nodes[idx].shape.last().unwrap();
                    let mut dt = vec![0.0; self.nodes[*table].data.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += dout[r * d + j];
                        }
                    }
                    add_into(acc, *table, dt);
                }
            }
            Op::MaskRows { x, rows, embed } => {
                let n = *self.nodes[idx].shape.last().unwrap();
                if wants(self, *x) {
                    let mut d = dout.to_vec();
                    for &r in rows {
                        d[r * n..(r + 1) * n].fill(0.0);
                    }
                    add_into(acc, *x, d);
                }
                if wants(self, *embed) {
                    let mut de = vec![0.0; n];
                    for &r in rows {
                        for (gi, di) in de.iter_mut().zip(&dout[r * n..(r + 1) * n]) {
                            *gi += di;
                        }
                    }
                    add_into(acc, *embed, de);
                }
            }
            Op::FramePatches { x, kernel, stride } => {
                if wants(self, *x) {
                    let c = *self.nodes[*x].shape.last().unwrap();
                    let tw = self.nodes[idx].shape[0];
                    let mut d = vec![0.0; self.nodes[*x].data.len()];
                    let width = kernel * c;
                    for w in 0..tw {
                        let start = w * stride * c;
                        for (gi, di) in d[start..start + width]
                            .iter_mut()
                            .zip(&dout[w * width..(w + 1) * width])
                        {
                            *gi += di;
                        }
                    }
                    add_into(acc, *x, d);
                }
            }
            Op::SumAll { a } => {
                if wants(self, *a) {
                    add_into(acc, *a, vec![dout[0]; self.nodes[*a].data.len()]);
                }
            }
            Op::MeanAll { a } => {
                if wants(self, *a) {
                    let n = self.nodes[*a].data.len();
                    add_into(acc, *a, vec![dout[0] / n as f64; n]);
                }
            }
            Op::GatherNllMean { logp, targets, rows } => {
                if wants(self, *logp) {
                    let v = *self.nodes[*logp].shape.last().unwrap();
                    let mut d = vec![0.0; self.nodes[*logp].data.len()];
                    let w = dout[0] / rows.len() as f64;
                    for &r in rows {
                        d[r * v + targets[r]] -= w;
                    }
                    add_into(acc, *logp, d);
                }
            }
            Op::CtcNll { logp, label, blank } => {
                if wants(self, *logp) {
                    let (t, c) = {
                        let s = &self.nodes[*logp].shape;
                        (s[0], s[1])
                    };
                    let mut d =
                        ctc::grad_wrt_logp(&self.nodes[*logp].data, t, c, label, *blank);
                    for gi in &mut d {
                        *gi *= dout[0];
                    }
                    add_into(acc, *logp, d);
                }
            }
        }
    }
}
