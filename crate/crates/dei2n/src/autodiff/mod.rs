//! Define-by-run reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly,
//! stores its result (and whatever the backward pass needs), and returns a
//! [`TensorId`] indexing into the tape. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients in a fixed order — append order — so a
//! given forward pass always yields bit-identical gradients.
//!
//! The tape is meant to live for exactly one forward/backward pass; training
//! code builds a fresh `Graph` per batch. Tensors are rank 1-3 row-major
//! buffers. There is no broadcasting beyond the few explicit ops that need it
//! (bias add, per-row scaling); shape mismatches are errors, not implicit
//! copies.
//!
//! ```
//! use dei2n::autodiff::Graph;
//!
//! let mut g = Graph::new();
//! let a = g.param(vec![1.0, 2.0], vec![1, 2]);
//! let b = g.param(vec![3.0, 4.0], vec![2, 1]);
//! let y = g.matmul(a, b).unwrap();
//! assert_eq!(g.data(y), &[11.0]);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads[&a], vec![3.0, 4.0]); // d(ab)/da = b^T
//! ```

mod backward;
mod gradcheck;

pub use gradcheck::grad_check;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Index of a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(pub usize);

/// Gradients keyed by tensor id, one entry per gradient-tracked leaf.
pub type GradMap = BTreeMap<TensorId, Vec<f64>>;

/// One tape entry: the materialized value plus the recipe that produced it.
#[derive(Debug)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub(crate) op: Op,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    /// [m,k] x [k,n] -> [m,n]
    Matmul { a: TensorId, b: TensorId },
    /// [B,m,k] x [B,k,n] -> [B,m,n]; with `transpose_b`, b is [B,n,k].
    Bmm {
        a: TensorId,
        b: TensorId,
        transpose_b: bool,
    },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Hadamard { a: TensorId, b: TensorId },
    /// [..., d] + [d], broadcast over leading axes.
    AddBias { a: TensorId, bias: TensorId },
    Scale { a: TensorId, c: f64 },
    /// Multiply contiguous equal-sized blocks by fixed (non-tensor) factors.
    BlockScale { a: TensorId, factors: Vec<f64> },
    /// [n, d] rows scaled by a length-n tensor; gradients flow to both.
    RowMul { a: TensorId, scale: TensorId },
    Concat { inputs: Vec<TensorId>, axis: usize },
    /// Columns [start, start+len) of the last axis.
    SliceLast {
        a: TensorId,
        start: usize,
        len: usize,
    },
    /// [n, d] -> [n*times, d], each row repeated `times` consecutive times.
    RepeatRows { a: TensorId, times: usize },
    SumAxis { a: TensorId, axis: usize },
    SumAll { a: TensorId },
    Sigmoid { a: TensorId },
    /// Rectifier with learned per-channel negative slope (channels = last axis).
    PRelu { a: TensorId, slope: TensorId },
    Ln { a: TensorId },
    Clamp { a: TensorId, lo: f64, hi: f64 },
    /// Softmax along the last axis with entries masked out entirely.
    MaskedSoftmax { a: TensorId, mask: Vec<bool> },
    /// Per-row normalization over the last axis with learned gain/bias.
    LayerNorm {
        a: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    /// Inverted dropout; `scale` holds the recorded per-element multipliers.
    Dropout { a: TensorId, scale: Vec<f64> },
    /// Rows of `table` ([v, d]) selected by index -> [indices.len(), d].
    Gather { table: TensorId, indices: Vec<usize> },
    Reshape { a: TensorId },
}

/// Append-only autodiff tape. See the module docs for the lifecycle.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of tape entries.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all tape entries; ids from before the reset are invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].numel(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Tensor {
            data,
            shape,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Leaf without gradient tracking (inputs, labels, masks).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "constant: data length does not match shape"
        );
        self.push(data, shape, false, Op::Leaf)
    }

    /// Leaf with gradient tracking (model parameters).
    pub fn param(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param: data length does not match shape"
        );
        self.push(data, shape, true, Op::Leaf)
    }

    // ── Linear algebra ──────────────────────────────────────────────────────

    /// 2-D matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(self.data(a), self.data(b), m, k, n, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a, b }))
    }

    /// Batched matrix product over a shared leading axis.
    /// `a` is [B,m,k]; `b` is [B,k,n], or [B,n,k] with `transpose_b`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId, transpose_b: bool) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let k_b = if transpose_b { sb[2] } else { sb[1] };
        if k_b != k {
            return Err(Error::shape(
                "bmm",
                format!("{sa:?} x {sb:?} (transpose_b={transpose_b})"),
            ));
        }
        let mut out = vec![0.0; bs * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for s in 0..bs {
                let asl = &da[s * m * k..(s + 1) * m * k];
                let bsl = &db[s * k * n..(s + 1) * k * n];
                let osl = &mut out[s * m * n..(s + 1) * m * n];
                if transpose_b {
                    matmul_nt(asl, bsl, m, k, n, osl);
                } else {
                    matmul_nn(asl, bsl, m, k, n, osl);
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, vec![bs, m, n], rg, Op::Bmm { a, b, transpose_b }))
    }

    // ── Elementwise and broadcast ───────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let (shape, rg) = (self.shape(a).to_vec(), self.any_grad(&[a, b]));
        Ok(self.push(out, shape, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let (shape, rg) = (self.shape(a).to_vec(), self.any_grad(&[a, b]));
        Ok(self.push(out, shape, rg, Op::Sub { a, b }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("hadamard", a, b)?;
        let out: Vec<f64> = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let (shape, rg) = (self.shape(a).to_vec(), self.any_grad(&[a, b]));
        Ok(self.push(out, shape, rg, Op::Hadamard { a, b }))
    }

    /// Adds a length-d bias to every row of an [..., d] tensor.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let d = *self.shape(a).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(a), self.shape(bias)),
            ));
        }
        let bv = self.data(bias).to_vec();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        let (shape, rg) = (self.shape(a).to_vec(), self.any_grad(&[a, bias]));
        Ok(self.push(out, shape, rg, Op::AddBias { a, bias }))
    }

    /// Multiplies every element by a fixed scalar.
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.nodes[a.0].requires_grad);
        self.push(out, shape, rg, Op::Scale { a, c })
    }

    /// Splits the tensor into `factors.len()` equal contiguous blocks and
    /// multiplies block i by `factors[i]`. The factors are constants; no
    /// gradient flows into them. Used to zero whole rows/samples exactly.
    pub fn block_scale(&mut self, a: TensorId, factors: Vec<f64>) -> Result<TensorId> {
        let numel = self.nodes[a.0].numel();
        if factors.is_empty() || !numel.is_multiple_of(factors.len()) {
            return Err(Error::shape(
                "block_scale",
                format!("{numel} elements vs {} factors", factors.len()),
            ));
        }
        let block = numel / factors.len();
        let mut out = self.data(a).to_vec();
        for (i, chunk) in out.chunks_exact_mut(block).enumerate() {
            let f = factors[i];
            for v in chunk.iter_mut() {
                *v *= f;
            }
        }
        let (shape, rg) = (self.shape(a).to_vec(), self.nodes[a.0].requires_grad);
        Ok(self.push(out, shape, rg, Op::BlockScale { a, factors }))
    }

    /// Scales row i of [n, d] by element i of a length-n tensor. Unlike
    /// [`Graph::block_scale`], the scale is a tensor and receives gradients.
    pub fn row_mul(&mut self, a: TensorId, scale: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 || self.shape(scale) != [sa[0]] {
            return Err(Error::shape(
                "row_mul",
                format!("{:?} rows x {:?}", sa, self.shape(scale)),
            ));
        }
        let d = sa[1];
        let sv = self.data(scale).to_vec();
        let mut out = self.data(a).to_vec();
        for (i, row) in out.chunks_exact_mut(d).enumerate() {
            for v in row.iter_mut() {
                *v *= sv[i];
            }
        }
        let (shape, rg) = (sa.to_vec(), self.any_grad(&[a, scale]));
        Ok(self.push(out, shape, rg, Op::RowMul { a, scale }))
    }

    // ── Shape plumbing ──────────────────────────────────────────────────────

    /// Concatenates tensors along `axis`. All other dimensions must agree.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let rank = self.shape(inputs[0]).len();
        if axis >= rank {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        let mut out_shape = self.shape(inputs[0]).to_vec();
        out_shape[axis] = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != rank
                || s[..axis] != out_shape[..axis]
                || s[axis + 1..] != out_shape[axis + 1..]
            {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} does not align with {out_shape:?} on axis {axis}"),
                ));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let mid = self.shape(id)[axis];
                let block = mid * inner;
                let src = &self.data(id)[o * block..(o + 1) * block];
                out.extend_from_slice(src);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            out,
            out_shape,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Takes columns [start, start+len) of the last axis.
    pub fn slice_last(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a);
        let d = *sa.last().ok_or_else(|| Error::shape("slice_last", "rank-0 input"))?;
        if start + len > d || len == 0 {
            return Err(Error::shape(
                "slice_last",
                format!("cols [{start}, {}) of width {d}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(self.nodes[a.0].numel() / d * len);
        for row in self.data(a).chunks_exact(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, shape, rg, Op::SliceLast { a, start, len }))
    }

    /// [n, d] -> [n*times, d] with each row repeated `times` consecutive
    /// times. Backward sums the repeats.
    pub fn repeat_rows(&mut self, a: TensorId, times: usize) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 || times == 0 {
            return Err(Error::shape(
                "repeat_rows",
                format!("{sa:?} x {times}"),
            ));
        }
        let (n, d) = (sa[0], sa[1]);
        let mut out = Vec::with_capacity(n * times * d);
        for row in self.data(a).chunks_exact(d) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, vec![n * times, d], rg, Op::RepeatRows { a, times }))
    }

    /// Reinterprets the buffer under a new shape; element count must match.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let data = self.data(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(data, shape, rg, Op::Reshape { a }))
    }

    // ── Reductions ──────────────────────────────────────────────────────────

    /// Sum-pooling over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} out of range for {sa:?}"),
            ));
        }
        let outer: usize = sa[..axis].iter().product();
        let mid = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let data = self.data(a);
        for o in 0..outer {
            for m in 0..mid {
                let src = &data[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = sa.clone();
        shape.remove(axis);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, shape, rg, Op::SumAxis { a, axis }))
    }

    /// Sum of all elements, as a scalar (shape []).
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s], vec![], rg, Op::SumAll { a })
    }

    // ── Nonlinearities ──────────────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.nodes[a.0].requires_grad);
        self.push(out, shape, rg, Op::Sigmoid { a })
    }

    /// Rectifier with a learned slope per channel of the last axis:
    /// `x > 0 ? x : slope[c] * x`.
    pub fn prelu(&mut self, a: TensorId, slope: TensorId) -> Result<TensorId> {
        let d = *self.shape(a).last().unwrap_or(&0);
        if self.shape(slope) != [d] {
            return Err(Error::shape(
                "prelu",
                format!("{:?} with slopes {:?}", self.shape(a), self.shape(slope)),
            ));
        }
        let sv = self.data(slope).to_vec();
        let out: Vec<f64> = self
            .data(a)
            .chunks_exact(d)
            .flat_map(|row| {
                row.iter()
                    .zip(&sv)
                    .map(|(&x, &s)| if x > 0.0 { x } else { s * x })
                    .collect::<Vec<_>>()
            })
            .collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.any_grad(&[a, slope]));
        Ok(self.push(out, shape, rg, Op::PRelu { a, slope }))
    }

    /// Natural log, elementwise. The caller is responsible for the domain;
    /// combine with [`Graph::clamp`] for probabilities.
    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.ln()).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.nodes[a.0].requires_grad);
        self.push(out, shape, rg, Op::Ln { a })
    }

    /// Clamps into [lo, hi]; gradient passes through inside the interval and
    /// is zero outside.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::InvalidArgument(format!(
                "clamp bounds [{lo}, {hi}] are not ordered"
            )));
        }
        let out: Vec<f64> = self.data(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.nodes[a.0].requires_grad);
        Ok(self.push(out, shape, rg, Op::Clamp { a, lo, hi }))
    }

    // ── Attention / normalization / regularization ──────────────────────────

    /// Softmax along the last axis with boolean masking. Masked entries are
    /// exactly 0 in the output and receive no probability mass. A row with no
    /// unmasked entries is an error — callers must branch on empty sequences
    /// before this point. Uses max-subtraction for stability.
    pub fn masked_softmax(&mut self, a: TensorId, mask: &[bool]) -> Result<TensorId> {
        let numel = self.nodes[a.0].numel();
        if mask.len() != numel {
            return Err(Error::shape(
                "masked_softmax",
                format!("{numel} elements vs {} mask entries", mask.len()),
            ));
        }
        let d = *self.shape(a).last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::shape("masked_softmax", "empty last axis"));
        }
        let mut out = vec![0.0; numel];
        let data = self.data(a);
        for (r, (row, mrow)) in data.chunks_exact(d).zip(mask.chunks_exact(d)).enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for (v, &keep) in row.iter().zip(mrow) {
                if keep && *v > mx {
                    mx = *v;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::EmptyAttentionRow { row: r });
            }
            let orow = &mut out[r * d..(r + 1) * d];
            let mut sum = 0.0;
            for ((o, v), &keep) in orow.iter_mut().zip(row).zip(mrow) {
                if keep {
                    *o = (v - mx).exp();
                    sum += *o;
                }
            }
            for (o, &keep) in orow.iter_mut().zip(mrow) {
                if keep {
                    *o /= sum;
                }
            }
        }
        let (shape, rg) = (self.shape(a).to_vec(), self.nodes[a.0].requires_grad);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::MaskedSoftmax {
                a,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Per-row normalization over the last axis: zero mean, unit variance
    /// (population variance + eps), then learned gain and bias.
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let d = *self.shape(a).last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "{:?} with gain {:?}, bias {:?}",
                    self.shape(a),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let gv = self.data(gain).to_vec();
        let bv = self.data(bias).to_vec();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_exact_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for ((x, g), b) in row.iter_mut().zip(&gv).zip(&bv) {
                *x = (*x - mean) * inv * g + b;
            }
        }
        let (shape, rg) = (self.shape(a).to_vec(), self.any_grad(&[a, gain, bias]));
        Ok(self.push(out, shape, rg, Op::LayerNorm { a, gain, bias, eps }))
    }

    /// Inverted dropout: each element is kept with probability 1-rate and
    /// scaled by 1/(1-rate), so the expectation is unchanged. Identity when
    /// not training or when rate is 0. The mask is drawn from `rng` at record
    /// time, so a fixed rng state gives a fixed mask.
    pub fn dropout(
        &mut self,
        a: TensorId,
        rate: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let scale: Vec<f64> = (0..self.nodes[a.0].numel())
            .map(|_| if rng.random::<f64>() < keep { inv } else { 0.0 })
            .collect();
        let out: Vec<f64> = zip_map(self.data(a), &scale, |x, s| x * s);
        let (shape, rg) = (self.shape(a).to_vec(), self.nodes[a.0].requires_grad);
        Ok(self.push(out, shape, rg, Op::Dropout { a, scale }))
    }

    /// Selects rows of a [v, d] table. The backward pass scatter-adds into
    /// the table gradient, so rows never gathered keep an exactly-zero
    /// gradient.
    pub fn gather(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape(
                "gather",
                format!("table must be rank 2, got {st:?}"),
            ));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for table with {v} rows"
            )));
        }
        let data = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            out,
            vec![indices.len(), d],
            rg,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }
}

// ── Kernels ──────────────────────────────────────────────────────────────────

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out += a x b for row-major [m,k] x [k,n]. The k-loop is unrolled by four
/// with fused multiply-adds; the j-loop is contiguous on all three buffers,
/// which is what lets the compiler vectorize it.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut kk = 0;
        while kk + 4 <= k {
            let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let b0 = &b[kk * n..kk * n + n];
            let b1 = &b[(kk + 1) * n..(kk + 1) * n + n];
            let b2 = &b[(kk + 2) * n..(kk + 2) * n + n];
            let b3 = &b[(kk + 3) * n..(kk + 3) * n + n];
            for j in 0..n {
                let t = a1.mul_add(b1[j], a0.mul_add(b0[j], orow[j]));
                orow[j] = a3.mul_add(b3[j], a2.mul_add(b2[j], t));
            }
            kk += 4;
        }
        while kk < k {
            let av = arow[kk];
            let brow = &b[kk * n..kk * n + n];
            for j in 0..n {
                orow[j] = av.mul_add(brow[j], orow[j]);
            }
            kk += 1;
        }
    }
}

/// out += a x b^T for row-major a [m,n], b [k,n] -> out [m,k]. Both inner
/// accesses are row dots over contiguous memory; the dot runs four
/// independent accumulator lanes so consecutive fused multiply-adds are not
/// serialized on each other's latency.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0_f64, 0.0, 0.0, 0.0);
            let mut j = 0;
            while j + 4 <= n {
                s0 = arow[j].mul_add(brow[j], s0);
                s1 = arow[j + 1].mul_add(brow[j + 1], s1);
                s2 = arow[j + 2].mul_add(brow[j + 2], s2);
                s3 = arow[j + 3].mul_add(brow[j + 3], s3);
                j += 4;
            }
            let mut acc = (s0 + s1) + (s2 + s3);
            while j < n {
                acc = arow[j].mul_add(brow[j], acc);
                j += 1;
            }
            orow[l] += acc;
        }
    }
}

/// out += a^T x b for row-major a [m,k], b [m,n] -> out [k,n].
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = arow[l];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] = av.mul_add(brow[j], orow[j]);
            }
        }
    }
}
