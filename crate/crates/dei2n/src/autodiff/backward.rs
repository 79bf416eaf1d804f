//! Reverse pass over the tape.
//!
//! Gradients accumulate in append order: the tape is walked from the loss
//! back to the leaves, and every contribution is added in the fixed order the
//! ops were recorded. Two backward passes over the same forward values are
//! therefore bit-identical.

use super::{matmul_nn, matmul_nt, matmul_tn, GradMap, Graph, Op, TensorId};
use crate::error::{Error, Result};

impl Graph {
    /// Accumulates dloss/dx for every tensor reachable from `loss` and
    /// returns the gradients of all gradient-tracked leaves (zeros for
    /// tracked leaves the loss does not depend on). `loss` must be a single
    /// element tensor.
    pub fn backward(&self, loss: TensorId) -> Result<GradMap> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }

        // A node participates iff some tracked leaf feeds it; everything else
        // (inputs, labels, masks) is skipped outright.
        let mut active = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            active[i] = match node.op {
                Op::Leaf => node.requires_grad,
                _ => self.op_inputs(&node.op).iter().any(|id| active[id.0]),
            };
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if active[loss.0] {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !active[i] {
                continue;
            }
            // Inputs always precede their output on the tape, so the output
            // gradient and the input accumulators never alias.
            let (input_grads, rest) = grads.split_at_mut(i);
            let g = rest[0].as_ref().unwrap();
            self.push_input_grads(i, g, input_grads, &active);
        }

        let mut map = GradMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.numel()]);
                map.insert(TensorId(i), g);
            }
        }
        Ok(map)
    }

    pub(crate) fn op_inputs(&self, op: &Op) -> Vec<TensorId> {
        match *op {
            Op::Leaf => vec![],
            Op::Matmul { a, b }
            | Op::Bmm { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Hadamard { a, b }
            | Op::AddBias { a, bias: b }
            | Op::RowMul { a, scale: b }
            | Op::PRelu { a, slope: b } => vec![a, b],
            Op::Scale { a, .. }
            | Op::BlockScale { a, .. }
            | Op::SliceLast { a, .. }
            | Op::RepeatRows { a, .. }
            | Op::SumAxis { a, .. }
            | Op::SumAll { a }
            | Op::Sigmoid { a }
            | Op::Ln { a }
            | Op::Clamp { a, .. }
            | Op::MaskedSoftmax { a, .. }
            | Op::Dropout { a, .. }
            | Op::Gather { table: a, .. }
            | Op::Reshape { a } => vec![a],
            Op::LayerNorm { a, gain, bias, .. } => vec![a, gain, bias],
            Op::Concat { ref inputs, .. } => inputs.clone(),
        }
    }

    /// Adds this node's contribution to each active input's gradient buffer.
    fn push_input_grads(
        &self,
        node: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        active: &[bool],
    ) {
        // Runs `body` on the (lazily allocated) grad buffer of `id` when the
        // input is on a path to a tracked leaf. Sequential invocations may
        // target the same id (e.g. hadamard(x, x)); each borrow ends before
        // the next begins, so both contributions accumulate.
        macro_rules! with_grad {
            ($id:expr, |$buf:ident| $body:expr) => {
                if active[$id.0] {
                    let numel = self.nodes[$id.0].numel();
                    let $buf: &mut Vec<f64> =
                        grads[$id.0].get_or_insert_with(|| vec![0.0; numel]);
                    $body
                }
            };
        }

        match self.nodes[node].op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let sa = &self.nodes[a.0].shape;
                let (m, k) = (sa[0], sa[1]);
                let n = self.nodes[b.0].shape[1];
                with_grad!(a, |buf| {
                    matmul_nt(g, &self.nodes[b.0].data, m, n, k, buf);
                });
                with_grad!(b, |buf| {
                    matmul_tn(&self.nodes[a.0].data, g, m, k, n, buf);
                });
            }

            Op::Bmm { a, b, transpose_b } => {
                let sa = &self.nodes[a.0].shape;
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if transpose_b {
                    self.nodes[b.0].shape[1]
                } else {
                    self.nodes[b.0].shape[2]
                };
                let da = &self.nodes[a.0].data;
                let db = &self.nodes[b.0].data;
                with_grad!(a, |buf| {
                    for s in 0..bs {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bsl = &db[s * k * n..(s + 1) * k * n];
                        let out = &mut buf[s * m * k..(s + 1) * m * k];
                        if transpose_b {
                            // out = a b^T: da = g x b ([m,n] x [n,k])
                            matmul_nn(gs, bsl, m, n, k, out);
                        } else {
                            // da = g x b^T
                            matmul_nt(gs, bsl, m, n, k, out);
                        }
                    }
                });
                with_grad!(b, |buf| {
                    for s in 0..bs {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let asl = &da[s * m * k..(s + 1) * m * k];
                        let out = &mut buf[s * k * n..(s + 1) * k * n];
                        if transpose_b {
                            // db = g^T x a ([n,m] x [m,k]), via a^T-style kernel
                            matmul_tn(gs, asl, m, n, k, out);
                        } else {
                            // db = a^T x g
                            matmul_tn(asl, gs, m, k, n, out);
                        }
                    }
                });
            }

            Op::Add { a, b } => {
                with_grad!(a, |buf| add_into(buf, g));
                with_grad!(b, |buf| add_into(buf, g));
            }

            Op::Sub { a, b } => {
                with_grad!(a, |buf| add_into(buf, g));
                with_grad!(b, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }

            Op::Hadamard { a, b } => {
                let da = &self.nodes[a.0].data;
                let db = &self.nodes[b.0].data;
                with_grad!(a, |buf| {
                    for ((o, gv), bv) in buf.iter_mut().zip(g).zip(db) {
                        *o += gv * bv;
                    }
                });
                with_grad!(b, |buf| {
                    for ((o, gv), av) in buf.iter_mut().zip(g).zip(da) {
                        *o += gv * av;
                    }
                });
            }

            Op::AddBias { a, bias } => {
                let d = self.nodes[bias.0].numel();
                with_grad!(a, |buf| add_into(buf, g));
                with_grad!(bias, |buf| {
                    for row in g.chunks_exact(d) {
                        for (o, gv) in buf.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                });
            }

            Op::Scale { a, c } => {
                with_grad!(a, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                });
            }

            Op::BlockScale { a, ref factors } => {
                let block = self.nodes[a.0].numel() / factors.len();
                with_grad!(a, |buf| {
                    for (i, chunk) in buf.chunks_exact_mut(block).enumerate() {
                        let f = factors[i];
                        let gs = &g[i * block..(i + 1) * block];
                        for (o, gv) in chunk.iter_mut().zip(gs) {
                            *o += gv * f;
                        }
                    }
                });
            }

            Op::RowMul { a, scale } => {
                let d = self.nodes[a.0].shape[1];
                let da = &self.nodes[a.0].data;
                let sv = &self.nodes[scale.0].data;
                with_grad!(a, |buf| {
                    for (i, row) in buf.chunks_exact_mut(d).enumerate() {
                        let gs = &g[i * d..(i + 1) * d];
                        for (o, gv) in row.iter_mut().zip(gs) {
                            *o += gv * sv[i];
                        }
                    }
                });
                with_grad!(scale, |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        let gs = &g[i * d..(i + 1) * d];
                        let ar = &da[i * d..(i + 1) * d];
                        let mut acc = 0.0;
                        for (gv, av) in gs.iter().zip(ar) {
                            acc += gv * av;
                        }
                        *o += acc;
                    }
                });
            }

            Op::Concat { ref inputs, axis } => {
                let out_shape = &self.nodes[node].shape;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_mid = out_shape[axis];
                let mut offset = 0;
                for &inp in inputs {
                    let mid = self.nodes[inp.0].shape[axis];
                    with_grad!(inp, |buf| {
                        for o in 0..outer {
                            let src =
                                &g[(o * total_mid + offset) * inner..(o * total_mid + offset + mid) * inner];
                            let dst = &mut buf[o * mid * inner..(o + 1) * mid * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += mid;
                }
            }

            Op::SliceLast { a, start, len } => {
                let d = *self.nodes[a.0].shape.last().unwrap();
                with_grad!(a, |buf| {
                    for (i, row) in buf.chunks_exact_mut(d).enumerate() {
                        let gs = &g[i * len..(i + 1) * len];
                        for (o, gv) in row[start..start + len].iter_mut().zip(gs) {
                            *o += gv;
                        }
                    }
                });
            }

            Op::RepeatRows { a, times } => {
                let d = self.nodes[a.0].shape[1];
                with_grad!(a, |buf| {
                    for (i, row) in buf.chunks_exact_mut(d).enumerate() {
                        for t in 0..times {
                            let gs = &g[(i * times + t) * d..(i * times + t + 1) * d];
                            for (o, gv) in row.iter_mut().zip(gs) {
                                *o += gv;
                            }
                        }
                    }
                });
            }

            Op::SumAxis { a, axis } => {
                let sa = &self.nodes[a.0].shape;
                let outer: usize = sa[..axis].iter().product();
                let mid = sa[axis];
                let inner: usize = sa[axis + 1..].iter().product();
                with_grad!(a, |buf| {
                    for o in 0..outer {
                        let gs = &g[o * inner..(o + 1) * inner];
                        for m in 0..mid {
                            let dst = &mut buf[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(gs) {
                                *d += s;
                            }
                        }
                    }
                });
            }

            Op::SumAll { a } => {
                let gv = g[0];
                with_grad!(a, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }

            Op::Sigmoid { a } => {
                let y = &self.nodes[node].data;
                with_grad!(a, |buf| {
                    for ((o, gv), yv) in buf.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }

            Op::PRelu { a, slope } => {
                let d = self.nodes[slope.0].numel();
                let x = &self.nodes[a.0].data;
                let sv = &self.nodes[slope.0].data;
                with_grad!(a, |buf| {
                    for (i, (o, gv)) in buf.iter_mut().zip(g).enumerate() {
                        let xv = x[i];
                        *o += if xv > 0.0 { *gv } else { gv * sv[i % d] };
                    }
                });
                with_grad!(slope, |buf| {
                    for (i, (&xv, gv)) in x.iter().zip(g).enumerate() {
                        if xv <= 0.0 {
                            buf[i % d] += gv * xv;
                        }
                    }
                });
            }

            Op::Ln { a } => {
                let x = &self.nodes[a.0].data;
                with_grad!(a, |buf| {
                    for ((o, gv), xv) in buf.iter_mut().zip(g).zip(x) {
                        *o += gv / xv;
                    }
                });
            }

            Op::Clamp { a, lo, hi } => {
                let x = &self.nodes[a.0].data;
                with_grad!(a, |buf| {
                    for ((o, gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        if xv >= lo && xv <= hi {
                            *o += gv;
                        }
                    }
                });
            }

            Op::MaskedSoftmax { a, ref mask } => {
                let d = *self.nodes[node].shape.last().unwrap();
                let y = &self.nodes[node].data;
                with_grad!(a, |buf| {
                    for (r, row) in buf.chunks_exact_mut(d).enumerate() {
                        let ys = &y[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let ms = &mask[r * d..(r + 1) * d];
                        let mut dot = 0.0;
                        for ((yv, gv), &keep) in ys.iter().zip(gs).zip(ms) {
                            if keep {
                                dot += yv * gv;
                            }
                        }
                        for (((o, yv), gv), &keep) in
                            row.iter_mut().zip(ys).zip(gs).zip(ms)
                        {
                            if keep {
                                *o += yv * (gv - dot);
                            }
                        }
                    }
                });
            }

            Op::LayerNorm { a, gain, bias, eps } => {
                let d = *self.nodes[a.0].shape.last().unwrap();
                let x = &self.nodes[a.0].data;
                let gv = &self.nodes[gain.0].data;
                let inv_d = 1.0 / d as f64;
                // Recompute per-row mean / inv-std; cheaper than storing them.
                let row_stats = |r: usize| {
                    let xs = &x[r * d..(r + 1) * d];
                    let mean = xs.iter().sum::<f64>() * inv_d;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_d;
                    (mean, 1.0 / (var + eps).sqrt())
                };
                with_grad!(a, |buf| {
                    for (r, row) in buf.chunks_exact_mut(d).enumerate() {
                        let (mean, inv) = row_stats(r);
                        let xs = &x[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let mut m1 = 0.0; // mean of g*gain
                        let mut m2 = 0.0; // mean of g*gain*xhat
                        for j in 0..d {
                            let gg = gs[j] * gv[j];
                            let xh = (xs[j] - mean) * inv;
                            m1 += gg;
                            m2 += gg * xh;
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let gg = gs[j] * gv[j];
                            let xh = (xs[j] - mean) * inv;
                            row[j] += (gg - m1 - xh * m2) * inv;
                        }
                    }
                });
                with_grad!(gain, |buf| {
                    let rows = x.len() / d;
                    for r in 0..rows {
                        let (mean, inv) = row_stats(r);
                        let xs = &x[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            buf[j] += gs[j] * (xs[j] - mean) * inv;
                        }
                    }
                });
                with_grad!(bias, |buf| {
                    for row in g.chunks_exact(d) {
                        for (o, gs) in buf.iter_mut().zip(row) {
                            *o += gs;
                        }
                    }
                });
            }

            Op::Dropout { a, ref scale } => {
                with_grad!(a, |buf| {
                    for ((o, gv), sv) in buf.iter_mut().zip(g).zip(scale) {
                        *o += gv * sv;
                    }
                });
            }

            Op::Gather { table, ref indices } => {
                let d = self.nodes[table.0].shape[1];
                with_grad!(table, |buf| {
                    for (i, &idx) in indices.iter().enumerate() {
                        let gs = &g[i * d..(i + 1) * d];
                        let dst = &mut buf[idx * d..(idx + 1) * d];
                        for (o, gv) in dst.iter_mut().zip(gs) {
                            *o += gv;
                        }
                    }
                });
            }

            Op::Reshape { a } => {
                with_grad!(a, |buf| add_into(buf, g));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
