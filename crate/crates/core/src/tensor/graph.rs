//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list is
//! already topologically sorted and the backward pass is a single reverse sweep.

use rand::Rng;

use super::kernels::{gemm, Layout};
use super::ops::{self, AttnView, LayerNormSaved};
use super::{dim_err, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row ranges of one attention problem inside packed query and key buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub n_heads: usize,
    pub causal: bool,
    pub segments: Vec<Segment>,
    /// Indexed by key row; true where the key is padding.
    pub key_pad: Option<Vec<bool>>,
}

impl AttentionLayout {
    fn view<'a>(&'a self, seg: &Segment, d: usize, q: &'a [f32], k: &'a [f32], v: &'a [f32]) -> AttnView<'a> {
        AttnView {
            q: &q[seg.q_start * d..(seg.q_start + seg.q_len) * d],
            k: &k[seg.k_start * d..(seg.k_start + seg.k_len) * d],
            v: &v[seg.k_start * d..(seg.k_start + seg.k_len) * d],
            key_pad: self
                .key_pad
                .as_ref()
                .map(|m| &m[seg.k_start..seg.k_start + seg.k_len]),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRowBias(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        saved: LayerNormSaved,
    },
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    MaskedSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        ignore: u32,
        probs: Vec<f32>,
        count: usize,
    },
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<Vec<f32>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record: the values and operations of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match dst {
        None => *dst = Some(src),
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}

impl Graph {
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, TensorError> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.leaf(value, false)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(dim_err(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let c = gemm(self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, m, n, k);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), rg, "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var, TensorError> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data)?, Op::Scale(a, factor), rg, "scale")
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(dim_err("add_row_bias", format!("bias {} vs {cols} columns", self.value(bias).numel())));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, bias]);
        self.push(Tensor::new(shape, data)?, Op::AddRowBias(x, bias), rg, "add_row_bias")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var, TensorError> {
        let d = self.value(x).cols();
        if d == 0 {
            return Err(dim_err("layer_norm", "empty feature dimension"));
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(dim_err("layer_norm", format!("gain/bias length differs from {d}")));
        }
        let (y, saved) = ops::layer_norm_forward(
            self.value(x).data(),
            d,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            Tensor::new(shape, y)?,
            Op::LayerNorm { x, gain, bias, saved },
            rg,
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| ops::gelu(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data)?, Op::Gelu(x), rg, "gelu")
    }

    /// Inverted dropout. Draws one uniform per element in row-major order.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, rng: &mut R) -> Result<Var, TensorError> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f32> = (0..t.numel())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data)?, Op::Dropout { x, mask }, rg, "dropout")
    }

    /// Gathers rows of `table` (`n × d`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let (n, d) = self.matrix_dims(table, "embedding")?;
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= n {
                return Err(dim_err("embedding", format!("id {id} outside table of {n} rows")));
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    /// Row softmax of a matrix; `mask` (same size, row-major) marks disallowed entries.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let (rows, cols) = self.matrix_dims(x, "masked_softmax_rows")?;
        if mask.len() != rows * cols {
            return Err(dim_err("masked_softmax_rows", "mask size differs from scores"));
        }
        let mut data = self.value(x).data().to_vec();
        for (r, row) in data.chunks_mut(cols.max(1)).enumerate() {
            let m = &mask[r * cols..(r + 1) * cols];
            if !ops::softmax_row_masked(row, |j| m[j]) {
                return Err(TensorError::DegenerateRow { row: r });
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![rows, cols], data)?, Op::MaskedSoftmax(x), rg, "masked_softmax_rows")
    }

    /// Mean NLL over rows whose target is not `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: u32) -> Result<Var, TensorError> {
        let (_, n_classes) = self.matrix_dims(logits, "cross_entropy")?;
        let (loss, probs, count) =
            ops::cross_entropy_forward(self.value(logits).data(), n_classes, targets, ignore)?;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum::<f32>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Multi-head scaled dot-product attention over packed rows.
    ///
    /// `q` is `rows_q × d`; `k` and `v` are `rows_k × d`. Each segment attends
    /// its own query rows to its own key rows; the output has the shape of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var, TensorError> {
        let (rq, d) = self.matrix_dims(q, "attention")?;
        let (rk, dk) = self.matrix_dims(k, "attention")?;
        if self.value(v).shape() != self.value(k).shape() || dk != d {
            return Err(dim_err("attention", "key/value/query widths disagree"));
        }
        if layout.n_heads == 0 || d % layout.n_heads != 0 {
            return Err(dim_err("attention", format!("{d} features not divisible into {} heads", layout.n_heads)));
        }
        if let Some(m) = &layout.key_pad {
            if m.len() != rk {
                return Err(dim_err("attention", "key pad mask length differs from key rows"));
            }
        }
        let mut out = vec![0.0f32; rq * d];
        let mut probs = Vec::with_capacity(layout.segments.len());
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for seg in &layout.segments {
                if seg.q_start + seg.q_len > rq || seg.k_start + seg.k_len > rk {
                    return Err(dim_err("attention", "segment outside buffers"));
                }
                let view = layout.view(seg, d, qd, kd, vd);
                let o = &mut out[seg.q_start * d..(seg.q_start + seg.q_len) * d];
                probs.push(ops::attend(view, d, layout.n_heads, layout.causal, o)?);
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor::new(vec![rq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
            "attention",
        )
    }

    /// Attention probabilities of an attention node, one `heads × q × k`
    /// buffer per segment, together with the layout that produced them.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttentionLayout, &[Vec<f32>])> {
        match &self.nodes[v.0].op {
            Op::Attention { layout, probs, .. } => Some((layout, probs.as_slice())),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`. Every leaf created with
    /// `requires_grad` receives a gradient, zero when it did not influence the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => Some(match grads[i].take() {
                    Some(g) => Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"),
                    None => Tensor::zeros(n.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let da = gemm(g, Layout::Normal, self.value(*b).data(), Layout::Transposed, m, k, n);
                    add_into(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let db = gemm(self.value(*a).data(), Layout::Transposed, g, Layout::Normal, k, n, m);
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], d);
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g.iter().map(|x| x * f).collect());
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.to_vec());
                }
                if self.wants(*bias) {
                    let cols = self.value(*bias).numel();
                    let mut db = vec![0.0f32; cols];
                    for row in g.chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    add_into(&mut grads[bias.0], db);
                }
            }
            Op::LayerNorm { x, gain, bias, saved } => {
                let d = self.value(*gain).numel();
                let (dx, dg, db) = ops::layer_norm_backward(g, d, self.value(*gain).data(), saved);
                if self.wants(*x) {
                    add_into(&mut grads[x.0], dx);
                }
                if self.wants(*gain) {
                    add_into(&mut grads[gain.0], dg);
                }
                if self.wants(*bias) {
                    add_into(&mut grads[bias.0], db);
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let d = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, &xv)| gv * ops::gelu_grad(xv))
                        .collect();
                    add_into(&mut grads[x.0], d);
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.iter().zip(mask).map(|(a, m)| a * m).collect());
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let d = self.value(*table).cols();
                    let mut dt = vec![0.0f32; self.value(*table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        for (a, b) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *a += b;
                        }
                    }
                    add_into(&mut grads[table.0], dt);
                }
            }
            Op::MaskedSoftmax(x) => {
                if self.wants(*x) {
                    let cols = node.value.cols();
                    let p = node.value.data();
                    let mut dx = vec![0.0f32; p.len()];
                    for r in 0..node.value.rows() {
                        let rr = r * cols..(r + 1) * cols;
                        ops::softmax_row_backward(&p[rr.clone()], &g[rr.clone()], &mut dx[rr]);
                    }
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let n_classes = self.value(*logits).cols();
                    let scale = g[0] / *count as f32;
                    let mut dl = vec![0.0f32; probs.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let row = &mut dl[r * n_classes..(r + 1) * n_classes];
                        for (d, p) in row.iter_mut().zip(&probs[r * n_classes..(r + 1) * n_classes]) {
                            *d = p * scale;
                        }
                        row[t as usize] -= scale;
                    }
                    add_into(&mut grads[logits.0], dl);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let d = self.value(*q).cols();
                let mut dq = vec![0.0f32; self.value(*q).numel()];
                let mut dk = vec![0.0f32; self.value(*k).numel()];
                let mut dv = vec![0.0f32; self.value(*v).numel()];
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                for (seg, p) in layout.segments.iter().zip(probs) {
                    let view = layout.view(seg, d, qd, kd, vd);
                    let qr = seg.q_start * d..(seg.q_start + seg.q_len) * d;
                    let kr = seg.k_start * d..(seg.k_start + seg.k_len) * d;
                    ops::attend_backward(
                        view,
                        p,
                        d,
                        layout.n_heads,
                        &g[qr.clone()],
                        &mut dq[qr],
                        &mut dk[kr.clone()],
                        &mut dv[kr],
                    );
                }
                if self.wants(*q) {
                    add_into(&mut grads[q.0], dq);
                }
                if self.wants(*k) {
                    add_into(&mut grads[k.0], dk);
                }
                if self.wants(*v) {
                    add_into(&mut grads[v.0], dv);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let c = g.matmul(i, m).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0])).unwrap();
        let v = g.constant(t(&[2, 1], &[5.0, 7.0])).unwrap();
        let c = g.matmul(s, v).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 0.0]);
        let bad = g.constant(t(&[3, 1], &[0.0; 3])).unwrap();
        assert!(matches!(g.matmul(s, bad), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn sum_and_quadratic_gradients() {
        let mut g = Graph::new();
        let w = g.param(t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, -1.5])).unwrap();
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 6]);

        let mut g = Graph::new();
        let data = [0.3, -1.2, 2.5];
        let w = g.param(t(&[3], &data)).unwrap();
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        let grads = g.backward(half).unwrap();
        for (gv, wv) in grads.get(w).unwrap().data().iter().zip(data) {
            assert_abs_diff_eq!(*gv, wv, epsilon = 1e-7);
        }
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(w), Err(TensorError::Contract(_))));
    }

    #[test]
    fn cross_entropy_empty_is_an_error() {
        let mut g = Graph::new();
        let l = g.param(Tensor::zeros(&[2, 4])).unwrap();
        assert_eq!(g.cross_entropy(l, &[0, 0], 0).unwrap_err(), TensorError::EmptyLoss);
    }

    #[test]
    fn fully_masked_softmax_row_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        let err = g.masked_softmax_rows(x, &[false, true, true, true]).unwrap_err();
        assert_eq!(err, TensorError::DegenerateRow { row: 1 });
    }

    #[test]
    fn layer_norm_rejects_empty_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 0])).unwrap();
        let gn = g.constant(Tensor::zeros(&[0])).unwrap();
        assert!(matches!(g.layer_norm(x, gn, gn, 1e-5), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2], f32::MAX)).unwrap();
        assert!(matches!(g.add(x, x), Err(TensorError::NonFinite { .. })));
    }
}
