//! Reverse-mode differentiation on a linear tape.
//!
//! A `Tape` records every operation of one objective evaluation; `grad`
//! replays it backwards. Tapes are rebuilt per evaluation — there is no
//! persistent graph. Values are immutable `Tensor`s, so recording a leaf is
//! a cheap reference bump.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { tracked: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Log(NodeId),
    Gelu(NodeId),
    Matmul(NodeId, NodeId),
    /// `a @ b^T` for `b` stored `[out, in]`.
    MatmulNT(NodeId, NodeId),
    GatherRows { src: NodeId, rows: Vec<usize> },
    SliceCols { src: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    Row { src: NodeId, row: usize },
    ReplaceRow { src: NodeId, row: usize, rep: NodeId },
    MeanRows { src: NodeId, rows: Vec<usize> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    CausalSoftmax(NodeId),
    Softmax(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    L2Norm(NodeId),
    SumScalars(Vec<NodeId>),
    /// Sum of `log softmax(logits[row])[col]` over the pick list.
    PickLogProbs { logits: NodeId, picks: Vec<(usize, usize)> },
    /// `KL(softmax(logits_row) || exp(ref_logprobs))`.
    KlToRef { logits_row: NodeId, ref_logprobs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar output with respect to tracked leaves.
#[derive(Debug)]
pub struct GradRecord {
    pub output: NodeId,
    grads: HashMap<NodeId, Tensor>,
}

impl GradRecord {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn inputs(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads.keys().copied()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Record an untracked constant.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf { tracked: false })
    }

    /// Record a differentiable input.
    pub fn tracked(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf { tracked: true })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        );
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatmulNT(a, b)))
    }

    pub fn gather_rows(&mut self, src: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let s = self.value(src);
        let w = s.cols();
        let n_rows = s.rows();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in &rows {
            if r >= n_rows {
                return Err(Error::Domain(format!("gather row {r} out of {n_rows}")));
            }
            data.extend_from_slice(s.row(r));
        }
        let v = Tensor::matrix(rows.len(), w, data);
        Ok(self.push(v, Op::GatherRows { src, rows }))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(src);
        let (rows, w) = (s.rows(), s.cols());
        if start + len > w {
            return Err(Error::Domain(format!(
                "column slice [{start}, {}) out of width {w}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&s.row(r)[start..start + len]);
        }
        let v = Tensor::matrix(rows, len, data);
        Ok(self.push(v, Op::SliceCols { src, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                if t.rows() != rows {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        lhs: self.value(parts[0]).shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                data.extend_from_slice(t.row(r));
            }
        }
        let v = Tensor::matrix(rows, total, data);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn row(&mut self, src: NodeId, row: usize) -> Result<NodeId> {
        let s = self.value(src);
        if row >= s.rows() {
            return Err(Error::Domain(format!("row {row} out of {}", s.rows())));
        }
        let v = Tensor::vector(s.row(row).to_vec());
        Ok(self.push(v, Op::Row { src, row }))
    }

    pub fn replace_row(&mut self, src: NodeId, row: usize, rep: NodeId) -> Result<NodeId> {
        let s = self.value(src);
        let (rows, w) = (s.rows(), s.cols());
        if row >= rows || self.value(rep).numel() != w {
            return Err(Error::ShapeMismatch {
                op: "replace_row",
                lhs: s.shape().to_vec(),
                rhs: self.value(rep).shape().to_vec(),
            });
        }
        let mut data = s.data().to_vec();
        data[row * w..(row + 1) * w].copy_from_slice(self.value(rep).data());
        let v = Tensor::matrix(rows, w, data);
        Ok(self.push(v, Op::ReplaceRow { src, row, rep }))
    }

    pub fn mean_rows(&mut self, src: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let s = self.value(src);
        if rows.is_empty() {
            return Err(Error::InvalidSpan { start: 0, end: 0, len: s.rows() });
        }
        let w = s.cols();
        let mut acc = vec![0.0; w];
        for &r in &rows {
            if r >= s.rows() {
                return Err(Error::Domain(format!("mean row {r} out of {}", s.rows())));
            }
            for (a, v) in acc.iter_mut().zip(s.row(r)) {
                *a += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for a in acc.iter_mut() {
            *a *= inv;
        }
        let v = Tensor::vector(acc);
        Ok(self.push(v, Op::MeanRows { src, rows }))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.value(x);
        let w = xs.cols();
        if self.value(gain).numel() != w || self.value(bias).numel() != w {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xs.shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let rows = xs.rows();
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            let row = xs.row(r);
            let (mu, sd) = row_moments(row, eps);
            for c in 0..w {
                out.push((row[c] - mu) / sd * g[c] + b[c]);
            }
        }
        let v = Tensor::new(xs.shape().to_vec(), out);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Softmax over `scores[i, 0..=i]`; strictly-upper entries are zero.
    pub fn causal_softmax(&mut self, scores: NodeId) -> Result<NodeId> {
        let s = self.value(scores);
        let (rows, w) = (s.rows(), s.cols());
        if rows != w {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax",
                lhs: s.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut out = vec![0.0; rows * w];
        for i in 0..rows {
            let row = &s.row(i)[..=i];
            softmax_into(row, &mut out[i * w..i * w + i + 1]);
        }
        let v = Tensor::matrix(rows, w, out);
        Ok(self.push(v, Op::CausalSoftmax(scores)))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x);
        let (rows, w) = (s.rows(), s.cols());
        let mut out = vec![0.0; rows * w];
        for i in 0..rows {
            softmax_into(s.row(i), &mut out[i * w..(i + 1) * w]);
        }
        let v = Tensor::new(s.shape().to_vec(), out);
        self.push(v, Op::Softmax(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x);
        let v = Tensor::scalar(s.data().iter().sum::<f64>() / s.numel() as f64);
        self.push(v, Op::Mean(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x);
        let v = Tensor::scalar(s.data().iter().sum());
        self.push(v, Op::Sum(x))
    }

    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).norm2());
        self.push(v, Op::L2Norm(x))
    }

    pub fn sum_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut acc = 0.0;
        for &p in parts {
            if self.value(p).numel() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "sum_scalars",
                    lhs: self.value(p).shape().to_vec(),
                    rhs: vec![1],
                });
            }
            acc += self.value(p).item();
        }
        Ok(self.push(Tensor::scalar(acc), Op::SumScalars(parts.to_vec())))
    }

    /// Sum of log-probabilities `log softmax(logits[row])[col]` over picks.
    pub fn pick_log_probs(&mut self, logits: NodeId, picks: Vec<(usize, usize)>) -> Result<NodeId> {
        let s = self.value(logits);
        let (rows, w) = (s.rows(), s.cols());
        let mut acc = 0.0;
        for &(r, c) in &picks {
            if r >= rows || c >= w {
                return Err(Error::Domain(format!("pick ({r}, {c}) out of [{rows}, {w}]")));
            }
            let row = s.row(r);
            acc += row[c] - log_sum_exp(row);
        }
        Ok(self.push(Tensor::scalar(acc), Op::PickLogProbs { logits, picks }))
    }

    /// `KL(softmax(logits_row) || exp(ref_logprobs))` against a fixed
    /// reference distribution.
    pub fn kl_to_ref(&mut self, logits_row: NodeId, ref_logprobs: Tensor) -> Result<NodeId> {
        let s = self.value(logits_row);
        if s.numel() != ref_logprobs.numel() {
            return Err(Error::ShapeMismatch {
                op: "kl_to_ref",
                lhs: s.shape().to_vec(),
                rhs: ref_logprobs.shape().to_vec(),
            });
        }
        let lse = log_sum_exp(s.data());
        let mut kl = 0.0;
        for (x, m) in s.data().iter().zip(ref_logprobs.data()) {
            let lp = x - lse;
            kl += lp.exp() * (lp - m);
        }
        Ok(self.push(Tensor::scalar(kl), Op::KlToRef { logits_row, ref_logprobs }))
    }

    fn parents(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::MatmulNT(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Log(a)
            | Op::Gelu(a)
            | Op::CausalSoftmax(a)
            | Op::Softmax(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::L2Norm(a) => vec![*a],
            Op::GatherRows { src, .. }
            | Op::SliceCols { src, .. }
            | Op::Row { src, .. }
            | Op::MeanRows { src, .. } => vec![*src],
            Op::ConcatCols(parts) | Op::SumScalars(parts) => parts.clone(),
            Op::ReplaceRow { src, rep, .. } => vec![*src, *rep],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::PickLogProbs { logits, .. } => vec![*logits],
            Op::KlToRef { logits_row, .. } => vec![*logits_row],
        }
    }

    /// Reverse-mode gradients of the scalar `output` with respect to the
    /// requested tracked leaves.
    pub fn grad(&self, output: NodeId, wrt: &[NodeId]) -> Result<GradRecord> {
        if self.value(output).numel() != 1 {
            return Err(Error::UnsupportedPrimitive(format!(
                "gradient of non-scalar output of shape {:?}",
                self.value(output).shape()
            )));
        }
        for &id in wrt {
            match self.nodes[id.0].op {
                Op::Leaf { tracked: true } => {}
                _ => {
                    return Err(Error::UnsupportedPrimitive(
                        "gradient requested for a non-tracked node".into(),
                    ))
                }
            }
        }

        // Mark nodes that reach a tracked leaf; backward skips the rest.
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Leaf { tracked } => *tracked,
                _ => self.parents(NodeId(i)).iter().any(|p| needs[p.0]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if needs[output.0] {
            grads[output.0] = Some(Tensor::scalar(1.0));
            for i in (0..=output.0).rev() {
                if grads[i].is_none() || !needs[i] {
                    continue;
                }
                let g = grads[i].take().unwrap();
                self.backward_step(NodeId(i), &g, &needs, &mut grads)?;
                if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                    grads[i] = Some(g); // keep leaf gradients
                }
            }
        }

        let mut out = HashMap::new();
        for &id in wrt {
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(id).shape().to_vec()));
            out.insert(id, g);
        }
        Ok(GradRecord { output, grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn backward_step(
        &self,
        id: NodeId,
        g: &Tensor,
        needs: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let val = |n: NodeId| self.value(n);
        match &self.nodes[id.0].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if needs[a.0] {
                    self.accumulate(grads, *a, g.clone());
                }
                if needs[b.0] {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs[a.0] {
                    self.accumulate(grads, *a, g.clone());
                }
                if needs[b.0] {
                    self.accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if needs[a.0] {
                    let mut d = g.clone();
                    let dd = d.data_mut();
                    for (x, y) in dd.iter_mut().zip(val(*b).data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *a, d);
                }
                if needs[b.0] {
                    let mut d = g.clone();
                    let dd = d.data_mut();
                    for (x, y) in dd.iter_mut().zip(val(*a).data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                if needs[a.0] {
                    self.accumulate(grads, *a, g.scale(*c));
                }
            }
            Op::Log(a) => {
                if needs[a.0] {
                    let src = val(*a);
                    let d = Tensor::new(
                        src.shape().to_vec(),
                        g.data().iter().zip(src.data()).map(|(gv, x)| gv / x).collect(),
                    );
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Gelu(a) => {
                if needs[a.0] {
                    let src = val(*a);
                    let d = Tensor::new(
                        src.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(src.data())
                            .map(|(gv, &x)| gv * gelu_prime(x))
                            .collect(),
                    );
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Matmul(a, b) => {
                if needs[a.0] {
                    self.accumulate(grads, *a, g.matmul_nt(val(*b))?);
                }
                if needs[b.0] {
                    self.accumulate(grads, *b, val(*a).matmul_tn(g)?);
                }
            }
            Op::MatmulNT(a, b) => {
                if needs[a.0] {
                    self.accumulate(grads, *a, g.matmul(val(*b))?);
                }
                if needs[b.0] {
                    self.accumulate(grads, *b, g.matmul_tn(val(*a))?);
                }
            }
            Op::GatherRows { src, rows } => {
                if needs[src.0] {
                    let mut d = Tensor::zeros(val(*src).shape().to_vec());
                    let w = d.cols();
                    {
                        let dd = d.data_mut();
                        for (j, &r) in rows.iter().enumerate() {
                            crate::tensor::axpy_slice(&mut dd[r * w..(r + 1) * w], 1.0, g.row(j));
                        }
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::SliceCols { src, start, len } => {
                if needs[src.0] {
                    let mut d = Tensor::zeros(val(*src).shape().to_vec());
                    let w = d.cols();
                    {
                        let dd = d.data_mut();
                        for r in 0..g.rows() {
                            dd[r * w + start..r * w + start + len].copy_from_slice(g.row(r));
                        }
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs[p.0] {
                        let rows = val(p).rows();
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(rows, w, data));
                    }
                    offset += w;
                }
            }
            Op::Row { src, row } => {
                if needs[src.0] {
                    let mut d = Tensor::zeros(val(*src).shape().to_vec());
                    let w = d.cols();
                    d.data_mut()[row * w..(row + 1) * w].copy_from_slice(g.data());
                    self.accumulate(grads, *src, d);
                }
            }
            Op::ReplaceRow { src, row, rep } => {
                if needs[src.0] {
                    let mut d = g.clone();
                    let w = d.cols();
                    for v in &mut d.data_mut()[row * w..(row + 1) * w] {
                        *v = 0.0;
                    }
                    self.accumulate(grads, *src, d);
                }
                if needs[rep.0] {
                    self.accumulate(grads, *rep, Tensor::vector(g.row(*row).to_vec()));
                }
            }
            Op::MeanRows { src, rows } => {
                if needs[src.0] {
                    let mut d = Tensor::zeros(val(*src).shape().to_vec());
                    let w = d.cols();
                    let inv = 1.0 / rows.len() as f64;
                    {
                        let dd = d.data_mut();
                        for &r in rows {
                            crate::tensor::axpy_slice(&mut dd[r * w..(r + 1) * w], inv, g.data());
                        }
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xs = val(*x);
                let gn = val(*gain);
                let (rows, w) = (xs.rows(), xs.cols());
                let mut gx = if needs[x.0] { Some(Tensor::zeros(xs.shape().to_vec())) } else { None };
                let mut ggain = if needs[gain.0] { Some(vec![0.0; w]) } else { None };
                let mut gbias = if needs[bias.0] { Some(vec![0.0; w]) } else { None };
                for r in 0..rows {
                    let row = xs.row(r);
                    let grow = g.row(r);
                    let (mu, sd) = row_moments(row, *eps);
                    if let Some(gb) = gbias.as_mut() {
                        for c in 0..w {
                            gb[c] += grow[c];
                        }
                    }
                    if let Some(gg) = ggain.as_mut() {
                        for c in 0..w {
                            gg[c] += grow[c] * (row[c] - mu) / sd;
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        // d/dx of (x - mu)/sd * gain
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for c in 0..w {
                            let xhat = (row[c] - mu) / sd;
                            let gh = grow[c] * gn.data()[c];
                            mean_gh += gh;
                            mean_ghx += gh * xhat;
                        }
                        mean_gh /= w as f64;
                        mean_ghx /= w as f64;
                        let out = gx.data_mut();
                        for c in 0..w {
                            let xhat = (row[c] - mu) / sd;
                            let gh = grow[c] * gn.data()[c];
                            out[r * w + c] = (gh - mean_gh - xhat * mean_ghx) / sd;
                        }
                    }
                }
                if let Some(d) = gx {
                    self.accumulate(grads, *x, d);
                }
                if let Some(d) = ggain {
                    self.accumulate(grads, *gain, Tensor::vector(d));
                }
                if let Some(d) = gbias {
                    self.accumulate(grads, *bias, Tensor::vector(d));
                }
            }
            Op::CausalSoftmax(a) => {
                if needs[a.0] {
                    let p = &self.nodes[id.0].value;
                    let w = p.cols();
                    let mut d = Tensor::zeros(p.shape().to_vec());
                    {
                        let dd = d.data_mut();
                        for i in 0..p.rows() {
                            let prow = &p.row(i)[..=i];
                            let grow = &g.row(i)[..=i];
                            let inner: f64 = prow.iter().zip(grow).map(|(pv, gv)| pv * gv).sum();
                            for c in 0..=i {
                                dd[i * w + c] = prow[c] * (grow[c] - inner);
                            }
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Softmax(a) => {
                if needs[a.0] {
                    let p = &self.nodes[id.0].value;
                    let w = p.cols();
                    let mut d = Tensor::zeros(p.shape().to_vec());
                    {
                        let dd = d.data_mut();
                        for i in 0..p.rows() {
                            let prow = p.row(i);
                            let grow = g.row(i);
                            let inner: f64 = prow.iter().zip(grow).map(|(pv, gv)| pv * gv).sum();
                            for c in 0..w {
                                dd[i * w + c] = prow[c] * (grow[c] - inner);
                            }
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Mean(a) => {
                if needs[a.0] {
                    let src = val(*a);
                    let c = g.item() / src.numel() as f64;
                    self.accumulate(grads, *a, Tensor::new(src.shape().to_vec(), vec![c; src.numel()]));
                }
            }
            Op::Sum(a) => {
                if needs[a.0] {
                    let src = val(*a);
                    let c = g.item();
                    self.accumulate(grads, *a, Tensor::new(src.shape().to_vec(), vec![c; src.numel()]));
                }
            }
            Op::L2Norm(a) => {
                if needs[a.0] {
                    let src = val(*a);
                    let norm = self.nodes[id.0].value.item();
                    let c = if norm > 0.0 { g.item() / norm } else { 0.0 };
                    self.accumulate(grads, *a, src.scale(c));
                }
            }
            Op::SumScalars(parts) => {
                for &p in parts {
                    if needs[p.0] {
                        self.accumulate(grads, p, g.clone());
                    }
                }
            }
            Op::PickLogProbs { logits, picks } => {
                if needs[logits.0] {
                    let s = val(*logits);
                    let (rows, w) = (s.rows(), s.cols());
                    let gv = g.item();
                    // per-row pick counts
                    let mut counts = vec![0usize; rows];
                    for &(r, _) in picks {
                        counts[r] += 1;
                    }
                    let mut d = Tensor::zeros(s.shape().to_vec());
                    {
                        let dd = d.data_mut();
                        for r in 0..rows {
                            if counts[r] == 0 {
                                continue;
                            }
                            let row = s.row(r);
                            let lse = log_sum_exp(row);
                            let scale = counts[r] as f64;
                            for c in 0..w {
                                dd[r * w + c] = -gv * scale * (row[c] - lse).exp();
                            }
                        }
                        for &(r, c) in picks {
                            dd[r * w + c] += gv;
                        }
                    }
                    self.accumulate(grads, *logits, d);
                }
            }
            Op::KlToRef { logits_row, ref_logprobs } => {
                if needs[logits_row.0] {
                    let s = val(*logits_row);
                    let kl = self.nodes[id.0].value.item();
                    let lse = log_sum_exp(s.data());
                    let gv = g.item();
                    let d = Tensor::new(
                        s.shape().to_vec(),
                        s.data()
                            .iter()
                            .zip(ref_logprobs.data())
                            .map(|(x, m)| {
                                let lp = x - lse;
                                gv * lp.exp() * (lp - m - kl)
                            })
                            .collect(),
                    );
                    self.accumulate(grads, *logits_row, d);
                }
            }
        }
        Ok(())
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, (var + eps).sqrt())
}

fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = (s - max).exp();
        *d = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for d in dst.iter_mut() {
        *d *= inv;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.tracked(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let rec = tape.grad(y, &[x]).unwrap();
        assert!((rec.wrt(x).unwrap().item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn l2_norm_gradient() {
        let mut tape = Tape::new();
        let x = tape.tracked(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.l2_norm(x);
        assert!((tape.value(y).item() - 5.0).abs() < 1e-12);
        let rec = tape.grad(y, &[x]).unwrap();
        let g = rec.wrt(x).unwrap();
        assert!((g.data()[0] - 0.6).abs() < 1e-12);
        assert!((g.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn grad_of_untracked_leaf_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1.0));
        let y = tape.scale(x, 2.0);
        assert!(tape.grad(y, &[x]).is_err());
    }

    #[test]
    fn grad_of_nonscalar_is_error() {
        let mut tape = Tape::new();
        let x = tape.tracked(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0);
        match tape.grad(y, &[x]) {
            Err(Error::UnsupportedPrimitive(_)) => {}
            other => panic!("expected unsupported-primitive, got {other:?}"),
        }
    }

    #[test]
    fn untouched_input_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.tracked(Tensor::scalar(2.0));
        let z = tape.tracked(Tensor::vector(vec![1.0, 1.0]));
        let y = tape.mul(x, x).unwrap();
        let rec = tape.grad(y, &[x, z]).unwrap();
        assert_eq!(rec.wrt(z).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn pick_log_probs_uniform_row() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(1, 4, vec![0.0; 4]));
        let lp = tape.pick_log_probs(logits, vec![(0, 2)]).unwrap();
        assert!((tape.value(lp).item() - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_to_self_is_zero() {
        let mut tape = Tape::new();
        let logits = Tensor::vector(vec![0.3, -1.0, 2.0]);
        let lse = log_sum_exp(logits.data());
        let ref_lp = logits.map(|v| v - lse);
        let node = tape.constant(logits);
        let kl = tape.kl_to_ref(node, ref_lp).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-12);
    }

    /// Central finite differences on random compositions of the exposed
    /// primitives.
    #[test]
    fn gradients_match_finite_differences_on_random_compositions() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let n = 6;
            let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let gain: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
            let bias: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let variant = trial % 5;

            let eval = |x: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let xv = tape.tracked(Tensor::matrix(1, n, x.to_vec()));
                let wv = tape.constant(Tensor::matrix(n, n, w.clone()));
                let gv = tape.constant(Tensor::vector(gain.clone()));
                let bv = tape.constant(Tensor::vector(bias.clone()));
                let out = match variant {
                    0 => {
                        let h = tape.matmul(xv, wv).unwrap();
                        let h = tape.gelu(h);
                        tape.l2_norm(h)
                    }
                    1 => {
                        let h = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
                        let h = tape.matmul_nt(h, wv).unwrap();
                        tape.mean(h)
                    }
                    2 => {
                        let h = tape.softmax(xv);
                        let h2 = tape.mul(h, h).unwrap();
                        tape.sum(h2)
                    }
                    3 => {
                        let h = tape.matmul(xv, wv).unwrap();
                        tape.pick_log_probs(h, vec![(0, 1), (0, 3)]).unwrap()
                    }
                    _ => {
                        let h = tape.matmul(xv, wv).unwrap();
                        let s = tape.gelu(h);
                        let a = tape.add(s, xv).unwrap();
                        let sq = tape.mul(a, a).unwrap();
                        let sm = tape.sum(sq);
                        let ln = tape.log(sm);
                        tape.scale(ln, 0.5)
                    }
                };
                tape.value(out).item()
            };

            // analytic gradient
            let mut tape = Tape::new();
            let xv = tape.tracked(Tensor::matrix(1, n, x0.clone()));
            let wv = tape.constant(Tensor::matrix(n, n, w.clone()));
            let gv = tape.constant(Tensor::vector(gain.clone()));
            let bv = tape.constant(Tensor::vector(bias.clone()));
            let out = match variant {
                0 => {
                    let h = tape.matmul(xv, wv).unwrap();
                    let h = tape.gelu(h);
                    tape.l2_norm(h)
                }
                1 => {
                    let h = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
                    let h = tape.matmul_nt(h, wv).unwrap();
                    tape.mean(h)
                }
                2 => {
                    let h = tape.softmax(xv);
                    let h2 = tape.mul(h, h).unwrap();
                    tape.sum(h2)
                }
                3 => {
                    let h = tape.matmul(xv, wv).unwrap();
                    tape.pick_log_probs(h, vec![(0, 1), (0, 3)]).unwrap()
                }
                _ => {
                    let h = tape.matmul(xv, wv).unwrap();
                    let s = tape.gelu(h);
                    let a = tape.add(s, xv).unwrap();
                    let sq = tape.mul(a, a).unwrap();
                    let sm = tape.sum(sq);
                    let ln = tape.log(sm);
                    tape.scale(ln, 0.5)
                }
            };
            let rec = tape.grad(out, &[xv]).unwrap();
            let analytic = rec.wrt(xv).unwrap().data().to_vec();

            let h = 1e-4;
            for i in 0..n {
                let mut plus = x0.clone();
                plus[i] += h;
                let mut minus = x0.clone();
                minus[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
                assert!(
                    (fd - analytic[i]).abs() / denom < 1e-4,
                    "trial {trial} variant {variant} coord {i}: fd {fd} vs analytic {}",
                    analytic[i]
                );
            }
        }
    }
}
