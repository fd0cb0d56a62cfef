//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive application in creation order, so the
//! node list is already topologically sorted and [`Tape::backward`] only has
//! to walk it once in reverse. Values live on the tape; parameters are copied
//! in as leaves at the start of each step and their gradients are read back
//! with [`Tape::grad`] after the backward pass.

use std::sync::Arc;

use rand::Rng;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How [`Tape::scaled_cosine_error`] applies `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CosineForm {
    /// `(1 - cos)^gamma`
    Power,
    /// `(1 - cos) * gamma`
    Scale,
}

/// Segment reduction used by graph readouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Mean,
    Sum,
    Max,
}

impl CosineForm {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Power => "power",
            Self::Scale => "scale",
        }
    }
}

impl std::str::FromStr for CosineForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power" => Ok(Self::Power),
            "scale" => Ok(Self::Scale),
            other => Err(Error::Config(format!("unknown cosine form '{other}' (power|scale)"))),
        }
    }
}

impl Pool {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
            Self::Max => "max",
        }
    }
}

impl std::str::FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown pooling '{other}' (mean|sum|max)"))),
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    FixedMatMul(Arc<Tensor>, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Dropout(Var, Vec<f32>),
    RowL2Normalize(Var, Vec<f32>),
    Hadamard(Var, Var),
    GatherRows(Var, Vec<usize>),
    SetRows {
        base: Var,
        rows: Vec<usize>,
        row: Var,
    },
    ConcatCols(Vec<Var>),
    SegmentPool {
        input: Var,
        segments: Vec<usize>,
        counts: Vec<usize>,
        pool: Pool,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor,
        targets: Vec<usize>,
        rows: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f32>,
    },
    ScaledCosine {
        recon: Var,
        target: Var,
        rows: Vec<usize>,
        gamma: f32,
        form: CosineForm,
    },
    External(Var, Tensor),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        op,
        left: a,
        right: b,
    }
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    /// Sparse constant times a dense value.
    pub fn spmm(&mut self, adj: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let out = adj.matmul_dense(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::SpMM(Arc::clone(adj), x)))
    }

    /// Dense constant times a value, without copying the constant onto the tape.
    pub fn matmul_fixed(&mut self, a: &Arc<Tensor>, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if a.cols() != sx.0 {
            return Err(shape_err("matmul_fixed", a.shape(), sx));
        }
        let mut out = Tensor::zeros(a.rows(), sx.1);
        gemm(a, false, self.value(x), false, &mut out, 0.0);
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::FixedMatMul(Arc::clone(a), x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Adds a `1 × d` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.0 != 1 || sb.1 != sx.1 {
            return Err(shape_err("add_bias", sx, sb));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..sx.0 {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu(x))
    }

    /// Inverted dropout. Identity when not training or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f32,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).data().len();
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Dropout(x, mask)))
    }

    /// Scales every row to unit L2 norm; zero rows stay zero.
    pub fn row_l2_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::RowL2Normalize(x, norms))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("hadamard", sa, sb));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Hadamard(a, b)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= s.0) {
            return Err(shape_err("gather_rows", s, (bad, 0)));
        }
        let out = self.value(x).select_rows(idx);
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::GatherRows(x, idx.to_vec())))
    }

    /// Copy of `base` with the listed rows replaced by the single row `row`.
    pub fn set_rows(&mut self, base: Var, rows: &[usize], row: Var) -> Result<Var> {
        let (sb, sr) = (self.shape(base), self.shape(row));
        if sr.0 != 1 || sr.1 != sb.1 {
            return Err(shape_err("set_rows", sb, sr));
        }
        if rows.iter().any(|&r| r >= sb.0) {
            return Err(shape_err("set_rows", sb, (rows.len(), sr.1)));
        }
        let mut out = self.value(base).clone();
        let src = self.value(row).data().to_vec();
        for &r in rows {
            out.row_mut(r).copy_from_slice(&src);
        }
        let rg = self.rg(base) || self.rg(row);
        Ok(self.push(
            out,
            rg,
            Op::SetRows {
                base,
                rows: rows.to_vec(),
                row,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(shape_err("concat_cols", (rows, width), s));
            }
            width += s.1;
        }
        let mut out = Tensor::zeros(rows, width);
        let mut off = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for i in 0..rows {
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            }
            off += v.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Reduces rows into `num_segments` rows; `segments[i]` names the output row of input row `i`.
    pub fn segment_pool(
        &mut self,
        x: Var,
        segments: &[usize],
        num_segments: usize,
        pool: Pool,
    ) -> Result<Var> {
        let s = self.shape(x);
        if segments.len() != s.0 {
            return Err(shape_err("segment_pool", s, (segments.len(), 1)));
        }
        let mut counts = vec![0usize; num_segments];
        for &g in segments {
            if g >= num_segments {
                return Err(shape_err("segment_pool", s, (g, num_segments)));
            }
            counts[g] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::Empty("segment with no rows"));
        }
        let v = self.value(x);
        let d = s.1;
        let mut out = Tensor::zeros(num_segments, d);
        let mut argmax = Vec::new();
        match pool {
            Pool::Sum | Pool::Mean => {
                for (i, &g) in segments.iter().enumerate() {
                    for (o, &a) in out.row_mut(g).iter_mut().zip(v.row(i)) {
                        *o += a;
                    }
                }
                if pool == Pool::Mean {
                    for (g, &c) in counts.iter().enumerate() {
                        let inv = 1.0 / c as f32;
                        out.row_mut(g).iter_mut().for_each(|o| *o *= inv);
                    }
                }
            }
            Pool::Max => {
                argmax = vec![usize::MAX; num_segments * d];
                for (i, &g) in segments.iter().enumerate() {
                    for (j, &a) in v.row(i).iter().enumerate() {
                        let slot = g * d + j;
                        if argmax[slot] == usize::MAX || a > out.get(g, j) {
                            argmax[slot] = i;
                            out.set(g, j, a);
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            rg,
            Op::SegmentPool {
                input: x,
                segments: segments.to_vec(),
                counts,
                pool,
                argmax,
            },
        ))
    }

    /// Mean negative log-likelihood over rows where `mask` is set.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let s = self.shape(logits);
        if targets.len() != s.0 || mask.len() != s.0 {
            return Err(shape_err("softmax_cross_entropy", s, (targets.len(), 1)));
        }
        let rows: Vec<usize> = (0..s.0).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::Empty("cross-entropy mask"));
        }
        let lv = self.value(logits);
        let mut probs = Tensor::zeros(s.0, s.1);
        let mut total = 0.0f64;
        for &i in &rows {
            let t = targets[i];
            if t >= s.1 {
                return Err(Error::Config(format!(
                    "target {t} outside [0, {}) at row {i}",
                    s.1
                )));
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for &v in row {
                z += ((v - max) as f64).exp();
            }
            let lse = max as f64 + z.ln();
            total += lse - row[t] as f64;
            for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (((v - max) as f64).exp() / z) as f32;
            }
        }
        let loss = (total / rows.len() as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                rows,
            },
        ))
    }

    /// Mean binary cross-entropy of an `n × 1` logit column against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32]) -> Result<Var> {
        let s = self.shape(logits);
        if s.1 != 1 || targets.len() != s.0 {
            return Err(shape_err("bce_with_logits", s, (targets.len(), 1)));
        }
        if s.0 == 0 {
            return Err(Error::Empty("binary cross-entropy batch"));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0f64;
        for (&x, &y) in lv.iter().zip(targets) {
            let x = x as f64;
            total += x.max(0.0) - x * y as f64 + (-x.abs()).exp().ln_1p();
        }
        let loss = (total / s.0 as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean over masked rows of the scaled cosine error between `recon` and `target`.
    /// Rows where either side has zero norm contribute 1 and no gradient.
    pub fn scaled_cosine_error(
        &mut self,
        recon: Var,
        target: Var,
        gamma: f32,
        form: CosineForm,
        mask: &[bool],
    ) -> Result<Var> {
        let (sr, st) = (self.shape(recon), self.shape(target));
        if sr != st || mask.len() != sr.0 {
            return Err(shape_err("scaled_cosine_error", sr, st));
        }
        if gamma < 1.0 {
            return Err(Error::Config(format!("gamma {gamma} must be >= 1")));
        }
        let rows: Vec<usize> = (0..sr.0).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::Empty("cosine error mask"));
        }
        let (zr, xt) = (self.value(recon), self.value(target));
        let mut total = 0.0f64;
        for &i in &rows {
            total += match cosine_row(zr.row(i), xt.row(i)) {
                Some((c, _, _)) => cosine_loss(c, gamma, form),
                None => 1.0,
            };
        }
        let loss = (total / rows.len() as f64) as f32;
        let rg = self.rg(recon) || self.rg(target);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::ScaledCosine {
                recon,
                target,
                rows,
                gamma,
                form,
            },
        ))
    }

    /// Scalar whose value and input gradient were computed elsewhere.
    pub fn external_loss(&mut self, input: Var, loss: f32, grad: Tensor) -> Result<Var> {
        let s = self.shape(input);
        if grad.shape() != s {
            return Err(shape_err("external_loss", s, grad.shape()));
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(loss), rg, Op::External(input, grad)))
    }

    /// Propagates gradients from the scalar `loss` to every input that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("tape already consumed; re-run the forward pass"));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Backward("loss must be a 1x1 scalar"));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut Tensor)) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let shape = node.value.shape();
        let acc = node.grad.get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
        f(acc);
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &Tensor) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let bv = self.nodes[b.0].value.clone();
                    self.accumulate_with(*a, |acc| gemm(g, false, &bv, true, acc, 1.0));
                }
                if self.rg(*b) {
                    let av = self.nodes[a.0].value.clone();
                    self.accumulate_with(*b, |acc| gemm(&av, true, g, false, acc, 1.0));
                }
            }
            Op::SpMM(adj, x) => {
                self.accumulate_with(*x, |acc| adj.transpose_matmul_into(g, acc));
            }
            Op::FixedMatMul(a, x) => {
                self.accumulate_with(*x, |acc| gemm(a, true, g, false, acc, 1.0));
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::AddBias(x, b) => {
                self.accumulate(*x, g.clone());
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(*b, gb);
            }
            Op::Scale(x, s) => {
                let mut gx = g.clone();
                gx.scale(*s);
                self.accumulate(*x, gx);
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                for (o, &y) in gx.data_mut().iter_mut().zip(self.nodes[i].value.data()) {
                    if y <= 0.0 {
                        *o = 0.0;
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::Dropout(x, mask) => {
                let mut gx = g.clone();
                for (o, m) in gx.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                self.accumulate(*x, gx);
            }
            Op::RowL2Normalize(x, norms) => {
                let y = &self.nodes[i].value;
                let mut gx = Tensor::zeros(g.rows(), g.cols());
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::Hadamard(a, b) => {
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for (o, v) in ga.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                        *o *= v;
                    }
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = g.clone();
                    for (o, v) in gb.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *o *= v;
                    }
                    self.accumulate(*b, gb);
                }
            }
            Op::GatherRows(x, idx) => {
                self.accumulate_with(*x, |acc| {
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, v) in acc.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SetRows { base, rows, row } => {
                if self.rg(*base) {
                    let mut gb = g.clone();
                    for &r in rows {
                        gb.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                    }
                    self.accumulate(*base, gb);
                }
                if self.rg(*row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    // Duplicate indices overwrite the same row once.
                    let mut seen = rows.clone();
                    seen.sort_unstable();
                    seen.dedup();
                    for &r in &seen {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(*row, gr);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.accumulate(p, gp);
                    }
                    off += w;
                }
            }
            Op::SegmentPool {
                input,
                segments,
                counts,
                pool,
                argmax,
            } => {
                let d = g.cols();
                self.accumulate_with(*input, |acc| match pool {
                    Pool::Sum | Pool::Mean => {
                        for (r, &s) in segments.iter().enumerate() {
                            let scale = if *pool == Pool::Mean {
                                1.0 / counts[s] as f32
                            } else {
                                1.0
                            };
                            for (o, v) in acc.row_mut(r).iter_mut().zip(g.row(s)) {
                                *o += v * scale;
                            }
                        }
                    }
                    Pool::Max => {
                        for (slot, &src) in argmax.iter().enumerate() {
                            let (s, j) = (slot / d, slot % d);
                            let cur = acc.get(src, j);
                            acc.set(src, j, cur + g.get(s, j));
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
                rows,
            } => {
                let scale = g.item() / rows.len() as f32;
                self.accumulate_with(*logits, |acc| {
                    for &r in rows {
                        let p = probs.row(r);
                        for (j, o) in acc.row_mut(r).iter_mut().enumerate() {
                            let y = if j == targets[r] { 1.0 } else { 0.0 };
                            *o += (p[j] - y) * scale;
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let scale = g.item() / targets.len() as f32;
                let lv = self.nodes[logits.0].value.data().to_vec();
                self.accumulate_with(*logits, |acc| {
                    for ((o, &x), &y) in acc.data_mut().iter_mut().zip(&lv).zip(targets) {
                        let s = 1.0 / (1.0 + (-x as f64).exp());
                        *o += (s as f32 - y) * scale;
                    }
                });
            }
            Op::ScaledCosine {
                recon,
                target,
                rows,
                gamma,
                form,
            } => {
                let scale = g.item() as f64 / rows.len() as f64;
                let zr = self.nodes[recon.0].value.clone();
                let xt = self.nodes[target.0].value.clone();
                let (want_z, want_x) = (self.rg(*recon), self.rg(*target));
                let mut gz = Tensor::zeros(zr.rows(), zr.cols());
                let mut gx = Tensor::zeros(xt.rows(), xt.cols());
                for &r in rows {
                    let Some((c, nz, nx)) = cosine_row(zr.row(r), xt.row(r)) else {
                        continue;
                    };
                    let dl_dc = cosine_loss_dc(c, *gamma, *form) * scale;
                    let (z, x) = (zr.row(r), xt.row(r));
                    if want_z {
                        for ((o, &zv), &xv) in gz.row_mut(r).iter_mut().zip(z).zip(x) {
                            let dc = xv as f64 / (nz * nx) - c * zv as f64 / (nz * nz);
                            *o = (dl_dc * dc) as f32;
                        }
                    }
                    if want_x {
                        for ((o, &zv), &xv) in gx.row_mut(r).iter_mut().zip(z).zip(x) {
                            let dc = zv as f64 / (nz * nx) - c * xv as f64 / (nx * nx);
                            *o = (dl_dc * dc) as f32;
                        }
                    }
                }
                if want_z {
                    self.accumulate(*recon, gz);
                }
                if want_x {
                    self.accumulate(*target, gx);
                }
            }
            Op::External(x, grad) => {
                let mut gx = grad.clone();
                gx.scale(g.item());
                self.accumulate(*x, gx);
            }
        }
    }
}

/// `(cos, |z|, |x|)` or `None` when either row has zero norm.
fn cosine_row(z: &[f32], x: &[f32]) -> Option<(f64, f64, f64)> {
    let (mut dot, mut nz, mut nx) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in z.iter().zip(x) {
        dot += a as f64 * b as f64;
        nz += a as f64 * a as f64;
        nx += b as f64 * b as f64;
    }
    if nz == 0.0 || nx == 0.0 {
        return None;
    }
    let (nz, nx) = (nz.sqrt(), nx.sqrt());
    Some((dot / (nz * nx), nz, nx))
}

fn cosine_loss(c: f64, gamma: f32, form: CosineForm) -> f64 {
    let e = (1.0 - c).max(0.0);
    match form {
        CosineForm::Power => e.powf(gamma as f64),
        CosineForm::Scale => e * gamma as f64,
    }
}

fn cosine_loss_dc(c: f64, gamma: f32, form: CosineForm) -> f64 {
    let gamma = gamma as f64;
    match form {
        CosineForm::Power => {
            let e = (1.0 - c).max(0.0);
            if gamma == 1.0 {
                -1.0
            } else {
                -gamma * e.powf(gamma - 1.0)
            }
        }
        CosineForm::Scale => -gamma,
    }
}
