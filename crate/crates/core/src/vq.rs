//! Codebooks and per-layer residual vector quantization.
//!
//! Residuals are carried in f64. Every code vector is an f32 widened to f64,
//! so `r - e` is exact as long as the operands span fewer than 53 bits of
//! magnitude, which keeps `input == Σ selected + residual` exact in practice.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::kmeans::{self, kmeans};

pub const EMA_DECAY: f32 = 0.99;
pub const LAPLACE_EPS: f32 = 1e-5;
pub const DEAD_CODE_THRESHOLD: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    L2,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::L2 => "l2",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "l2" => Ok(Metric::L2),
            other => Err(Error::Config(format!("unknown metric '{other}' (cosine|l2)"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How codebooks receive their update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VqMode {
    /// Exponential moving averages of assigned vectors; no codebook loss.
    Ema,
    /// Gradient descent on the codebook term.
    CodebookLoss,
}

impl VqMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VqMode::Ema => "ema",
            VqMode::CodebookLoss => "codebook-loss",
        }
    }
}

impl FromStr for VqMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ema" => Ok(VqMode::Ema),
            "codebook-loss" => Ok(VqMode::CodebookLoss),
            other => Err(Error::Config(format!(
                "unknown vq mode '{other}' (ema|codebook-loss)"
            ))),
        }
    }
}

/// Norm applied inside the codebook and commitment terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNorm {
    /// `‖x‖²`
    Squared,
    /// `‖x‖² / d`, the per-element mean used by common VQ implementations.
    MeanSquared,
    /// `‖x‖`
    Plain,
}

impl LossNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            LossNorm::Squared => "squared",
            LossNorm::MeanSquared => "mean-squared",
            LossNorm::Plain => "plain",
        }
    }

    /// Value and gradient (w.r.t. `x`) of the norm of `x`.
    fn eval(self, x: &[f64]) -> (f64, Vec<f64>) {
        match self {
            LossNorm::Squared => (
                x.iter().map(|v| v * v).sum(),
                x.iter().map(|v| 2.0 * v).collect(),
            ),
            LossNorm::MeanSquared => {
                let d = x.len().max(1) as f64;
                (
                    x.iter().map(|v| v * v).sum::<f64>() / d,
                    x.iter().map(|v| 2.0 * v / d).collect(),
                )
            }
            LossNorm::Plain => {
                let n = kmeans::norm(x);
                if n == 0.0 {
                    (0.0, vec![0.0; x.len()])
                } else {
                    (n, x.iter().map(|v| v / n).collect())
                }
            }
        }
    }
}

impl FromStr for LossNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(LossNorm::Squared),
            "mean-squared" => Ok(LossNorm::MeanSquared),
            "plain" => Ok(LossNorm::Plain),
            other => Err(Error::Config(format!(
                "unknown loss norm '{other}' (squared|mean-squared|plain)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `K × d` code vectors.
    pub vectors: Tensor,
    pub ema_count: Vec<f32>,
    pub ema_sum: Tensor,
    /// Assignments since the last [`Codebook::reset_usage`].
    pub usage: Vec<u64>,
    pub metric: Metric,
}

impl Codebook {
    /// Codebook with the given vectors and a fresh EMA state of one pseudo-count
    /// per code. Cosine codebooks are normalized on the way in.
    pub fn from_vectors(mut vectors: Tensor, metric: Metric) -> Result<Self> {
        if vectors.rows() < 2 {
            return Err(Error::Config(format!(
                "codebook needs K >= 2, got {}",
                vectors.rows()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("codebook vectors"));
        }
        if metric == Metric::Cosine {
            for k in 0..vectors.rows() {
                normalize_f32(vectors.row_mut(k));
            }
        }
        let k = vectors.rows();
        Ok(Self {
            ema_sum: vectors.clone(),
            vectors,
            ema_count: vec![1.0; k],
            usage: vec![0; k],
            metric,
        })
    }

    /// Gaussian codes (unit-normalized under cosine).
    pub fn random<R: Rng + ?Sized>(k: usize, dim: usize, metric: Metric, rng: &mut R) -> Result<Self> {
        let data = (0..k * dim)
            .map(|_| StandardNormal.sample(rng))
            .collect::<Vec<f32>>();
        Self::from_vectors(Tensor::from_vec(k, dim, data)?, metric)
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn code(&self, k: usize) -> &[f32] {
        self.vectors.row(k)
    }

    /// Distance from `v` to code `k` under this codebook's metric.
    pub fn distance(&self, v: &[f64], k: usize) -> f64 {
        let code = self.code(k);
        match self.metric {
            Metric::L2 => v
                .iter()
                .zip(code)
                .map(|(a, &b)| {
                    let t = a - b as f64;
                    t * t
                })
                .sum(),
            Metric::Cosine => {
                let (mut dot, mut nv, mut nc) = (0.0, 0.0, 0.0);
                for (a, &b) in v.iter().zip(code) {
                    let b = b as f64;
                    dot += a * b;
                    nv += a * a;
                    nc += b * b;
                }
                if nv == 0.0 || nc == 0.0 {
                    return 1.0;
                }
                1.0 - dot / (nv.sqrt() * nc.sqrt())
            }
        }
    }

    /// Index of the closest code; ties go to the smallest index. A zero
    /// vector is equidistant from every code under cosine and maps to 0.
    pub fn nearest_code(&self, v: &[f64]) -> Result<usize> {
        if v.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "nearest_code",
                left: (1, self.dim()),
                right: (1, v.len()),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("nearest_code input"));
        }
        let mut best = (0, f64::INFINITY);
        for k in 0..self.k() {
            let d = self.distance(v, k);
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok(best.0)
    }

    /// One EMA step over `assigned` (code index, vector) pairs.
    pub fn ema_update(&mut self, assigned: &[(usize, &[f64])], decay: f32) -> Result<()> {
        let (k, d) = (self.k(), self.dim());
        let mut counts = vec![0.0f64; k];
        let mut sums = vec![0.0f64; k * d];
        for &(c, v) in assigned {
            if c >= k || v.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "ema_update",
                    left: (k, d),
                    right: (c, v.len()),
                });
            }
            counts[c] += 1.0;
            for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(v) {
                *s += x;
            }
        }
        let decay = decay as f64;
        for c in 0..k {
            self.ema_count[c] = (decay * self.ema_count[c] as f64 + counts[c]) as f32;
            for (j, s) in self.ema_sum.row_mut(c).iter_mut().enumerate() {
                *s = (decay * *s as f64 + sums[c * d + j]) as f32;
            }
        }
        // Laplace smoothing keeps rarely-hit codes from dividing by ~0.
        let total: f64 = self.ema_count.iter().map(|&c| c as f64).sum();
        let eps = LAPLACE_EPS as f64;
        for c in 0..k {
            let smoothed = (self.ema_count[c] as f64 + eps) / (total + k as f64 * eps) * total;
            let sum = self.ema_sum.row(c);
            if sum.iter().all(|&x| x == 0.0) || smoothed <= 0.0 {
                continue;
            }
            let mut code: Vec<f64> = sum.iter().map(|&x| x as f64 / smoothed).collect();
            if self.metric == Metric::Cosine {
                kmeans::normalize(&mut code);
            }
            for (o, x) in self.vectors.row_mut(c).iter_mut().zip(&code) {
                *o = *x as f32;
            }
        }
        Ok(())
    }

    /// Seeds the codes with k-means over `sample` (rows of length `dim`).
    /// Returns how many codes had to be padded with jittered duplicates.
    pub fn kmeans_init<R: Rng + ?Sized>(
        &mut self,
        sample: &[f64],
        iters: usize,
        rng: &mut R,
    ) -> Result<usize> {
        let d = self.dim();
        let fit = kmeans(sample, d, self.k(), iters, self.metric, rng)?;
        for (c, cent) in fit.centroids.chunks_exact(d).enumerate() {
            let mut code = cent.to_vec();
            if self.metric == Metric::Cosine && kmeans::norm(&code) == 0.0 {
                // All-zero rows have no direction; any unit vector will do.
                code = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                kmeans::normalize(&mut code);
            }
            for (o, x) in self.vectors.row_mut(c).iter_mut().zip(&code) {
                *o = *x as f32;
            }
        }
        self.ema_sum = self.vectors.clone();
        self.ema_count.iter_mut().for_each(|c| *c = 1.0);
        Ok(fit.padded)
    }

    /// Re-seeds codes whose EMA count fell below `threshold` from random donor
    /// rows. Returns the indices that were replaced.
    pub fn reset_dead_codes<R: Rng + ?Sized>(
        &mut self,
        donors: &[f64],
        threshold: f32,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let d = self.dim();
        if donors.is_empty() || donors.len() % d != 0 {
            return Err(Error::Empty("dead-code donor sample"));
        }
        let n = donors.len() / d;
        let mut reset = Vec::new();
        for c in 0..self.k() {
            if self.ema_count[c] >= threshold {
                continue;
            }
            let src = rng.random_range(0..n);
            let mut code = donors[src * d..(src + 1) * d].to_vec();
            if self.metric == Metric::Cosine {
                if kmeans::norm(&code) == 0.0 {
                    continue;
                }
                kmeans::normalize(&mut code);
            }
            for (j, x) in code.iter().enumerate() {
                self.vectors.set(c, j, *x as f32);
                self.ema_sum.set(c, j, *x as f32);
            }
            self.ema_count[c] = 1.0;
            reset.push(c);
        }
        if !reset.is_empty() {
            log::info!("reset {} dead codes: {reset:?}", reset.len());
        }
        Ok(reset)
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// Fraction of codes assigned at least once since the last usage reset.
    pub fn usage_rate(&self) -> f64 {
        self.usage.iter().filter(|&&u| u > 0).count() as f64 / self.k() as f64
    }
}

fn normalize_f32(v: &mut [f32]) {
    let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
}

/// Outcome of quantizing one vector through the `M` levels of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult {
    pub codewords: Vec<usize>,
    /// Selected code vectors, widened to f64.
    pub selected: Vec<Vec<f64>>,
    /// `M + 1` residuals; `residuals[0]` is the input.
    pub residuals: Vec<Vec<f64>>,
}

impl QuantizeResult {
    /// `Σ selected + residuals[M]`, summed left to right.
    pub fn reconstruct(&self) -> Vec<f64> {
        let d = self.residuals[0].len();
        let mut out = vec![0.0; d];
        for e in &self.selected {
            out.iter_mut().zip(e).for_each(|(o, x)| *o += x);
        }
        let last = self.residuals.last().expect("M + 1 residuals");
        out.iter_mut().zip(last).for_each(|(o, x)| *o += x);
        out
    }
}

/// Loss of one quantized vector and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct VqLoss {
    pub loss: f64,
    /// Codebook term alone (zero in EMA mode).
    pub codebook_loss: f64,
    /// Commitment term alone, already multiplied by beta.
    pub commitment_loss: f64,
    /// Gradient w.r.t. the layer embedding.
    pub grad: Vec<f64>,
    /// `(level, code, gradient)` for the codebook term; empty in EMA mode.
    pub code_grads: Vec<(usize, usize, Vec<f64>)>,
}

/// The `L × M` grid of codebooks, stored layer-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookSet {
    pub layers: usize,
    pub levels: usize,
    pub beta: f32,
    pub loss_norm: LossNorm,
    pub codebooks: Vec<Codebook>,
}

impl CodebookSet {
    /// Random codebooks of `k` codes for each layer width in `dims`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        levels: usize,
        k: usize,
        metric: Metric,
        beta: f32,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.is_empty() || levels == 0 {
            return Err(Error::Config("need at least one layer and one level".into()));
        }
        if !(beta >= 0.0) {
            return Err(Error::Config(format!("beta {beta} must be >= 0")));
        }
        let mut codebooks = Vec::with_capacity(dims.len() * levels);
        for &d in dims {
            for _ in 0..levels {
                codebooks.push(Codebook::random(k, d, metric, rng)?);
            }
        }
        Ok(Self {
            layers: dims.len(),
            levels,
            beta,
            loss_norm: LossNorm::Squared,
            codebooks,
        })
    }

    pub fn k(&self) -> usize {
        self.codebooks[0].k()
    }

    pub fn metric(&self) -> Metric {
        self.codebooks[0].metric
    }

    /// Codebook for 0-based `layer` and `level`.
    pub fn get(&self, layer: usize, level: usize) -> &Codebook {
        &self.codebooks[layer * self.levels + level]
    }

    pub fn get_mut(&mut self, layer: usize, level: usize) -> &mut Codebook {
        &mut self.codebooks[layer * self.levels + level]
    }

    /// Quantizes `h` through every level of 0-based `layer`.
    pub fn rvq_quantize(&self, layer: usize, h: &[f32]) -> Result<QuantizeResult> {
        if layer >= self.layers {
            return Err(Error::Config(format!(
                "layer {layer} outside [0, {})",
                self.layers
            )));
        }
        let mut r: Vec<f64> = h.iter().map(|&x| x as f64).collect();
        let mut codewords = Vec::with_capacity(self.levels);
        let mut selected = Vec::with_capacity(self.levels);
        let mut residuals = Vec::with_capacity(self.levels + 1);
        for m in 0..self.levels {
            let cb = self.get(layer, m);
            let c = cb.nearest_code(&r)?;
            let e: Vec<f64> = cb.code(c).iter().map(|&x| x as f64).collect();
            let next: Vec<f64> = r.iter().zip(&e).map(|(a, b)| a - b).collect();
            codewords.push(c);
            selected.push(e);
            residuals.push(std::mem::replace(&mut r, next));
        }
        residuals.push(r);
        Ok(QuantizeResult {
            codewords,
            selected,
            residuals,
        })
    }

    /// Codebook plus beta-weighted commitment terms summed over levels.
    ///
    /// Earlier levels' codes are held constant, so the commitment gradient
    /// with respect to the embedding is the sum over levels of the norm's
    /// gradient at `r_{m+1}`, i.e. `2β Σ r_{m+1}` for the squared norm.
    pub fn vq_loss(&self, result: &QuantizeResult, mode: VqMode) -> VqLoss {
        let d = result.residuals[0].len();
        let beta = self.beta as f64;
        let mut grad = vec![0.0; d];
        let mut codebook_loss = 0.0;
        let mut commitment_loss = 0.0;
        let mut code_grads = Vec::new();
        for m in 0..result.codewords.len() {
            let (v, g) = self.loss_norm.eval(&result.residuals[m + 1]);
            commitment_loss += beta * v;
            if beta != 0.0 {
                grad.iter_mut().zip(&g).for_each(|(o, x)| *o += beta * x);
            }
            if mode == VqMode::CodebookLoss {
                codebook_loss += v;
                code_grads.push((m, result.codewords[m], g.iter().map(|x| -x).collect()));
            }
        }
        VqLoss {
            loss: codebook_loss + commitment_loss,
            codebook_loss,
            commitment_loss,
            grad,
            code_grads,
        }
    }

    /// Quantizes every row of a layer's embedding matrix. Returns the
    /// codewords row-major (`rows × M`).
    pub fn quantize_rows(&self, layer: usize, h: &Tensor) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(h.rows() * self.levels);
        for i in 0..h.rows() {
            out.extend(self.rvq_quantize(layer, h.row(i))?.codewords);
        }
        Ok(out)
    }

    pub fn reset_usage(&mut self) {
        self.codebooks.iter_mut().for_each(Codebook::reset_usage);
    }

    /// Usage of every codebook (layer-major) and their mean.
    pub fn usage_rate(&self) -> (Vec<f64>, f64) {
        let per: Vec<f64> = self.codebooks.iter().map(Codebook::usage_rate).collect();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        (per, mean)
    }
}
