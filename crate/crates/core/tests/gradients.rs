//! Finite-difference checks for every tape primitive and loss.
//!
//! Each analytic gradient (f32 tape) is compared against central differences
//! with h = 1e-3 taken on an independent f64 re-implementation of the forward
//! pass. The fourth-order stencil keeps truncation error out of the
//! comparison for losses with large third derivatives (cosine near small
//! norms). Non-scalar outputs are reduced with random weights, so the check
//! covers arbitrary upstream gradients.

use std::sync::Arc;

use nid_core::autodiff::{CosineForm, Pool, Tape, Tensor, Var};
use nid_core::sparse::CsrMatrix;
use nid_core::vq::{Codebook, CodebookSet, LossNorm, Metric, VqMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 24;
const H: f64 = 1e-3;
const TOL: f64 = 1e-4;
/// Entries whose gradient is below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-3;

type Mat = (usize, usize, Vec<f64>);

fn rng(case: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(case * 1000 + salt)
}

/// Random matrix whose entries are exactly representable in f32.
fn mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let v = (0..rows * cols)
        .map(|_| r.random_range(-1.0f32..1.0) as f64)
        .collect();
    (rows, cols, v)
}

fn tensor(m: &Mat) -> Tensor {
    Tensor::from_vec(m.0, m.1, m.2.iter().map(|&x| x as f32).collect()).unwrap()
}

fn numeric(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            let mut at = |t: f64| {
                x[i] = orig + t;
                f(&x)
            };
            let (p1, m1, p2, m2) = (at(H), at(-H), at(2.0 * H), at(-2.0 * H));
            x[i] = orig;
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * H)
        })
        .collect()
}

fn max_rel(analytic: &Tensor, num: &[f64]) -> f64 {
    assert_eq!(analytic.data().len(), num.len());
    analytic
        .data()
        .iter()
        .zip(num)
        .map(|(&a, &n)| {
            let a = a as f64;
            (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
        })
        .fold(0.0, f64::max)
}

/// `Σ w ∘ out` on the tape, built from matmuls with constant ones.
fn reduce(tape: &mut Tape, out: Var, w: &Mat) -> Var {
    let (n, d) = tape.shape(out);
    assert_eq!((n, d), (w.0, w.1));
    let wv = tape.constant(tensor(w));
    let h = tape.hadamard(out, wv).unwrap();
    let left = tape.constant(Tensor::filled(1, n, 1.0));
    let right = tape.constant(Tensor::filled(d, 1, 1.0));
    let s = tape.matmul(left, h).unwrap();
    tape.matmul(s, right).unwrap()
}

fn weighted(out: &[f64], w: &Mat) -> f64 {
    out.iter().zip(&w.2).map(|(a, b)| a * b).sum()
}

fn dense_mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let x = a[i * k + p];
            for j in 0..m {
                out[i * m + j] += x * b[p * m + j];
            }
        }
    }
    out
}

struct Report {
    name: &'static str,
    worst: f64,
    count: u64,
}

impl Report {
    fn new(name: &'static str) -> Self {
        Self { name, worst: 0.0, count: 0 }
    }

    fn add(&mut self, analytic: &Tensor, num: &[f64]) {
        self.worst = self.worst.max(max_rel(analytic, num));
    }

    fn case_done(&mut self) {
        self.count += 1;
    }

    fn finish(self) {
        println!("{}: {} instances, max rel err {:.2e}", self.name, self.count, self.worst);
        assert!(self.count >= 20, "{}: only {} instances", self.name, self.count);
        assert!(self.worst <= TOL, "{}: max rel err {:.3e}", self.name, self.worst);
    }
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6))
}

#[test]
fn matmul() {
    let mut rep = Report::new("matmul");
    for case in 0..INSTANCES {
        let mut r = rng(case, 1);
        let (n, k, m) = dims(&mut r);
        let (a, b, w) = (mat(&mut r, n, k), mat(&mut r, k, m), mat(&mut r, n, m));
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(tensor(&a)), t.leaf(tensor(&b)));
        let out = t.matmul(va, vb).unwrap();
        let loss = reduce(&mut t, out, &w);
        t.backward(loss).unwrap();
        let fa = |x: &[f64]| weighted(&dense_mm(x, &b.2, n, k, m), &w);
        let fb = |x: &[f64]| weighted(&dense_mm(&a.2, x, n, k, m), &w);
        rep.add(t.grad(va).unwrap(), &numeric(&fa, &a.2));
        rep.add(t.grad(vb).unwrap(), &numeric(&fb, &b.2));
        rep.case_done();
    }
    rep.finish();
}

#[test]
fn matmul_fixed() {
    let mut rep = Report::new("matmul_fixed");
    for case in 0..INSTANCES {
        let mut r = rng(case, 2);
        let (n, k, m) = dims(&mut r);
        let (a, x, w) = (mat(&mut r, n, k), mat(&mut r, k, m), mat(&mut r, n, m));
        let mut t = Tape::new();
        let vx = t.leaf(tensor(&x));
        let out = t.matmul_fixed(&Arc::new(tensor(&a)), vx).unwrap();
        let loss = reduce(&mut t, out, &w);
        t.backward(loss).unwrap();
        let f = |v: &[f64]| weighted(&dense_mm(&a.2, v, n, k, m), &w);
        rep.add(t.grad(vx).unwrap(), &numeric(&f, &x.2));
        rep.case_done();
    }
    rep.finish();
}

#[test]
fn spmm() {
    let mut rep = Report::new("spmm");
    for case in 0..INSTANCES {
        let mut r = rng(case, 3);
        let n = r.random_range(2..10);
        let d = r.random_range(1..5);
        let mut adj = mat(&mut r, n, n);
        for v in adj.2.iter_mut() {
            if r.random_bool(0.6) {
                *v = 0.0;
            }
        }
        let (x, w) = (mat(&mut r, n, d), mat(&mut r, n, d));
        let csr = Arc::new(CsrMatrix::from_dense(&tensor(&adj)));
        let mut t = Tape::new();
        let vx = t.leaf(tensor(&x));
        let out = t.spmm(&csr, vx).unwrap();
        let loss = reduce(&mut t, out, &w);
        t.backward(loss).unwrap();
        let f = |v: &[f64]| weighted(&dense_mm(&adj.2, v, n, n, d), &w);
        rep.add(t.grad(vx).unwrap(), &numeric(&f, &x.2));
        rep.case_done();
    }
    rep.finish();
}

#[test]
fn add_and_bias() {
    let mut rep = Report::new("add/add_bias");
    for case in 0..INSTANCES {
        let mut r = rng(case, 4);
        let (n, d, _) = dims(&mut r);
        let (a, b, bias, w) = (mat(&mut r, n, d), mat(&mut r, n, d), mat(&mut r, 1, d), mat(&mut r, n, d));
        let mut t = Tape::new();
        let (va, vb, vbias) = (t.leaf(tensor(&a)), t.leaf(tensor(&b)), t.leaf(tensor(&bias)));
        let s = t.add(va, vb).unwrap();
        let out = t.add_bias(s, vbias).unwrap();
        let loss = reduce(&mut t, out, &w);
        t.backward(loss).unwrap();
        let fwd = |a: &[f64], b: &[f64], bias: &[f64]| -> f64 {
            let out: Vec<f64> = (0..n * d).map(|i| a[i] + b[i] + bias[i % d]).collect();
            weighted(&out, &w)
        };
        rep.add(t.grad(va).unwrap(), &numeric(&|x| fwd(x, &b.2, &bias.2), &a.2));
        rep.add(t.grad(vb).unwrap(), &numeric(&|x| fwd(&a.2, x, &bias.2), &b.2));
        rep.add(t.grad(vbias).unwrap(), &numeric(&|x| fwd(&a.2, &b.2, x), &bias.2));
        rep.case_done();
    }
    rep.finish();
}

#[test]
fn scale_and_hadamard() {
    let mut rep = Report::new("scale/hadamard");
    for case in 0..INSTANCES {
        let mut r = rng(case, 5);
        let (n, d, _) = dims(&mut r);
        let s: f32 = r.random_range(-2.0..2.0);
        let (a, b, w) = (mat(&mut r, n, d), mat(&mut r, n, d), mat(&mut r, n, d));
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(tensor(&a)), t.leaf(tensor(&b)));
        let sa = t.scale(va, s);
        let out = t.hadamard(sa, vb).unwrap();
        let loss = reduce(&mut t, out, &w);
        t.backward(loss).unwrap();
        let fwd = |a: &[f64], b: &[f64]| -> f64 {
            let out: Vec<f64> = a.iter().zip(b).map(|(x, y)| s as f64 * x * y).collect();
            weighted(&out, &w)
        };
        rep.add(t.grad(va).unwrap(), &numeric(&|x| fwd(x, &b.2), &a.2));
        rep.add(t.grad(vb).unwrap(), &numeric(&|x| fwd(&a.2, x), &b.2));
        rep.case_done();
    }
    rep.finish();
}

/// Entries pushed away from zero so the kink is never straddled.
fn away_from_zero(m: &mut Mat) {
    for v in m.2.iter_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 } else { 0.05 } + *v;
        }
        *v = *v as f32 as f64;
    }
}

#[test]
fn relu() {
    let mut rep = Report::new("relu");
    for case in 0..INSTANCES {
        let mut r = rng(case, 6);
        let (n, d, _) = dims(&mut r);
        let (mut x, w) = (mat(&mut r, n, d), mat(&mut r, n, d));
        away_from_zero(&mut x);
        let mut t = Tape::new();
        let vx = t.leaf(tensor(&x));
        let out = t.relu(vx);
        let loss = reduce(&mut t, out, &w);
        t.backward(loss).unwrap();
        let f = |v: &[f64]| weighted(&v.iter().map(|x| x.max(0.0)).collect::<Vec<_>>(), &w);
        rep.add(t.grad(vx).unwrap(), &numeric(&f, &x.2));
        rep.case_done();
    }
    rep.finish();
}

#[test]
fn dropout() {
    let mut rep = Report::new("dropout");
    for case in 0..INSTANCES {
        let mut r = rng(case, 7);
        let (n, d, _) = dims(&mut r);
        let (mut x, w) = (mat(&mut r, n, d), mat(&mut r, n, d));
        away_from_zero(&mut x);
        let mut t = Tape::new();
        let vx = t.leaf(tensor(&x));
        let out = t.dropout(vx, 0.4, true, &mut r).unwrap();
        // The mask is recovered from the forward value; inputs are non-zero.
        let mask: Vec<f64> = t
            .value(out)
            .data()
            .iter()
            .zip(&x.2)
            .map(|(&o, &i)| if o == 0.0 { 0.0 } else { o as f64 / i })
            .collect();
        let loss = reduce(&mut t, out, &w);
        t.backward(loss).unwrap();
        let f = |v: &[f64]| weighted(&v.iter().zip(&mask).map(|(a, m)| a * m).collect::<Vec<_>>(), &w);
        rep.add(t.grad(vx).unwrap(), &numeric(&f, &x.2));
        rep.case_done();
    }
    rep.finish();
}

#[test]
fn row_l2_normalize() {
    let mut rep = Report::new("row_l2_normalize");
    for case in 0..INSTANCES {
        let mut r = rng(case, 8);
        let (n, d, _) = dims(&mut r);
        let (x, w) = (mat(&mut r, n, d.max(2)), mat(&mut r, n, d.max(2)));
        let d = d.max(2);
        let mut t = Tape::new();
        let vx = t.leaf(tensor(&x));
        let out = t.row_l2_normalize(vx);
        let loss = reduce(&mut t, out, &w);
        t.backward(loss).unwrap();
        let f = |v: &[f64]| {
            let mut out = v.to_vec();
            for row in out.chunks_mut(d) {
                let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
                row.iter_mut().for_each(|a| *a /= norm);
            }
            weighted(&out, &w)
        };
        rep.add(t.grad(vx).unwrap(), &numeric(&f, &x.2));
        rep.case_done();
    }
    rep.finish();
}

#[test]
fn gather_set_concat() {
    let mut rep = Report::new("gather_rows/set_rows/concat_cols");
    for case in 0..INSTANCES {
        let mut r = rng(case, 9);
        let (n, d, d2) = dims(&mut r);
        let idx: Vec<usize> = (0..r.random_range(1..8)).map(|_| r.random_range(0..n)).collect();
        let rows: Vec<usize> = (0..n).filter(|_| r.random_bool(0.4)).collect();
        let (x, tok, y) = (mat(&mut r, n, d), mat(&mut r, 1, d), mat(&mut r, n, d2));
        let w = mat(&mut r, idx.len(), d + d2);
        let mut t = Tape::new();
        let (vx, vtok, vy) = (t.leaf(tensor(&x)), t.leaf(tensor(&tok)), t.leaf(tensor(&y)));
        let masked = t.set_rows(vx, &rows, vtok).unwrap();
        let cat = t.concat_cols(&[masked, vy]).unwrap();
        let out = t.gather_rows(cat, &idx).unwrap();
        let loss = reduce(&mut t, out, &w);
        t.backward(loss).unwrap();
        let fwd = |x: &[f64], tok: &[f64], y: &[f64]| -> f64 {
            let mut out = Vec::new();
            for &i in &idx {
                if rows.contains(&i) {
                    out.extend_from_slice(tok);
                } else {
                    out.extend_from_slice(&x[i * d..(i + 1) * d]);
                }
                out.extend_from_slice(&y[i * d2..(i + 1) * d2]);
            }
            weighted(&out, &w)
        };
        rep.add(t.grad(vx).unwrap(), &numeric(&|v| fwd(v, &tok.2, &y.2), &x.2));
        let gt = t.grad(vtok).cloned().unwrap_or_else(|| Tensor::zeros(1, d));
        rep.add(&gt, &numeric(&|v| fwd(&x.2, v, &y.2), &tok.2));
        rep.add(t.grad(vy).unwrap(), &numeric(&|v| fwd(&x.2, &tok.2, v), &y.2));
        rep.case_done();
    }
    rep.finish();
}

fn check_pool(pool: Pool, salt: u64) {
    let name = match pool {
        Pool::Mean => "segment_pool(mean)",
        Pool::Sum => "segment_pool(sum)",
        Pool::Max => "segment_pool(max)",
    };
    let mut rep = Report::new(name);
    for case in 0..INSTANCES {
        let mut r = rng(case, salt);
        let segs_n = r.random_range(1..4);
        let n = segs_n + r.random_range(0..6);
        let d = r.random_range(1..4);
        let mut segments: Vec<usize> = (0..segs_n).collect();
        segments.extend((segs_n..n).map(|_| r.random_range(0..segs_n)));
        // Distinct values spaced well beyond 2h so max never switches.
        let mut x = mat(&mut r, n, d);
        let mut order: Vec<usize> = (0..n * d).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        for (rank, &i) in order.iter().enumerate() {
            x.2[i] = ((rank as f64) * 0.1 - 1.0) as f32 as f64;
        }
        let w = mat(&mut r, segs_n, d);
        let mut t = Tape::new();
        let vx = t.leaf(tensor(&x));
        let out = t.segment_pool(vx, &segments, segs_n, pool).unwrap();
        let loss = reduce(&mut t, out, &w);
        t.backward(loss).unwrap();
        let f = |v: &[f64]| {
            let mut out = vec![f64::NEG_INFINITY; segs_n * d];
            let mut counts = vec![0.0; segs_n];
            if pool != Pool::Max {
                out.iter_mut().for_each(|o| *o = 0.0);
            }
            for (i, &g) in segments.iter().enumerate() {
                counts[g] += 1.0;
                for j in 0..d {
                    let a = v[i * d + j];
                    let o = &mut out[g * d + j];
                    *o = if pool == Pool::Max { o.max(a) } else { *o + a };
                }
            }
            if pool == Pool::Mean {
                for g in 0..segs_n {
                    for j in 0..d {
                        out[g * d + j] /= counts[g];
                    }
                }
            }
            weighted(&out, &w)
        };
        rep.add(t.grad(vx).unwrap(), &numeric(&f, &x.2));
        rep.case_done();
    }
    rep.finish();
}

#[test]
fn segment_pool_mean() {
    check_pool(Pool::Mean, 10);
}

#[test]
fn segment_pool_sum() {
    check_pool(Pool::Sum, 11);
}

#[test]
fn segment_pool_max() {
    check_pool(Pool::Max, 12);
}

#[test]
fn softmax_cross_entropy() {
    let mut rep = Report::new("softmax_cross_entropy");
    for case in 0..INSTANCES {
        let mut r = rng(case, 13);
        let n = r.random_range(2..8);
        let c = r.random_range(2..6);
        let mut logits = mat(&mut r, n, c);
        logits.2.iter_mut().for_each(|v| *v = (*v * 3.0) as f32 as f64);
        let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
        mask[0] = true;
        let mut t = Tape::new();
        let vl = t.leaf(tensor(&logits));
        let loss = t.softmax_cross_entropy(vl, &targets, &mask).unwrap();
        t.backward(loss).unwrap();
        let f = |v: &[f64]| {
            let (mut total, mut rows) = (0.0, 0.0);
            for i in (0..n).filter(|&i| mask[i]) {
                let row = &v[i * c..(i + 1) * c];
                let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
                total += lse - row[targets[i]];
                rows += 1.0;
            }
            total / rows
        };
        rep.add(t.grad(vl).unwrap(), &numeric(&f, &logits.2));
        rep.case_done();
    }
    rep.finish();
}

#[test]
fn bce_with_logits() {
    let mut rep = Report::new("bce_with_logits");
    for case in 0..INSTANCES {
        let mut r = rng(case, 14);
        let n = r.random_range(1..10);
        let mut logits = mat(&mut r, n, 1);
        logits.2.iter_mut().for_each(|v| *v = (*v * 4.0) as f32 as f64);
        let targets: Vec<f32> = (0..n).map(|_| r.random_range(0..2) as f32).collect();
        let mut t = Tape::new();
        let vl = t.leaf(tensor(&logits));
        let loss = t.bce_with_logits(vl, &targets).unwrap();
        t.backward(loss).unwrap();
        let f = |v: &[f64]| {
            v.iter()
                .zip(&targets)
                .map(|(&x, &y)| {
                    let p = 1.0 / (1.0 + (-x).exp());
                    -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / n as f64
        };
        rep.add(t.grad(vl).unwrap(), &numeric(&f, &logits.2));
        rep.case_done();
    }
    rep.finish();
}

fn check_cosine(form: CosineForm, gamma: f32, name: &'static str, salt: u64) {
    let mut rep = Report::new(name);
    for case in 0..INSTANCES {
        let mut r = rng(case, salt);
        let n = r.random_range(2..7);
        let d = r.random_range(2..9);
        let (z, x) = (mat(&mut r, n, d), mat(&mut r, n, d));
        let mut mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
        mask[n - 1] = true;
        let mut t = Tape::new();
        let (vz, vx) = (t.leaf(tensor(&z)), t.leaf(tensor(&x)));
        let loss = t.scaled_cosine_error(vz, vx, gamma, form, &mask).unwrap();
        t.backward(loss).unwrap();
        let fwd = |z: &[f64], x: &[f64]| {
            let (mut total, mut rows) = (0.0, 0.0);
            for i in (0..n).filter(|&i| mask[i]) {
                let (a, b) = (&z[i * d..(i + 1) * d], &x[i * d..(i + 1) * d]);
                let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                let na = a.iter().map(|p| p * p).sum::<f64>().sqrt();
                let nb = b.iter().map(|p| p * p).sum::<f64>().sqrt();
                let e = 1.0 - dot / (na * nb);
                total += match form {
                    CosineForm::Power => e.powf(gamma as f64),
                    CosineForm::Scale => e * gamma as f64,
                };
                rows += 1.0;
            }
            total / rows
        };
        rep.add(t.grad(vz).unwrap(), &numeric(&|v| fwd(v, &x.2), &z.2));
        if let Some(gx) = t.grad(vx) {
            rep.add(gx, &numeric(&|v| fwd(&z.2, v), &x.2));
        }
        rep.case_done();
    }
    rep.finish();
}

#[test]
fn scaled_cosine_error_power() {
    check_cosine(CosineForm::Power, 2.0, "scaled_cosine_error(power, gamma=2)", 15);
}

#[test]
fn scaled_cosine_error_power_gamma3() {
    check_cosine(CosineForm::Power, 3.0, "scaled_cosine_error(power, gamma=3)", 16);
}

#[test]
fn scaled_cosine_error_scale() {
    check_cosine(CosineForm::Scale, 2.0, "scaled_cosine_error(scale, gamma=2)", 17);
}

#[test]
fn composite_gcn_layer() {
    // relu(Â (X W) + b), the encoder's building block.
    let mut rep = Report::new("relu(spmm(matmul)) + bias");
    for case in 0..INSTANCES {
        let mut r = rng(case, 18);
        let n = r.random_range(2..8);
        let (din, dout) = (r.random_range(1..5), r.random_range(1..5));
        let mut adj = mat(&mut r, n, n);
        adj.2.iter_mut().for_each(|v| *v = if *v > 0.2 { *v } else { 0.0 });
        let (x, wt, b, w) = (mat(&mut r, n, din), mat(&mut r, din, dout), mat(&mut r, 1, dout), mat(&mut r, n, dout));
        let csr = Arc::new(CsrMatrix::from_dense(&tensor(&adj)));
        let mut t = Tape::new();
        let (vx, vw, vb) = (t.leaf(tensor(&x)), t.leaf(tensor(&wt)), t.leaf(tensor(&b)));
        let xw = t.matmul(vx, vw).unwrap();
        let ax = t.spmm(&csr, xw).unwrap();
        let pre = t.add_bias(ax, vb).unwrap();
        // Skip instances that sit on a relu kink.
        if t.value(pre).data().iter().any(|v| v.abs() < 1e-2) {
            continue;
        }
        let out = t.relu(pre);
        let loss = reduce(&mut t, out, &w);
        t.backward(loss).unwrap();
        let fwd = |x: &[f64], wt: &[f64], b: &[f64]| {
            let xw = dense_mm(x, wt, n, din, dout);
            let ax = dense_mm(&adj.2, &xw, n, n, dout);
            let out: Vec<f64> = ax.iter().enumerate().map(|(i, v)| (v + b[i % dout]).max(0.0)).collect();
            weighted(&out, &w)
        };
        rep.add(t.grad(vx).unwrap(), &numeric(&|v| fwd(v, &wt.2, &b.2), &x.2));
        rep.add(t.grad(vw).unwrap(), &numeric(&|v| fwd(&x.2, v, &b.2), &wt.2));
        rep.add(t.grad(vb).unwrap(), &numeric(&|v| fwd(&x.2, &wt.2, v), &b.2));
        rep.case_done();
    }
    rep.finish();
}

fn check_vq(norm: LossNorm, name: &'static str, salt: u64) {
    let mut rep = Report::new(name);
    for case in 0..INSTANCES {
        let mut r = rng(case, salt);
        let d = r.random_range(2..6);
        let levels = r.random_range(1..4);
        let k = r.random_range(2..6);
        let mut set = CodebookSet::new(&[d], levels, k, Metric::L2, 0.7, &mut r).unwrap();
        set.loss_norm = norm;
        let h = mat(&mut r, 1, d);
        let hf: Vec<f32> = h.2.iter().map(|&v| v as f32).collect();
        let q = set.rvq_quantize(0, &hf).unwrap();
        let l = set.vq_loss(&q, VqMode::Ema);
        let codes: Vec<Vec<f64>> = q.selected.clone();
        // Codes are held fixed; the loss is a function of h alone.
        let f = |v: &[f64]| {
            let mut r = v.to_vec();
            let mut total = 0.0;
            for e in &codes {
                r.iter_mut().zip(e).for_each(|(a, b)| *a -= b);
                let sq: f64 = r.iter().map(|a| a * a).sum();
                total += match norm {
                    LossNorm::Squared => sq,
                    LossNorm::MeanSquared => sq / d as f64,
                    LossNorm::Plain => sq.sqrt(),
                };
            }
            0.7f32 as f64 * total
        };
        assert!((l.commitment_loss - f(&h.2)).abs() < 1e-9 * l.commitment_loss.max(1.0));
        let grad = Tensor::from_vec(1, d, l.grad.iter().map(|&g| g as f32).collect()).unwrap();
        rep.add(&grad, &numeric(&f, &h.2));
        rep.case_done();
    }
    rep.finish();
}

#[test]
fn commitment_squared() {
    check_vq(LossNorm::Squared, "commitment(squared)", 19);
}

#[test]
fn commitment_mean_squared() {
    check_vq(LossNorm::MeanSquared, "commitment(mean-squared)", 20);
}

#[test]
fn commitment_plain() {
    check_vq(LossNorm::Plain, "commitment(plain)", 21);
}

#[test]
fn codebook_from_vectors_keeps_shape() {
    let cb = Codebook::from_vectors(Tensor::identity(3), Metric::L2).unwrap();
    assert_eq!((cb.k(), cb.dim()), (3, 3));
}

#[test]
fn relu_kink_values() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(1, 2, vec![-1.0, 1.0]).unwrap());
    let y = t.relu(x);
    let w = (1, 2, vec![1.0, 1.0]);
    let loss = reduce(&mut t, y, &w);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn identity_matmul() {
    let mut r = rng(0, 99);
    let x = mat(&mut r, 3, 4);
    let mut t = Tape::new();
    let i3 = t.constant(Tensor::identity(3));
    let vx = t.leaf(tensor(&x));
    let out = t.matmul(i3, vx).unwrap();
    assert_eq!(t.value(out), &tensor(&x));
    let loss = reduce(&mut t, out, &(3, 4, vec![1.0; 12]));
    t.backward(loss).unwrap();
    assert!(t.grad(vx).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_twice_is_an_error() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(2.0));
    let y = t.scale(x, 3.0);
    t.backward(y).unwrap();
    assert!(t.backward(y).is_err());
}
