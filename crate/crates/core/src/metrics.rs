//! Evaluation metrics shared by training and the downstream heads.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Fraction of `mask`ed rows where `pred == labels`.
pub fn accuracy(pred: &[usize], labels: &[usize], mask: &[bool]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for i in 0..pred.len() {
        if mask[i] {
            n += 1;
            hit += (pred[i] == labels[i]) as usize;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Area under the ROC curve; tied scores count one half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Empty("roc-auc needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney U with average ranks for ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            if positive[t] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Hits@k: the fraction of positives that score above the k-th best negative.
///
/// Ties are resolved in expectation over a uniformly random order among the
/// tied scores, so constant scores give exactly `k / (negatives + 1)`.
pub fn hits_at_k(pos: &[f64], neg: &[f64], k: usize) -> f64 {
    if pos.is_empty() {
        return 0.0;
    }
    if neg.len() < k {
        return 1.0;
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut total = 0.0;
    for &s in pos {
        // Negatives strictly above and exactly equal to s.
        let above = sorted.partition_point(|&x| x > s);
        let equal = sorted[above..].partition_point(|&x| x >= s);
        let slots = (equal + 1) as f64;
        let good = (k as f64 - above as f64).clamp(0.0, slots);
        total += good / slots;
    }
    total / pos.len() as f64
}

/// Hits@k expected from scores that carry no information.
pub fn hits_null(num_neg: usize, k: usize) -> f64 {
    (k as f64 / (num_neg + 1) as f64).min(1.0)
}

fn contingency(a: &[usize], b: &[usize]) -> (HashMap<(usize, usize), usize>, HashMap<usize, usize>, HashMap<usize, usize>) {
    let mut joint = HashMap::new();
    let mut ca = HashMap::new();
    let mut cb = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *ca.entry(x).or_insert(0) += 1;
        *cb.entry(y).or_insert(0) += 1;
    }
    (joint, ca, cb)
}

fn entropy(counts: &HashMap<usize, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
/// Two constant labelings count as identical (1.0).
pub fn nmi(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 0.0;
    }
    let (joint, ca, cb) = contingency(pred, truth);
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ca[&x] as f64 / n;
        let py = cb[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    let denom = (ha + hb) / 2.0;
    (mi / denom).clamp(0.0, 1.0)
}

fn pairs(c: usize) -> f64 {
    (c * c.saturating_sub(1)) as f64 / 2.0
}

/// F1 over node pairs: a pair is predicted positive when both nodes share a
/// cluster and truly positive when they share a class.
pub fn pairwise_f1(pred: &[usize], truth: &[usize]) -> f64 {
    let (joint, ca, cb) = contingency(pred, truth);
    let tp: f64 = joint.values().map(|&c| pairs(c)).sum();
    let pp: f64 = ca.values().map(|&c| pairs(c)).sum();
    let tt: f64 = cb.values().map(|&c| pairs(c)).sum();
    if pp == 0.0 && tt == 0.0 {
        return 1.0;
    }
    if tp == 0.0 {
        return 0.0;
    }
    let (p, r) = (tp / pp, tp / tt);
    2.0 * p * r / (p + r)
}

/// Maximum-weight perfect matching on a square `n × n` weight matrix
/// (Hungarian algorithm with potentials, O(n³)). Returns the column
/// assigned to each row.
pub fn max_weight_matching(weights: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(weights.len(), n * n, "weight matrix must be n × n");
    // Minimize negated weights; rows and columns are 1-based, 0 is a sentinel.
    let cost = |i: usize, j: usize| -weights[(i - 1) * n + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assign[row_of[j] - 1] = j - 1;
        }
    }
    assign
}

/// Macro F1 over true classes after matching clusters to classes one-to-one
/// so that total overlap is maximal. Unmatched classes score 0.
pub fn matched_f1(pred: &[usize], truth: &[usize]) -> f64 {
    let mut clusters: Vec<usize> = pred.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    let mut classes: Vec<usize> = truth.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let (joint, ca, cb) = contingency(pred, truth);
    let side = clusters.len().max(classes.len());
    let mut overlap = vec![0.0; side * side];
    for (i, c) in clusters.iter().enumerate() {
        for (j, y) in classes.iter().enumerate() {
            overlap[i * side + j] = *joint.get(&(*c, *y)).unwrap_or(&0) as f64;
        }
    }
    let assign = max_weight_matching(&overlap, side);
    let mut f1 = 0.0;
    for (i, &j) in assign.iter().enumerate() {
        if i >= clusters.len() || j >= classes.len() {
            continue;
        }
        let (c, y) = (clusters[i], classes[j]);
        let tp = *joint.get(&(c, y)).unwrap_or(&0) as f64;
        if tp > 0.0 {
            let p = tp / ca[&c] as f64;
            let r = tp / cb[&y] as f64;
            f1 += 2.0 * p * r / (p + r);
        }
    }
    f1 / classes.len() as f64
}
