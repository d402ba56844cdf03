//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use hbfp::eval::Tag;

/// Triple-loop `[m,k]·[k,n]`, accumulating over `k` in ascending order.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc.max(0.0).sqrt()
}

/// Enumerates every (anchor, positive, negative) triple and keeps, per
/// anchor, the largest hinge; sums over anchors in index order.
pub fn triplet_oracle(emb: &[f64], dim: usize, labels: &[usize], margin: f64) -> f64 {
    let b = labels.len();
    let row = |i: usize| &emb[i * dim..(i + 1) * dim];
    let mut total = 0.0;
    for a in 0..b {
        let mut worst = f64::NEG_INFINITY;
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..b {
                if labels[n] == labels[a] {
                    continue;
                }
                let h = (distance(row(a), row(p)) - distance(row(a), row(n)) + margin).max(0.0);
                worst = worst.max(h);
            }
        }
        total += worst;
    }
    total
}

/// Retrieval metrics without sorting: an entry's rank is one plus the number
/// of valid entries ordered before it by (distance, index).
pub struct OracleMetrics {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub evaluated: usize,
}

pub fn retrieval_oracle(dist: &[f64], q: &[Tag], g: &[Tag], ranks: &[usize]) -> OracleMetrics {
    let ng = g.len();
    let mut first_hits = Vec::new();
    let mut aps = Vec::new();
    for (qi, qt) in q.iter().enumerate() {
        let d = &dist[qi * ng..(qi + 1) * ng];
        let valid = |j: usize| !(g[j].identity == qt.identity && g[j].camera == qt.camera);
        let before = |x: usize, y: usize| d[x] < d[y] || (d[x] == d[y] && x < y);
        let positives: Vec<usize> = (0..ng).filter(|&j| valid(j) && g[j].identity == qt.identity).collect();
        if positives.is_empty() {
            continue;
        }
        let mut hits: Vec<(usize, usize)> = positives
            .iter()
            .map(|&p| {
                let rank = 1 + (0..ng).filter(|&j| valid(j) && before(j, p)).count();
                let hits_before = positives.iter().filter(|&&o| before(o, p)).count();
                (rank, hits_before + 1)
            })
            .collect();
        hits.sort();
        let mut sum = 0.0;
        for &(rank, hit) in &hits {
            sum += hit as f64 / rank as f64;
        }
        first_hits.push(hits[0].0);
        aps.push(sum / hits.len() as f64);
    }
    let n = aps.len() as f64;
    let mut map = 0.0;
    for ap in &aps {
        map += ap;
    }
    OracleMetrics {
        cmc: ranks
            .iter()
            .map(|&k| first_hits.iter().filter(|&&r| r <= k).count() as f64 / n)
            .collect(),
        map: map / n,
        evaluated: aps.len(),
    }
}
