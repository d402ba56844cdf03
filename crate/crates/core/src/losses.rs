//! Batch-hard triplet loss and label-smoothed cross-entropy.

use std::collections::BTreeMap;

use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{Function, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
    pub p_ids: usize,
    pub k_per_id: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            p_ids: 16,
            k_per_id: 4,
        }
    }
}

impl TripletConfig {
    pub fn batch_size(&self) -> usize {
        self.p_ids * self.k_per_id
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(contract_err!("triplet margin {} must be finite and >= 0", self.margin));
        }
        if self.p_ids < 2 {
            return Err(contract_err!("need P >= 2 identities per batch, got {}", self.p_ids));
        }
        if self.k_per_id < 2 {
            return Err(contract_err!("need K >= 2 samples per identity, got {}", self.k_per_id));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingConfig {
    pub epsilon: f64,
    pub num_classes: usize,
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(contract_err!("smoothing epsilon {} outside [0, 1)", self.epsilon));
        }
        if self.num_classes < 2 {
            return Err(contract_err!("need at least 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }

    /// Smoothed target distribution for true class `y`.
    pub fn targets(&self, y: usize) -> Vec<f64> {
        let c = self.num_classes as f64;
        let off = self.epsilon / c;
        let mut q = vec![off; self.num_classes];
        q[y] = 1.0 - (c - 1.0) / c * self.epsilon;
        q
    }
}

/// Euclidean distance with the squared distance clamped at zero.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sq.max(0.0).sqrt()
}

/// Checks that `labels` consist of exactly `P` identities with `K` samples each.
fn check_pk(labels: &[usize], cfg: &TripletConfig) -> Result<()> {
    cfg.validate()?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if labels.len() != cfg.batch_size()
        || counts.len() != cfg.p_ids
        || counts.values().any(|&c| c != cfg.k_per_id)
    {
        return Err(contract_err!(
            "batch of {} samples over {} identities is not {}x{}",
            labels.len(),
            counts.len(),
            cfg.p_ids,
            cfg.k_per_id
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Mined {
    pos: usize,
    neg: usize,
    d_pos: f64,
    d_neg: f64,
    hinge: f64,
    pos_gap: f64,
    neg_gap: f64,
}

struct TripletFn {
    mined: Vec<Mined>,
    dim: usize,
}

impl Function for TripletFn {
    fn name(&self) -> &'static str {
        "batch_hard_triplet"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let e = inputs[0].data();
        let d = self.dim;
        let g = grad.data()[0];
        let mut de = vec![0.0; e.len()];
        for (a, m) in self.mined.iter().enumerate() {
            if m.hinge <= 0.0 {
                continue;
            }
            // +d_pos, -d_neg; the derivative of |x| at x=0 is taken as 0.
            for (other, dist, sign) in [(m.pos, m.d_pos, 1.0), (m.neg, m.d_neg, -1.0)] {
                if dist == 0.0 {
                    continue;
                }
                for k in 0..d {
                    let diff = (e[a * d + k] - e[other * d + k]) / dist * sign * g;
                    de[a * d + k] += diff;
                    de[other * d + k] -= diff;
                }
            }
        }
        vec![Some(Tensor::new(inputs[0].dims().to_vec(), de).expect("input shape"))]
    }

    fn kink_margin(&self, _: &[&Tensor], _: &Tensor) -> f64 {
        self.mined
            .iter()
            .map(|m| {
                m.hinge
                    .abs()
                    .min(m.pos_gap)
                    .min(m.neg_gap)
                    .min(m.d_pos)
                    .min(m.d_neg)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Sum over anchors of `[d_pos - d_neg + margin]₊`, where `d_pos` is the
/// largest distance to another sample of the anchor's identity and `d_neg` the
/// smallest distance to any other identity.
///
/// `emb` is `[P·K, D]`; `labels` must hold exactly `K` samples of each of `P`
/// identities.
pub fn batch_hard_triplet(g: &mut Graph, emb: Var, labels: &[usize], cfg: &TripletConfig) -> Result<Var> {
    let dims = g.dims(emb).to_vec();
    if dims.len() != 2 || dims[0] != labels.len() {
        return Err(shape_err!("embeddings {:?} for {} labels", dims, labels.len()));
    }
    check_pk(labels, cfg)?;
    let (b, d) = (dims[0], dims[1]);
    let e = g.value(emb).data();
    let row = |i: usize| &e[i * d..(i + 1) * d];

    let mut mined = Vec::with_capacity(b);
    let mut total = 0.0;
    for a in 0..b {
        let mut pos = (usize::MAX, f64::NEG_INFINITY);
        let mut pos_second = f64::NEG_INFINITY;
        let mut neg = (usize::MAX, f64::INFINITY);
        let mut neg_second = f64::INFINITY;
        for j in 0..b {
            if j == a {
                continue;
            }
            let dist = euclidean(row(a), row(j));
            if labels[j] == labels[a] {
                if dist > pos.1 {
                    pos_second = pos.1;
                    pos = (j, dist);
                } else {
                    pos_second = pos_second.max(dist);
                }
            } else if dist < neg.1 {
                neg_second = neg.1;
                neg = (j, dist);
            } else {
                neg_second = neg_second.min(dist);
            }
        }
        let hinge = pos.1 - neg.1 + cfg.margin;
        total += hinge.max(0.0);
        mined.push(Mined {
            pos: pos.0,
            neg: neg.0,
            d_pos: pos.1,
            d_neg: neg.1,
            hinge,
            pos_gap: pos.1 - pos_second,
            neg_gap: neg_second - neg.1,
        });
    }
    Ok(g.apply(Box::new(TripletFn { mined, dim: d }), &[emb], Tensor::scalar(total)))
}

struct SmoothedCeFn {
    /// softmax(logits) - q, per row.
    residual: Vec<f64>,
    rows: usize,
}

impl Function for SmoothedCeFn {
    fn name(&self) -> &'static str {
        "label_smoothed_ce"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let s = grad.data()[0] / self.rows as f64;
        let d = self.residual.iter().map(|r| r * s).collect();
        vec![Some(Tensor::new(inputs[0].dims().to_vec(), d).expect("input shape"))]
    }
}

/// Mean over rows of `-Σ_i q_i log softmax(logits)_i` with smoothed targets.
///
/// `logits` is `[B, C]` (or `[C]` for one sample).
pub fn label_smoothed_ce(g: &mut Graph, logits: Var, labels: &[usize], cfg: &SmoothingConfig) -> Result<Var> {
    cfg.validate()?;
    let dims = g.dims(logits).to_vec();
    let (rows, c) = match dims.as_slice() {
        &[c] => (1, c),
        &[b, c] => (b, c),
        _ => return Err(shape_err!("logits must be [B, C], got {:?}", dims)),
    };
    if c != cfg.num_classes || rows != labels.len() {
        return Err(shape_err!(
            "logits {:?} for {} labels over {} classes",
            dims,
            labels.len(),
            cfg.num_classes
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(contract_err!("label {y} out of range for {c} classes"));
    }
    let z = g.value(logits).data();
    let mut residual = vec![0.0; rows * c];
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let zr = &z[r * c..(r + 1) * c];
        let max = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = zr.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let q = cfg.targets(y);
        total += zr.iter().zip(&q).map(|(v, qi)| -qi * (v - lse)).sum::<f64>();
        for i in 0..c {
            residual[r * c + i] = (zr[i] - lse).exp() - q[i];
        }
    }
    let out = Tensor::scalar(total / rows as f64);
    Ok(g.apply(Box::new(SmoothedCeFn { residual, rows }), &[logits], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    fn cfg(p: usize, k: usize) -> TripletConfig {
        TripletConfig {
            margin: 0.3,
            p_ids: p,
            k_per_id: k,
        }
    }

    #[test]
    fn identical_embeddings_cost_margin_per_anchor() {
        let mut g = Graph::new();
        let e = g.constant(emb(&[[1.0, 1.0]; 4]));
        let l = batch_hard_triplet(&mut g, e, &[0, 0, 1, 1], &cfg(2, 2)).unwrap();
        assert!((g.value(l).item().unwrap() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn separated_identities_cost_nothing() {
        let mut g = Graph::new();
        let e = g.constant(emb(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]));
        let l = batch_hard_triplet(&mut g, e, &[0, 0, 1, 1], &cfg(2, 2)).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn non_pk_batch_rejected() {
        let mut g = Graph::new();
        let e = g.constant(emb(&[[0.0, 0.0]; 4]));
        assert!(batch_hard_triplet(&mut g, e, &[0, 0, 0, 1], &cfg(2, 2)).is_err());
        assert!(batch_hard_triplet(&mut g, e, &[0, 0, 1, 1], &cfg(2, 3)).is_err());
    }

    #[test]
    fn smoothed_targets_sum_to_one() {
        for c in 2..20 {
            for eps in [0.0, 0.1, 0.3, 0.9] {
                let q = SmoothingConfig {
                    epsilon: eps,
                    num_classes: c,
                }
                .targets(c / 2);
                assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2]));
        let cfg = SmoothingConfig {
            epsilon: 0.3,
            num_classes: 2,
        };
        assert_eq!(cfg.targets(0), vec![0.85, 0.15]);
        let l = label_smoothed_ce(&mut g, z, &[0], &cfg).unwrap();
        assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn zero_epsilon_is_plain_cross_entropy() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 0.5]).unwrap());
        let cfg = SmoothingConfig {
            epsilon: 0.0,
            num_classes: 3,
        };
        let l = label_smoothed_ce(&mut g, z, &[1], &cfg).unwrap();
        let lse = (1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln();
        assert!((g.value(l).item().unwrap() - (lse - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3]));
        let cfg = SmoothingConfig {
            epsilon: 0.1,
            num_classes: 3,
        };
        assert!(label_smoothed_ce(&mut g, z, &[3], &cfg).is_err());
    }
}
