mod common;

use hbfp::losses::{batch_hard_triplet, label_smoothed_ce, SmoothingConfig, TripletConfig};
use hbfp::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn triplet(emb: &Tensor, labels: &[usize], cfg: &TripletConfig) -> f64 {
    let mut g = Graph::new();
    let e = g.constant(emb.clone());
    let l = batch_hard_triplet(&mut g, e, labels, cfg).unwrap();
    g.value(l).data()[0]
}

fn ce(logits: &Tensor, labels: &[usize], cfg: &SmoothingConfig) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = label_smoothed_ce(&mut g, l, labels, cfg).unwrap();
    g.value(v).data()[0]
}

fn shuffled_pk(p: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..p * k).map(|i| 10 + i / k).collect();
    labels.shuffle(rng);
    labels
}

#[test]
fn triplet_matches_exhaustive_oracle() {
    let cfg = TripletConfig { margin: 0.3, p_ids: 4, k_per_id: 3 };
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Tensor::randn(&[12, 5], rng.gen_range(0.05..2.0), &mut rng);
        let labels = shuffled_pk(4, 3, &mut rng);
        let want = common::triplet_oracle(emb.data(), 5, &labels, 0.3);
        assert_eq!(triplet(&emb, &labels, &cfg), want, "seed {seed}");
    }
}

#[test]
fn triplet_invariant_under_rigid_motion() {
    let cfg = TripletConfig { margin: 0.3, p_ids: 3, k_per_id: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let emb = Tensor::randn(&[6, 2], 1.0, &mut rng);
    let labels = [0, 0, 1, 1, 2, 2];
    let (c, s) = (0.6f64, 0.8f64);
    let moved = Tensor::from_fn(&[6, 2], |i| {
        let (r, k) = (i / 2, i % 2);
        let (x, y) = (emb.get(&[r, 0]), emb.get(&[r, 1]));
        if k == 0 {
            c * x - s * y + 3.0
        } else {
            s * x + c * y - 1.5
        }
    });
    assert!((triplet(&emb, &labels, &cfg) - triplet(&moved, &labels, &cfg)).abs() < 1e-12);
}

#[test]
fn triplet_nonnegative_and_zero_iff_separated() {
    let cfg = TripletConfig { margin: 0.3, p_ids: 2, k_per_id: 2 };
    let labels = [0, 0, 1, 1];
    let far = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 10.0, 0.0, 10.0, 1.0]).unwrap();
    assert_eq!(triplet(&far, &labels, &cfg), 0.0);
    let same = Tensor::zeros(&[4, 2]);
    assert!((triplet(&same, &labels, &cfg) - 1.2).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        assert!(triplet(&Tensor::randn(&[4, 3], 1.0, &mut rng), &labels, &cfg) >= 0.0);
    }
}

#[test]
fn smoothed_ce_closed_forms() {
    let cfg = SmoothingConfig { epsilon: 0.3, num_classes: 2 };
    let uniform = Tensor::zeros(&[1, 2]);
    assert!((ce(&uniform, &[0], &cfg) - std::f64::consts::LN_2).abs() < 1e-9);
    for c in 2..8 {
        for eps in [0.0, 0.1, 0.3, 0.5] {
            let cfg = SmoothingConfig { epsilon: eps, num_classes: c };
            let q = cfg.targets(0);
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    // ε = 0 is plain cross-entropy.
    let logits = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let plain = SmoothingConfig { epsilon: 0.0, num_classes: 3 };
    let z: f64 = logits.data().iter().map(|v| v.exp()).sum();
    assert!((ce(&logits, &[2], &plain) - (z.ln() - 2.0)).abs() < 1e-12);
}

#[test]
fn smoothed_ce_shift_invariant() {
    let cfg = SmoothingConfig { epsilon: 0.3, num_classes: 5 };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let logits = Tensor::randn(&[3, 5], 2.0, &mut rng);
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
        let shift = rng.gen_range(-100.0..100.0);
        let shifted = logits.map(|v| v + shift);
        assert!((ce(&logits, &labels, &cfg) - ce(&shifted, &labels, &cfg)).abs() < 1e-9);
    }
}
