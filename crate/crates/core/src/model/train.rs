use crate::error::{Error, Result};
use crate::losses::{batch_hard_triplet, label_smoothed_ce, SmoothingConfig, TripletConfig};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::tensor::{Tensor, Var};

use super::{Model, FEATURES};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First- and second-moment state for every trainable tensor, in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let sizes: Vec<usize> = params.entries().iter().map(|e| e.value.numel()).collect();
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to entry `i` of the store;
    /// buffers and missing gradients are skipped.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, entry) in params.entries_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            if !entry.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in entry.value.data_mut().iter_mut().enumerate() {
                let grad = g.data()[j] + c.weight_decay * *p;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * grad;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * grad * grad;
                let step = c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *p -= step;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub triplet: TripletConfig,
    pub smoothing_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            triplet: TripletConfig::default(),
            smoothing_epsilon: 0.3,
        }
    }
}

/// Losses of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Triplet + identity loss of the low, middle and fused features.
    pub per_feature: [f64; 3],
}

/// Records the training objective: for each feature, the batch-hard triplet
/// loss averaged over anchors plus the mean smoothed identity loss.
pub fn training_loss(
    model: &Model,
    ctx: &mut Ctx<'_>,
    images: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(Var, [Var; 3])> {
    let out = model.forward(ctx, images)?;
    let smoothing = SmoothingConfig {
        epsilon: cfg.smoothing_epsilon,
        num_classes: model.config.num_classes,
    };
    let anchors = labels.len() as f64;
    let mut parts = [out.descriptors[0]; 3];
    for k in 0..FEATURES.len() {
        let tri = batch_hard_triplet(&mut ctx.g, out.descriptors[k], labels, &cfg.triplet)?;
        let tri = ctx.g.scale(tri, 1.0 / anchors);
        let ce = label_smoothed_ce(&mut ctx.g, out.logits[k], labels, &smoothing)?;
        parts[k] = ctx.g.add(tri, ce)?;
    }
    let s = ctx.g.add(parts[0], parts[1])?;
    let total = ctx.g.add(s, parts[2])?;
    Ok((total, parts))
}

/// One optimizer step on `images: [P·K, C, H, W]` with class `labels`.
///
/// Running batch-norm statistics are updated alongside the parameters.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    images: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let (breakdown, grads, stats) = {
        let mut ctx = Ctx::new(&model.params, Mode::Train);
        let x = ctx.g.constant(images.clone());
        let (total, parts) = training_loss(model, &mut ctx, x, labels, cfg)?;
        let total_value = ctx.g.value(total).item()?;
        if !total_value.is_finite() {
            let (node, op) = ctx.g.first_non_finite().unwrap_or((total.index(), "loss"));
            return Err(Error::Numeric(format!(
                "loss is {total_value}; first non-finite tensor is node {node} ({op})"
            )));
        }
        ctx.g.backward(total)?;
        let grads: Vec<Option<Tensor>> = model
            .params
            .entries()
            .iter()
            .map(|e| {
                ctx.bound()
                    .find(|(n, _)| *n == e.name)
                    .and_then(|(_, v)| ctx.g.grad(v).cloned())
            })
            .collect();
        if let Some(e) = grads
            .iter()
            .zip(model.params.entries())
            .find(|(g, _)| g.as_ref().is_some_and(|g| !g.is_finite()))
        {
            return Err(Error::Numeric(format!("gradient of {} is not finite", e.1.name)));
        }
        let breakdown = LossBreakdown {
            total: total_value,
            per_feature: parts.map(|p| ctx.g.value(p).data()[0]),
        };
        (breakdown, grads, ctx.take_stats())
    };
    opt.update(&mut model.params, &grads);
    model.params.update_running_stats(&stats)?;
    Ok(breakdown)
}
