//! Thresholded generalized pooling.
//!
//! Each channel is min-max normalized over its spatial cells; cells whose
//! normalized value reaches the threshold survive and the pooled value is the
//! mean of the surviving original values. A threshold of 0 gives average
//! pooling and a threshold of 1 gives max pooling.

use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{Function, Graph, Tensor, Var};

/// Thresholds whose pooled descriptors are summed into one descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GpConfig {
    pub lambdas: Vec<f64>,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.3, 0.5, 0.7, 1.0],
        }
    }
}

impl GpConfig {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        let cfg = Self { lambdas };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(contract_err!("empty lambda list"));
        }
        for &l in &self.lambdas {
            check_lambda(l)?;
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(contract_err!("lambda {lambda} outside [0, 1]"));
    }
    Ok(())
}

/// Per-row min-max normalization of a `[D, N]` map. Constant rows map to 1.
pub fn minmax_normalize(f: &Tensor) -> Result<Tensor> {
    if f.rank() != 2 {
        return Err(shape_err!("minmax_normalize expects [D, N], got {:?}", f.dims()));
    }
    let n = f.dims()[1];
    let mut out = f.clone();
    for row in out.data_mut().chunks_mut(n) {
        normalize_row(row);
    }
    Ok(out)
}

fn normalize_row(row: &mut [f64]) {
    let (lo, hi) = row_range(row);
    if hi == lo {
        row.iter_mut().for_each(|v| *v = 1.0);
    } else {
        row.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
}

fn row_range(row: &[f64]) -> (f64, f64) {
    row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Survivor mask and pooled value of one channel.
fn pool_row(row: &[f64], lambda: f64, keep: &mut [bool]) -> f64 {
    let (lo, hi) = row_range(row);
    let span = hi - lo;
    for (k, &v) in keep.iter_mut().zip(row) {
        *k = span == 0.0 || (v - lo) / span >= lambda;
    }
    // Mean taken relative to the row maximum, which always survives; ties at
    // the maximum therefore pool to the maximum exactly.
    let count = keep.iter().filter(|&&k| k).count() as f64;
    let offset: f64 = row
        .iter()
        .zip(keep.iter())
        .filter(|(_, &k)| k)
        .map(|(&v, _)| v - hi)
        .sum();
    hi + offset / count
}

struct GeneralizedPoolFn {
    lambda: f64,
    keep: Vec<bool>,
    n: usize,
}

impl Function for GeneralizedPoolFn {
    fn name(&self) -> &'static str {
        "generalized_pool"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut dx = vec![0.0; self.keep.len()];
        for (r, (dxr, keep)) in dx.chunks_mut(self.n).zip(self.keep.chunks(self.n)).enumerate() {
            let count = keep.iter().filter(|&&k| k).count() as f64;
            for (d, &k) in dxr.iter_mut().zip(keep) {
                if k {
                    *d = grad.data()[r] / count;
                }
            }
        }
        vec![Some(Tensor::new(inputs[0].dims().to_vec(), dx).expect("input shape"))]
    }

    fn kink_margin(&self, inputs: &[&Tensor], _: &Tensor) -> f64 {
        if self.lambda == 0.0 {
            return f64::INFINITY;
        }
        let mut margin = f64::INFINITY;
        for row in inputs[0].data().chunks(self.n) {
            let mut norm = row.to_vec();
            normalize_row(&mut norm);
            if self.lambda == 1.0 {
                // Only a tie for the maximum changes the survivor set.
                let second = norm
                    .iter()
                    .copied()
                    .filter(|&v| v < 1.0)
                    .fold(f64::NEG_INFINITY, f64::max);
                let maxima = norm.iter().filter(|&&v| v == 1.0).count();
                margin = margin.min(if maxima > 1 { 0.0 } else { 1.0 - second });
            } else {
                for v in norm {
                    margin = margin.min((v - self.lambda).abs());
                }
            }
        }
        margin
    }
}

/// Generalized pooling over the last axis: `[.., N] -> [..]`.
///
/// The threshold acts as a fixed selector, so gradients reach surviving cells
/// only.
pub fn generalized_pool(g: &mut Graph, x: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let dims = g.dims(x).to_vec();
    if dims.len() < 2 {
        return Err(shape_err!("generalized_pool expects rank >= 2, got {:?}", dims));
    }
    let n = *dims.last().unwrap();
    let data = g.value(x).data();
    let mut keep = vec![false; data.len()];
    let pooled: Vec<f64> = data
        .chunks(n)
        .zip(keep.chunks_mut(n))
        .map(|(row, k)| pool_row(row, lambda, k))
        .collect();
    let out = Tensor::new(dims[..dims.len() - 1].to_vec(), pooled)?;
    Ok(g.apply(Box::new(GeneralizedPoolFn { lambda, keep, n }), &[x], out))
}

/// Sum of generalized-pooled descriptors over every threshold in `cfg`.
pub fn multi_lambda_descriptor(g: &mut Graph, x: Var, cfg: &GpConfig) -> Result<Var> {
    cfg.validate()?;
    let mut acc = generalized_pool(g, x, cfg.lambdas[0])?;
    for &l in &cfg.lambdas[1..] {
        let p = generalized_pool(g, x, l)?;
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}
