use super::{Graph, Tensor, Var};
use crate::error::{contract_err, Result};

/// Outcome of comparing autodiff gradients with central differences.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Largest `|g_auto - g_fd| / max(|g_auto|, 1e-8)` over all coordinates.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Distance of the unperturbed evaluation from the nearest kink.
    pub kink_margin: f64,
}

/// Checks the gradient of the scalar function `f` at `x`.
///
/// `f` records its computation on the supplied graph, starting from the leaf
/// it is handed, and returns the scalar output.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    if g.value(out).numel() != 1 {
        return Err(contract_err!(
            "gradient check needs a scalar function, got dims {:?}",
            g.dims(out)
        ));
    }
    g.backward(out)?;
    let analytic = g.grad(leaf).expect("leaf requires grad").clone();
    let kink_margin = g.kink_margin();

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        g.value(out).item()
    };

    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let auto = analytic.data()[i];
        let abs = (auto - numeric).abs();
        max_abs_err = max_abs_err.max(abs);
        max_rel_err = max_rel_err.max(abs / auto.abs().max(1e-8));
    }
    Ok(GradCheck {
        max_rel_err,
        max_abs_err,
        kink_margin,
    })
}
