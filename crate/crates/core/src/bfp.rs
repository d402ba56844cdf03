//! Bi-directional feature perception between two feature levels.
//!
//! For a pair of levels sharing one `H×W` grid, each level is re-weighted by a
//! learned spatial mask, flattened to `N = H·W` local descriptors, and the two
//! levels are related through column-stochastic correlation maps obtained by
//! low-rank bilinear pooling. Each level is then augmented with the other's
//! information routed through those maps.
//!
//! All functions work on batches: spatial maps are `[B, D, H, W]` and
//! flattened descriptors are `[B, N, D]`.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn::{he_normal, Ctx, ParamStore};
use crate::tensor::Var;

/// The three feature levels of one batch, all on the same spatial grid.
#[derive(Clone, Copy, Debug)]
pub struct LevelFeatures {
    pub low: Var,
    pub mid: Var,
    pub high: Var,
    pub h: usize,
    pub w: usize,
}

impl LevelFeatures {
    pub fn new(ctx: &Ctx<'_>, low: Var, mid: Var, high: Var) -> Result<Self> {
        let grid = |v: Var| -> Result<(usize, usize, usize)> {
            match ctx.g.dims(v) {
                &[b, _, h, w] => Ok((b, h, w)),
                d => Err(shape_err!("level feature map must be [B, D, H, W], got {:?}", d)),
            }
        };
        let (l, m, h) = (grid(low)?, grid(mid)?, grid(high)?);
        if l != m || m != h {
            return Err(shape_err!(
                "levels disagree on [B, H, W]: low {:?}, mid {:?}, high {:?}",
                l,
                m,
                h
            ));
        }
        Ok(Self {
            low,
            mid,
            high,
            h: l.1,
            w: l.2,
        })
    }

    /// Spatial cells per map.
    pub fn n(&self) -> usize {
        self.h * self.w
    }
}

/// Dimensions and storage prefix of the learnable projections for one level
/// pair. The tensors themselves live in a [`ParamStore`]:
///
/// | name            | dims        |
/// |-----------------|-------------|
/// | `u.weight`      | `D_a × L`   |
/// | `v.weight`      | `D_b × L`   |
/// | `p`             | `L`         |
/// | `u_prime.weight`| `D_a × L'`  |
/// | `v_prime.weight`| `D_b × L'`  |
/// | `p_x.weight`    | `L' × D_a`  |
/// | `p_y.weight`    | `L' × D_b`  |
/// | `mask_a.weight` | `1×D_a×1×1` |
/// | `mask_b.weight` | `1×D_b×1×1` |
///
/// Each `*.weight` projection may carry a `*.bn` batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BfpParams {
    pub prefix: String,
    pub d_a: usize,
    pub d_b: usize,
    pub rank: usize,
    pub pool_dim: usize,
}

const PROJECTIONS: [&str; 6] = ["u", "v", "u_prime", "v_prime", "p_x", "p_y"];

impl BfpParams {
    pub fn new(prefix: &str, d_a: usize, d_b: usize, rank: usize, pool_dim: usize) -> Result<Self> {
        if [d_a, d_b, rank, pool_dim].contains(&0) {
            return Err(shape_err!(
                "BFP dims must be positive: D_a={d_a}, D_b={d_b}, L={rank}, L'={pool_dim}"
            ));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            d_a,
            d_b,
            rank,
            pool_dim,
        })
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{}", self.prefix, part)
    }

    /// Registers freshly initialized projections (and, with `batch_norm`,
    /// their norms) in `store`.
    pub fn init(&self, store: &mut ParamStore, batch_norm: bool, rng: &mut impl Rng) -> Result<()> {
        let (da, db, l, lp) = (self.d_a, self.d_b, self.rank, self.pool_dim);
        let shapes: [(&str, [usize; 2]); 6] = [
            ("u", [da, l]),
            ("v", [db, l]),
            ("u_prime", [da, lp]),
            ("v_prime", [db, lp]),
            ("p_x", [lp, da]),
            ("p_y", [lp, db]),
        ];
        for (part, dims) in shapes {
            store.add_param(&self.name(&format!("{part}.weight")), he_normal(&dims, dims[0], rng))?;
            if batch_norm {
                store.add_batch_norm(&self.name(&format!("{part}.bn")), dims[1])?;
            }
        }
        let p = crate::tensor::Tensor::randn(&[l], (1.0 / l as f64).sqrt(), rng);
        store.add_param(&self.name("p"), p)?;
        for (part, d) in [("mask_a", da), ("mask_b", db)] {
            store.add_param(&self.name(&format!("{part}.weight")), he_normal(&[1, d, 1, 1], d, rng))?;
            store.add_param(&self.name(&format!("{part}.bias")), crate::tensor::Tensor::zeros(&[1]))?;
        }
        Ok(())
    }

    /// Names of the four pooling-space projection weights `U, V, U', V'`.
    pub fn projection_names(&self) -> Vec<String> {
        PROJECTIONS[..4]
            .iter()
            .map(|p| self.name(&format!("{p}.weight")))
            .collect()
    }
}

/// Column-stochastic correlation maps between two levels, `[B, N, N]` each,
/// with the raw scores they were normalized from.
#[derive(Clone, Copy, Debug)]
pub struct CorrelationPair {
    pub c_x: Var,
    pub c_y: Var,
    pub raw_x: Var,
    pub raw_y: Var,
}

/// Re-weights every spatial cell of `f: [B, D, H, W]` by a sigmoid mask from
/// a 1×1 convolution to one channel.
pub fn self_awareness(ctx: &mut Ctx<'_>, f: Var, mask_prefix: &str) -> Result<Var> {
    let w = ctx.param(&format!("{mask_prefix}.weight"))?;
    let b = ctx.param(&format!("{mask_prefix}.bias"))?;
    let (wd, fd) = (ctx.g.dims(w).to_vec(), ctx.g.dims(f).to_vec());
    if wd.len() != 4 || wd[0] != 1 || wd[2] != 1 || wd[3] != 1 || fd.len() != 4 || wd[1] != fd[1] {
        return Err(shape_err!("mask conv {:?} does not map {:?} to one channel", wd, fd));
    }
    let logits = ctx.g.conv2d(f, w, Some(b), 1, 0)?;
    let mask = ctx.g.sigmoid(logits);
    ctx.g.hadamard(f, mask)
}

/// `[B, D, H, W] -> [B, N, D]`; row `i` is the descriptor at cell `i` in
/// row-major `(h, w)` order.
pub fn flatten_spatial(ctx: &mut Ctx<'_>, f: Var) -> Result<Var> {
    let d = ctx.g.dims(f).to_vec();
    if d.len() != 4 {
        return Err(shape_err!("flatten_spatial expects [B, D, H, W], got {:?}", d));
    }
    let cols = ctx.g.reshape(f, &[d[0], d[1], d[2] * d[3]])?;
    ctx.g.transpose(cols)
}

/// Inverse of [`flatten_spatial`].
pub fn unflatten_spatial(ctx: &mut Ctx<'_>, rows: Var, h: usize, w: usize) -> Result<Var> {
    let d = ctx.g.dims(rows).to_vec();
    if d.len() != 3 || d[1] != h * w {
        return Err(shape_err!("cannot unflatten {:?} onto a {}x{} grid", d, h, w));
    }
    let cols = ctx.g.transpose(rows)?;
    ctx.g.reshape(cols, &[d[0], d[2], h, w])
}

fn check_pair(ctx: &Ctx<'_>, xp: Var, yp: Var, params: &BfpParams) -> Result<(usize, usize)> {
    let (xd, yd) = (ctx.g.dims(xp), ctx.g.dims(yp));
    if xd.len() != 3 || yd.len() != 3 || xd[0] != yd[0] {
        return Err(shape_err!("BFP inputs must be [B, N, D], got {:?} and {:?}", xd, yd));
    }
    if xd[1] != yd[1] {
        return Err(shape_err!("levels have N={} and N={} cells", xd[1], yd[1]));
    }
    if xd[2] != params.d_a || yd[2] != params.d_b {
        return Err(shape_err!(
            "BFP pair {} expects channels ({}, {}), got {:?} and {:?}",
            params.prefix,
            params.d_a,
            params.d_b,
            xd,
            yd
        ));
    }
    Ok((xd[0], xd[1]))
}

/// Correlation maps of two flattened levels `xp: [B, N, D_a]`,
/// `yp: [B, N, D_b]`.
///
/// `raw[i, j] = pᵀ(relu(xp_i U) ⊙ relu(yp_j V))`; `c_x` is the column softmax
/// of `raw` and `c_y` the column softmax of `rawᵀ`.
pub fn correlation_maps(ctx: &mut Ctx<'_>, xp: Var, yp: Var, params: &BfpParams) -> Result<CorrelationPair> {
    check_pair(ctx, xp, yp, params)?;
    let xu = ctx.linear(&params.name("u"), xp)?;
    let sx = ctx.g.relu(xu);
    let yv = ctx.linear(&params.name("v"), yp)?;
    let sy = ctx.g.relu(yv);
    let p = ctx.param(&params.name("p"))?;
    let p_row = ctx.g.reshape(p, &[1, 1, params.rank])?;
    // (1·pᵀ) ⊙ relu(X'U): every row weighted by p.
    let weighted = ctx.g.hadamard(sx, p_row)?;
    let sy_t = ctx.g.transpose(sy)?;
    let raw_x = ctx.g.matmul(weighted, sy_t)?;
    let raw_y = ctx.g.transpose(raw_x)?;
    let c_x = ctx.g.softmax_columns(raw_x)?;
    let c_y = ctx.g.softmax_columns(raw_y)?;
    Ok(CorrelationPair { c_x, c_y, raw_x, raw_y })
}

/// Mutual augmentation of two flattened levels through their correlation
/// maps. Returns `(x_aug: [B, N, D_a], y_aug: [B, N, D_b])`.
///
/// With `A = relu(xp U')` and `B = relu(yp V')` (both `[N, L']`), column `l`
/// of the augmented low level is `A_l ⊙ (C_yᵀ B_l)` and of the augmented
/// other level `(C_xᵀ A_l) ⊙ B_l`; both are then mapped back to their level's
/// channel count by `P_x`, `P_y`.
pub fn bfp_transform(
    ctx: &mut Ctx<'_>,
    xp: Var,
    yp: Var,
    pair: &CorrelationPair,
    params: &BfpParams,
) -> Result<(Var, Var)> {
    let (_, n) = check_pair(ctx, xp, yp, params)?;
    for c in [pair.c_x, pair.c_y] {
        let d = ctx.g.dims(c);
        if d.len() != 3 || d[1] != n || d[2] != n {
            return Err(shape_err!("correlation map {:?} for N={}", d, n));
        }
    }
    let xu = ctx.linear(&params.name("u_prime"), xp)?;
    let a = ctx.g.relu(xu);
    let yv = ctx.linear(&params.name("v_prime"), yp)?;
    let b = ctx.g.relu(yv);

    let cy_t = ctx.g.transpose(pair.c_y)?;
    let routed_y = ctx.g.matmul(cy_t, b)?;
    let x_y = ctx.g.hadamard(a, routed_y)?;

    let cx_t = ctx.g.transpose(pair.c_x)?;
    let routed_x = ctx.g.matmul(cx_t, a)?;
    let y_x = ctx.g.hadamard(routed_x, b)?;

    let x_aug = ctx.linear(&params.name("p_x"), x_y)?;
    let y_aug = ctx.linear(&params.name("p_y"), y_x)?;
    Ok((x_aug, y_aug))
}

/// Full BFP for one level pair on spatial maps: masking, correlation,
/// augmentation, and reshaping back to `[B, D, H, W]`.
pub fn bfp_pair(ctx: &mut Ctx<'_>, x: Var, y: Var, params: &BfpParams) -> Result<(Var, Var)> {
    let dims = ctx.g.dims(x).to_vec();
    if dims.len() != 4 {
        return Err(shape_err!("bfp_pair expects [B, D, H, W], got {:?}", dims));
    }
    let (h, w) = (dims[2], dims[3]);
    let xm = self_awareness(ctx, x, &params.name("mask_a"))?;
    let ym = self_awareness(ctx, y, &params.name("mask_b"))?;
    let xp = flatten_spatial(ctx, xm)?;
    let yp = flatten_spatial(ctx, ym)?;
    let pair = correlation_maps(ctx, xp, yp, params)?;
    let (xa, ya) = bfp_transform(ctx, xp, yp, &pair, params)?;
    Ok((unflatten_spatial(ctx, xa, h, w)?, unflatten_spatial(ctx, ya, h, w)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    /// Store whose projections act as identities on 1-channel inputs.
    fn scalar_store(params: &BfpParams) -> ParamStore {
        let mut s = ParamStore::new();
        for part in PROJECTIONS {
            s.add_param(&params.name(&format!("{part}.weight")), Tensor::ones(&[1, 1])).unwrap();
        }
        s.add_param(&params.name("p"), Tensor::ones(&[1])).unwrap();
        s
    }

    #[test]
    fn flatten_orders_cells_row_major() {
        let s = ParamStore::new();
        let mut ctx = Ctx::new(&s, Mode::Eval);
        // D=2, H=1, W=2: channel 0 = (a, b), channel 1 = (c, d).
        let f = ctx.g.constant(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let rows = flatten_spatial(&mut ctx, f).unwrap();
        assert_eq!(ctx.g.dims(rows), &[1, 2, 2]);
        assert_eq!(ctx.g.value(rows).data(), &[1.0, 3.0, 2.0, 4.0]);
        let back = unflatten_spatial(&mut ctx, rows, 1, 2).unwrap();
        assert_eq!(ctx.g.value(back), ctx.g.value(f));
    }

    #[test]
    fn zero_mask_halves_features() {
        let mut s = ParamStore::new();
        s.add_param("m.weight", Tensor::zeros(&[1, 3, 1, 1])).unwrap();
        s.add_param("m.bias", Tensor::zeros(&[1])).unwrap();
        let mut ctx = Ctx::new(&s, Mode::Eval);
        let f = ctx.g.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 - 4.0));
        let out = self_awareness(&mut ctx, f, "m").unwrap();
        let expect = ctx.g.value(f).map(|x| 0.5 * x);
        assert_eq!(ctx.g.value(out), &expect);

        let bad = ctx.g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(self_awareness(&mut ctx, bad, "m").is_err());
    }

    #[test]
    fn single_cell_maps_are_one() {
        let params = BfpParams::new("b", 1, 1, 1, 1).unwrap();
        let s = scalar_store(&params);
        let mut ctx = Ctx::new(&s, Mode::Eval);
        let xp = ctx.g.constant(t(&[1, 1, 1], &[0.7]));
        let yp = ctx.g.constant(t(&[1, 1, 1], &[-3.0]));
        let pair = correlation_maps(&mut ctx, xp, yp, &params).unwrap();
        assert_eq!(ctx.g.value(pair.c_x).data(), &[1.0]);
        assert_eq!(ctx.g.value(pair.c_y).data(), &[1.0]);
    }

    #[test]
    fn correlation_scalar_oracle() {
        let params = BfpParams::new("b", 1, 1, 1, 1).unwrap();
        let s = scalar_store(&params);
        let mut ctx = Ctx::new(&s, Mode::Eval);
        let xp = ctx.g.constant(t(&[1, 2, 1], &[1.0, 2.0]));
        let yp = ctx.g.constant(t(&[1, 2, 1], &[1.0, 3.0]));
        let pair = correlation_maps(&mut ctx, xp, yp, &params).unwrap();
        assert_eq!(ctx.g.value(pair.raw_x).data(), &[1.0, 3.0, 2.0, 6.0]);
        // Columns listed top to bottom: c_x col0 = (0.2689, 0.7311), col1 = (0.0474, 0.9526).
        let cx = ctx.g.value(pair.c_x);
        let cy = ctx.g.value(pair.c_y);
        let close = |a: f64, b: f64| (a - b).abs() < 1e-4;
        assert!(close(cx.get(&[0, 0, 0]), 0.2689) && close(cx.get(&[0, 1, 0]), 0.7311));
        assert!(close(cx.get(&[0, 0, 1]), 0.0474) && close(cx.get(&[0, 1, 1]), 0.9526));
        assert!(close(cy.get(&[0, 0, 0]), 0.1192) && close(cy.get(&[0, 1, 0]), 0.8808));
        assert!(close(cy.get(&[0, 0, 1]), 0.0180) && close(cy.get(&[0, 1, 1]), 0.9820));
    }

    #[test]
    fn n_mismatch_is_shape_error() {
        let params = BfpParams::new("b", 1, 1, 1, 1).unwrap();
        let s = scalar_store(&params);
        let mut ctx = Ctx::new(&s, Mode::Eval);
        let xp = ctx.g.constant(Tensor::zeros(&[1, 2, 1]));
        let yp = ctx.g.constant(Tensor::zeros(&[1, 3, 1]));
        assert!(correlation_maps(&mut ctx, xp, yp, &params).is_err());
    }

    #[test]
    fn transform_shape_contract() {
        let mut rng = crate::rng::substream(3, crate::rng::Stream::Init);
        let params = BfpParams::new("b", 3, 5, 2, 7).unwrap();
        let mut s = ParamStore::new();
        params.init(&mut s, false, &mut rng).unwrap();
        let mut ctx = Ctx::new(&s, Mode::Eval);
        let xp = ctx.g.constant(Tensor::randn(&[1, 4, 3], 1.0, &mut rng));
        let yp = ctx.g.constant(Tensor::randn(&[1, 4, 5], 1.0, &mut rng));
        let pair = correlation_maps(&mut ctx, xp, yp, &params).unwrap();
        let (xa, ya) = bfp_transform(&mut ctx, xp, yp, &pair, &params).unwrap();
        assert_eq!(ctx.g.dims(xa), &[1, 4, 3]);
        assert_eq!(ctx.g.dims(ya), &[1, 4, 5]);
    }

    #[test]
    fn zero_low_level_annihilates_both_outputs() {
        let mut rng = crate::rng::substream(4, crate::rng::Stream::Init);
        let params = BfpParams::new("b", 3, 5, 2, 7).unwrap();
        let mut s = ParamStore::new();
        params.init(&mut s, true, &mut rng).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let mut ctx = Ctx::new(&s, mode);
            let xp = ctx.g.constant(Tensor::zeros(&[2, 4, 3]));
            let yp = ctx.g.constant(Tensor::randn(&[2, 4, 5], 1.0, &mut rng));
            let pair = correlation_maps(&mut ctx, xp, yp, &params).unwrap();
            let (xa, ya) = bfp_transform(&mut ctx, xp, yp, &pair, &params).unwrap();
            assert!(ctx.g.value(xa).data().iter().all(|&v| v == 0.0));
            assert!(ctx.g.value(ya).data().iter().all(|&v| v == 0.0));
        }
    }
}
