//! Differentiable primitives recorded on a [`Graph`].

use super::kernels::{self, ConvGeom};
use super::{Function, Graph, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::par;

/// Offsets into `b` for every flat index of `a`, where each axis of `b` either
/// matches `a` or has extent 1.
fn broadcast_index(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return None;
    }
    let rank = a.len();
    let mut b_strides = vec![0; rank];
    let mut s = 1;
    for ax in (0..rank).rev() {
        b_strides[ax] = if b[ax] == 1 { 0 } else { s };
        s *= b[ax];
    }
    let n: usize = a.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        out.push(idx.iter().zip(&b_strides).map(|(i, st)| i * st).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < a[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Some(out)
}

fn reduce_to(grad: &[f64], map: &[usize], b_dims: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(b_dims);
    let d = out.data_mut();
    for (g, &j) in grad.iter().zip(map) {
        d[j] += g;
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryFn {
    kind: Binary,
    // None when shapes match exactly.
    map: Option<Vec<usize>>,
}

impl Function for BinaryFn {
    fn name(&self) -> &'static str {
        match self.kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "hadamard",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let b_at = |i: usize| self.map.as_ref().map_or(i, |m| m[i]);
        let ga = needs[0].then(|| match self.kind {
            Binary::Add | Binary::Sub => grad.clone(),
            Binary::Mul => Tensor::from_parts(
                a.dims().to_vec(),
                grad.data()
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * b.data()[b_at(i)])
                    .collect(),
            ),
        });
        let gb = needs[1].then(|| {
            let local: Vec<f64> = match self.kind {
                Binary::Add => grad.data().to_vec(),
                Binary::Sub => grad.data().iter().map(|g| -g).collect(),
                Binary::Mul => grad.data().iter().zip(a.data()).map(|(g, x)| g * x).collect(),
            };
            match &self.map {
                None => Tensor::from_parts(b.dims().to_vec(), local),
                Some(m) => reduce_to(&local, m, b.dims()),
            }
        });
        vec![ga, gb]
    }
}

struct ScaleFn(f64);

impl Function for ScaleFn {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.map(|g| g * self.0))]
    }
}

struct AddScalarFn;

impl Function for AddScalarFn {
    fn name(&self) -> &'static str {
        "add_scalar"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone())]
    }
}

/// How the operands of a matmul are laid out.
#[derive(Clone, Copy)]
enum MatMulKind {
    /// `[.., m, k] · [k, n]`: `b` shared across the leading axes of `a`.
    Shared { rows: usize, k: usize, n: usize },
    /// `[B, m, k] · [B, k, n]`.
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

struct MatMulFn(MatMulKind);

fn batched_matmul(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * m * n);
    let parts = par::map_indices(batch, |i| {
        kernels::matmul(&a[i * m * k..(i + 1) * m * k], &b[i * k * n..(i + 1) * k * n], m, k, n)
    });
    for p in parts {
        out.extend(p);
    }
    out
}

impl Function for MatMulFn {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        match self.0 {
            MatMulKind::Shared { rows, k, n } => {
                let ga = needs[0].then(|| {
                    let bt = kernels::transpose(b.data(), k, n);
                    Tensor::from_parts(a.dims().to_vec(), kernels::matmul(grad.data(), &bt, rows, n, k))
                });
                let gb = needs[1].then(|| {
                    let at = kernels::transpose(a.data(), rows, k);
                    Tensor::from_parts(b.dims().to_vec(), kernels::matmul(&at, grad.data(), k, rows, n))
                });
                vec![ga, gb]
            }
            MatMulKind::Batched { batch, m, k, n } => {
                let ga = needs[0].then(|| {
                    let bt = kernels::batch_transpose(b.data(), batch, k, n);
                    Tensor::from_parts(a.dims().to_vec(), batched_matmul(grad.data(), &bt, batch, m, n, k))
                });
                let gb = needs[1].then(|| {
                    let at = kernels::batch_transpose(a.data(), batch, m, k);
                    Tensor::from_parts(b.dims().to_vec(), batched_matmul(&at, grad.data(), batch, k, m, n))
                });
                vec![ga, gb]
            }
        }
    }
}

struct TransposeFn;

impl Function for TransposeFn {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        // grad has the output's layout [.., c, r]; transposing it back gives [.., r, c].
        let (batch, r, c) = out.batch_matrix_dims().expect("rank >= 2");
        let mut dims = out.dims().to_vec();
        let rank = dims.len();
        dims.swap(rank - 1, rank - 2);
        vec![Some(Tensor::from_parts(dims, kernels::batch_transpose(grad.data(), batch, r, c)))]
    }
}

struct ReshapeFn(Vec<usize>);

impl Function for ReshapeFn {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::from_parts(self.0.clone(), grad.data().to_vec()))]
    }
}

struct ReluFn;

impl Function for ReluFn {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        vec![Some(Tensor::from_parts(
            x.dims().to_vec(),
            x.data()
                .iter()
                .zip(grad.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect(),
        ))]
    }

    fn kink_margin(&self, inputs: &[&Tensor], _: &Tensor) -> f64 {
        inputs[0].data().iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min)
    }
}

struct SigmoidFn;

impl Function for SigmoidFn {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::from_parts(
            out.dims().to_vec(),
            out.data()
                .iter()
                .zip(grad.data())
                .map(|(&s, &g)| g * s * (1.0 - s))
                .collect(),
        ))]
    }
}

struct SoftmaxColumnsFn;

impl Function for SoftmaxColumnsFn {
    fn name(&self) -> &'static str {
        "softmax_columns"
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let (batch, r, c) = out.batch_matrix_dims().expect("rank >= 2");
        let (y, g) = (out.data(), grad.data());
        let mut dx = vec![0.0; y.len()];
        for b in 0..batch {
            let base = b * r * c;
            for j in 0..c {
                let dot: f64 = (0..r).map(|i| y[base + i * c + j] * g[base + i * c + j]).sum();
                for i in 0..r {
                    let at = base + i * c + j;
                    dx[at] = y[at] * (g[at] - dot);
                }
            }
        }
        vec![Some(Tensor::from_parts(out.dims().to_vec(), dx))]
    }
}

struct SumFn {
    dims: Vec<usize>,
    scale: f64,
}

impl Function for SumFn {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(&self.dims, grad.data()[0] * self.scale))]
    }
}

struct ConcatFn {
    widths: Vec<usize>,
    rows: usize,
}

impl Function for ConcatFn {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.widths.len());
        for (&w, &need) in self.widths.iter().zip(needs) {
            out.push(need.then(|| {
                let mut d = Vec::with_capacity(self.rows * w);
                for r in 0..self.rows {
                    d.extend_from_slice(&grad.data()[r * total + offset..r * total + offset + w]);
                }
                Tensor::from_parts(vec![self.rows, w], d)
            }));
            offset += w;
        }
        out
    }
}

struct Conv2dFn {
    geom: ConvGeom,
    batch: usize,
    c_out: usize,
}

impl Function for Conv2dFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = &self.geom;
        let (oh, ow) = g.out_hw();
        let cols = oh * ow;
        let plen = g.patch_len();
        let img_len = g.c_in * g.h * g.w;
        let out_len = self.c_out * cols;
        let wt = kernels::transpose(w.data(), self.c_out, plen);

        // Per-image partials; weight gradients are summed in image order below.
        let parts = par::map_indices(self.batch, |b| {
            let gout = &grad.data()[b * out_len..(b + 1) * out_len];
            let gx = needs[0].then(|| g.col2im(&kernels::matmul(&wt, gout, plen, self.c_out, cols)));
            let gw = needs[1].then(|| {
                let col = g.im2col(&x.data()[b * img_len..(b + 1) * img_len]);
                let colt = kernels::transpose(&col, plen, cols);
                kernels::matmul(gout, &colt, self.c_out, cols, plen)
            });
            (gx, gw)
        });

        let mut gx_all = needs[0].then(|| Vec::with_capacity(x.numel()));
        let mut gw_all = needs[1].then(|| vec![0.0; w.numel()]);
        for (gx, gw) in parts {
            if let (Some(acc), Some(gx)) = (gx_all.as_mut(), gx) {
                acc.extend(gx);
            }
            if let (Some(acc), Some(gw)) = (gw_all.as_mut(), gw) {
                for (a, v) in acc.iter_mut().zip(gw) {
                    *a += v;
                }
            }
        }
        let mut out = vec![
            gx_all.map(|d| Tensor::from_parts(x.dims().to_vec(), d)),
            gw_all.map(|d| Tensor::from_parts(w.dims().to_vec(), d)),
        ];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| {
                let mut gb = vec![0.0; self.c_out];
                for b in 0..self.batch {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        let base = b * out_len + co * cols;
                        *acc += grad.data()[base..base + cols].iter().sum::<f64>();
                    }
                }
                Tensor::from_parts(vec![self.c_out], gb)
            }));
        }
        out
    }
}

/// Per-feature batch statistics produced by [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
}

struct BatchNormFn {
    inv_std: Vec<f64>,
    xhat: Vec<f64>,
    rows: usize,
    feats: usize,
}

impl Function for BatchNormFn {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (r, f) = (self.rows, self.feats);
        let gamma = inputs[1].data();
        let g = grad.data();
        let mut sum_g = vec![0.0; f];
        let mut sum_gx = vec![0.0; f];
        for i in 0..r {
            for j in 0..f {
                sum_g[j] += g[i * f + j];
                sum_gx[j] += g[i * f + j] * self.xhat[i * f + j];
            }
        }
        let gx = needs[0].then(|| {
            let rn = r as f64;
            let mut d = vec![0.0; r * f];
            for i in 0..r {
                for j in 0..f {
                    let at = i * f + j;
                    d[at] = gamma[j] * self.inv_std[j] / rn
                        * (rn * g[at] - sum_g[j] - self.xhat[at] * sum_gx[j]);
                }
            }
            Tensor::from_parts(inputs[0].dims().to_vec(), d)
        });
        vec![
            gx,
            needs[1].then(|| Tensor::from_parts(vec![f], sum_gx)),
            needs[2].then(|| Tensor::from_parts(vec![f], sum_g)),
        ]
    }
}

pub const BN_EPS: f64 = 1e-5;

impl Graph {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        let map = if ad == bd {
            None
        } else {
            Some(broadcast_index(&ad, &bd).ok_or_else(|| {
                shape_err!("cannot broadcast {:?} onto {:?}", bd, ad)
            })?)
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[map.as_ref().map_or(i, |m| m[i])];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let out = Tensor::from_parts(ad, data);
        Ok(self.apply(Box::new(BinaryFn { kind, map }), &[a, b], out))
    }

    /// `a + b`; `b` may broadcast along unit axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    /// `a - b`; `b` may broadcast along unit axes.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Element-wise product; `b` may broadcast along unit axes.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.apply(Box::new(ScaleFn(s)), &[a], out)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.apply(Box::new(AddScalarFn), &[a], out)
    }

    /// Matrix product over the trailing two axes.
    ///
    /// `b` is either a matrix shared by every leading index of `a`, or a
    /// rank-3 stack with the same leading extent as a rank-3 `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        let mismatch = || shape_err!("matmul of {:?} and {:?}", ad, bd);
        if ad.len() < 2 || !(bd.len() == 2 || (bd.len() == 3 && ad.len() == 3)) {
            return Err(mismatch());
        }
        let k = ad[ad.len() - 1];
        if k != bd[bd.len() - 2] {
            return Err(mismatch());
        }
        let n = bd[bd.len() - 1];
        let mut out_dims = ad.clone();
        *out_dims.last_mut().unwrap() = n;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (kind, data) = if bd.len() == 2 {
            let rows = ad[..ad.len() - 1].iter().product();
            (MatMulKind::Shared { rows, k, n }, kernels::matmul(av, bv, rows, k, n))
        } else {
            if ad[0] != bd[0] {
                return Err(mismatch());
            }
            let (batch, m) = (ad[0], ad[1]);
            (
                MatMulKind::Batched { batch, m, k, n },
                batched_matmul(av, bv, batch, m, k, n),
            )
        };
        let out = Tensor::from_parts(out_dims, data);
        Ok(self.apply(Box::new(MatMulFn(kind)), &[a, b], out))
    }

    /// Swaps the trailing two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (batch, r, c) = t
            .batch_matrix_dims()
            .ok_or_else(|| shape_err!("transpose needs rank >= 2, got {:?}", t.dims()))?;
        let mut dims = t.dims().to_vec();
        let rank = dims.len();
        dims.swap(rank - 1, rank - 2);
        let out = Tensor::from_parts(dims, kernels::batch_transpose(t.data(), batch, r, c));
        Ok(self.apply(Box::new(TransposeFn), &[a], out))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let orig = self.dims(a).to_vec();
        let out = self.value(a).clone().reshape(dims)?;
        Ok(self.apply(Box::new(ReshapeFn(orig)), &[a], out))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.apply(Box::new(ReluFn), &[a], out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.apply(Box::new(SigmoidFn), &[a], out)
    }

    /// Softmax down each column of the trailing `r×c` matrices.
    pub fn softmax_columns(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (batch, r, c) = t
            .batch_matrix_dims()
            .ok_or_else(|| shape_err!("softmax_columns needs rank >= 2, got {:?}", t.dims()))?;
        let out = Tensor::from_parts(t.dims().to_vec(), kernels::softmax_columns(t.data(), batch, r, c));
        Ok(self.apply(Box::new(SoftmaxColumnsFn), &[a], out))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum());
        let f = SumFn {
            dims: t.dims().to_vec(),
            scale: 1.0,
        };
        self.apply(Box::new(f), &[a], out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.numel() as f64;
        let out = Tensor::scalar(t.sum() / n);
        let f = SumFn {
            dims: t.dims().to_vec(),
            scale: 1.0 / n,
        };
        self.apply(Box::new(f), &[a], out)
    }

    /// Concatenates rank-2 tensors with equal row counts along their columns.
    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&v| self.dims(v)[0])
            .ok_or_else(|| shape_err!("concat of nothing"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.dims(p);
            if d.len() != 2 || d[0] != rows {
                return Err(shape_err!("concat expects [{}, _] parts, got {:?}", rows, d));
            }
            widths.push(d[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        Ok(self.apply(Box::new(ConcatFn { widths, rows }), parts, out))
    }

    /// 2-D convolution of `[B, C_in, H, W]` with weights `[C_out, C_in, k, k]`
    /// and optional bias `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xd, wd) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        if xd.len() != 4 || wd.len() != 4 || wd[1] != xd[1] || wd[2] != wd[3] || stride == 0 {
            return Err(shape_err!("conv2d of input {:?} with weights {:?}", xd, wd));
        }
        if wd[2] > xd[2] + 2 * pad || wd[3] > xd[3] + 2 * pad {
            return Err(shape_err!("kernel {:?} larger than padded input {:?}", wd, xd));
        }
        let c_out = wd[0];
        if let Some(b) = bias {
            if self.dims(b) != [c_out] {
                return Err(shape_err!("conv2d bias {:?} for {} outputs", self.dims(b), c_out));
            }
        }
        let geom = ConvGeom {
            c_in: xd[1],
            h: xd[2],
            w: xd[3],
            kernel: wd[2],
            stride,
            pad,
        };
        let batch = xd[0];
        let (oh, ow) = geom.out_hw();
        let cols = oh * ow;
        let img_len = geom.c_in * geom.h * geom.w;
        let out_len = c_out * cols;
        let mut data = vec![0.0; batch * out_len];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = bias.map(|b| self.value(b).data());
            par::for_each_chunk_mut(&mut data, out_len, |b, out| {
                let col = geom.im2col(&xv[b * img_len..(b + 1) * img_len]);
                let y = kernels::matmul(wv, &col, c_out, geom.patch_len(), cols);
                out.copy_from_slice(&y);
                if let Some(bv) = bv {
                    for (co, chunk) in out.chunks_mut(cols).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += bv[co]);
                    }
                }
            });
        }
        let out = Tensor::from_parts(vec![batch, c_out, oh, ow], data);
        let f = Conv2dFn { geom, batch, c_out };
        let inputs: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(bias).collect();
        Ok(self.apply(Box::new(f), &inputs, out))
    }

    /// Training-mode batch normalization of `x: [R, F]` with per-feature
    /// statistics over the rows and affine parameters `gamma, beta: [F]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let xd = self.dims(x).to_vec();
        if xd.len() != 2 || self.dims(gamma) != [xd[1]] || self.dims(beta) != [xd[1]] {
            return Err(shape_err!(
                "batch_norm of {:?} with gamma {:?}, beta {:?}",
                xd,
                self.dims(gamma),
                self.dims(beta)
            ));
        }
        let (r, f) = (xd[0], xd[1]);
        let xv = self.value(x).data();
        let mut mean = vec![0.0; f];
        for i in 0..r {
            for j in 0..f {
                mean[j] += xv[i * f + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        let mut var = vec![0.0; f];
        for i in 0..r {
            for j in 0..f {
                let d = xv[i * f + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= r as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; r * f];
        let mut y = vec![0.0; r * f];
        for i in 0..r {
            for j in 0..f {
                let at = i * f + j;
                xhat[at] = (xv[at] - mean[j]) * inv_std[j];
                y[at] = gv[j] * xhat[at] + bv[j];
            }
        }
        let out = Tensor::from_parts(xd, y);
        let func = BatchNormFn {
            inv_std,
            xhat,
            rows: r,
            feats: f,
        };
        let v = self.apply(Box::new(func), &[x, gamma, beta], out);
        Ok((v, BatchStats { mean, var }))
    }
}
