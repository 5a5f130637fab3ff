//! Layer primitives: linear maps, same-padded convolution, batch
//! normalisation, max pooling and batched matrix products.

use rayon::prelude::*;

use super::{numel, split_axis, Backward, GradSink, Tape, Var};
use crate::error::{contract, Result};
use crate::scalar::Scalar;

/// Samples per partial weight-gradient. Fixed so the summation order, and
/// therefore the result bits, never depend on the worker count.
const GRAD_CHUNK: usize = 8;

struct LinearOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}

impl<T: Scalar> Backward<T> for LinearOp {
    fn backward(&self, tape: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        let (r, i, o) = (self.rows, self.fan_in, self.fan_out);
        if let Some(dx) = sink.slot(self.x) {
            T::gemm(r, o, i, T::one(), grad, false, tape.value(self.w), false, T::one(), dx);
        }
        if let Some(dw) = sink.slot(self.w) {
            T::gemm(o, r, i, T::one(), grad, true, tape.value(self.x), false, T::one(), dw);
        }
        if let Some(b) = self.b {
            if let Some(db) = sink.slot(b) {
                for row in grad.chunks(o) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
            }
        }
    }
}

struct BmmOp {
    a: Var,
    b: Var,
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Backward<T> for BmmOp {
    fn backward(&self, tape: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let (av, bv) = (tape.value(self.a), tape.value(self.b));
        if let Some(da) = sink.slot(self.a) {
            for g in 0..self.groups {
                T::gemm(m, n, k, T::one(), &grad[g * m * n..], false, &bv[g * k * n..], true, T::one(), &mut da[g * m * k..]);
            }
        }
        if let Some(db) = sink.slot(self.b) {
            for g in 0..self.groups {
                T::gemm(k, m, n, T::one(), &av[g * m * k..], true, &grad[g * m * n..], false, T::one(), &mut db[g * k * n..]);
            }
        }
    }
}

/// Geometry of a stride-1, same-padded square convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    height: usize,
    width: usize,
    kernel: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn hw(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds one `[c_in, h, w]` sample into `[c_in * k * k, h * w]` columns.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = (k / 2) as isize;
    let hw = g.hw();
    for c in 0..g.c_in {
        let plane = &x[c * hw..][..hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for y in 0..h {
                    let sy = y + dy;
                    let dst = &mut row[(y * w) as usize..][..w as usize];
                    if sy < 0 || sy >= h {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[(sy * w) as usize..][..w as usize];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *d = if sx < 0 || sx >= w { T::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Folds `[c_in * k * k, h * w]` column gradients back onto one sample.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = (k / 2) as isize;
    let hw = g.hw();
    for c in 0..g.c_in {
        let plane = &mut dx[c * hw..][..hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                let (dy, ddx) = (ky as isize - pad, kx as isize - pad);
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let src = &row[(y * w) as usize..][..w as usize];
                    let dst = &mut plane[(sy * w) as usize..][..w as usize];
                    for (xo, &v) in src.iter().enumerate() {
                        let sx = xo as isize + ddx;
                        if sx >= 0 && sx < w {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
}

impl<T: Scalar> Backward<T> for Conv2dOp {
    fn backward(&self, tape: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        let g = self.geom;
        let (hw, patch) = (g.hw(), g.patch());
        let in_len = g.c_in * hw;
        let out_len = g.c_out * hw;
        let xv = tape.value(self.x);
        let wv = tape.value(self.w);

        if let Some(dw) = sink.slot(self.w) {
            let chunks: Vec<usize> = (0..g.batch.div_ceil(GRAD_CHUNK)).collect();
            let partials: Vec<Vec<T>> = chunks
                .par_iter()
                .map(|&c| {
                    let mut part = vec![T::zero(); g.c_out * patch];
                    let mut cols = vec![T::zero(); patch * hw];
                    let end = ((c + 1) * GRAD_CHUNK).min(g.batch);
                    for n in c * GRAD_CHUNK..end {
                        im2col(&g, &xv[n * in_len..][..in_len], &mut cols);
                        T::gemm(g.c_out, hw, patch, T::one(), &grad[n * out_len..], false, &cols, true, T::one(), &mut part);
                    }
                    part
                })
                .collect();
            for part in partials {
                for (d, p) in dw.iter_mut().zip(part) {
                    *d += p;
                }
            }
        }
        if let Some(b) = self.b {
            if let Some(db) = sink.slot(b) {
                for n in 0..g.batch {
                    for (co, d) in db.iter_mut().enumerate() {
                        *d += grad[n * out_len + co * hw..][..hw].iter().copied().sum::<T>();
                    }
                }
            }
        }
        if let Some(dx) = sink.slot(self.x) {
            dx.par_chunks_mut(in_len).enumerate().for_each_init(
                || vec![T::zero(); patch * hw],
                |cols, (n, dxn)| {
                    T::gemm(patch, g.c_out, hw, T::one(), wv, true, &grad[n * out_len..], false, T::zero(), cols);
                    col2im(&g, cols, dxn);
                },
            );
        }
    }
}

/// Per-channel statistics of one training-mode normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity folded into running estimates.
    pub var_unbiased: Vec<T>,
}

struct BatchNormOp<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    outer: usize,
    channels: usize,
    inner: usize,
    /// Normalised input.
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Batch statistics were used (and are differentiated through).
    training: bool,
}

impl<T: Scalar> Backward<T> for BatchNormOp<T> {
    fn backward(&self, tape: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        let (o_n, c_n, i_n) = (self.outer, self.channels, self.inner);
        let gamma = tape.value(self.gamma);
        let mut sum_g = vec![T::zero(); c_n];
        let mut sum_gx = vec![T::zero(); c_n];
        for o in 0..o_n {
            for c in 0..c_n {
                let base = (o * c_n + c) * i_n;
                for (&g, &xh) in grad[base..][..i_n].iter().zip(&self.xhat[base..][..i_n]) {
                    sum_g[c] += g;
                    sum_gx[c] += g * xh;
                }
            }
        }
        if let Some(dg) = sink.slot(self.gamma) {
            for (d, &s) in dg.iter_mut().zip(&sum_gx) {
                *d += s;
            }
        }
        if let Some(db) = sink.slot(self.beta) {
            for (d, &s) in db.iter_mut().zip(&sum_g) {
                *d += s;
            }
        }
        if let Some(dx) = sink.slot(self.x) {
            let m = T::from_usize_lossy(o_n * i_n);
            for o in 0..o_n {
                for c in 0..c_n {
                    let base = (o * c_n + c) * i_n;
                    let k = gamma[c] * self.inv_std[c];
                    let dst = &mut dx[base..][..i_n];
                    let g = &grad[base..][..i_n];
                    if self.training {
                        let xh = &self.xhat[base..][..i_n];
                        for j in 0..i_n {
                            dst[j] += k * (g[j] - sum_g[c] / m - xh[j] * sum_gx[c] / m);
                        }
                    } else {
                        for j in 0..i_n {
                            dst[j] += k * g[j];
                        }
                    }
                }
            }
        }
    }
}

struct MaxPoolOp {
    x: Var,
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolOp {
    fn backward(&self, _: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(dx) = sink.slot(self.x) {
            for (&src, &g) in self.argmax.iter().zip(grad) {
                dx[src] += g;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// `y = x W^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(contract(format!("linear: input {xs:?} incompatible with weight {ws:?}")));
        }
        let (fan_out, fan_in) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(contract(format!("linear: bias shape {:?}, expected [{fan_out}]", self.shape(b))));
            }
        }
        let rows = numel(&xs) / fan_in.max(1);
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(rows, fan_in, fan_out, T::one(), self.value(x), false, self.value(w), true, T::one(), &mut out);
        let mut shape = xs;
        *shape.last_mut().expect("checked non-empty") = fan_out;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push("linear", shape, out, &parents, LinearOp { x, w, b, rows, fan_in, fan_out }))
    }

    /// Batched product `[g, m, k] x [g, k, n] -> [g, m, n]`; leading axes of
    /// both operands must agree and are flattened into `g`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() < 2 || as_.len() != bs.len() || as_[..as_.len() - 2] != bs[..bs.len() - 2] || as_[as_.len() - 1] != bs[bs.len() - 2] {
            return Err(contract(format!("bmm: incompatible shapes {as_:?} and {bs:?}")));
        }
        let r = as_.len();
        let (m, k, n) = (as_[r - 2], as_[r - 1], bs[r - 1]);
        let groups = numel(&as_[..r - 2]);
        let mut out = vec![T::zero(); groups * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for g in 0..groups {
            T::gemm(m, k, n, T::one(), &av[g * m * k..], false, &bv[g * k * n..], false, T::zero(), &mut out[g * m * n..]);
        }
        let mut shape = as_.clone();
        shape[r - 1] = n;
        Ok(self.push("bmm", shape, out, &[a, b], BmmOp { a, b, groups, m, k, n }))
    }

    /// Stride-1 same-padded convolution. `x` is `[n, c_in, h, w]`, `w` is
    /// `[c_out, c_in, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(contract(format!("conv2d: input {xs:?} incompatible with weight {ws:?}")));
        }
        let geom = ConvGeom { batch: xs[0], c_in: xs[1], c_out: ws[0], height: xs[2], width: xs[3], kernel: ws[2] };
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(contract(format!("conv2d: bias shape {:?}, expected [{}]", self.shape(b), geom.c_out)));
            }
        }
        let (hw, patch) = (geom.hw(), geom.patch());
        let in_len = geom.c_in * hw;
        let out_len = geom.c_out * hw;
        let mut out = vec![T::zero(); geom.batch * out_len];
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        out.par_chunks_mut(out_len.max(1)).enumerate().for_each_init(
            || vec![T::zero(); patch * hw],
            |cols, (n, on)| {
                im2col(&geom, &xv[n * in_len..][..in_len], cols);
                if let Some(bv) = bv {
                    for (co, plane) in on.chunks_mut(hw).enumerate() {
                        plane.iter_mut().for_each(|v| *v = bv[co]);
                    }
                }
                T::gemm(geom.c_out, patch, hw, T::one(), wv, false, cols, false, T::one(), on);
            },
        );
        let shape = vec![geom.batch, geom.c_out, geom.height, geom.width];
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push("conv2d", shape, out, &parents, Conv2dOp { x, w, b, geom }))
    }

    /// Training-mode batch normalisation over `channel_axis`: statistics are
    /// taken over every other axis and returned for running-estimate updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        channel_axis: usize,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (outer, channels, inner) = self.bn_layout(x, channel_axis, gamma, beta)?;
        let m = outer * inner;
        if m < 2 {
            return Err(contract("batch_norm_train needs at least two values per channel"));
        }
        let xv = self.value(x);
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        for o in 0..outer {
            for c in 0..channels {
                mean[c] += xv[(o * channels + c) * inner..][..inner].iter().copied().sum::<T>();
            }
        }
        let mf = T::from_usize_lossy(m);
        mean.iter_mut().for_each(|v| *v /= mf);
        for o in 0..outer {
            for c in 0..channels {
                for &v in &xv[(o * channels + c) * inner..][..inner] {
                    let d = v - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let var_unbiased: Vec<T> = var.iter().map(|&s| s / T::from_usize_lossy(m - 1)).collect();
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s / mf + eps).sqrt()).collect();
        let out = self.bn_apply(x, channel_axis, gamma, beta, &mean, inv_std, true);
        Ok((out, BatchStats { mean, var_unbiased }))
    }

    /// Inference-mode batch normalisation with fixed statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        channel_axis: usize,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, channels, _) = self.bn_layout(x, channel_axis, gamma, beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(contract("batch_norm_eval: running statistics do not match channel count"));
        }
        let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, channel_axis, gamma, beta, running_mean, inv_std, false))
    }

    fn bn_layout(&self, x: Var, channel_axis: usize, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if channel_axis >= xs.len() {
            return Err(contract(format!("batch norm channel axis {channel_axis} out of range for {xs:?}")));
        }
        let (outer, channels, inner) = split_axis(xs, channel_axis);
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(contract(format!("batch norm affine parameters must have shape [{channels}]")));
        }
        Ok((outer, channels, inner))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(&mut self, x: Var, axis: usize, gamma: Var, beta: Var, mean: &[T], inv_std: Vec<T>, training: bool) -> Var {
        let (outer, channels, inner) = split_axis(self.shape(x), axis);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                for j in base..base + inner {
                    let h = (xv[j] - mean[c]) * inv_std[c];
                    xhat[j] = h;
                    out[j] = gv[c] * h + bv[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let op = BatchNormOp { x, gamma, beta, outer, channels, inner, xhat, inv_std, training };
        self.push("batch_norm", shape, out, &[x, gamma, beta], op)
    }

    /// 2x2 max pooling with stride 2 on `[n, c, h, w]`. Gradients go to the
    /// first maximal element in scan order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(contract(format!("max_pool2d needs [n, c, even h, even w], got {xs:?}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = p * h * w + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = p * h * w + (2 * y + dy) * w + 2 * xo + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push("max_pool2d", vec![xs[0], xs[1], oh, ow], out, &[x], MaxPoolOp { x, argmax }))
    }
}
