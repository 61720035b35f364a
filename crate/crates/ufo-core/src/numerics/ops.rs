//! Tape operations: elementwise, linear algebra, reductions, normalization,
//! attention, and gather/scatter plumbing. Every op wires its own backward
//! closure; fused ops (softmax, layer_norm, attention) save the minimum
//! forward state they need.

use super::kernels;
use super::{NumericsError, Tape, TensorRef};
use crate::scalar::Scalar;

/// Decompose `shape` around `axis` as (outer, len, inner).
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && &big[big.len() - small.len()..] == small
}

impl<T: Scalar> Tape<T> {
    // ── elementwise binary (leading-axis broadcast only) ─────────────

    fn binary(
        &self,
        a: TensorRef,
        b: TensorRef,
        name: &'static str,
        fwd: impl Fn(T, T) -> T,
        // (a_i, b_i, y_i, up_i) -> (da_i, db_i)
        dfd: impl Fn(T, T, T, T) -> (T, T) + 'static,
    ) -> TensorRef {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (big, small, a_is_big) = if sa == sb || suffix_of(&sb, &sa) {
            (a, b, true)
        } else if suffix_of(&sa, &sb) {
            (b, a, false)
        } else {
            panic!("dimension error: {name} on shapes {sa:?} vs {sb:?}");
        };
        let out_shape = self.shape(big);
        let data = {
            let bd = self.data(big);
            let sd = self.data(small);
            let sl = sd.len().max(1);
            let mut out = Vec::with_capacity(bd.len());
            if a_is_big {
                for (i, &bv) in bd.iter().enumerate() {
                    out.push(fwd(bv, sd[i % sl]));
                }
            } else {
                for (i, &bv) in bd.iter().enumerate() {
                    out.push(fwd(sd[i % sl], bv));
                }
            }
            out
        };
        let req = self.any_requires(&[a, b]);
        let out = self.push_custom(out_shape, data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    let bd = ctx.value(big);
                    let sd = ctx.value(small);
                    let sl = sd.len().max(1);
                    let y = ctx.value(out);
                    let up = ctx.up;
                    if ctx.wants(big) {
                        let n = bd.len();
                        let mut gb = vec![T::ZERO; n];
                        for i in 0..n {
                            let (av, bv) = if a_is_big { (bd[i], sd[i % sl]) } else { (sd[i % sl], bd[i]) };
                            let (da, db) = dfd(av, bv, y[i], up[i]);
                            gb[i] = if a_is_big { da } else { db };
                        }
                        kernels::axpy(ctx.accum(big), &gb, T::ONE);
                    }
                    if ctx.wants(small) {
                        let mut gs = vec![T::ZERO; sl];
                        for i in 0..bd.len() {
                            let (av, bv) = if a_is_big { (bd[i], sd[i % sl]) } else { (sd[i % sl], bd[i]) };
                            let (da, db) = dfd(av, bv, y[i], up[i]);
                            gs[i % sl] += if a_is_big { db } else { da };
                        }
                        kernels::axpy(ctx.accum(small), &gs, T::ONE);
                    }
                }),
            );
        }
        out
    }

    pub fn add(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.binary(a, b, "add", |x, y| x + y, |_, _, _, up| (up, up))
    }

    pub fn sub(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.binary(a, b, "sub", |x, y| x - y, |_, _, _, up| (up, -up))
    }

    pub fn mul(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.binary(a, b, "mul", |x, y| x * y, |x, y, _, up| (up * y, up * x))
    }

    pub fn div(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.binary(
            a,
            b,
            "div",
            |x, y| x / y,
            |_, y, out, up| (up / y, -up * out / y),
        )
    }

    /// alpha * x + beta, elementwise with scalar constants.
    pub fn affine(&self, x: TensorRef, alpha: T, beta: T) -> TensorRef {
        let shape = self.shape(x);
        let data: Vec<T> = self.data(x).iter().map(|&v| alpha * v + beta).collect();
        let req = self.requires(x);
        let out = self.push_custom(shape, data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    if ctx.wants(x) {
                        let up = ctx.up;
                        kernels::axpy(ctx.accum(x), up, alpha);
                    }
                }),
            );
        }
        out
    }

    pub fn neg(&self, x: TensorRef) -> TensorRef {
        self.affine(x, -T::ONE, T::ZERO)
    }

    // ── elementwise unary ────────────────────────────────────────────

    fn unary(
        &self,
        x: TensorRef,
        fwd_slice: impl Fn(&mut [T]),
        // (x_i, y_i) -> dy/dx
        dfdx: impl Fn(T, T) -> T + 'static,
    ) -> TensorRef {
        let shape = self.shape(x);
        let mut data = self.to_vec(x);
        fwd_slice(&mut data);
        let req = self.requires(x);
        let out = self.push_custom(shape, data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    if !ctx.wants(x) {
                        return;
                    }
                    let xv = ctx.value(x);
                    let yv = ctx.value(out);
                    let up = ctx.up;
                    let mut g = vec![T::ZERO; xv.len()];
                    for i in 0..xv.len() {
                        g[i] = up[i] * dfdx(xv[i], yv[i]);
                    }
                    kernels::axpy(ctx.accum(x), &g, T::ONE);
                }),
            );
        }
        out
    }

    pub fn exp(&self, x: TensorRef) -> TensorRef {
        self.unary(x, |s| T::exp_slice(s), |_, y| y)
    }

    pub fn ln(&self, x: TensorRef) -> TensorRef {
        self.unary(
            x,
            |s| s.iter_mut().for_each(|v| *v = v.ln()),
            |x, _| T::ONE / x,
        )
    }

    pub fn sqrt(&self, x: TensorRef) -> TensorRef {
        self.unary(
            x,
            |s| s.iter_mut().for_each(|v| *v = v.sqrt()),
            |_, y| T::ONE / (T::from_f64(2.0) * y),
        )
    }

    pub fn tanh(&self, x: TensorRef) -> TensorRef {
        self.unary(x, |s| T::tanh_slice(s), |_, y| T::ONE - y * y)
    }

    pub fn sigmoid(&self, x: TensorRef) -> TensorRef {
        self.unary(
            x,
            |s| {
                for v in s.iter_mut() {
                    *v = -*v;
                }
                T::exp_slice(s);
                for v in s.iter_mut() {
                    *v = T::ONE / (T::ONE + *v);
                }
            },
            |_, y| y * (T::ONE - y),
        )
    }

    /// ln(1+exp(x)), linear for large x to avoid overflow.
    pub fn softplus(&self, x: TensorRef) -> TensorRef {
        self.unary(
            x,
            |s| {
                for v in s.iter_mut() {
                    let xv = *v;
                    // softplus(x) = max(x,0) + ln(1+exp(-|x|))
                    *v = xv.maxs(T::ZERO) + (-xv.abs()).exp().ln_1p();
                }
            },
            |x, _| T::ONE / (T::ONE + (-x).exp()),
        )
    }

    pub fn sin(&self, x: TensorRef) -> TensorRef {
        self.unary(
            x,
            |s| s.iter_mut().for_each(|v| *v = v.sin()),
            |x, _| x.cos(),
        )
    }

    pub fn cos(&self, x: TensorRef) -> TensorRef {
        self.unary(
            x,
            |s| s.iter_mut().for_each(|v| *v = v.cos()),
            |x, _| -x.sin(),
        )
    }

    pub fn abs(&self, x: TensorRef) -> TensorRef {
        self.unary(
            x,
            |s| s.iter_mut().for_each(|v| *v = v.abs()),
            |x, _| {
                if x >= T::ZERO {
                    T::ONE
                } else {
                    -T::ONE
                }
            },
        )
    }

    pub fn square(&self, x: TensorRef) -> TensorRef {
        self.unary(
            x,
            |s| s.iter_mut().for_each(|v| *v = *v * *v),
            |x, _| T::from_f64(2.0) * x,
        )
    }

    pub fn relu(&self, x: TensorRef) -> TensorRef {
        self.unary(
            x,
            |s| s.iter_mut().for_each(|v| *v = v.maxs(T::ZERO)),
            |x, _| {
                if x > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            },
        )
    }

    /// Tanh-form GELU.
    pub fn gelu(&self, x: TensorRef) -> TensorRef {
        let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        self.unary(
            x,
            move |s| {
                let xs: Vec<T> = s.to_vec();
                for (v, &x) in s.iter_mut().zip(&xs) {
                    *v = c * (x + k * x * x * x);
                }
                T::tanh_slice(s);
                for (v, &x) in s.iter_mut().zip(&xs) {
                    *v = half * x * (T::ONE + *v);
                }
            },
            move |x, _| {
                let inner = c * (x + k * x * x * x);
                let t = inner.tanh();
                let dinner = c * (T::ONE + T::from_f64(3.0) * k * x * x);
                half * (T::ONE + t) + half * x * (T::ONE - t * t) * dinner
            },
        )
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn try_matmul(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::Dimension(format!(
                "matmul on shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul_nn(&self.data(a), &self.data(b), m, k, n);
        let req = self.any_requires(&[a, b]);
        let out = self.push_custom(vec![m, n], data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    if ctx.wants(a) {
                        let g = kernels::matmul_nt(ctx.up, ctx.value(b), m, n, k);
                        kernels::axpy(ctx.accum(a), &g, T::ONE);
                    }
                    if ctx.wants(b) {
                        let g = kernels::matmul_tn(ctx.value(a), ctx.up, m, k, n);
                        kernels::axpy(ctx.accum(b), &g, T::ONE);
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn matmul(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        match self.try_matmul(a, b) {
            Ok(t) => t,
            Err(e) => panic!("{e}"),
        }
    }

    pub fn transpose(&self, x: TensorRef) -> TensorRef {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "dimension error: transpose needs rank 2");
        let (m, n) = (s[0], s[1]);
        let data = kernels::transpose(&self.data(x), m, n);
        let req = self.requires(x);
        let out = self.push_custom(vec![n, m], data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    if ctx.wants(x) {
                        let g = kernels::transpose(ctx.up, n, m);
                        kernels::axpy(ctx.accum(x), &g, T::ONE);
                    }
                }),
            );
        }
        out
    }

    /// Same data, new shape (element count preserved).
    pub fn reshape(&self, x: TensorRef, shape: impl Into<Vec<usize>>) -> TensorRef {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(x),
            "dimension error: reshape changes element count"
        );
        let data = self.to_vec(x);
        let req = self.requires(x);
        let out = self.push_custom(shape, data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    if ctx.wants(x) {
                        let up = ctx.up;
                        kernels::axpy(ctx.accum(x), up, T::ONE);
                    }
                }),
            );
        }
        out
    }

    // ── reductions ───────────────────────────────────────────────────

    fn reduce(&self, x: TensorRef, axis: Option<usize>, mean: bool) -> TensorRef {
        let shape = self.shape(x);
        let (out_shape, outer, len, inner) = match axis {
            None => (vec![], 1usize, self.numel(x), 1usize),
            Some(ax) => {
                assert!(ax < shape.len(), "dimension error: reduce axis {ax} of {shape:?}");
                let (o, l, i) = lanes(&shape, ax);
                let mut s = shape.clone();
                s.remove(ax);
                (s, o, l, i)
            }
        };
        let norm = if mean {
            T::ONE / T::from_f64(len as f64)
        } else {
            T::ONE
        };
        let data = {
            let xd = self.data(x);
            let mut out = vec![T::ZERO; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += xd[base + i];
                    }
                }
            }
            for v in out.iter_mut() {
                *v *= norm;
            }
            out
        };
        let req = self.requires(x);
        let out = self.push_custom(out_shape, data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    if !ctx.wants(x) {
                        return;
                    }
                    let up = ctx.up;
                    let g = ctx.accum(x);
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                g[base + i] += up[o * inner + i] * norm;
                            }
                        }
                    }
                }),
            );
        }
        out
    }

    pub fn reduce_sum(&self, x: TensorRef, axis: Option<usize>) -> TensorRef {
        self.reduce(x, axis, false)
    }

    pub fn reduce_mean(&self, x: TensorRef, axis: Option<usize>) -> TensorRef {
        self.reduce(x, axis, true)
    }

    /// Sum of scalar nodes.
    pub fn add_n(&self, xs: &[TensorRef]) -> TensorRef {
        assert!(!xs.is_empty());
        let mut acc = T::ZERO;
        for &x in xs {
            debug_assert_eq!(self.numel(x), 1);
            acc += self.data(x)[0];
        }
        let req = self.any_requires(xs);
        let parents: Vec<TensorRef> = xs.to_vec();
        let out = self.push_custom(vec![], vec![acc], req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    let up = ctx.up[0];
                    for &p in &parents {
                        if ctx.wants(p) {
                            ctx.accum(p)[0] += up;
                        }
                    }
                }),
            );
        }
        out
    }

    // ── normalization / softmax ──────────────────────────────────────

    pub fn softmax(&self, x: TensorRef, axis: usize) -> TensorRef {
        let shape = self.shape(x);
        assert!(axis < shape.len(), "dimension error: softmax axis");
        let (outer, len, inner) = lanes(&shape, axis);
        let data = {
            let xd = self.data(x);
            let mut out = xd.to_vec();
            if inner == 1 {
                for lane in out.chunks_mut(len) {
                    kernels::softmax_lane(lane);
                }
            } else {
                let mut scratch = vec![T::ZERO; len];
                for o in 0..outer {
                    for i in 0..inner {
                        for l in 0..len {
                            scratch[l] = xd[(o * len + l) * inner + i];
                        }
                        kernels::softmax_lane(&mut scratch);
                        for l in 0..len {
                            out[(o * len + l) * inner + i] = scratch[l];
                        }
                    }
                }
            }
            out
        };
        let req = self.requires(x);
        let out = self.push_custom(shape, data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    if !ctx.wants(x) {
                        return;
                    }
                    let y = ctx.value(out);
                    let up = ctx.up;
                    let mut g = vec![T::ZERO; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = T::ZERO;
                            for l in 0..len {
                                let idx = (o * len + l) * inner + i;
                                dot += up[idx] * y[idx];
                            }
                            for l in 0..len {
                                let idx = (o * len + l) * inner + i;
                                g[idx] = y[idx] * (up[idx] - dot);
                            }
                        }
                    }
                    kernels::axpy(ctx.accum(x), &g, T::ONE);
                }),
            );
        }
        out
    }

    pub fn log_softmax(&self, x: TensorRef, axis: usize) -> TensorRef {
        let shape = self.shape(x);
        assert!(axis < shape.len(), "dimension error: log_softmax axis");
        let (outer, len, inner) = lanes(&shape, axis);
        assert_eq!(inner, 1, "log_softmax: last axis only");
        let data = {
            let xd = self.data(x);
            let mut out = xd.to_vec();
            for lane in out.chunks_mut(len) {
                let mut max = lane[0];
                for &v in lane.iter() {
                    max = max.maxs(v);
                }
                let mut sum = T::ZERO;
                for v in lane.iter() {
                    sum += (*v - max).exp();
                }
                let lse = max + sum.ln();
                for v in lane.iter_mut() {
                    *v -= lse;
                }
            }
            out
        };
        let req = self.requires(x);
        let out = self.push_custom(shape, data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    if !ctx.wants(x) {
                        return;
                    }
                    let y = ctx.value(out);
                    let up = ctx.up;
                    let mut g = vec![T::ZERO; y.len()];
                    for o in 0..outer {
                        let mut usum = T::ZERO;
                        for l in 0..len {
                            usum += up[o * len + l];
                        }
                        for l in 0..len {
                            let idx = o * len + l;
                            g[idx] = up[idx] - y[idx].exp() * usum;
                        }
                    }
                    kernels::axpy(ctx.accum(x), &g, T::ONE);
                }),
            );
        }
        out
    }

    /// Normalize over the last axis, then scale/shift by gamma/beta.
    pub fn layer_norm(
        &self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: f64,
    ) -> TensorRef {
        let shape = self.shape(x);
        let d = *shape.last().expect("layer_norm needs rank >= 1");
        assert_eq!(self.shape(gamma), vec![d], "dimension error: layer_norm gamma");
        assert_eq!(self.shape(beta), vec![d], "dimension error: layer_norm beta");
        let rows = self.numel(x) / d;
        let epst = T::from_f64(eps);
        let invd = T::ONE / T::from_f64(d as f64);
        let mut mus = vec![T::ZERO; rows];
        let mut invstds = vec![T::ZERO; rows];
        let data = {
            let xd = self.data(x);
            let gd = self.data(gamma);
            let bd = self.data(beta);
            let mut out = vec![T::ZERO; rows * d];
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mut mu = T::ZERO;
                for &v in row {
                    mu += v;
                }
                mu *= invd;
                let mut var = T::ZERO;
                for &v in row {
                    let c = v - mu;
                    var += c * c;
                }
                var *= invd;
                let invstd = T::ONE / (var + epst).sqrt();
                mus[r] = mu;
                invstds[r] = invstd;
                let orow = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] = (row[j] - mu) * invstd * gd[j] + bd[j];
                }
            }
            out
        };
        let req = self.any_requires(&[x, gamma, beta]);
        let out = self.push_custom(shape, data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    let xd = ctx.value(x);
                    let gd = ctx.value(gamma);
                    let up = ctx.up;
                    if ctx.wants(gamma) || ctx.wants(beta) {
                        let mut dg = vec![T::ZERO; d];
                        let mut db = vec![T::ZERO; d];
                        for r in 0..rows {
                            for j in 0..d {
                                let xhat = (xd[r * d + j] - mus[r]) * invstds[r];
                                dg[j] += up[r * d + j] * xhat;
                                db[j] += up[r * d + j];
                            }
                        }
                        if ctx.wants(gamma) {
                            kernels::axpy(ctx.accum(gamma), &dg, T::ONE);
                        }
                        if ctx.wants(beta) {
                            kernels::axpy(ctx.accum(beta), &db, T::ONE);
                        }
                    }
                    if ctx.wants(x) {
                        let mut gx = vec![T::ZERO; rows * d];
                        for r in 0..rows {
                            let mut mean_g = T::ZERO;
                            let mut mean_gx = T::ZERO;
                            for j in 0..d {
                                let xhat = (xd[r * d + j] - mus[r]) * invstds[r];
                                let gh = up[r * d + j] * gd[j];
                                mean_g += gh;
                                mean_gx += gh * xhat;
                            }
                            mean_g *= invd;
                            mean_gx *= invd;
                            for j in 0..d {
                                let xhat = (xd[r * d + j] - mus[r]) * invstds[r];
                                let gh = up[r * d + j] * gd[j];
                                gx[r * d + j] = invstds[r] * (gh - mean_g - xhat * mean_gx);
                            }
                        }
                        kernels::axpy(ctx.accum(x), &gx, T::ONE);
                    }
                }),
            );
        }
        out
    }

    /// Row-wise x / sqrt(|x|^2 + eps).
    pub fn l2_normalize_rows(&self, x: TensorRef, eps: f64) -> TensorRef {
        let shape = self.shape(x);
        let d = *shape.last().expect("l2_normalize_rows needs rank >= 1");
        let rows = self.numel(x) / d;
        let epst = T::from_f64(eps);
        let mut invnorms = vec![T::ZERO; rows];
        let data = {
            let xd = self.data(x);
            let mut out = vec![T::ZERO; rows * d];
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let n = (kernels::dot(row, row) + epst).sqrt();
                let inv = T::ONE / n;
                invnorms[r] = inv;
                for j in 0..d {
                    out[r * d + j] = row[j] * inv;
                }
            }
            out
        };
        let req = self.requires(x);
        let out = self.push_custom(shape, data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    if !ctx.wants(x) {
                        return;
                    }
                    let xd = ctx.value(x);
                    let up = ctx.up;
                    let mut g = vec![T::ZERO; rows * d];
                    for r in 0..rows {
                        let row = &xd[r * d..(r + 1) * d];
                        let urow = &up[r * d..(r + 1) * d];
                        let inv = invnorms[r];
                        let s = kernels::dot(urow, row);
                        for j in 0..d {
                            g[r * d + j] = urow[j] * inv - row[j] * s * inv * inv * inv;
                        }
                    }
                    kernels::axpy(ctx.accum(x), &g, T::ONE);
                }),
            );
        }
        out
    }

    // ── shape plumbing ───────────────────────────────────────────────

    pub fn concat(&self, parts: &[TensorRef], axis: usize) -> TensorRef {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]);
        assert!(axis < first.len(), "dimension error: concat axis");
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "dimension error: concat rank");
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "dimension error: concat shape {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = lanes(&out_shape, axis);
        let lens: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        let mut data = vec![T::ZERO; outer * total * inner];
        {
            let mut off = 0usize;
            for (pi, &p) in parts.iter().enumerate() {
                let pd = self.data(p);
                let plen = lens[pi];
                for o in 0..outer {
                    let src = &pd[o * plen * inner..(o + 1) * plen * inner];
                    let dst = &mut data[(o * total + off) * inner..(o * total + off + plen) * inner];
                    dst.copy_from_slice(src);
                }
                off += plen;
            }
        }
        let req = self.any_requires(parts);
        let parts_owned: Vec<TensorRef> = parts.to_vec();
        let out = self.push_custom(out_shape, data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    let up = ctx.up;
                    let mut off = 0usize;
                    for (pi, &p) in parts_owned.iter().enumerate() {
                        let plen = lens[pi];
                        if ctx.wants(p) {
                            let g = ctx.accum(p);
                            for o in 0..outer {
                                let src = &up[(o * total + off) * inner..(o * total + off + plen) * inner];
                                let dst = &mut g[o * plen * inner..(o + 1) * plen * inner];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += *s;
                                }
                            }
                        }
                        off += plen;
                    }
                }),
            );
        }
        out
    }

    pub fn slice(&self, x: TensorRef, axis: usize, start: usize, end: usize) -> TensorRef {
        let shape = self.shape(x);
        assert!(axis < shape.len() && start <= end && end <= shape[axis],
            "dimension error: slice [{start}..{end}) axis {axis} of {shape:?}");
        let (outer, len, inner) = lanes(&shape, axis);
        let w = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = w;
        let mut data = vec![T::ZERO; outer * w * inner];
        {
            let xd = self.data(x);
            for o in 0..outer {
                let src = &xd[(o * len + start) * inner..(o * len + end) * inner];
                data[o * w * inner..(o + 1) * w * inner].copy_from_slice(src);
            }
        }
        let req = self.requires(x);
        let out = self.push_custom(out_shape, data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    if !ctx.wants(x) {
                        return;
                    }
                    let up = ctx.up;
                    let g = ctx.accum(x);
                    for o in 0..outer {
                        let dst = &mut g[(o * len + start) * inner..(o * len + end) * inner];
                        let src = &up[o * w * inner..(o + 1) * w * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }),
            );
        }
        out
    }

    // ── gathers ──────────────────────────────────────────────────────

    /// Rows from a learned table by integer id.
    pub fn embedding_lookup(&self, table: TensorRef, ids: &[usize]) -> TensorRef {
        let s = self.shape(table);
        assert_eq!(s.len(), 2, "dimension error: embedding table rank");
        let (v, d) = (s[0], s[1]);
        for &id in ids {
            assert!(id < v, "contract error: embedding id {id} out of range {v}");
        }
        let mut data = vec![T::ZERO; ids.len() * d];
        {
            let td = self.data(table);
            for (r, &id) in ids.iter().enumerate() {
                data[r * d..(r + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
            }
        }
        let ids_owned = ids.to_vec();
        let req = self.requires(table);
        let out = self.push_custom(vec![ids.len(), d], data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    if !ctx.wants(table) {
                        return;
                    }
                    let up = ctx.up;
                    let g = ctx.accum(table);
                    for (r, &id) in ids_owned.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += up[r * d + j];
                        }
                    }
                }),
            );
        }
        out
    }

    /// Stack rows gathered from (possibly repeated) source tensors. All
    /// sources must share the same trailing width. Backward scatter-adds.
    pub fn gather_rows(&self, sources: &[(TensorRef, usize)]) -> TensorRef {
        assert!(!sources.is_empty());
        let w = *self.shape(sources[0].0).last().unwrap();
        let n = sources.len();
        let mut data = vec![T::ZERO; n * w];
        for (r, &(src, row)) in sources.iter().enumerate() {
            let s = self.shape(src);
            assert_eq!(*s.last().unwrap(), w, "dimension error: gather_rows width");
            let rows = self.numel(src) / w;
            assert!(row < rows, "contract error: gather_rows row {row} of {rows}");
            let sd = self.data(src);
            data[r * w..(r + 1) * w].copy_from_slice(&sd[row * w..(row + 1) * w]);
        }
        let mut parents: Vec<TensorRef> = Vec::new();
        for &(src, _) in sources {
            if !parents.contains(&src) {
                parents.push(src);
            }
        }
        let req = self.any_requires(&parents);
        let sources_owned: Vec<(TensorRef, usize)> = sources.to_vec();
        let out = self.push_custom(vec![n, w], data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    let up = ctx.up;
                    for (r, &(src, row)) in sources_owned.iter().enumerate() {
                        if ctx.wants(src) {
                            let g = ctx.accum(src);
                            for j in 0..w {
                                g[row * w + j] += up[r * w + j];
                            }
                        }
                    }
                }),
            );
        }
        out
    }

    /// Flat-index gather: out[i] = x.flat[idx[i]].
    pub fn take(&self, x: TensorRef, idx: &[usize]) -> TensorRef {
        let n = self.numel(x);
        let data = {
            let xd = self.data(x);
            idx.iter()
                .map(|&i| {
                    assert!(i < n, "contract error: take index {i} of {n}");
                    xd[i]
                })
                .collect::<Vec<T>>()
        };
        let idx_owned = idx.to_vec();
        let req = self.requires(x);
        let out = self.push_custom(vec![idx.len()], data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    if !ctx.wants(x) {
                        return;
                    }
                    let up = ctx.up;
                    let g = ctx.accum(x);
                    for (r, &i) in idx_owned.iter().enumerate() {
                        g[i] += up[r];
                    }
                }),
            );
        }
        out
    }

    /// Flat gather with zero padding: index -1 reads 0 and routes no
    /// gradient. Used by the im2col path of the perceptual proxy.
    pub fn take_pad(&self, x: TensorRef, idx: &[isize]) -> TensorRef {
        let n = self.numel(x) as isize;
        let data = {
            let xd = self.data(x);
            idx.iter()
                .map(|&i| {
                    if i < 0 {
                        T::ZERO
                    } else {
                        assert!(i < n, "contract error: take_pad index {i} of {n}");
                        xd[i as usize]
                    }
                })
                .collect::<Vec<T>>()
        };
        let idx_owned = idx.to_vec();
        let req = self.requires(x);
        let out = self.push_custom(vec![idx.len()], data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    if !ctx.wants(x) {
                        return;
                    }
                    let up = ctx.up;
                    let g = ctx.accum(x);
                    for (r, &i) in idx_owned.iter().enumerate() {
                        if i >= 0 {
                            g[i as usize] += up[r];
                        }
                    }
                }),
            );
        }
        out
    }

    // ── attention ────────────────────────────────────────────────────

    /// Multi-head scaled dot-product attention over full sequences with an
    /// optional additive mask of shape (Sq, Sk). With gradients disabled the
    /// score matrix is streamed in row blocks and never materialized.
    pub fn scaled_dot_product_attention_with_mask(
        &self,
        q: TensorRef,
        k: TensorRef,
        v: TensorRef,
        heads: usize,
        mask: Option<Vec<T>>,
    ) -> TensorRef {
        let (sq_shape, sk_shape, sv_shape) = (self.shape(q), self.shape(k), self.shape(v));
        assert_eq!(sq_shape.len(), 2, "dimension error: attention q rank");
        let (sq, d) = (sq_shape[0], sq_shape[1]);
        let (sk, dk) = (sk_shape[0], sk_shape[1]);
        assert_eq!(d, dk, "dimension error: attention q/k dims");
        assert_eq!(sv_shape, vec![sk, d], "dimension error: attention v shape");
        assert_eq!(d % heads, 0, "dimension error: attention heads must divide dim");
        if let Some(m) = &mask {
            assert_eq!(m.len(), sq * sk, "dimension error: attention mask shape");
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let req = self.any_requires(&[q, k, v]);

        let extract = move |src: &[T], rows: usize, h: usize| -> Vec<T> {
            let mut out = vec![T::ZERO; rows * dh];
            for r in 0..rows {
                out[r * dh..(r + 1) * dh]
                    .copy_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
            }
            out
        };

        let mut out_data = vec![T::ZERO; sq * d];
        let mut saved_probs: Vec<Vec<T>> = Vec::new();
        {
            let qd = self.data(q);
            let kd = self.data(k);
            let vd = self.data(v);
            for h in 0..heads {
                let qh = extract(&qd, sq, h);
                let kh = extract(&kd, sk, h);
                let vh = extract(&vd, sk, h);
                if req {
                    let mut scores = kernels::matmul_nt(&qh, &kh, sq, dh, sk);
                    for (i, s) in scores.iter_mut().enumerate() {
                        *s *= scale;
                        if let Some(m) = &mask {
                            *s += m[i];
                        }
                    }
                    for lane in scores.chunks_mut(sk) {
                        kernels::softmax_lane(lane);
                    }
                    let oh = kernels::matmul_nn(&scores, &vh, sq, sk, dh);
                    for r in 0..sq {
                        out_data[r * d + h * dh..r * d + (h + 1) * dh]
                            .copy_from_slice(&oh[r * dh..(r + 1) * dh]);
                    }
                    saved_probs.push(scores);
                } else {
                    // streaming: bounded rows of the score matrix at a time
                    const BLOCK: usize = 128;
                    let mut r0 = 0;
                    while r0 < sq {
                        let rows = BLOCK.min(sq - r0);
                        let qblk = &qh[r0 * dh..(r0 + rows) * dh];
                        let mut scores = kernels::matmul_nt(qblk, &kh, rows, dh, sk);
                        for (i, s) in scores.iter_mut().enumerate() {
                            *s *= scale;
                            if let Some(m) = &mask {
                                let r = r0 + i / sk;
                                *s += m[r * sk + i % sk];
                            }
                        }
                        for lane in scores.chunks_mut(sk) {
                            kernels::softmax_lane(lane);
                        }
                        let oblk = kernels::matmul_nn(&scores, &vh, rows, sk, dh);
                        for r in 0..rows {
                            out_data[(r0 + r) * d + h * dh..(r0 + r) * d + (h + 1) * dh]
                                .copy_from_slice(&oblk[r * dh..(r + 1) * dh]);
                        }
                        r0 += rows;
                    }
                }
            }
        }
        let out = self.push_custom(vec![sq, d], out_data, req);
        if req {
            self.set_back(
                out,
                Box::new(move |ctx| {
                    let qd = ctx.value(q);
                    let kd = ctx.value(k);
                    let vd = ctx.value(v);
                    let up = ctx.up;
                    let mut gq = vec![T::ZERO; sq * d];
                    let mut gk = vec![T::ZERO; sk * d];
                    let mut gv = vec![T::ZERO; sk * d];
                    for h in 0..heads {
                        let qh = extract(qd, sq, h);
                        let kh = extract(kd, sk, h);
                        let vh = extract(vd, sk, h);
                        let probs = &saved_probs[h];
                        let duph = extract(up, sq, h);
                        let dvh = kernels::matmul_tn(probs, &duph, sq, sk, dh);
                        let dprobs = kernels::matmul_nt(&duph, &vh, sq, dh, sk);
                        // softmax rows backward
                        let mut dscores = vec![T::ZERO; sq * sk];
                        for r in 0..sq {
                            let p = &probs[r * sk..(r + 1) * sk];
                            let dp = &dprobs[r * sk..(r + 1) * sk];
                            let dot = kernels::dot(dp, p);
                            let ds = &mut dscores[r * sk..(r + 1) * sk];
                            for j in 0..sk {
                                ds[j] = p[j] * (dp[j] - dot) * scale;
                            }
                        }
                        let dqh = kernels::matmul_nn(&dscores, &kh, sq, sk, dh);
                        let dkh = kernels::matmul_tn(&dscores, &qh, sq, sk, dh);
                        for r in 0..sq {
                            for j in 0..dh {
                                gq[r * d + h * dh + j] += dqh[r * dh + j];
                            }
                        }
                        for r in 0..sk {
                            for j in 0..dh {
                                gk[r * d + h * dh + j] += dkh[r * dh + j];
                                gv[r * d + h * dh + j] += dvh[r * dh + j];
                            }
                        }
                    }
                    if ctx.wants(q) {
                        kernels::axpy(ctx.accum(q), &gq, T::ONE);
                    }
                    if ctx.wants(k) {
                        kernels::axpy(ctx.accum(k), &gk, T::ONE);
                    }
                    if ctx.wants(v) {
                        kernels::axpy(ctx.accum(v), &gv, T::ONE);
                    }
                }),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let tape: Tape<f64> = Tape::new();
        let i2 = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.matmul(i2, m);
        assert_eq!(tape.to_vec(y), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_rows() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![1, 2], vec![1.0, 0.0]);
        let b = tape.constant(vec![2, 1], vec![0.0, 1.0]);
        let y = tape.matmul(a, b);
        assert_eq!(tape.to_vec(y), vec![0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]);
        let b = tape.constant(vec![2, 2], vec![0.0; 4]);
        assert!(matches!(
            tape.try_matmul(a, b),
            Err(NumericsError::Dimension(_))
        ));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut want = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    want[i * 2 + j] += a[i * 4 + p] * b[p * 2 + j];
                }
            }
        }
        let tape: Tape<f64> = Tape::new();
        let ta = tape.constant(vec![3, 4], a);
        let tb = tape.constant(vec![4, 2], b);
        let y = tape.matmul(ta, tb);
        for (g, w) in tape.to_vec(y).iter().zip(&want) {
            assert!(close(*g, *w, 1e-6));
        }
    }

    #[test]
    fn softmax_equal_logits_uniform() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![3], vec![0.0, 0.0, 0.0]);
        let y = tape.softmax(x, 0);
        for v in tape.to_vec(y) {
            assert!(close(v, 1.0 / 3.0, 1e-12));
        }
    }

    #[test]
    fn softmax_closed_form() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![2], vec![(2.0f64).ln(), 0.0]);
        let y = tape.softmax(x, 0);
        let v = tape.to_vec(y);
        assert!(close(v[0], 2.0 / 3.0, 1e-12));
        assert!(close(v[1], 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn softplus_closed_forms() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![3], vec![0.0, 50.0, -50.0]);
        let y = tape.softplus(x);
        let v = tape.to_vec(y);
        assert!(close(v[0], (2.0f64).ln(), 1e-12));
        assert!(close(v[1], 50.0, 1e-6));
        assert!(v[2] > 0.0 && v[2] < 1e-20);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let tape: Tape<f64> = Tape::new();
        let d = 16;
        let x = tape.constant(
            vec![3, d],
            (0..3 * d).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect(),
        );
        let gamma = tape.constant(vec![d], vec![1.0; d]);
        let beta = tape.constant(vec![d], vec![0.0; d]);
        let y = tape.layer_norm(x, gamma, beta, 1e-6);
        let v = tape.to_vec(y);
        for r in 0..3 {
            let row = &v[r * d..(r + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn attention_masked_all_visible_equals_unmasked() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (s, d, h) = (7, 8, 2);
        let tape: Tape<f64> = Tape::new();
        let q = tape.constant(vec![s, d], (0..s * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let k = tape.constant(vec![s, d], (0..s * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let v = tape.constant(vec![s, d], (0..s * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let a = tape.scaled_dot_product_attention_with_mask(q, k, v, h, None);
        let b = tape.scaled_dot_product_attention_with_mask(q, k, v, h, Some(vec![0.0; s * s]));
        let (av, bv) = (tape.to_vec(a), tape.to_vec(b));
        for (x, y) in av.iter().zip(&bv) {
            assert!(close(*x, *y, 1e-6));
        }
    }

    #[test]
    fn attention_streaming_matches_recorded() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (s, d, h) = (150, 16, 4);
        let qv: Vec<f64> = (0..s * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..s * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vv: Vec<f64> = (0..s * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad_tape: Tape<f64> = Tape::new();
        let q = grad_tape.leaf(vec![s, d], qv.clone());
        let k = grad_tape.constant(vec![s, d], kv.clone());
        let v = grad_tape.constant(vec![s, d], vv.clone());
        let a = grad_tape.scaled_dot_product_attention_with_mask(q, k, v, h, None);
        let ng: Tape<f64> = Tape::no_grad();
        let q2 = ng.leaf(vec![s, d], qv);
        let k2 = ng.constant(vec![s, d], kv);
        let v2 = ng.constant(vec![s, d], vv);
        let b = ng.scaled_dot_product_attention_with_mask(q2, k2, v2, h, None);
        for (x, y) in grad_tape.to_vec(a).iter().zip(&ng.to_vec(b)) {
            assert!(close(*x, *y, 1e-12));
        }
    }
}
