//! Differentiable 3D Gaussian splatting on CPU: EWA projection of each
//! Gaussian to an image-plane conic, front-to-back alpha compositing with a
//! transmittance cutoff, sky MLP background decoded from the sky tokens,
//! and per-camera affine color correction.
//!
//! The rasterizer is one fused tape op with a hand-derived backward pass
//! over (mu, scale, rot, opacity, color); everything around it (decode
//! heads, temporal envelope, sky, affine) is composed from tape primitives.

use crate::dynamics::{self, AssignmentWeights, ObjectTrack};
use crate::encoders::AuxTokens;
use crate::geometry::{pixel_ray_unchecked, CameraPose, Intrinsics};
use crate::nn;
use crate::numerics::checkpoint::{ParamBindings, ParamStore};
use crate::numerics::{kernels, Tape, TensorRef};
use crate::scalar::Scalar;
use crate::update_net::UpdateNetConfig;
use nalgebra::{Matrix3, Vector3};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Transmittance below which compositing stops.
const T_CUTOFF: f64 = 1e-4;
/// Per-splat alpha floor / ceiling.
const ALPHA_MIN: f64 = 1.0 / 4096.0;
const ALPHA_MAX: f64 = 0.999;
/// Diagonal regularizer for near-degenerate 2D covariances, px^2.
const COV_REG: f64 = 0.3;
/// Coverage radius in standard deviations.
const RADIUS_SIGMA: f64 = 3.5;

const SKY_OCTAVES: usize = 4;
const SKY_BASIS: usize = 3 + 3 * 2 * SKY_OCTAVES; // raw + fourier
const SKY_HIDDEN: usize = 16;
const SKY_PARAMS: usize = SKY_BASIS * SKY_HIDDEN + SKY_HIDDEN + SKY_HIDDEN * 3 + 3;

/// Renderable Gaussian in plain form (inference, tests, diagnostics).
#[derive(Debug, Clone)]
pub struct GaussianPrimitive {
    pub mu: [f64; 3],
    pub log_scale: [f64; 3],
    pub rot: [f64; 4],
    pub base_opacity: f64,
    pub color: [f64; 3],
    pub beta: f64,
    pub t0: f64,
    pub source_token: u64,
}

/// Decoded Gaussians on the tape, rows parallel to the decoded tokens
/// (times `gaussians_per_token`).
pub struct GaussianBatch {
    pub count: usize,
    pub mu: TensorRef,
    pub log_scale: TensorRef,
    pub rot: TensorRef,
    pub opacity_logit: TensorRef,
    pub color: TensorRef,
    pub beta: TensorRef,
    pub t0: Vec<f64>,
    pub source_token: Vec<u64>,
}

pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// (H*W, 3)
    pub rgb: TensorRef,
    /// (H*W)
    pub depth: TensorRef,
    /// (H*W)
    pub alpha: TensorRef,
}

pub fn define_decoder_params<T: Scalar>(
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    cfg: &UpdateNetConfig,
) {
    let d = cfg.dim;
    let out = 15 * cfg.gaussians_per_token;
    nn::define_mlp2(ps, rng, "decode.gauss", d, d, out, 0.0);
    {
        // per-slot bias: offset 0, log-scale ln 0.35, unit quat, opacity
        // logit -1.5, color 0 (sigmoid 0.5), beta raw 2
        let b = ps.get_mut("decode.gauss.fc2.b").unwrap();
        for g in 0..cfg.gaussians_per_token {
            let o = g * 15;
            for i in 0..3 {
                b.data[o + 3 + i] = T::from_f64((0.35f64).ln());
            }
            b.data[o + 6] = T::ONE;
            b.data[o + 10] = T::from_f64(-1.5);
            b.data[o + 14] = T::from_f64(2.0);
        }
    }
    nn::define_linear(ps, rng, "decode.sky", cfg.n_sky * d, SKY_PARAMS, nn::INIT_STD);
    nn::define_linear(ps, rng, "decode.affine", d, 12, 0.0);
    {
        let b = ps.get_mut("decode.affine.b").unwrap();
        b.data[0] = T::ONE;
        b.data[4] = T::ONE;
        b.data[8] = T::ONE;
    }
}

/// Decode tokens into Gaussians via the 2-layer head: position offset from
/// the token position, log-scales, rotation, opacity logit, RGB, and a
/// softplus lifespan floored at `beta_min`.
pub fn decode_gaussians<T: Scalar>(
    tape: &Tape<T>,
    ps: &ParamStore<T>,
    bind: &mut ParamBindings,
    cfg: &UpdateNetConfig,
    features: TensorRef,
    positions: TensorRef,
    birth_times: &[f64],
    token_ids: &[u64],
) -> GaussianBatch {
    let n = tape.shape(features)[0];
    debug_assert_eq!(birth_times.len(), n);
    let gpt = cfg.gaussians_per_token;
    let h = nn::mlp2(tape, ps, bind, features, "decode.gauss");
    let h = tape.reshape(h, vec![n * gpt, 15]);
    let offset = tape.slice(h, 1, 0, 3);
    let log_scale = tape.slice(h, 1, 3, 6);
    let rot_raw = tape.slice(h, 1, 6, 10);
    let rot = tape.l2_normalize_rows(rot_raw, 1e-12);
    let opacity_logit = tape.slice(h, 1, 10, 11);
    let color_raw = tape.slice(h, 1, 11, 14);
    let color = tape.sigmoid(color_raw);
    let beta_raw = tape.slice(h, 1, 14, 15);
    let beta_sp = tape.softplus(beta_raw);
    let beta = tape.affine(beta_sp, T::ONE, T::from_f64(cfg.beta_min));
    let pos_rep = if gpt == 1 {
        positions
    } else {
        let sources: Vec<(TensorRef, usize)> = (0..n)
            .flat_map(|r| std::iter::repeat((positions, r)).take(gpt))
            .collect();
        tape.gather_rows(&sources)
    };
    let mu = tape.add(pos_rep, offset);
    let mut t0 = Vec::with_capacity(n * gpt);
    let mut source_token = Vec::with_capacity(n * gpt);
    for (i, &bt) in birth_times.iter().enumerate() {
        for _ in 0..gpt {
            t0.push(bt);
            source_token.push(token_ids.get(i).copied().unwrap_or(i as u64));
        }
    }
    GaussianBatch {
        count: n * gpt,
        mu,
        log_scale,
        rot,
        opacity_logit,
        color,
        beta,
        t0,
        source_token,
    }
}

/// Gaussian state posed at render time `t`: motion-blended centers and
/// rotations, opacity with the temporal envelope applied.
pub struct PosedGaussians {
    pub mu: TensorRef,
    pub rot: TensorRef,
    pub scale: TensorRef,
    pub opacity: TensorRef,
    pub color: TensorRef,
}

pub fn pose_gaussians_at<T: Scalar>(
    tape: &Tape<T>,
    batch: &GaussianBatch,
    assign: Option<&AssignmentWeights>,
    tracks: &[&ObjectTrack],
    gaussians_per_token: usize,
    t: f64,
) -> PosedGaussians {
    let n = batch.count;
    let scale = tape.exp(batch.log_scale);
    let base_op = tape.sigmoid(batch.opacity_logit);
    // envelope = exp(-(t - t0)^2 / (2 beta^2))
    let c: Vec<T> = batch
        .t0
        .iter()
        .map(|&t0| {
            let d = t - t0;
            T::from_f64(-d * d / 2.0)
        })
        .collect();
    let c_t = tape.constant(vec![n, 1], c);
    let beta_sq = tape.square(batch.beta);
    let exponent = tape.div(c_t, beta_sq);
    let envelope = tape.exp(exponent);
    let opacity = tape.mul(base_op, envelope);

    let (mu, rot) = match assign {
        Some(a) if !tracks.is_empty() => {
            // per-token assignment rows, repeated per gaussian slot
            let a_rows = if gaussians_per_token == 1 {
                a.probs
            } else {
                let per_token = tape.shape(a.probs)[0];
                let sources: Vec<(TensorRef, usize)> = (0..per_token)
                    .flat_map(|r| std::iter::repeat((a.probs, r)).take(gaussians_per_token))
                    .collect();
                tape.gather_rows(&sources)
            };
            let m1 = tape.constant(
                vec![tracks.len() + 1, 16],
                dynamics::track_matrices_at(tracks, t),
            );
            let t1 = tape.matmul(a_rows, m1);
            // group rows by birth time so each group shares one T0 matrix
            let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
            for (i, &bt) in batch.t0.iter().enumerate() {
                match groups.iter_mut().find(|(g, _)| (*g - bt).abs() < 1e-9) {
                    Some((_, rows)) => rows.push(i),
                    None => groups.push((bt, vec![i])),
                }
            }
            let mut per_group: Vec<TensorRef> = Vec::new();
            let mut row_of: Vec<(usize, usize)> = vec![(0, 0); n];
            for (gi, (bt, rows)) in groups.iter().enumerate() {
                let m0 = tape.constant(
                    vec![tracks.len() + 1, 16],
                    dynamics::track_matrices_at(tracks, *bt),
                );
                let a_g = tape.gather_rows(
                    &rows.iter().map(|&r| (a_rows, r)).collect::<Vec<_>>(),
                );
                per_group.push(tape.matmul(a_g, m0));
                for (j, &r) in rows.iter().enumerate() {
                    row_of[r] = (gi, j);
                }
            }
            let t0_rows: Vec<(TensorRef, usize)> =
                row_of.iter().map(|&(g, j)| (per_group[g], j)).collect();
            let t0_mat = tape.gather_rows(&t0_rows);
            let (mu_t, rots) = dynamics::motion_apply(tape, t0_mat, t1, batch.mu);
            let rot_t = dynamics::quat_compose_const(tape, &rots, batch.rot);
            (mu_t, rot_t)
        }
        _ => (batch.mu, batch.rot),
    };
    PosedGaussians {
        mu,
        rot,
        scale,
        opacity,
        color: batch.color,
    }
}

// ── the fused rasterizer op ─────────────────────────────────────────

struct ProjCache {
    valid: bool,
    u: f64,
    v: f64,
    z: f64,
    pcam: [f64; 3],
    conic: [f64; 3], // a, b, c of [[a,b],[b,c]]
    sigma_cam: [[f64; 3]; 3],
    m: [[f64; 3]; 3], // R_world(q) * diag(s), pre camera rotation
    bbox: [i64; 4],   // u0, u1, v0, v1 inclusive
}

struct SplatCtx {
    caches: Vec<ProjCache>,
    order: Vec<usize>,
    rcw: Matrix3<f64>,
    fx: f64,
    fy: f64,
    width: usize,
    height: usize,
}

fn quat_rot(q: &[f64; 4]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// dL/dq given dL/dR, for R as in `quat_rot`.
fn quat_rot_backward(q: &[f64; 4], dr: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = |r: usize, c: usize| dr[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

fn project_gaussians<T: Scalar>(
    tape: &Tape<T>,
    mu: TensorRef,
    scale: TensorRef,
    rot: TensorRef,
    pose: &CameraPose,
    k: &Intrinsics,
) -> SplatCtx {
    let n = tape.shape(mu)[0];
    let cfw = pose.camera_from_world();
    let rcw: Matrix3<f64> = cfw.fixed_view::<3, 3>(0, 0).into();
    let tcw = Vector3::new(cfw[(0, 3)], cfw[(1, 3)], cfw[(2, 3)]);
    let mud = tape.data(mu);
    let sd = tape.data(scale);
    let rd = tape.data(rot);
    let mut caches = Vec::with_capacity(n);
    for i in 0..n {
        let p = Vector3::new(
            mud[i * 3].to_f64(),
            mud[i * 3 + 1].to_f64(),
            mud[i * 3 + 2].to_f64(),
        );
        let pc = rcw * p + tcw;
        let mut cache = ProjCache {
            valid: false,
            u: 0.0,
            v: 0.0,
            z: pc.z,
            pcam: [pc.x, pc.y, pc.z],
            conic: [0.0; 3],
            sigma_cam: [[0.0; 3]; 3],
            m: [[0.0; 3]; 3],
            bbox: [0; 4],
        };
        if pc.z > k.near && pc.z < k.far {
            let q = [
                rd[i * 4].to_f64(),
                rd[i * 4 + 1].to_f64(),
                rd[i * 4 + 2].to_f64(),
                rd[i * 4 + 3].to_f64(),
            ];
            let rg = quat_rot(&q);
            let s = Vector3::new(
                sd[i * 3].to_f64(),
                sd[i * 3 + 1].to_f64(),
                sd[i * 3 + 2].to_f64(),
            );
            let mut m = rg;
            for c in 0..3 {
                for r in 0..3 {
                    m[(r, c)] *= s[c];
                }
            }
            let sigma_w = m * m.transpose();
            let sigma_c = rcw * sigma_w * rcw.transpose();
            let (x, y, z) = (pc.x, pc.y, pc.z);
            let j00 = k.fx / z;
            let j02 = -k.fx * x / (z * z);
            let j11 = k.fy / z;
            let j12 = -k.fy * y / (z * z);
            // Sigma2d = J Sigma_c J^T + reg
            let a = j00 * (j00 * sigma_c[(0, 0)] + j02 * sigma_c[(2, 0)])
                + j02 * (j00 * sigma_c[(0, 2)] + j02 * sigma_c[(2, 2)])
                + COV_REG;
            let b = j00 * (j11 * sigma_c[(0, 1)] + j12 * sigma_c[(0, 2)])
                + j02 * (j11 * sigma_c[(2, 1)] + j12 * sigma_c[(2, 2)]);
            let c2 = j11 * (j11 * sigma_c[(1, 1)] + j12 * sigma_c[(2, 1)])
                + j12 * (j11 * sigma_c[(1, 2)] + j12 * sigma_c[(2, 2)])
                + COV_REG;
            let det = a * c2 - b * b;
            if det > 1e-12 {
                let u = k.fx * x / z + k.cx;
                let v = k.fy * y / z + k.cy;
                let mid = 0.5 * (a + c2);
                let lam = mid + ((mid * mid - det).max(0.0)).sqrt();
                let radius = RADIUS_SIGMA * lam.sqrt();
                let u0 = (u - radius).floor() as i64;
                let u1 = (u + radius).ceil() as i64;
                let v0 = (v - radius).floor() as i64;
                let v1 = (v + radius).ceil() as i64;
                if u1 >= 0 && v1 >= 0 && u0 < k.width as i64 && v0 < k.height as i64 {
                    cache.valid = true;
                    cache.u = u;
                    cache.v = v;
                    cache.conic = [c2 / det, -b / det, a / det];
                    for rr in 0..3 {
                        for cc in 0..3 {
                            cache.sigma_cam[rr][cc] = sigma_c[(rr, cc)];
                            cache.m[rr][cc] = m[(rr, cc)];
                        }
                    }
                    cache.bbox = [
                        u0.max(0),
                        u1.min(k.width as i64 - 1),
                        v0.max(0),
                        v1.min(k.height as i64 - 1),
                    ];
                }
            }
        }
        caches.push(cache);
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| caches[i].valid).collect();
    order.sort_by(|&a, &b| caches[a].z.partial_cmp(&caches[b].z).unwrap().then(a.cmp(&b)));
    SplatCtx {
        caches,
        order,
        rcw,
        fx: k.fx,
        fy: k.fy,
        width: k.width,
        height: k.height,
    }
}

const BAND_ROWS: usize = 8;

/// Rasterize posed Gaussians into a packed (5, H*W) image: rows r, g, b,
/// expected-depth (no sky), accumulated alpha.
pub fn splat<T: Scalar>(
    tape: &Tape<T>,
    mu: TensorRef,
    scale: TensorRef,
    rot: TensorRef,
    opacity: TensorRef,
    color: TensorRef,
    pose: &CameraPose,
    k: &Intrinsics,
) -> TensorRef {
    let n = tape.shape(mu)[0];
    debug_assert_eq!(tape.shape(opacity), vec![n, 1]);
    let ctx = project_gaussians(tape, mu, scale, rot, pose, k);
    let (w, h) = (ctx.width, ctx.height);
    let npix = w * h;
    let mut out = vec![T::ZERO; 5 * npix];
    {
        let od = tape.data(opacity);
        let cd = tape.data(color);
        let opac: Vec<f64> = (0..n).map(|i| od[i].to_f64()).collect();
        let cols: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                [
                    cd[i * 3].to_f64(),
                    cd[i * 3 + 1].to_f64(),
                    cd[i * 3 + 2].to_f64(),
                ]
            })
            .collect();
        // bands of rows rendered independently; deterministic by layout
        let bands: Vec<(usize, Vec<f64>)> = (0..h.div_ceil(BAND_ROWS))
            .into_par_iter()
            .map(|band| {
                let v0 = band * BAND_ROWS;
                let v1 = (v0 + BAND_ROWS).min(h);
                let rows = v1 - v0;
                let mut buf = vec![0.0f64; rows * w * 5]; // c3 + d + transm
                for px in buf.chunks_mut(5) {
                    px[4] = 1.0;
                }
                for &gi in &ctx.order {
                    let g = &ctx.caches[gi];
                    let bv0 = g.bbox[2].max(v0 as i64) as usize;
                    let bv1 = g.bbox[3].min(v1 as i64 - 1);
                    if bv1 < bv0 as i64 {
                        continue;
                    }
                    for v in bv0..=bv1 as usize {
                        for u in g.bbox[0] as usize..=g.bbox[1] as usize {
                            let px = &mut buf[((v - v0) * w + u) * 5..((v - v0) * w + u) * 5 + 5];
                            let t_cur = px[4];
                            if t_cur < T_CUTOFF {
                                continue;
                            }
                            let du = u as f64 + 0.5 - g.u;
                            let dv = v as f64 + 0.5 - g.v;
                            let qf = g.conic[0] * du * du
                                + 2.0 * g.conic[1] * du * dv
                                + g.conic[2] * dv * dv;
                            if qf > 2.0 * (RADIUS_SIGMA * RADIUS_SIGMA) {
                                continue;
                            }
                            let alpha = (opac[gi] * (-0.5 * qf).exp()).min(ALPHA_MAX);
                            if alpha < ALPHA_MIN {
                                continue;
                            }
                            let wgt = t_cur * alpha;
                            px[0] += wgt * cols[gi][0];
                            px[1] += wgt * cols[gi][1];
                            px[2] += wgt * cols[gi][2];
                            px[3] += wgt * g.z;
                            px[4] = t_cur * (1.0 - alpha);
                        }
                    }
                }
                (v0, buf)
            })
            .collect();
        for (v0, buf) in bands {
            let rows = buf.len() / (w * 5);
            for r in 0..rows {
                for u in 0..w {
                    let src = &buf[(r * w + u) * 5..(r * w + u) * 5 + 5];
                    let pix = (v0 + r) * w + u;
                    for c in 0..3 {
                        out[c * npix + pix] = T::from_f64(src[c]);
                    }
                    out[3 * npix + pix] = T::from_f64(src[3]);
                    out[4 * npix + pix] = T::from_f64(1.0 - src[4]);
                }
            }
        }
    }
    let req = tape.any_requires(&[mu, scale, rot, opacity, color]);
    let out_t = tape.push_custom(vec![5, npix], out, req);
    if req {
        let fx = ctx.fx;
        let fy = ctx.fy;
        tape.set_back(
            out_t,
            Box::new(move |bctx| {
                splat_backward(bctx, &ctx, fx, fy, n, mu, scale, rot, opacity, color);
            }),
        );
    }
    out_t
}

#[allow(clippy::too_many_arguments)]
fn splat_backward<T: Scalar>(
    bctx: &mut crate::numerics::BackCtx<'_, T>,
    ctx: &SplatCtx,
    fx: f64,
    fy: f64,
    n: usize,
    mu: TensorRef,
    scale: TensorRef,
    rot: TensorRef,
    opacity: TensorRef,
    color: TensorRef,
) {
    let (w, h) = (ctx.width, ctx.height);
    let npix = w * h;
    let up = bctx.up;
    let od = bctx.value(opacity);
    let cd = bctx.value(color);
    let sd = bctx.value(scale);
    let rd = bctx.value(rot);
    let opac: Vec<f64> = (0..n).map(|i| od[i].to_f64()).collect();
    let cols: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            [
                cd[i * 3].to_f64(),
                cd[i * 3 + 1].to_f64(),
                cd[i * 3 + 2].to_f64(),
            ]
        })
        .collect();

    // per-gaussian accumulators: du, dv, dconic(3), dz, dopac, dcolor(3)
    let bands: Vec<Vec<f64>> = (0..h.div_ceil(BAND_ROWS))
        .into_par_iter()
        .map(|band| {
            let v0 = band * BAND_ROWS;
            let v1 = (v0 + BAND_ROWS).min(h);
            let mut acc = vec![0.0f64; n * 10];
            let mut contribs: Vec<(usize, f64, f64, f64, f64)> = Vec::with_capacity(64);
            for v in v0..v1 {
                for u in 0..w {
                    let pix = v * w + u;
                    let d_rgb = [
                        up[pix].to_f64(),
                        up[npix + pix].to_f64(),
                        up[2 * npix + pix].to_f64(),
                    ];
                    let d_depth = up[3 * npix + pix].to_f64();
                    let d_alpha_out = up[4 * npix + pix].to_f64();
                    if d_rgb == [0.0; 3] && d_depth == 0.0 && d_alpha_out == 0.0 {
                        continue;
                    }
                    // replay the forward compositing for this pixel
                    contribs.clear();
                    let mut t_cur = 1.0f64;
                    for &gi in &ctx.order {
                        if t_cur < T_CUTOFF {
                            break;
                        }
                        let g = &ctx.caches[gi];
                        if (u as i64) < g.bbox[0]
                            || (u as i64) > g.bbox[1]
                            || (v as i64) < g.bbox[2]
                            || (v as i64) > g.bbox[3]
                        {
                            continue;
                        }
                        let du = u as f64 + 0.5 - g.u;
                        let dv = v as f64 + 0.5 - g.v;
                        let qf = g.conic[0] * du * du
                            + 2.0 * g.conic[1] * du * dv
                            + g.conic[2] * dv * dv;
                        if qf > 2.0 * (RADIUS_SIGMA * RADIUS_SIGMA) {
                            continue;
                        }
                        let gw = (-0.5 * qf).exp();
                        let alpha = (opac[gi] * gw).min(ALPHA_MAX);
                        if alpha < ALPHA_MIN {
                            continue;
                        }
                        contribs.push((gi, alpha, gw, t_cur, qf));
                        t_cur *= 1.0 - alpha;
                    }
                    let t_end = t_cur;
                    // suffix sums walked back to front
                    let mut suffix_c = [0.0f64; 3];
                    let mut suffix_d = 0.0f64;
                    // accumulator layout per gaussian:
                    // [0] du  [1] dv  [2..5] dconic(a,b,c)  [5] dz
                    // [6] dopacity  [7..10] dcolor
                    for &(gi, alpha, gw, t_before, _qf) in contribs.iter().rev() {
                        let g = &ctx.caches[gi];
                        let wgt = t_before * alpha;
                        let one_minus = 1.0 - alpha;
                        let dot_c = cols[gi][0] * d_rgb[0]
                            + cols[gi][1] * d_rgb[1]
                            + cols[gi][2] * d_rgb[2];
                        let suffix_dot =
                            suffix_c[0] * d_rgb[0] + suffix_c[1] * d_rgb[1] + suffix_c[2] * d_rgb[2];
                        let d_alpha = t_before * (dot_c + g.z * d_depth)
                            - (suffix_dot + suffix_d * d_depth) / one_minus
                            + d_alpha_out * t_end / one_minus;
                        let acc_g = &mut acc[gi * 10..gi * 10 + 10];
                        // color
                        acc_g[7] += wgt * d_rgb[0];
                        acc_g[8] += wgt * d_rgb[1];
                        acc_g[9] += wgt * d_rgb[2];
                        // depth
                        acc_g[5] += wgt * d_depth;
                        // alpha chain: alpha = min(opac * gw, MAX)
                        if alpha < ALPHA_MAX {
                            acc_g[6] += gw * d_alpha; // d opacity
                            let d_gw = opac[gi] * d_alpha;
                            let d_qf = -0.5 * gw * d_gw;
                            let du = u as f64 + 0.5 - g.u;
                            let dv = v as f64 + 0.5 - g.v;
                            // conic-entry gradients (the off-diagonal is
                            // stored once and mirrored when chained)
                            acc_g[2] += d_qf * du * du;
                            acc_g[3] += d_qf * du * dv;
                            acc_g[4] += d_qf * dv * dv;
                            // center moves opposite to the pixel offset
                            acc_g[0] -= d_qf * (2.0 * g.conic[0] * du + 2.0 * g.conic[1] * dv);
                            acc_g[1] -= d_qf * (2.0 * g.conic[1] * du + 2.0 * g.conic[2] * dv);
                        }
                        suffix_c[0] += t_before * alpha * cols[gi][0];
                        suffix_c[1] += t_before * alpha * cols[gi][1];
                        suffix_c[2] += t_before * alpha * cols[gi][2];
                        suffix_d += t_before * alpha * g.z;
                    }
                }
            }
            acc
        })
        .collect();
    let mut acc = vec![0.0f64; n * 10];
    for band in bands {
        for (dst, src) in acc.iter_mut().zip(&band) {
            *dst += *src;
        }
    }

    // chain per-gaussian image-space gradients to the op inputs
    let mut gmu = vec![T::ZERO; n * 3];
    let mut gscale = vec![T::ZERO; n * 3];
    let mut grot = vec![T::ZERO; n * 4];
    let mut gopac = vec![T::ZERO; n];
    let mut gcol = vec![T::ZERO; n * 3];
    for i in 0..n {
        let g = &ctx.caches[i];
        if !g.valid {
            continue;
        }
        let a = &acc[i * 10..i * 10 + 10];
        let (d_u, d_v, d_ca, d_cb, d_cc, d_z, d_op, d_r, d_g, d_b) =
            (a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8], a[9]);
        gopac[i] = T::from_f64(d_op);
        gcol[i * 3] = T::from_f64(d_r);
        gcol[i * 3 + 1] = T::from_f64(d_g);
        gcol[i * 3 + 2] = T::from_f64(d_b);
        // conic = inv(Sigma2d): dSigma2d = -conic dConic conic (symmetric)
        let c = [g.conic[0], g.conic[1], g.conic[2]];
        let dcon = [[d_ca, d_cb], [d_cb, d_cc]];
        let conm = [[c[0], c[1]], [c[1], c[2]]];
        let mut dsig2 = [[0.0f64; 2]; 2];
        for r in 0..2 {
            for s in 0..2 {
                let mut acc2 = 0.0;
                for p in 0..2 {
                    for q2 in 0..2 {
                        acc2 += conm[r][p] * dcon[p][q2] * conm[q2][s];
                    }
                }
                dsig2[r][s] = -acc2;
            }
        }
        // Sigma2d = J Sigma_c J^T: dSigma_c = J^T dSig2 J;  dJ = 2 dSig2 J Sigma_c
        let (x, y, z) = (g.pcam[0], g.pcam[1], g.pcam[2]);
        let j = [[fx / z, 0.0, -fx * x / (z * z)], [0.0, fy / z, -fy * y / (z * z)]];
        let mut dsigc = [[0.0f64; 3]; 3];
        for r in 0..3 {
            for s in 0..3 {
                let mut acc2 = 0.0;
                for p in 0..2 {
                    for q2 in 0..2 {
                        acc2 += j[p][r] * dsig2[p][q2] * j[q2][s];
                    }
                }
                dsigc[r][s] = acc2;
            }
        }
        let mut dj = [[0.0f64; 3]; 2];
        for r in 0..2 {
            for s in 0..3 {
                let mut acc2 = 0.0;
                for q2 in 0..2 {
                    for p in 0..3 {
                        acc2 += 2.0 * dsig2[r][q2] * j[q2][p] * g.sigma_cam[p][s];
                    }
                }
                dj[r][s] = acc2;
            }
        }
        // projection center gradients -> p_cam
        let mut dp = [0.0f64; 3];
        dp[0] += d_u * fx / z;
        dp[1] += d_v * fy / z;
        dp[2] += -d_u * fx * x / (z * z) - d_v * fy * y / (z * z);
        dp[2] += d_z;
        // J entries depend on p_cam
        dp[0] += dj[0][2] * (-fx / (z * z));
        dp[1] += dj[1][2] * (-fy / (z * z));
        dp[2] += dj[0][0] * (-fx / (z * z))
            + dj[1][1] * (-fy / (z * z))
            + dj[0][2] * (2.0 * fx * x / (z * z * z))
            + dj[1][2] * (2.0 * fy * y / (z * z * z));
        // p_cam = Rcw mu + t
        for r in 0..3 {
            let mut acc2 = 0.0;
            for s in 0..3 {
                acc2 += ctx.rcw[(s, r)] * dp[s];
            }
            gmu[i * 3 + r] = T::from_f64(acc2);
        }
        // Sigma_c = Rcw Sigma_w Rcw^T: dSigma_w = Rcw^T dSigma_c Rcw
        let mut dsigw = Matrix3::zeros();
        for r in 0..3 {
            for s in 0..3 {
                let mut acc2 = 0.0;
                for p in 0..3 {
                    for q2 in 0..3 {
                        acc2 += ctx.rcw[(p, r)] * dsigc[p][q2] * ctx.rcw[(q2, s)];
                    }
                }
                dsigw[(r, s)] = acc2;
            }
        }
        // Sigma_w = M M^T: dM = (dSigma_w + dSigma_w^T) M
        let mmat = Matrix3::from_fn(|r, c| g.m[r][c]);
        let dm = (dsigw + dsigw.transpose()) * mmat;
        // M = R(q) diag(s): ds_c = sum_r dM[r,c] R[r,c]; dR[r,c] = dM[r,c] s_c
        let q = [
            rd[i * 4].to_f64(),
            rd[i * 4 + 1].to_f64(),
            rd[i * 4 + 2].to_f64(),
            rd[i * 4 + 3].to_f64(),
        ];
        let rmat = quat_rot(&q);
        let s = [sd[i * 3].to_f64(), sd[i * 3 + 1].to_f64(), sd[i * 3 + 2].to_f64()];
        let mut drm = Matrix3::zeros();
        for cidx in 0..3 {
            let mut dsc = 0.0;
            for r in 0..3 {
                dsc += dm[(r, cidx)] * rmat[(r, cidx)];
                drm[(r, cidx)] = dm[(r, cidx)] * s[cidx];
            }
            gscale[i * 3 + cidx] = T::from_f64(dsc);
        }
        let dq = quat_rot_backward(&q, &drm);
        for c in 0..4 {
            grot[i * 4 + c] = T::from_f64(dq[c]);
        }
    }
    if bctx.wants(mu) {
        kernels::axpy(bctx.accum(mu), &gmu, T::ONE);
    }
    if bctx.wants(scale) {
        kernels::axpy(bctx.accum(scale), &gscale, T::ONE);
    }
    if bctx.wants(rot) {
        kernels::axpy(bctx.accum(rot), &grot, T::ONE);
    }
    if bctx.wants(opacity) {
        kernels::axpy(bctx.accum(opacity), &gopac, T::ONE);
    }
    if bctx.wants(color) {
        kernels::axpy(bctx.accum(color), &gcol, T::ONE);
    }
}

// ── sky and affine ──────────────────────────────────────────────────

/// Fourier basis (plus raw direction) for the sky MLP.
pub fn sky_basis_row(direction: &[f64; 3]) -> Vec<f64> {
    let mut row = Vec::with_capacity(SKY_BASIS);
    row.extend_from_slice(direction);
    row.extend(nn::fourier_features(direction, SKY_OCTAVES, 1.0));
    row
}

/// Per-direction sky colors from a 2-layer MLP whose weights are linearly
/// decoded from the sky tokens.
pub fn sky_colors<T: Scalar>(
    tape: &Tape<T>,
    ps: &ParamStore<T>,
    bind: &mut ParamBindings,
    cfg: &UpdateNetConfig,
    sky_tokens: TensorRef,
    basis: TensorRef,
) -> TensorRef {
    let flat = tape.reshape(sky_tokens, vec![1, cfg.n_sky * cfg.dim]);
    let dec = nn::linear(tape, ps, bind, flat, "decode.sky");
    let mut off = 0;
    let w1 = tape.slice(dec, 1, off, off + SKY_BASIS * SKY_HIDDEN);
    off += SKY_BASIS * SKY_HIDDEN;
    let b1 = tape.slice(dec, 1, off, off + SKY_HIDDEN);
    off += SKY_HIDDEN;
    let w2 = tape.slice(dec, 1, off, off + SKY_HIDDEN * 3);
    off += SKY_HIDDEN * 3;
    let b2 = tape.slice(dec, 1, off, off + 3);
    let w1 = tape.reshape(w1, vec![SKY_BASIS, SKY_HIDDEN]);
    let b1 = tape.reshape(b1, vec![SKY_HIDDEN]);
    let w2 = tape.reshape(w2, vec![SKY_HIDDEN, 3]);
    let b2 = tape.reshape(b2, vec![3]);
    let h = tape.matmul(basis, w1);
    let h = tape.add(h, b1);
    let h = tape.tanh(h);
    let o = tape.matmul(h, w2);
    let o = tape.add(o, b2);
    tape.sigmoid(o)
}

/// Spec-level convenience: sky color for a single unit direction.
pub fn sky_color<T: Scalar>(
    tape: &Tape<T>,
    ps: &ParamStore<T>,
    bind: &mut ParamBindings,
    cfg: &UpdateNetConfig,
    aux: &AuxTokens,
    direction: &[f64; 3],
) -> TensorRef {
    let basis: Vec<T> = sky_basis_row(direction).into_iter().map(T::from_f64).collect();
    let basis_t = tape.constant(vec![1, SKY_BASIS], basis);
    sky_colors(tape, ps, bind, cfg, aux.sky, basis_t)
}

/// Per-camera affine color correction c' = A c + b decoded from the
/// camera's affine token.
pub fn affine_apply<T: Scalar>(
    tape: &Tape<T>,
    ps: &ParamStore<T>,
    bind: &mut ParamBindings,
    affine_tokens: TensorRef,
    cam: usize,
    rgb: TensorRef,
) -> TensorRef {
    let row = tape.slice(affine_tokens, 0, cam, cam + 1);
    let dec = nn::linear(tape, ps, bind, row, "decode.affine");
    let a = tape.slice(dec, 1, 0, 9);
    let b = tape.slice(dec, 1, 9, 12);
    let a = tape.reshape(a, vec![3, 3]);
    let b = tape.reshape(b, vec![3]);
    let at = tape.transpose(a);
    let out = tape.matmul(rgb, at);
    tape.add(out, b)
}

/// Full render: splat + sky background + affine correction; depth gets the
/// far plane through residual transmittance.
#[allow(clippy::too_many_arguments)]
pub fn render<T: Scalar>(
    tape: &Tape<T>,
    ps: &ParamStore<T>,
    bind: &mut ParamBindings,
    cfg: &UpdateNetConfig,
    posed: &PosedGaussians,
    pose: &CameraPose,
    k: &Intrinsics,
    aux: &AuxTokens,
    cam_index: usize,
) -> RenderOutput {
    let npix = k.width * k.height;
    let packed = splat(
        tape,
        posed.mu,
        posed.scale,
        posed.rot,
        posed.opacity,
        posed.color,
        pose,
        k,
    );
    let rgb_rows = tape.slice(packed, 0, 0, 3);
    let rgb = tape.transpose(rgb_rows);
    let depth_raw = tape.slice(packed, 0, 3, 4);
    let depth_raw = tape.reshape(depth_raw, vec![npix]);
    let alpha = tape.slice(packed, 0, 4, 5);
    let alpha = tape.reshape(alpha, vec![npix]);

    // sky composited behind the splats
    let mut basis = Vec::with_capacity(npix * SKY_BASIS);
    for v in 0..k.height {
        for u in 0..k.width {
            let ray = pixel_ray_unchecked(pose, k, u as f64, v as f64);
            basis.extend(
                sky_basis_row(&[ray.direction.x, ray.direction.y, ray.direction.z])
                    .into_iter()
                    .map(T::from_f64),
            );
        }
    }
    let basis_t = tape.constant(vec![npix, SKY_BASIS], basis);
    let sky = sky_colors(tape, ps, bind, cfg, aux.sky, basis_t);
    let trans = tape.affine(alpha, -T::ONE, T::ONE); // 1 - alpha
    let trans_col = tape.reshape(trans, vec![npix, 1]);
    let trans3 = tape.concat(&[trans_col, trans_col, trans_col], 1);
    let sky_part = tape.mul(sky, trans3);
    let rgb_full = tape.add(rgb, sky_part);
    let rgb_out = affine_apply(tape, ps, bind, aux.affine, cam_index, rgb_full);

    let far_term = tape.affine(trans, T::from_f64(k.far), T::ZERO);
    let depth = tape.add(depth_raw, far_term);
    RenderOutput {
        width: k.width,
        height: k.height,
        rgb: rgb_out,
        depth,
        alpha,
    }
}

/// Plain-value decode of a store's tokens (no-grad tape inside), for
/// inference paths and diagnostics.
pub fn decode_store_plain<T: Scalar>(
    net_params: &ParamStore<T>,
    cfg: &UpdateNetConfig,
    store: &crate::tokenstore::SceneTokenStore,
) -> Vec<GaussianPrimitive> {
    let tape: Tape<T> = Tape::no_grad();
    let mut bind = ParamBindings::default();
    let n = store.len();
    let mut feats = Vec::with_capacity(n * cfg.dim);
    let mut pos = Vec::with_capacity(n * 3);
    let mut births = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for t in store.tokens() {
        feats.extend(t.feature.iter().map(|&v| T::from_f32(v)));
        pos.extend(t.position.iter().map(|&v| T::from_f32(v)));
        births.push(t.birth_time as f64);
        ids.push(t.id);
    }
    let f_t = tape.constant(vec![n, cfg.dim], feats);
    let p_t = tape.constant(vec![n, 3], pos);
    let batch = decode_gaussians(&tape, net_params, &mut bind, cfg, f_t, p_t, &births, &ids);
    let mu = tape.to_vec(batch.mu);
    let ls = tape.to_vec(batch.log_scale);
    let rot = tape.to_vec(batch.rot);
    let op = tape.to_vec(batch.opacity_logit);
    let col = tape.to_vec(batch.color);
    let beta = tape.to_vec(batch.beta);
    (0..batch.count)
        .map(|i| GaussianPrimitive {
            mu: [
                mu[i * 3].to_f64(),
                mu[i * 3 + 1].to_f64(),
                mu[i * 3 + 2].to_f64(),
            ],
            log_scale: [
                ls[i * 3].to_f64(),
                ls[i * 3 + 1].to_f64(),
                ls[i * 3 + 2].to_f64(),
            ],
            rot: [
                rot[i * 4].to_f64(),
                rot[i * 4 + 1].to_f64(),
                rot[i * 4 + 2].to_f64(),
                rot[i * 4 + 3].to_f64(),
            ],
            base_opacity: sigmoid_f64(op[i].to_f64()),
            color: [
                col[i * 3].to_f64(),
                col[i * 3 + 1].to_f64(),
                col[i * 3 + 2].to_f64(),
            ],
            beta: beta[i].to_f64(),
            t0: batch.t0[i],
            source_token: batch.source_token[i],
        })
        .collect()
}

fn sigmoid_f64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Move a Gaussian from t0 to t1 under its soft assignment; scales,
/// opacity, and color are untouched.
pub fn move_gaussian(
    g: &GaussianPrimitive,
    weights: &[f64],
    tracks: &[&ObjectTrack],
    t0: f64,
    t1: f64,
) -> Result<GaussianPrimitive, dynamics::DynamicsError> {
    let (mu, rot) = dynamics::move_point_rotation(&g.mu, &g.rot, weights, tracks, t0, t1)?;
    Ok(GaussianPrimitive {
        mu,
        rot,
        ..g.clone()
    })
}
