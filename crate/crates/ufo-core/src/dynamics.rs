//! Dynamic object machinery: soft object assignment over tracked boxes,
//! blended rigid motion of Gaussians, and temporal lifespan opacity.

use crate::geometry::{
    canonical_quat, interpolate_rigid, nearest_rotation, point_in_obb, quat_mul, GeometryError,
    RigidTransform,
};
use crate::numerics::checkpoint::{ParamBindings, ParamStore};
use crate::numerics::{Tape, TensorRef};
use crate::scalar::Scalar;
use crate::{nn, numerics::kernels};
use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("contract error: {0}")]
    Contract(String),
    #[error("singular-transform error: {0}")]
    SingularTransform(String),
}

/// Per-object sequence of rigid poses plus box size (l, w, h) in meters.
/// Pose queries between keys use linear translation + quaternion slerp;
/// queries outside the key range clamp to the nearest key.
#[derive(Debug, Clone)]
pub struct ObjectTrack {
    pub object_id: u64,
    pub size: [f64; 3],
    keys: Vec<(f64, RigidTransform)>,
}

impl ObjectTrack {
    pub fn new(
        object_id: u64,
        size: [f64; 3],
        keys: Vec<(f64, RigidTransform)>,
    ) -> Result<Self, DynamicsError> {
        if keys.is_empty() {
            return Err(DynamicsError::Contract(format!(
                "track {object_id} has no pose keys"
            )));
        }
        for w in keys.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(DynamicsError::Contract(format!(
                    "track {object_id} timestamps not strictly increasing"
                )));
            }
        }
        Ok(ObjectTrack {
            object_id,
            size,
            keys,
        })
    }

    pub fn keys(&self) -> &[(f64, RigidTransform)] {
        &self.keys
    }

    pub fn pose_at(&self, t: f64) -> RigidTransform {
        if t <= self.keys[0].0 {
            return self.keys[0].1.clone();
        }
        if t >= self.keys.last().unwrap().0 {
            return self.keys.last().unwrap().1.clone();
        }
        let i = self.keys.partition_point(|(kt, _)| *kt <= t) - 1;
        let (t0, p0) = &self.keys[i];
        let (t1, p1) = &self.keys[i + 1];
        let a = (t - t0) / (t1 - t0);
        interpolate_rigid(p0, p1, a)
    }
}

/// Soft assignment of each scene token over tracked objects plus one
/// implicit static slot (stored as the LAST column).
pub struct AssignmentWeights {
    pub probs: TensorRef,
    pub logits: TensorRef,
    pub object_ids: Vec<u64>,
}

pub const ASSIGN_DIM: usize = 32;

/// Learned q/k heads for the assignment attention, plus the static-slot key.
pub fn define_assign_params<T: Scalar>(
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    feature_dim: usize,
) {
    nn::define_mlp2(ps, rng, "dynamics.q", feature_dim, ASSIGN_DIM, ASSIGN_DIM, nn::INIT_STD);
    nn::define_mlp2(ps, rng, "dynamics.k", feature_dim, ASSIGN_DIM, ASSIGN_DIM, nn::INIT_STD);
    let static_key = nn::normal_vec(rng, ASSIGN_DIM, nn::INIT_STD);
    ps.define("dynamics.static_key", vec![1, ASSIGN_DIM], static_key);
}

/// Softmax over object keys plus the learned static-slot key. Zero objects
/// put all mass on the static slot.
pub fn soft_assign<T: Scalar>(
    tape: &Tape<T>,
    ps: &ParamStore<T>,
    bind: &mut ParamBindings,
    scene_features: TensorRef,
    box_embeddings: Option<TensorRef>,
    object_ids: Vec<u64>,
) -> AssignmentWeights {
    let q = nn::mlp2(tape, ps, bind, scene_features, "dynamics.q");
    let static_key = ps.bind(tape, bind, "dynamics.static_key");
    let keys = match box_embeddings {
        Some(be) => {
            debug_assert_eq!(tape.shape(be)[0], object_ids.len());
            let k = nn::mlp2(tape, ps, bind, be, "dynamics.k");
            tape.concat(&[k, static_key], 0)
        }
        None => {
            debug_assert!(object_ids.is_empty());
            static_key
        }
    };
    let keys_t = tape.transpose(keys);
    let logits = tape.matmul(q, keys_t);
    let probs = tape.softmax(logits, 1);
    AssignmentWeights {
        probs,
        logits,
        object_ids,
    }
}

/// Flattened 4x4 pose matrices for every tracked object at time `t`, with
/// the identity (static slot) as the last row: shape (K+1, 16).
pub fn track_matrices_at<T: Scalar>(tracks: &[&ObjectTrack], t: f64) -> Vec<T> {
    let mut out = Vec::with_capacity((tracks.len() + 1) * 16);
    for tr in tracks {
        let m = tr.pose_at(t).matrix;
        for r in 0..4 {
            for c in 0..4 {
                out.push(T::from_f64(m[(r, c)]));
            }
        }
    }
    let iden = Matrix4::<f64>::identity();
    for r in 0..4 {
        for c in 0..4 {
            out.push(T::from_f64(iden[(r, c)]));
        }
    }
    out
}

/// Literal weighted matrix sum of object poses at time t; the static slot
/// contributes identity. The result need not be rigid.
pub fn blended_transform(weights: &[f64], tracks: &[&ObjectTrack], t: f64) -> Matrix4<f64> {
    assert_eq!(weights.len(), tracks.len() + 1, "weights = objects + static slot");
    let mut m = Matrix4::<f64>::zeros();
    for (w, tr) in weights.iter().zip(tracks) {
        m += tr.pose_at(t).matrix * *w;
    }
    m += Matrix4::identity() * *weights.last().unwrap();
    m
}

/// Move a (center, rotation) pair from time t0 to t1 under the blended
/// transform M = T(t1) T(t0)^-1: the center maps through M, the rotation
/// composes with the nearest rotation to M's linear part.
pub fn move_point_rotation(
    mu: &[f64; 3],
    rot: &[f64; 4],
    weights: &[f64],
    tracks: &[&ObjectTrack],
    t0: f64,
    t1: f64,
) -> Result<([f64; 3], [f64; 4]), DynamicsError> {
    let m0 = blended_transform(weights, tracks, t0);
    let m1 = blended_transform(weights, tracks, t1);
    let inv0 = m0.try_inverse().ok_or_else(|| {
        DynamicsError::SingularTransform("blended transform at t0 not invertible".into())
    })?;
    let m = m1 * inv0;
    let h = m * Vector4::new(mu[0], mu[1], mu[2], 1.0);
    let lin: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
    let rq = match nearest_rotation(&lin) {
        Ok(q) => q,
        Err(GeometryError::Singular(msg)) => {
            return Err(DynamicsError::SingularTransform(msg));
        }
        Err(GeometryError::Contract(msg)) => {
            return Err(DynamicsError::Contract(msg));
        }
    };
    Ok((
        [h.x, h.y, h.z],
        canonical_quat(quat_mul(&rq, rot)),
    ))
}

/// Batched tape version of the center motion: positions (N,3) move through
/// per-row M = T1 T0^-1, with exact gradients to T0, T1, and mu. The
/// rotation factors (polar part of each M) are returned detached; the
/// quaternion composition itself stays differentiable via
/// [`quat_compose_const`].
pub fn motion_apply<T: Scalar>(
    tape: &Tape<T>,
    t0: TensorRef,
    t1: TensorRef,
    mu: TensorRef,
) -> (TensorRef, Vec<[f64; 4]>) {
    let n = tape.shape(mu)[0];
    assert_eq!(tape.shape(t0), vec![n, 16], "dimension error: motion t0");
    assert_eq!(tape.shape(t1), vec![n, 16], "dimension error: motion t1");
    let mut out = vec![T::ZERO; n * 3];
    let mut rots = Vec::with_capacity(n);
    let mut inv0s: Vec<Matrix4<f64>> = Vec::with_capacity(n);
    {
        let d0 = tape.data(t0);
        let d1 = tape.data(t1);
        let dm = tape.data(mu);
        for i in 0..n {
            let m0 = mat4_from_row(&d0[i * 16..(i + 1) * 16]);
            let m1 = mat4_from_row(&d1[i * 16..(i + 1) * 16]);
            let inv0 = m0.try_inverse().unwrap_or_else(Matrix4::identity);
            let m = m1 * inv0;
            let h = m * Vector4::new(
                dm[i * 3].to_f64(),
                dm[i * 3 + 1].to_f64(),
                dm[i * 3 + 2].to_f64(),
                1.0,
            );
            out[i * 3] = T::from_f64(h.x);
            out[i * 3 + 1] = T::from_f64(h.y);
            out[i * 3 + 2] = T::from_f64(h.z);
            let lin: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
            rots.push(nearest_rotation(&lin).unwrap_or([1.0, 0.0, 0.0, 0.0]));
            inv0s.push(inv0);
        }
    }
    let req = tape.any_requires(&[t0, t1, mu]);
    let out_t = tape.push_custom(vec![n, 3], out, req);
    if req {
        tape.set_back(
            out_t,
            Box::new(move |ctx| {
                let d1 = ctx.value(t1);
                let dm = ctx.value(mu);
                let up = ctx.up;
                let mut g0 = vec![T::ZERO; n * 16];
                let mut g1 = vec![T::ZERO; n * 16];
                let mut gmu = vec![T::ZERO; n * 3];
                for i in 0..n {
                    let inv0 = &inv0s[i];
                    let m1 = mat4_from_row(&d1[i * 16..(i + 1) * 16]);
                    let h = Vector4::new(
                        dm[i * 3].to_f64(),
                        dm[i * 3 + 1].to_f64(),
                        dm[i * 3 + 2].to_f64(),
                        1.0,
                    );
                    let w = inv0 * h;
                    let g = Vector3::new(
                        up[i * 3].to_f64(),
                        up[i * 3 + 1].to_f64(),
                        up[i * 3 + 2].to_f64(),
                    );
                    // out = rows 0..3 of (M1 w):  dM1[r][c] = g_r * w_c
                    for r in 0..3 {
                        for c in 0..4 {
                            g1[i * 16 + r * 4 + c] = T::from_f64(g[r] * w[c]);
                        }
                    }
                    // dL/dw = M1[0..3,:]^T g
                    let mut dw = Vector4::zeros();
                    for c in 0..4 {
                        for r in 0..3 {
                            dw[c] += m1[(r, c)] * g[r];
                        }
                    }
                    // w = inv0 h:  dh = inv0^T dw;  dmu = dh[0..3]
                    let dh = inv0.transpose() * dw;
                    for a in 0..3 {
                        gmu[i * 3 + a] = T::from_f64(dh[a]);
                    }
                    // w = inv0 h:  dL/dinv0 = dw h^T;  dM0 = -inv0^T (dw h^T) inv0^T
                    let douter = dw * h.transpose();
                    let dm0 = -(inv0.transpose() * douter * inv0.transpose());
                    for r in 0..4 {
                        for c in 0..4 {
                            g0[i * 16 + r * 4 + c] = T::from_f64(dm0[(r, c)]);
                        }
                    }
                }
                if ctx.wants(t0) {
                    kernels::axpy(ctx.accum(t0), &g0, T::ONE);
                }
                if ctx.wants(t1) {
                    kernels::axpy(ctx.accum(t1), &g1, T::ONE);
                }
                if ctx.wants(mu) {
                    kernels::axpy(ctx.accum(mu), &gmu, T::ONE);
                }
            }),
        );
    }
    (out_t, rots)
}

/// q' = r ⊗ q with a constant per-row left factor; linear in q.
pub fn quat_compose_const<T: Scalar>(
    tape: &Tape<T>,
    rots: &[[f64; 4]],
    q: TensorRef,
) -> TensorRef {
    let n = tape.shape(q)[0];
    assert_eq!(tape.shape(q), vec![n, 4], "dimension error: quat shape");
    assert_eq!(rots.len(), n);
    // left-multiplication matrix L(r): q' = L(r) q
    let lmat = |r: &[f64; 4]| -> [[f64; 4]; 4] {
        [
            [r[0], -r[1], -r[2], -r[3]],
            [r[1], r[0], -r[3], r[2]],
            [r[2], r[3], r[0], -r[1]],
            [r[3], -r[2], r[1], r[0]],
        ]
    };
    let mut out = vec![T::ZERO; n * 4];
    {
        let qd = tape.data(q);
        for i in 0..n {
            let l = lmat(&rots[i]);
            for r in 0..4 {
                let mut acc = 0.0;
                for c in 0..4 {
                    acc += l[r][c] * qd[i * 4 + c].to_f64();
                }
                out[i * 4 + r] = T::from_f64(acc);
            }
        }
    }
    let req = tape.requires(q);
    let rots_owned: Vec<[f64; 4]> = rots.to_vec();
    let out_t = tape.push_custom(vec![n, 4], out, req);
    if req {
        tape.set_back(
            out_t,
            Box::new(move |ctx| {
                if !ctx.wants(q) {
                    return;
                }
                let up = ctx.up;
                let mut g = vec![T::ZERO; n * 4];
                for i in 0..n {
                    let l = lmat(&rots_owned[i]);
                    for c in 0..4 {
                        let mut acc = 0.0;
                        for r in 0..4 {
                            acc += l[r][c] * up[i * 4 + r].to_f64();
                        }
                        g[i * 4 + c] = T::from_f64(acc);
                    }
                }
                kernels::axpy(ctx.accum(q), &g, T::ONE);
            }),
        );
    }
    out_t
}

/// Gaussian temporal envelope around the birth time.
pub fn lifespan_opacity(base_opacity: f64, t0: f64, beta: f64, t: f64) -> f64 {
    debug_assert!(beta > 0.0);
    let d = t - t0;
    base_opacity * (-d * d / (2.0 * beta * beta)).exp()
}

/// Mean reciprocal lifespan, the persistence regularizer.
pub fn lifespan_loss<T: Scalar>(
    tape: &Tape<T>,
    betas: TensorRef,
) -> Result<TensorRef, DynamicsError> {
    {
        let d = tape.data(betas);
        if d.iter().any(|&b| b <= T::ZERO) {
            return Err(DynamicsError::Contract(
                "lifespan_loss requires strictly positive betas".into(),
            ));
        }
    }
    let one = tape.scalar(T::ONE);
    let recip = tape.div(one, betas);
    Ok(tape.reduce_mean(recip, None))
}

/// Hard assignment targets: the column of the box containing the token, or
/// the static slot for tokens inside no box. Boxes are evaluated at
/// `times[i]` (one per token).
pub fn assignment_targets(
    positions: &[[f64; 3]],
    times: &[f64],
    tracks: &[&ObjectTrack],
) -> Vec<usize> {
    assert_eq!(positions.len(), times.len());
    let static_slot = tracks.len();
    positions
        .iter()
        .zip(times)
        .map(|(p, &t)| {
            let pv = Vector3::new(p[0], p[1], p[2]);
            for (col, tr) in tracks.iter().enumerate() {
                if point_in_obb(&pv, &tr.pose_at(t), &tr.size) {
                    return col;
                }
            }
            static_slot
        })
        .collect()
}

/// Cross-entropy of the soft assignment against hard point-in-box targets,
/// averaged over tokens. Computed from the logits for stability.
pub fn assignment_loss_at_times<T: Scalar>(
    tape: &Tape<T>,
    assign: &AssignmentWeights,
    positions: &[[f64; 3]],
    times: &[f64],
    tracks: &[&ObjectTrack],
) -> TensorRef {
    let cols = tape.shape(assign.logits)[1];
    debug_assert_eq!(cols, tracks.len() + 1);
    let targets = assignment_targets(positions, times, tracks);
    let logp = tape.log_softmax(assign.logits, 1);
    let idx: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(r, &c)| r * cols + c)
        .collect();
    let picked = tape.take(logp, &idx);
    let mean = tape.reduce_mean(picked, None);
    tape.neg(mean)
}

/// Single-time variant: every token labeled against boxes at time `t`.
pub fn assignment_loss<T: Scalar>(
    tape: &Tape<T>,
    assign: &AssignmentWeights,
    positions: &[[f64; 3]],
    tracks: &[&ObjectTrack],
    t: f64,
) -> TensorRef {
    let times = vec![t; positions.len()];
    assignment_loss_at_times(tape, assign, positions, &times, tracks)
}

fn mat4_from_row<T: Scalar>(row: &[T]) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    for r in 0..4 {
        for c in 0..4 {
            m[(r, c)] = row[r * 4 + c].to_f64();
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff;
    use crate::geometry::matrix_to_quat;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};

    fn track_moving(id: u64, from: [f64; 3], to: [f64; 3], t0: f64, t1: f64) -> ObjectTrack {
        let a = RigidTransform::from_parts(&Matrix3::identity(), &Vector3::from(from));
        let b = RigidTransform::from_parts(&Matrix3::identity(), &Vector3::from(to));
        ObjectTrack::new(id, [4.0, 2.0, 1.5], vec![(t0, a), (t1, b)]).unwrap()
    }

    #[test]
    fn pose_interpolation_and_clamping() {
        let tr = track_moving(0, [0.0; 3], [2.0, 0.0, 0.0], 0.0, 1.0);
        let mid = tr.pose_at(0.5).translation();
        assert!((mid.x - 1.0).abs() < 1e-12);
        assert_eq!(tr.pose_at(-5.0).translation().x, 0.0);
        assert_eq!(tr.pose_at(5.0).translation().x, 2.0);
    }

    #[test]
    fn blended_transform_cases() {
        let tr = track_moving(0, [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0.0, 1.0);
        let tr2 = track_moving(1, [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], 0.0, 1.0);
        let tracks = vec![&tr, &tr2];
        // weight 1 on one object
        let m = blended_transform(&[1.0, 0.0, 0.0], &tracks, 0.5);
        assert_eq!(m[(0, 3)], 1.0);
        // weight 1 on the static slot
        let m = blended_transform(&[0.0, 0.0, 1.0], &tracks, 0.5);
        assert!((m - Matrix4::identity()).norm() < 1e-12);
        // 0.5/0.5 of two translations
        let m = blended_transform(&[0.5, 0.5, 0.0], &tracks, 0.5);
        assert!((m[(0, 3)] - 0.5).abs() < 1e-12);
        assert!((m[(1, 3)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn move_static_is_identity() {
        let tr = track_moving(0, [3.0, 0.0, 1.0], [3.0, 0.0, 1.0], 0.0, 1.0);
        let tracks = vec![&tr];
        let (mu, q) = move_point_rotation(
            &[1.0, 2.0, 3.0],
            &[1.0, 0.0, 0.0, 0.0],
            &[0.7, 0.3],
            &tracks,
            0.2,
            0.9,
        )
        .unwrap();
        assert!((mu[0] - 1.0).abs() < 1e-6 && (mu[1] - 2.0).abs() < 1e-6);
        assert!((q[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn move_translated_object_shifts_exactly() {
        let tr = track_moving(0, [0.0; 3], [2.0, 0.0, 0.0], 0.0, 1.0);
        let tracks = vec![&tr];
        let (mu, _) = move_point_rotation(
            &[0.5, 0.5, 0.5],
            &[1.0, 0.0, 0.0, 0.0],
            &[1.0, 0.0],
            &tracks,
            0.0,
            1.0,
        )
        .unwrap();
        assert!((mu[0] - 2.5).abs() < 1e-9);
        assert!((mu[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn move_rotated_object_matches_pose_oracle() {
        // object rotates 90 degrees about the y (vertical) axis between keys
        let r0 = Matrix3::identity();
        let r1 = Rotation3::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2)
            .into_inner();
        let p0 = RigidTransform::from_parts(&r0, &Vector3::new(5.0, 0.0, 0.0));
        let p1 = RigidTransform::from_parts(&r1, &Vector3::new(5.0, 0.0, 0.0));
        let tr = ObjectTrack::new(0, [4.0, 2.0, 1.5], vec![(0.0, p0.clone()), (1.0, p1.clone())])
            .unwrap();
        let tracks = vec![&tr];
        let mu0 = [6.0, 0.0, 0.5];
        let q0 = matrix_to_quat(&Matrix3::identity());
        let (mu, q) = move_point_rotation(&mu0, &q0, &[1.0, 0.0], &tracks, 0.0, 1.0).unwrap();
        // oracle: x_local = p0^-1 x; x' = p1 x_local
        let want = p1.apply(&p0.inverse().apply(&Vector3::from(mu0)));
        for a in 0..3 {
            assert!((mu[a] - want[a]).abs() < 1e-9, "axis {a}");
        }
        let want_q = matrix_to_quat(&r1);
        for a in 0..4 {
            assert!((q[a] - want_q[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn rigid_motion_preserves_pairwise_distances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let r1 = Rotation3::from_euler_angles(0.3, -0.8, 1.1).into_inner();
        let p0 = RigidTransform::from_parts(&Matrix3::identity(), &Vector3::new(1.0, 2.0, 3.0));
        let p1 = RigidTransform::from_parts(&r1, &Vector3::new(-4.0, 0.5, 7.0));
        let tr = ObjectTrack::new(0, [4.0, 2.0, 1.5], vec![(0.0, p0), (1.0, p1)]).unwrap();
        let tracks = vec![&tr];
        let pts: Vec<[f64; 3]> = (0..10)
            .map(|_| {
                [
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ]
            })
            .collect();
        let q0 = [1.0, 0.0, 0.0, 0.0];
        let moved: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| {
                move_point_rotation(p, &q0, &[1.0, 0.0], &tracks, 0.0, 1.0)
                    .unwrap()
                    .0
            })
            .collect();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let d0 = (Vector3::from(pts[i]) - Vector3::from(pts[j])).norm();
                let d1 = (Vector3::from(moved[i]) - Vector3::from(moved[j])).norm();
                assert!((d0 - d1).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn lifespan_opacity_closed_forms() {
        assert_eq!(lifespan_opacity(0.7, 2.0, 1.0, 2.0), 0.7);
        let v = lifespan_opacity(0.8, 0.0, 2.0, 2.0);
        assert!((v - 0.8 * (-0.5f64).exp()).abs() < 1e-12);
        assert!((v - 0.48522).abs() < 1e-4);
        let v3 = lifespan_opacity(1.0, 0.0, 1.0, 3.0);
        assert!(v3 <= 0.0112);
    }

    #[test]
    fn lifespan_loss_values_and_gradient() {
        let tape: Tape<f64> = Tape::new();
        let b1 = tape.constant(vec![1], vec![1.0]);
        assert_eq!(tape.value_f64(lifespan_loss(&tape, b1).unwrap()), 1.0);
        let b2 = tape.constant(vec![2], vec![1.0, 2.0]);
        assert_eq!(tape.value_f64(lifespan_loss(&tape, b2).unwrap()), 0.75);
        let bad = tape.constant(vec![1], vec![-1.0]);
        assert!(lifespan_loss(&tape, bad).is_err());

        // analytic gradient -1/(N beta^2) vs finite differences
        let check = finite_diff::check(
            |x| {
                let tape: Tape<f64> = Tape::new();
                let b = tape.leaf(vec![x.len()], x.to_vec());
                let l = lifespan_loss(&tape, b).unwrap();
                tape.backward(l).unwrap();
                (tape.value_f64(l), tape.grad(b).unwrap())
            },
            &[0.7, 1.3, 2.9],
            1e-5,
            1e-8,
        );
        assert!(check.max_rel < 1e-6, "{check:?}");
    }

    fn demo_assign(
        n_obj: usize,
        feats: Vec<f64>,
        n_tok: usize,
        d: usize,
    ) -> (Tape<f64>, AssignmentWeights) {
        let mut ps: ParamStore<f64> = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        define_assign_params(&mut ps, &mut rng, d);
        let tape: Tape<f64> = Tape::new();
        let mut bind = ParamBindings::default();
        let sf = tape.constant(vec![n_tok, d], feats);
        let (be, ids) = if n_obj > 0 {
            let be = tape.constant(
                vec![n_obj, d],
                (0..n_obj * d).map(|i| (i as f64 * 0.13).sin()).collect(),
            );
            (Some(be), (0..n_obj as u64).collect())
        } else {
            (None, vec![])
        };
        let a = soft_assign(&tape, &ps, &mut bind, sf, be, ids);
        (tape, a)
    }

    #[test]
    fn zero_objects_all_static() {
        let (tape, a) = demo_assign(0, vec![0.3; 2 * 8], 2, 8);
        let p = tape.to_vec(a.probs);
        assert_eq!(tape.shape(a.probs), vec![2, 1]);
        assert!(p.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn assignment_rows_sum_to_one() {
        let (tape, a) = demo_assign(3, (0..5 * 8).map(|i| (i as f64).cos()).collect(), 5, 8);
        let p = tape.to_vec(a.probs);
        for row in p.chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn assignment_gradient_matches_finite_differences() {
        // perturb the q-head fc1 weights
        let d = 6;
        let n_tok = 3;
        let n_obj = 2;
        let mut ps: ParamStore<f64> = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        define_assign_params(&mut ps, &mut rng, d);
        let w0 = ps.get("dynamics.q.fc1.w").unwrap().data.clone();
        let run = |w: &[f64]| -> (f64, Vec<f64>) {
            let mut ps = ParamStore::<f64>::new();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            define_assign_params(&mut ps, &mut rng, d);
            ps.get_mut("dynamics.q.fc1.w").unwrap().data = w.to_vec();
            let tape: Tape<f64> = Tape::new();
            let mut bind = ParamBindings::default();
            let sf = tape.constant(
                vec![n_tok, d],
                (0..n_tok * d).map(|i| (i as f64 * 0.31).sin()).collect(),
            );
            let be = tape.constant(
                vec![n_obj, d],
                (0..n_obj * d).map(|i| (i as f64 * 0.17).cos()).collect(),
            );
            let a = soft_assign(&tape, &ps, &mut bind, sf, Some(be), vec![0, 1]);
            // probe: weighted sum of probabilities
            let weights = tape.constant(
                vec![n_tok, n_obj + 1],
                (0..n_tok * (n_obj + 1)).map(|i| (i as f64 * 0.7).sin()).collect(),
            );
            let prod = tape.mul(a.probs, weights);
            let loss = tape.reduce_sum(prod, None);
            tape.backward(loss).unwrap();
            ps.zero_grads();
            ps.harvest(&tape, &bind);
            (
                tape.value_f64(loss),
                ps.get("dynamics.q.fc1.w").unwrap().grad.clone(),
            )
        };
        let check = finite_diff::check(run, &w0, 1e-5, 1e-6);
        assert!(check.max_rel < 1e-4, "{check:?}");
    }

    #[test]
    fn assignment_loss_closed_forms() {
        // uniform probabilities over 4 slots -> loss = ln 4
        let tape: Tape<f64> = Tape::new();
        let logits = tape.constant(vec![2, 4], vec![0.0; 8]);
        let a = AssignmentWeights {
            probs: tape.softmax(logits, 1),
            logits,
            object_ids: vec![0, 1, 2],
        };
        let tr0 = track_moving(0, [0.0; 3], [0.0; 3], 0.0, 1.0);
        let tr1 = track_moving(1, [20.0, 0.0, 0.0], [20.0, 0.0, 0.0], 0.0, 1.0);
        let tr2 = track_moving(2, [-20.0, 0.0, 0.0], [-20.0, 0.0, 0.0], 0.0, 1.0);
        let tracks = vec![&tr0, &tr1, &tr2];
        let positions = vec![[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]]; // in box 0, in none
        let loss = assignment_loss(&tape, &a, &positions, &tracks, 0.5);
        assert!((tape.value_f64(loss) - (4.0f64).ln()).abs() < 1e-9);

        // near-one-hot correct assignment -> loss near 0
        let tape: Tape<f64> = Tape::new();
        let logits = tape.constant(
            vec![2, 4],
            vec![50.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 50.0],
        );
        let a = AssignmentWeights {
            probs: tape.softmax(logits, 1),
            logits,
            object_ids: vec![0, 1, 2],
        };
        let loss = assignment_loss(&tape, &a, &positions, &tracks, 0.5);
        assert!(tape.value_f64(loss) < 1e-9);
    }

    #[test]
    fn inside_outside_labels_match_corner_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let r = Rotation3::from_euler_angles(0.0, 0.9, 0.0).into_inner();
        let pose = RigidTransform::from_parts(&r, &Vector3::new(2.0, -0.5, 7.0));
        let tr = ObjectTrack::new(0, [4.0, 2.0, 1.5], vec![(0.0, pose)]).unwrap();
        let tracks = vec![&tr];
        for _ in 0..500 {
            let p = [
                rng.gen_range(-2.0..6.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(3.0..11.0),
            ];
            let targets = assignment_targets(&[p], &[0.0], &tracks);
            let inside = targets[0] == 0;
            // corner-transform oracle: rebuild axes from the corner cloud
            let corners = crate::geometry::obb_corners(&tr.pose_at(0.0), &tr.size);
            let center = corners.iter().sum::<Vector3<f64>>() / 8.0;
            // corners are ordered by sign loops (x, y, z): axis vectors
            let ax = (corners[4] - corners[0]) / 2.0; // x: l
            let ay = (corners[2] - corners[0]) / 2.0; // y: h
            let az = (corners[1] - corners[0]) / 2.0; // z: w
            let rel = Vector3::from(p) - center;
            let inx = rel.dot(&ax.normalize()).abs() <= ax.norm() + 1e-12;
            let iny = rel.dot(&ay.normalize()).abs() <= ay.norm() + 1e-12;
            let inz = rel.dot(&az.normalize()).abs() <= az.norm() + 1e-12;
            assert_eq!(inside, inx && iny && inz, "point {p:?}");
        }
    }

    #[test]
    fn motion_apply_gradients_match_finite_differences() {
        // differentiate through A-blended matrices AND mu in one probe
        let n = 2;
        let k = 2; // 2 objects + static
        let run = |x: &[f64]| -> (f64, Vec<f64>) {
            let (aw, mu) = x.split_at(n * (k + 1));
            let tape: Tape<f64> = Tape::new();
            let a_leaf = tape.leaf(vec![n, k + 1], aw.to_vec());
            let a = tape.softmax(a_leaf, 1);
            let mu_t = tape.leaf(vec![n, 3], mu.to_vec());
            let r1 = Rotation3::from_euler_angles(0.2, 0.5, -0.3).into_inner();
            let p0a = RigidTransform::from_parts(&Matrix3::identity(), &Vector3::new(1.0, 0.0, 2.0));
            let p1a = RigidTransform::from_parts(&r1, &Vector3::new(2.0, 1.0, 0.0));
            let tr_a = ObjectTrack::new(0, [1.0; 3], vec![(0.0, p0a), (1.0, p1a)]).unwrap();
            let p0b = RigidTransform::from_parts(&Matrix3::identity(), &Vector3::new(-1.0, 0.5, 0.0));
            let p1b = RigidTransform::from_parts(&Matrix3::identity(), &Vector3::new(-3.0, 0.5, 0.0));
            let tr_b = ObjectTrack::new(1, [1.0; 3], vec![(0.0, p0b), (1.0, p1b)]).unwrap();
            let tracks = vec![&tr_a, &tr_b];
            let m0 = tape.constant(vec![k + 1, 16], track_matrices_at(&tracks, 0.1));
            let m1 = tape.constant(vec![k + 1, 16], track_matrices_at(&tracks, 0.9));
            let t0 = tape.matmul(a, m0);
            let t1 = tape.matmul(a, m1);
            let (moved, _) = motion_apply(&tape, t0, t1, mu_t);
            let w = tape.constant(vec![n, 3], (0..n * 3).map(|i| (i as f64).sin()).collect());
            let prod = tape.mul(moved, w);
            let loss = tape.reduce_sum(prod, None);
            tape.backward(loss).unwrap();
            let mut grad = tape.grad(a_leaf).unwrap();
            grad.extend(tape.grad(mu_t).unwrap());
            (tape.value_f64(loss), grad)
        };
        let x0: Vec<f64> = (0..n * (k + 1) + n * 3)
            .map(|i| (i as f64 * 0.37).sin() * 0.8)
            .collect();
        let check = finite_diff::check(run, &x0, 1e-5, 1e-6);
        assert!(check.max_rel < 1e-6, "{check:?}");
    }
}
