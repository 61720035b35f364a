//! Small building blocks over the parameter store: seeded initializers,
//! linear layers, and the 2-layer MLPs used by the box encoder, gaussian
//! decoder, and assignment heads.

use crate::numerics::checkpoint::{ParamBindings, ParamStore};
use crate::numerics::{Tape, TensorRef};
use crate::scalar::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn normal_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    // Box-Muller keeps us independent of distribution-crate versioning.
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(T::from_f64(r * theta.cos() * std));
        if out.len() < n {
            out.push(T::from_f64(r * theta.sin() * std));
        }
    }
    out
}

pub const INIT_STD: f64 = 0.02;

/// Weight (in,out) + bias (out). `std = 0` gives a zero-initialized head.
pub fn define_linear<T: Scalar>(
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    std: f64,
) {
    let w = if std == 0.0 {
        vec![T::ZERO; in_dim * out_dim]
    } else {
        normal_vec(rng, in_dim * out_dim, std)
    };
    ps.define(&format!("{name}.w"), vec![in_dim, out_dim], w);
    ps.define(&format!("{name}.b"), vec![out_dim], vec![T::ZERO; out_dim]);
}

pub fn linear<T: Scalar>(
    tape: &Tape<T>,
    ps: &ParamStore<T>,
    bind: &mut ParamBindings,
    x: TensorRef,
    name: &str,
) -> TensorRef {
    let w = ps.bind(tape, bind, &format!("{name}.w"));
    let b = ps.bind(tape, bind, &format!("{name}.b"));
    let y = tape.matmul(x, w);
    tape.add(y, b)
}

pub fn define_mlp2<T: Scalar>(
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    out_std: f64,
) {
    define_linear(ps, rng, &format!("{name}.fc1"), in_dim, hidden, INIT_STD);
    define_linear(ps, rng, &format!("{name}.fc2"), hidden, out_dim, out_std);
}

pub fn mlp2<T: Scalar>(
    tape: &Tape<T>,
    ps: &ParamStore<T>,
    bind: &mut ParamBindings,
    x: TensorRef,
    name: &str,
) -> TensorRef {
    let h = linear(tape, ps, bind, x, &format!("{name}.fc1"));
    let h = tape.gelu(h);
    linear(tape, ps, bind, h, &format!("{name}.fc2"))
}

/// Sinusoidal position code of dimension `dim` for a scalar coordinate.
pub fn sinusoid(value: f64, dim: usize, base: f64) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = 1.0 / base.powf(i as f64 / half as f64);
        out[2 * i] = (value * freq).sin();
        out[2 * i + 1] = (value * freq).cos();
    }
    out
}

/// Fourier features: [sin(2^l pi x), cos(2^l pi x)] for l in 0..octaves,
/// per input dimension, with coordinates pre-scaled by `scale`.
pub fn fourier_features(coords: &[f64], octaves: usize, scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(coords.len() * octaves * 2);
    for &c in coords {
        let x = c * scale;
        for l in 0..octaves {
            let w = (1u64 << l) as f64 * std::f64::consts::PI;
            out.push((x * w).sin());
            out.push((x * w).cos());
        }
    }
    out
}
