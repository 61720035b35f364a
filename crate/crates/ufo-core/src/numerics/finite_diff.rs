//! Central finite differences, the independent oracle for every analytic
//! gradient in the crate. Works on plain `f64` closures that rebuild their
//! graph per evaluation, so it never touches the backward machinery it is
//! checking.

/// Central difference gradient of `f` at `x` with step `h`.
pub fn central_diff<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst_index: usize,
}

/// Worst relative disagreement, with denominators floored at `floor` so
/// near-zero gradients compare absolutely.
pub fn compare(analytic: &[f64], numeric: &[f64], floor: f64) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len());
    let mut out = GradCheck {
        max_rel: 0.0,
        max_abs: 0.0,
        worst_index: 0,
    };
    for i in 0..analytic.len() {
        let abs = (analytic[i] - numeric[i]).abs();
        let denom = analytic[i].abs().max(numeric[i].abs()).max(floor);
        let rel = abs / denom;
        if rel > out.max_rel {
            out.max_rel = rel;
            out.worst_index = i;
        }
        out.max_abs = out.max_abs.max(abs);
    }
    out
}

/// End-to-end check: `f` maps a parameter vector to (loss, analytic grad).
/// The numeric side re-evaluates the loss only.
pub fn check<F>(f: F, x0: &[f64], h: f64, floor: f64) -> GradCheck
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x0);
    let loss_only = |x: &[f64]| f(x).0;
    let numeric = central_diff(&loss_only, x0, h);
    compare(&analytic, &numeric, floor)
}
