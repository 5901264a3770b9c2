//! One-dimensional numerical integration used as an independent check on the
//! closed-form divergences.

use super::gaussian_log_density;
use crate::tensor::logsumexp;

/// Half-width of the integration window, in standard deviations of the
/// reference density. Tail mass beyond it is below 1e-40.
const WINDOW: f64 = 14.0;
const INTERVALS: usize = 20_000;

/// Composite Simpson rule on `[a, b]` with `n` (rounded up to even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// `∫ p(x) log(p(x)/q(x)) dx` for 1-D Gaussians `p = N(mp, sp²)`, `q = N(mq, sq²)`.
pub fn kl_gaussian_1d_numeric(mp: f64, sp: f64, mq: f64, sq: f64) -> f64 {
    simpson(
        |x| {
            let lp = gaussian_log_density(x, mp, sp);
            let lq = gaussian_log_density(x, mq, sq);
            lp.exp() * (lp - lq)
        },
        mp - WINDOW * sp,
        mp + WINDOW * sp,
        INTERVALS,
    )
}

/// `KL(r ‖ Σ_k w_k N(m_k, s_k²))` for a 1-D Gaussian reference `r = N(rm, rs²)`.
pub fn kl_gaussian_to_mixture_numeric(rm: f64, rs: f64, components: &[(f64, f64)], weights: &[f64]) -> f64 {
    simpson(
        |x| {
            let lr = gaussian_log_density(x, rm, rs);
            let parts: Vec<f64> = components
                .iter()
                .zip(weights)
                .map(|(&(m, s), &w)| w.ln() + gaussian_log_density(x, m, s))
                .collect();
            lr.exp() * (lr - logsumexp(&parts))
        },
        rm - WINDOW * rs,
        rm + WINDOW * rs,
        INTERVALS,
    )
}
