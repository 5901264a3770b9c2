/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `maxᵢ |analyticᵢ − numericᵢ| / max(1, |numericᵢ|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

/// Central-difference check of `analytic` against `f` at `params`.
///
/// `f` must be deterministic: any Monte Carlo noise inside it has to be
/// replayed identically on every call (reseed the RNG inside the closure).
pub fn finite_difference_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut x = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let g = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - g).abs() / g.abs().max(1.0);
        if err > max_rel_error || err.is_nan() {
            max_rel_error = err;
            worst_index = i;
        }
        numeric.push(g);
    }
    GradCheckReport {
        max_rel_error,
        worst_index,
        numeric,
    }
}
