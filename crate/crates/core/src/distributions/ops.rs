//! Differentiable versions of the divergences, built on [`Graph`].

use super::{DistError, Result, ScaleMixturePrior, HALF_LN_2PI};
use crate::tensor::{Graph, Var};

fn last_axis(g: &Graph, v: Var) -> usize {
    g.shape(v).len().saturating_sub(1)
}

/// Row-wise closed-form `KL(N(mu_p, sd_p²) ‖ N(mu_q, sd_q²))`, summed over the
/// last axis. All four inputs share one shape.
pub fn kl_diag_gaussian_rows(g: &mut Graph, mu_p: Var, sd_p: Var, mu_q: Var, sd_q: Var) -> Result<Var> {
    let shape = g.shape(mu_p).to_vec();
    for v in [sd_p, mu_q, sd_q] {
        if g.shape(v) != shape.as_slice() {
            return Err(DistError::Dimension(shape.iter().product(), g.value(v).len()));
        }
    }
    let ratio = g.div(sd_q, sd_p)?;
    let log_ratio = g.log(ratio)?;
    let diff = g.sub(mu_p, mu_q)?;
    let diff2 = g.square(diff)?;
    let var_p = g.square(sd_p)?;
    let num = g.add(var_p, diff2)?;
    let var_q = g.square(sd_q)?;
    let den = g.scale(var_q, 2.0)?;
    let frac = g.div(num, den)?;
    let t = g.add(log_ratio, frac)?;
    let t = g.add_scalar(t, -0.5)?;
    let axis = last_axis(g, t);
    Ok(g.sum_axis(t, axis)?)
}

/// Row-wise `Σ_c p_c (log p_c − log q_c)` from log-probabilities.
///
/// Inputs are expected to be finite log-softmax outputs, so no floor is
/// applied; identical rows give exactly zero.
pub fn kl_categorical_rows(g: &mut Graph, log_p: Var, log_q: Var) -> Result<Var> {
    if g.shape(log_p) != g.shape(log_q) {
        return Err(DistError::Dimension(g.value(log_p).len(), g.value(log_q).len()));
    }
    let diff = g.sub(log_p, log_q)?;
    let p = g.exp(log_p)?;
    let t = g.mul(p, diff)?;
    let axis = last_axis(g, t);
    Ok(g.sum_axis(t, axis)?)
}

/// `Σ log N(θ; μ, σ²)` over all elements.
pub fn gaussian_log_prob_sum(g: &mut Graph, theta: Var, mu: Var, sigma: Var) -> Result<Var> {
    let d = g.sub(theta, mu)?;
    let z = g.div(d, sigma)?;
    let z2 = g.square(z)?;
    let quad = g.scale(z2, -0.5)?;
    let log_sigma = g.log(sigma)?;
    let t = g.sub(quad, log_sigma)?;
    let s = g.sum(t)?;
    let n = g.value(theta).len() as f64;
    Ok(g.add_scalar(s, -HALF_LN_2PI * n)?)
}

/// `Σ log[π N(θ; 0, σ₁²) + (1−π) N(θ; 0, σ₂²)]` over all elements.
pub fn mixture_log_prob_sum(g: &mut Graph, theta: Var, prior: &ScaleMixturePrior) -> Result<Var> {
    let sq = g.square(theta)?;
    let component = |g: &mut Graph, weight: f64, sigma: f64| -> Result<Var> {
        let quad = g.scale(sq, -1.0 / (2.0 * sigma * sigma))?;
        Ok(g.add_scalar(quad, weight.ln() - sigma.ln() - HALF_LN_2PI)?)
    };
    let a = component(g, prior.pi(), prior.sigma1())?;
    let b = component(g, 1.0 - prior.pi(), prior.sigma2())?;
    let lse = g.logaddexp(a, b)?;
    Ok(g.sum(lse)?)
}

/// `(1/L) Σ_ℓ [log q(θ⁽ℓ⁾) − log p(θ⁽ℓ⁾)]` with `q = N(mu, sigma²)` and the
/// scale-mixture prior `p`. Each sample must be a reparameterized function
/// of `mu` and `sigma` for the gradient to be the pathwise estimator.
pub fn kl_posterior_prior_mc(
    g: &mut Graph,
    mu: Var,
    sigma: Var,
    samples: &[Var],
    prior: &ScaleMixturePrior,
) -> Result<Var> {
    if samples.is_empty() {
        return Err(DistError::EmptySamples);
    }
    let mut total: Option<Var> = None;
    for &theta in samples {
        let lq = gaussian_log_prob_sum(g, theta, mu, sigma)?;
        let lp = mixture_log_prob_sum(g, theta, prior)?;
        let term = g.sub(lq, lp)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("non-empty samples");
    Ok(g.div_scalar(total, samples.len() as f64)?)
}
