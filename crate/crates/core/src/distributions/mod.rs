//! Factorized Gaussians, categoricals, the two-component scale-mixture prior,
//! and the KL divergences between them.
//!
//! Plain-value functions here double as reference implementations for the
//! graph versions in [`ops`], which the objective differentiates through.

pub mod ops;
pub mod quadrature;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::TensorError;

/// Floor applied to probabilities before taking their log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `½ ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no samples supplied")]
    EmptySamples,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DistError>;

/// Diagonal Gaussian `N(mean, diag(std²))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// One reparameterized draw: `value = mean + epsilon ⊙ std`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamSample {
    pub epsilon: Vec<f64>,
    pub value: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(DistError::Dimension(mean.len(), std.len()));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(DistError::InvalidParameter(format!("std must be positive and finite, got {s}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(DistError::InvalidParameter("mean must be finite".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(DistError::Dimension(x.len(), self.dim()));
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&x, &m), &s)| gaussian_log_density(x, m, s))
            .sum())
    }

    /// Maps standard-normal noise onto this distribution.
    pub fn replay(&self, epsilon: &[f64]) -> Result<Vec<f64>> {
        if epsilon.len() != self.dim() {
            return Err(DistError::Dimension(epsilon.len(), self.dim()));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.std)
            .zip(epsilon)
            .map(|((&m, &s), &e)| m + e * s)
            .collect())
    }

    pub fn sample_reparameterized<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<ReparamSample> {
        (0..count)
            .map(|_| {
                let epsilon: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
                let value = self.replay(&epsilon).expect("epsilon has matching dimension");
                ReparamSample { epsilon, value }
            })
            .collect()
    }
}

pub fn gaussian_log_density(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - HALF_LN_2PI
}

/// Two-component zero-mean mixture `π N(0, σ₁²) + (1−π) N(0, σ₂²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleMixturePrior {
    pi: f64,
    sigma1: f64,
    sigma2: f64,
}

impl Default for ScaleMixturePrior {
    fn default() -> Self {
        Self {
            pi: 0.5,
            sigma1: 0.1,
            sigma2: 1.5,
        }
    }
}

impl ScaleMixturePrior {
    pub fn new(pi: f64, sigma1: f64, sigma2: f64) -> Result<Self> {
        if !(pi > 0.0 && pi < 1.0) {
            return Err(DistError::InvalidParameter(format!("mixing weight must lie in (0,1), got {pi}")));
        }
        if !(sigma1 > 0.0 && sigma2 > 0.0 && sigma1.is_finite() && sigma2.is_finite()) {
            return Err(DistError::InvalidParameter(format!(
                "component scales must be positive, got {sigma1} and {sigma2}"
            )));
        }
        Ok(Self { pi, sigma1, sigma2 })
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    pub fn sigma1(&self) -> f64 {
        self.sigma1
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Log-densities of the two weighted components at `theta`.
    pub fn component_log_densities(&self, theta: f64) -> [f64; 2] {
        [
            self.pi.ln() + gaussian_log_density(theta, 0.0, self.sigma1),
            (1.0 - self.pi).ln() + gaussian_log_density(theta, 0.0, self.sigma2),
        ]
    }

    pub fn log_prob(&self, theta: f64) -> f64 {
        crate::tensor::logsumexp(&self.component_log_densities(theta))
    }

    pub fn log_prob_sum(&self, thetas: &[f64]) -> f64 {
        thetas.iter().map(|&t| self.log_prob(t)).sum()
    }
}

/// Alias matching the operation name used across the crate.
pub fn log_prob_mixture(theta: f64, prior: &ScaleMixturePrior) -> f64 {
    prior.log_prob(theta)
}

/// Discrete distribution stored with its log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl Categorical {
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(DistError::InvalidParameter("empty categorical".into()));
        }
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(DistError::InvalidParameter("probabilities must lie in [0,1]".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() >= 1e-9 {
            return Err(DistError::InvalidParameter(format!("probabilities sum to {total}")));
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self { probs, log_probs })
    }

    /// Softmax of `logits`, computed in log space.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(DistError::InvalidParameter("empty categorical".into()));
        }
        let lse = crate::tensor::logsumexp(logits);
        let log_probs: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Ok(Self { probs, log_probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Closed-form `KL(p ‖ q)` between diagonal Gaussians.
pub fn kl_diag_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(DistError::Dimension(p.dim(), q.dim()));
    }
    let mut kl = 0.0;
    for j in 0..p.dim() {
        let (mp, sp, mq, sq) = (p.mean[j], p.std[j], q.mean[j], q.std[j]);
        let d = mp - mq;
        kl += (sq / sp).ln() + (sp * sp + d * d) / (2.0 * sq * sq) - 0.5;
    }
    Ok(kl)
}

/// `Σ_c p_c (log p_c − log max(q_c, floor))` with `0·log 0 = 0`.
pub fn kl_categorical(p: &Categorical, q: &Categorical) -> Result<f64> {
    if p.len() != q.len() {
        return Err(DistError::Dimension(p.len(), q.len()));
    }
    let floor = PROB_FLOOR.ln();
    Ok(p.probs
        .iter()
        .zip(&p.log_probs)
        .zip(&q.log_probs)
        .map(|((&pc, &lp), &lq)| if pc == 0.0 { 0.0 } else { pc * (lp - lq.max(floor)) })
        .sum())
}

/// Monte Carlo estimate of `KL(q ‖ p)` for a diagonal posterior against the
/// scale-mixture prior, averaging `log q(θ) − log p(θ)` over realized samples.
pub fn kl_posterior_prior_mc(posterior: &DiagGaussian, prior: &ScaleMixturePrior, samples: &[Vec<f64>]) -> Result<f64> {
    kl_posterior_prior_mc_with_se(posterior, prior, samples).map(|(m, _)| m)
}

/// Same estimate plus its standard error across samples (0 for one sample).
pub fn kl_posterior_prior_mc_with_se(
    posterior: &DiagGaussian,
    prior: &ScaleMixturePrior,
    samples: &[Vec<f64>],
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(DistError::EmptySamples);
    }
    let terms = samples
        .iter()
        .map(|theta| Ok(posterior.log_prob(theta)? - prior.log_prob_sum(theta)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_and_se(&terms))
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::quadrature::kl_gaussian_1d_numeric;
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g1(m: f64, s: f64) -> DiagGaussian {
        DiagGaussian::new(vec![m], vec![s]).unwrap()
    }

    fn cat(p: &[f64]) -> Categorical {
        Categorical::from_probs(p.to_vec()).unwrap()
    }

    #[test]
    fn gaussian_kl_examples() {
        let p = DiagGaussian::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
        assert_eq!(kl_diag_gaussian(&p, &p).unwrap(), 0.0);

        // oracle values from numerical integration of p·log(p/q)
        let oracle = kl_gaussian_1d_numeric(1.0, 1.0, 0.0, 1.0);
        assert!((oracle - 0.5).abs() < 1e-9);
        assert!((kl_diag_gaussian(&g1(1.0, 1.0), &g1(0.0, 1.0)).unwrap() - oracle).abs() < 1e-9);

        let oracle = kl_gaussian_1d_numeric(0.0, 2.0, 0.0, 1.0);
        assert!((oracle - (-(2.0f64).ln() + 2.0 - 0.5)).abs() < 1e-9);
        assert!((kl_diag_gaussian(&g1(0.0, 2.0), &g1(0.0, 1.0)).unwrap() - 0.806_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn gaussian_kl_dimension_mismatch() {
        let p = DiagGaussian::standard(2);
        let q = DiagGaussian::standard(3);
        assert_eq!(kl_diag_gaussian(&p, &q), Err(DistError::Dimension(2, 3)));
    }

    #[test]
    fn diag_gaussian_rejects_bad_std() {
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn categorical_kl_examples() {
        let u = cat(&[1.0 / 3.0; 3]);
        assert!(kl_categorical(&u, &u).unwrap().abs() < 1e-15);

        let kl = kl_categorical(&cat(&[1.0, 0.0]), &cat(&[0.5, 0.5])).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);

        let p = cat(&[0.9, 0.1]);
        let q = cat(&[0.1, 0.9]);
        let direct = 0.9 * 9.0f64.ln() + 0.1 * (1.0f64 / 9.0).ln();
        let kl = kl_categorical(&p, &q).unwrap();
        assert!((kl - direct).abs() < 1e-14);
        assert!((kl - 1.757_779_661_868_976).abs() < 1e-12);

        // q has a zero where p does not: the floor keeps the value finite
        let kl = kl_categorical(&cat(&[0.5, 0.5]), &cat(&[1.0, 0.0])).unwrap();
        assert!(kl.is_finite() && kl > 10.0);
        assert!(kl_categorical(&cat(&[0.5, 0.5]), &cat(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn categorical_kl_is_asymmetric() {
        let p = cat(&[0.9, 0.1]);
        let q = cat(&[0.2, 0.8]);
        let pq = kl_categorical(&p, &q).unwrap();
        let qp = kl_categorical(&q, &p).unwrap();
        assert!((pq - qp).abs() > 1e-3);
    }

    #[test]
    fn categorical_validation() {
        assert!(Categorical::from_probs(vec![0.5, 0.6]).is_err());
        assert!(Categorical::from_probs(vec![-0.1, 1.1]).is_err());
        let c = Categorical::from_logits(&[1000.0, 0.0, 1000.0]).unwrap();
        assert!((c.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(c.argmax(), 0);
    }

    #[test]
    fn mixture_log_prob_examples() {
        let unit = ScaleMixturePrior::new(0.5, 1.0, 1.0).unwrap();
        assert!((unit.log_prob(0.0) + 0.918_938_533_204_672_7).abs() < 1e-12);

        let prior = ScaleMixturePrior::default();
        let s2pi = (2.0 * std::f64::consts::PI).sqrt();
        let direct = (0.5 / (0.1 * s2pi) + 0.5 / (1.5 * s2pi)).ln();
        assert!((prior.log_prob(0.0) - direct).abs() < 1e-12);
        assert!((prior.log_prob(0.0) - 0.755_037_900_366_999).abs() < 1e-12);

        // far out, the wide component dominates
        let wide = (0.5f64).ln() + gaussian_log_density(10.0, 0.0, 1.5);
        assert!((prior.log_prob(10.0) - wide).abs() < 1e-12);
        assert_eq!(prior.log_prob(-10.0), prior.log_prob(10.0));
        let mut last = prior.log_prob(0.0);
        for k in 1..=100 {
            let v = prior.log_prob(k as f64 * 0.1);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn mixture_prior_validation() {
        assert!(ScaleMixturePrior::new(0.0, 0.1, 1.5).is_err());
        assert!(ScaleMixturePrior::new(1.0, 0.1, 1.5).is_err());
        assert!(ScaleMixturePrior::new(0.5, 0.0, 1.5).is_err());
    }

    #[test]
    fn reparameterized_samples() {
        let d = DiagGaussian::new(vec![1.0, -2.0], vec![0.5, 3.0]).unwrap();
        assert_eq!(d.replay(&[0.0, 0.0]).unwrap(), d.mean());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = d.sample_reparameterized(&mut rng, 5);
        for s in &draws {
            assert_eq!(d.replay(&s.epsilon).unwrap(), s.value);
        }

        let n = 1_000_000;
        let d = g1(0.7, 2.0);
        let draws = d.sample_reparameterized(&mut rng, n);
        let mean = draws.iter().map(|s| s.value[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.7).abs() < 4.0 * 2.0 / (n as f64).sqrt());
    }

    #[test]
    fn posterior_prior_kl_against_closed_form() {
        // with σ₁ = σ₂ the prior is a single Gaussian and the KL has a closed form
        let sigma = 0.8;
        let prior = ScaleMixturePrior::new(0.3, sigma, sigma).unwrap();
        let post = DiagGaussian::new(vec![0.4, -0.2], vec![0.5, 1.1]).unwrap();
        let exact = kl_diag_gaussian(&post, &DiagGaussian::new(vec![0.0, 0.0], vec![sigma, sigma]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<Vec<f64>> = post
            .sample_reparameterized(&mut rng, 100_000)
            .into_iter()
            .map(|s| s.value)
            .collect();
        let (est, se) = kl_posterior_prior_mc_with_se(&post, &prior, &samples).unwrap();
        assert!((est - exact).abs() < 3.0 * se, "{est} vs {exact} (se {se})");

        // posterior equal to the prior: every term is exactly zero
        let post = g1(0.0, sigma);
        let samples: Vec<Vec<f64>> = post.sample_reparameterized(&mut rng, 1000).into_iter().map(|s| s.value).collect();
        let (est, _) = kl_posterior_prior_mc_with_se(&post, &prior, &samples).unwrap();
        assert!(est.abs() < 1e-12);

        assert_eq!(kl_posterior_prior_mc(&post, &prior, &[]), Err(DistError::EmptySamples));
    }

    #[test]
    fn posterior_prior_kl_against_high_sample_estimate() {
        let prior = ScaleMixturePrior::default();
        let post = g1(0.3, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // brute-force reference: 10⁷ draws, streamed
        let n_ref = 10_000_000usize;
        let mut acc = 0.0;
        for _ in 0..n_ref {
            let e: f64 = rng.sample(StandardNormal);
            let t = 0.3 + 0.2 * e;
            acc += gaussian_log_density(t, 0.3, 0.2) - prior.log_prob(t);
        }
        let reference = acc / n_ref as f64;

        let samples: Vec<Vec<f64>> = post.sample_reparameterized(&mut rng, 20_000).into_iter().map(|s| s.value).collect();
        let (est, se) = kl_posterior_prior_mc_with_se(&post, &prior, &samples).unwrap();
        assert!((est - reference).abs() < 3.0 * se, "{est} vs {reference} (se {se})");
    }

    fn random_probs(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }

    fn random_weights(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        random_probs(rng, k)
    }

    fn mix(components: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
        let c = components[0].len();
        let mut out = vec![0.0; c];
        for (p, &wk) in components.iter().zip(w) {
            for (o, &x) in out.iter_mut().zip(p) {
                *o += wk * x;
            }
        }
        let s: f64 = out.iter().sum();
        out.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn jensen_bound_for_categorical_mixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let c = rng.random_range(2..7);
            let k = rng.random_range(2..6);
            let r = cat(&random_probs(&mut rng, c));
            let comps: Vec<Vec<f64>> = (0..k).map(|_| random_probs(&mut rng, c)).collect();
            let w = random_weights(&mut rng, k);
            let lhs = kl_categorical(&r, &cat(&mix(&comps, &w))).unwrap();
            let rhs: f64 = comps
                .iter()
                .zip(&w)
                .map(|(p, wk)| wk * kl_categorical(&r, &cat(p)).unwrap())
                .sum();
            assert!(lhs <= rhs + 1e-12, "{lhs} > {rhs}");
        }
    }

    #[test]
    fn convexity_bound_for_categorical_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let c = rng.random_range(2..7);
            let k = rng.random_range(2..6);
            let ps: Vec<Vec<f64>> = (0..k).map(|_| random_probs(&mut rng, c)).collect();
            let qs: Vec<Vec<f64>> = (0..k).map(|_| random_probs(&mut rng, c)).collect();
            let w = random_weights(&mut rng, k);
            let lhs = kl_categorical(&cat(&mix(&ps, &w)), &cat(&mix(&qs, &w))).unwrap();
            let rhs: f64 = ps
                .iter()
                .zip(&qs)
                .zip(&w)
                .map(|((p, q), wk)| wk * kl_categorical(&cat(p), &cat(q)).unwrap())
                .sum();
            assert!(lhs <= rhs + 1e-12, "{lhs} > {rhs}");
        }
    }

    #[test]
    fn jensen_bound_for_gaussian_mixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let k = rng.random_range(2..5);
            let (rm, rs) = (rng.random_range(-2.0..2.0), rng.random_range(0.3..2.0));
            let comps: Vec<(f64, f64)> = (0..k)
                .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(0.3..2.0)))
                .collect();
            let w = random_weights(&mut rng, k);
            let lhs = quadrature::kl_gaussian_to_mixture_numeric(rm, rs, &comps, &w);
            let rhs: f64 = comps
                .iter()
                .zip(&w)
                .map(|(&(m, s), wk)| wk * kl_diag_gaussian(&g1(rm, rs), &g1(m, s)).unwrap())
                .sum();
            assert!(lhs <= rhs + 1e-6, "{lhs} > {rhs}");
        }
    }

    proptest! {
        #[test]
        fn gaussian_kl_non_negative(
            m1 in -5.0f64..5.0, s1 in 0.05f64..5.0,
            m2 in -5.0f64..5.0, s2 in 0.05f64..5.0,
        ) {
            let kl = kl_diag_gaussian(&g1(m1, s1), &g1(m2, s2)).unwrap();
            prop_assert!(kl >= -1e-12);
        }

        #[test]
        fn categorical_kl_non_negative(a in proptest::collection::vec(0.01f64..1.0, 2..6), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: f64 = a.iter().sum();
            let p: Vec<f64> = a.iter().map(|x| x / s).collect();
            let q = random_probs(&mut rng, p.len());
            prop_assert!(kl_categorical(&cat(&p), &cat(&q)).unwrap() >= -1e-15);
        }

        #[test]
        fn mixture_matches_direct_density(theta in -5.0f64..5.0, pi in 0.05f64..0.95) {
            let prior = ScaleMixturePrior::new(pi, 0.1, 1.5).unwrap();
            let n = |s: f64| (-(theta * theta) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            let direct = (pi * n(0.1) + (1.0 - pi) * n(1.5)).ln();
            prop_assert!((prior.log_prob(theta) - direct).abs() < 1e-12);
        }
    }
}
