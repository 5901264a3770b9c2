//! Deterministic and mean-field Bayesian linear layers.
//!
//! A [`BayesianLinear`] keeps a factorized Gaussian posterior over every weight
//! and bias with `σ = softplus(ρ)`. Inside a [`Graph`] it can be sampled with
//! the reparameterization trick, or pushed through a batch in closed form: for
//! input row `x`, output `j` is Gaussian with mean `Σᵢ xᵢ μᵢⱼ + μ_b,j` and
//! variance `Σᵢ xᵢ² σᵢⱼ² + σ_b,j²`.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::distributions::{ops as dist_ops, ScaleMixturePrior};
use crate::tensor::{softplus, softplus_inverse, Graph, Tensor, TensorError, Var};
use crate::{Error, Result};

pub const DEFAULT_INIT_SIGMA: f64 = 0.05;

fn check_dims(in_dim: usize, out_dim: usize) -> Result<()> {
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::Config(format!("layer dimensions must be ≥ 1, got {in_dim}×{out_dim}")));
    }
    Ok(())
}

fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized by construction")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicLinear {
    pub w: Tensor,
    pub b: Tensor,
}

impl DeterministicLinear {
    /// He-scaled normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        check_dims(in_dim, out_dim)?;
        Ok(Self {
            w: gaussian_matrix(rng, in_dim, out_dim, (2.0 / in_dim as f64).sqrt()),
            b: Tensor::zeros(&[out_dim]),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn export(&self, prefix: &str, ck: &mut Checkpoint) {
        ck.push_tensor(format!("{prefix}.w"), &self.w);
        ck.push_tensor(format!("{prefix}.b"), &self.b);
    }

    pub fn import(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let w = ck.tensor(&format!("{prefix}.w"))?.clone();
        let b = ck.tensor(&format!("{prefix}.b"))?.clone();
        if w.rank() != 2 || b.shape() != [w.cols()] {
            return Err(Error::Checkpoint(format!("{prefix}: inconsistent shapes {:?} / {:?}", w.shape(), b.shape())));
        }
        Ok(Self { w, b })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundLinear> {
        let leaf = |g: &mut Graph, t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        Ok(BoundLinear {
            w: leaf(g, &self.w)?,
            b: leaf(g, &self.b)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xw = g.matmul(x, self.w)?;
        Ok(g.add(xw, self.b)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BayesianLinear {
    pub w_mu: Tensor,
    pub w_rho: Tensor,
    pub b_mu: Tensor,
    pub b_rho: Tensor,
}

/// Initialization: `w_mu ~ N(0, 1/in_dim)`, zero bias means, and every `ρ`
/// set so that `softplus(ρ) = init_sigma`.
pub fn init_bayesian_linear<R: Rng + ?Sized>(
    in_dim: usize,
    out_dim: usize,
    rng: &mut R,
    init_sigma: f64,
) -> Result<BayesianLinear> {
    check_dims(in_dim, out_dim)?;
    if !(init_sigma > 0.0) {
        return Err(Error::Config(format!("init_sigma must be positive, got {init_sigma}")));
    }
    let rho = softplus_inverse(init_sigma);
    Ok(BayesianLinear {
        w_mu: gaussian_matrix(rng, in_dim, out_dim, (1.0 / in_dim as f64).sqrt()),
        w_rho: Tensor::full(&[in_dim, out_dim], rho),
        b_mu: Tensor::zeros(&[out_dim]),
        b_rho: Tensor::full(&[out_dim], rho),
    })
}

impl BayesianLinear {
    pub fn in_dim(&self) -> usize {
        self.w_mu.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w_mu.shape()[1]
    }

    pub fn w_sigma(&self) -> Tensor {
        self.w_rho.map(softplus)
    }

    pub fn b_sigma(&self) -> Tensor {
        self.b_rho.map(softplus)
    }

    /// Number of stochastic entries (weights plus biases).
    pub fn num_entries(&self) -> usize {
        self.w_mu.len() + self.b_mu.len()
    }

    /// Writes `w_mu`, `b_mu`, then `w_rho`, `b_rho`.
    pub fn export(&self, prefix: &str, ck: &mut Checkpoint) {
        ck.push_tensor(format!("{prefix}.w_mu"), &self.w_mu);
        ck.push_tensor(format!("{prefix}.b_mu"), &self.b_mu);
        ck.push_tensor(format!("{prefix}.w_rho"), &self.w_rho);
        ck.push_tensor(format!("{prefix}.b_rho"), &self.b_rho);
    }

    pub fn import(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| ck.tensor(&format!("{prefix}.{k}")).cloned();
        let layer = Self {
            w_mu: get("w_mu")?,
            b_mu: get("b_mu")?,
            w_rho: get("w_rho")?,
            b_rho: get("b_rho")?,
        };
        let ok = layer.w_mu.rank() == 2
            && layer.w_rho.shape() == layer.w_mu.shape()
            && layer.b_mu.shape() == [layer.w_mu.cols()]
            && layer.b_rho.shape() == layer.b_mu.shape();
        if !ok {
            return Err(Error::Checkpoint(format!("{prefix}: inconsistent parameter shapes")));
        }
        Ok(layer)
    }

    /// Registers the posterior parameters on `g`. When `stochastic` is false
    /// the `ρ` tensors are attached as constants: they take no gradient.
    pub fn bind(&self, g: &mut Graph, trainable: bool, stochastic: bool) -> Result<BoundBayesianLinear> {
        let leaf = |g: &mut Graph, t: &Tensor, grad: bool| if grad { g.param(t.clone()) } else { g.constant(t.clone()) };
        let w_mu = leaf(g, &self.w_mu, trainable)?;
        let b_mu = leaf(g, &self.b_mu, trainable)?;
        let w_rho = leaf(g, &self.w_rho, trainable && stochastic)?;
        let b_rho = leaf(g, &self.b_rho, trainable && stochastic)?;
        let w_sigma = g.softplus(w_rho)?;
        let b_sigma = g.softplus(b_rho)?;
        Ok(BoundBayesianLinear {
            w_mu,
            w_rho,
            b_mu,
            b_rho,
            w_sigma,
            b_sigma,
        })
    }
}

/// A [`BayesianLinear`] attached to a graph, with `σ = softplus(ρ)` precomputed.
#[derive(Clone, Copy, Debug)]
pub struct BoundBayesianLinear {
    pub w_mu: Var,
    pub w_rho: Var,
    pub b_mu: Var,
    pub b_rho: Var,
    pub w_sigma: Var,
    pub b_sigma: Var,
}

/// One realization of a layer's weights. `eps_*` is the standard-normal noise
/// used (`None` for the mean weights).
#[derive(Clone, Debug)]
pub struct RealizedWeights {
    pub w: Var,
    pub b: Var,
    pub eps_w: Option<Tensor>,
    pub eps_b: Option<Tensor>,
}

/// Gaussian pre-activations, one factorized Gaussian per row.
#[derive(Clone, Copy, Debug)]
pub struct GaussianActivations {
    pub mean: Var,
    pub std: Var,
}

impl BoundBayesianLinear {
    /// `w = μ_w + ε_w ⊙ σ_w`, `b = μ_b + ε_b ⊙ σ_b` with fresh `ε ~ N(0, I)`.
    pub fn sample_weights<R: Rng + ?Sized>(&self, g: &mut Graph, rng: &mut R) -> Result<RealizedWeights> {
        let eps_w = standard_normal(rng, g.shape(self.w_mu));
        let eps_b = standard_normal(rng, g.shape(self.b_mu));
        self.realize(g, eps_w, eps_b)
    }

    /// Rebuilds a realization from recorded noise.
    pub fn realize(&self, g: &mut Graph, eps_w: Tensor, eps_b: Tensor) -> Result<RealizedWeights> {
        if eps_w.shape() != g.shape(self.w_mu) || eps_b.shape() != g.shape(self.b_mu) {
            return Err(TensorError::Shape {
                op: "realize",
                lhs: g.shape(self.w_mu).to_vec(),
                rhs: eps_w.shape().to_vec(),
            }
            .into());
        }
        let ew = g.constant(eps_w.clone())?;
        let eb = g.constant(eps_b.clone())?;
        let nw = g.mul(ew, self.w_sigma)?;
        let nb = g.mul(eb, self.b_sigma)?;
        let w = g.add(self.w_mu, nw)?;
        let b = g.add(self.b_mu, nb)?;
        Ok(RealizedWeights {
            w,
            b,
            eps_w: Some(eps_w),
            eps_b: Some(eps_b),
        })
    }

    pub fn mean_weights(&self) -> RealizedWeights {
        RealizedWeights {
            w: self.w_mu,
            b: self.b_mu,
            eps_w: None,
            eps_b: None,
        }
    }

    /// Exact Gaussian pushforward of the weight posterior through `x·w + b`.
    pub fn propagate_moments(&self, g: &mut Graph, x: Var) -> Result<GaussianActivations> {
        let xm = g.matmul(x, self.w_mu)?;
        let mean = g.add(xm, self.b_mu)?;
        let x2 = g.square(x)?;
        let w_var = g.square(self.w_sigma)?;
        let b_var = g.square(self.b_sigma)?;
        let xv = g.matmul(x2, w_var)?;
        let var = g.add(xv, b_var)?;
        let std = g.sqrt(var)?;
        Ok(GaussianActivations { mean, std })
    }
}

/// `x·w + b` for one realization.
pub fn forward_sampled(g: &mut Graph, weights: &RealizedWeights, x: Var) -> Result<Var> {
    let xw = g.matmul(x, weights.w)?;
    Ok(g.add(xw, weights.b)?)
}

/// Monte Carlo `KL(q ‖ p)` over all weight and bias entries of the layer,
/// reusing the realizations drawn for the forward pass.
pub fn layer_prior_kl(
    g: &mut Graph,
    layer: &BoundBayesianLinear,
    prior: &ScaleMixturePrior,
    samples: &[RealizedWeights],
) -> Result<Var> {
    let ws: Vec<Var> = samples.iter().map(|s| s.w).collect();
    let bs: Vec<Var> = samples.iter().map(|s| s.b).collect();
    let kw = dist_ops::kl_posterior_prior_mc(g, layer.w_mu, layer.w_sigma, &ws, prior)?;
    let kb = dist_ops::kl_posterior_prior_mc(g, layer.b_mu, layer.b_sigma, &bs, prior)?;
    Ok(g.add(kw, kb)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::mean_and_se;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn init_sets_sigma_and_scales_means() {
        let layer = init_bayesian_linear(100, 100, &mut rng(1), 0.05).unwrap();
        for s in layer.w_sigma().data().iter().chain(layer.b_sigma().data()) {
            assert!((s - 0.05).abs() < 1e-9);
        }
        let mean = layer.w_mu.sum() / layer.w_mu.len() as f64;
        assert!(mean.abs() < 4.0 / (1e4f64 * 100.0).sqrt());
        assert!(layer.b_mu.data().iter().all(|&b| b == 0.0));

        let again = init_bayesian_linear(100, 100, &mut rng(1), 0.05).unwrap();
        assert_eq!(layer, again);
        assert!(init_bayesian_linear(0, 3, &mut rng(1), 0.05).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let layer = init_bayesian_linear(3, 2, &mut rng(20), 0.07).unwrap();
        let det = DeterministicLinear::init(2, 5, &mut rng(21)).unwrap();
        let mut ck = Checkpoint::default();
        layer.export("phi", &mut ck);
        det.export("stem.0", &mut ck);
        let names: Vec<&str> = ck.tensors.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["phi.w_mu", "phi.b_mu", "phi.w_rho", "phi.b_rho", "stem.0.w", "stem.0.b"]);
        let back = Checkpoint::parse(&ck.render()).unwrap();
        assert_eq!(BayesianLinear::import("phi", &back).unwrap(), layer);
        assert_eq!(DeterministicLinear::import("stem.0", &back).unwrap(), det);
        assert!(BayesianLinear::import("psi", &back).is_err());
    }

    #[test]
    fn zero_noise_recovers_means() {
        let layer = init_bayesian_linear(3, 2, &mut rng(2), 0.3).unwrap();
        let mut g = Graph::new();
        let bound = layer.bind(&mut g, true, true).unwrap();
        let w = bound.realize(&mut g, Tensor::zeros(&[3, 2]), Tensor::zeros(&[2])).unwrap();
        assert_eq!(g.value(w.w), &layer.w_mu);
        assert_eq!(g.value(w.b), &layer.b_mu);
    }

    #[test]
    fn sampled_weight_variance_matches_sigma() {
        let mut layer = init_bayesian_linear(2, 2, &mut rng(3), 0.05).unwrap();
        layer.w_rho = Tensor::matrix(2, 2, vec![-1.0, 0.0, 0.5, -3.0]).unwrap();
        let sigma = layer.w_sigma();
        let n = 100_000;
        let mut r = rng(4);
        let mut sums = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let mut scratch = Graph::new();
            let b = layer.bind(&mut scratch, false, true).unwrap();
            let w = b.sample_weights(&mut scratch, &mut r).unwrap();
            for (k, &v) in scratch.value(w.w).data().iter().enumerate() {
                sums[k] += v;
                sq[k] += v * v;
            }
        }
        for k in 0..4 {
            let m = sums[k] / n as f64;
            let var = sq[k] / n as f64 - m * m;
            let target = sigma.data()[k].powi(2);
            assert!((var / target - 1.0).abs() < 0.02, "entry {k}: {var} vs {target}");
        }
    }

    #[test]
    fn weight_gradient_is_linear_in_mean() {
        let layer = init_bayesian_linear(3, 4, &mut rng(5), 0.1).unwrap();
        let mut g = Graph::new();
        let bound = layer.bind(&mut g, true, true).unwrap();
        let w = bound.sample_weights(&mut g, &mut rng(6)).unwrap();
        let s = g.sum(w.w).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(bound.w_mu).unwrap().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn forward_sampled_examples() {
        let mut g = Graph::new();
        let b = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0])).unwrap();
        let w = g.constant(Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let weights = RealizedWeights { w, b, eps_w: None, eps_b: None };
        let zero = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let out = forward_sampled(&mut g, &weights, zero).unwrap();
        assert_eq!(g.value(out).row(1), &[0.5, -1.0, 2.0]);

        let zb = g.constant(Tensor::zeros(&[3])).unwrap();
        let ident = RealizedWeights { w, b: zb, eps_w: None, eps_b: None };
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, -6.0]).unwrap()).unwrap();
        let out = forward_sampled(&mut g, &ident, x).unwrap();
        assert_eq!(g.value(out), g.value(x));

        let bad = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        assert!(forward_sampled(&mut g, &ident, bad).is_err());
    }

    #[test]
    fn forward_sampled_matches_dense_loop() {
        let layer = init_bayesian_linear(3, 2, &mut rng(7), 0.2).unwrap();
        let mut r = rng(8);
        let x: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let bound = layer.bind(&mut g, false, true).unwrap();
        let weights = bound.sample_weights(&mut g, &mut r).unwrap();
        let xv = g.constant(Tensor::matrix(4, 3, x.clone()).unwrap()).unwrap();
        let out = forward_sampled(&mut g, &weights, xv).unwrap();
        let (wv, bv) = (g.value(weights.w).clone(), g.value(weights.b).clone());
        for i in 0..4 {
            for j in 0..2 {
                let mut acc = bv.data()[j];
                for k in 0..3 {
                    acc += x[i * 3 + k] * wv.at(k, j);
                }
                assert!((g.value(out).at(i, j) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn moments_of_one_hot_input() {
        let mut layer = init_bayesian_linear(3, 2, &mut rng(9), 0.2).unwrap();
        layer.w_rho = Tensor::matrix(3, 2, vec![-1.0, -0.5, 0.0, 0.3, 0.7, -2.0]).unwrap();
        layer.b_rho = Tensor::full(&[2], -60.0);
        let mut g = Graph::new();
        let bound = layer.bind(&mut g, false, true).unwrap();
        let x = g.constant(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        let m = bound.propagate_moments(&mut g, x).unwrap();
        let sig = layer.w_sigma();
        for j in 0..2 {
            assert!((g.value(m.mean).at(0, j) - layer.w_mu.at(1, j)).abs() < 1e-15);
            assert!((g.value(m.std).at(0, j) - sig.at(1, j)).abs() < 1e-12);
        }

        // zero input with bias: bias posterior itself
        let mut layer = init_bayesian_linear(3, 2, &mut rng(9), 0.2).unwrap();
        layer.b_mu = Tensor::vector(vec![0.4, -0.9]);
        let bound = layer.bind(&mut g, false, true).unwrap();
        let zero = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        let m = bound.propagate_moments(&mut g, zero).unwrap();
        assert_eq!(g.value(m.mean).data(), layer.b_mu.data());
        for (s, t) in g.value(m.std).data().iter().zip(layer.b_sigma().data()) {
            assert!((s - t).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_noise_forward_equals_moment_mean() {
        let layer = init_bayesian_linear(5, 3, &mut rng(10), 0.1).unwrap();
        let mut g = Graph::new();
        let bound = layer.bind(&mut g, false, true).unwrap();
        let mut r = rng(11);
        let x = g.constant(Tensor::matrix(4, 5, (0..20).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()).unwrap();
        let w = bound.realize(&mut g, Tensor::zeros(&[5, 3]), Tensor::zeros(&[3])).unwrap();
        let out = forward_sampled(&mut g, &w, x).unwrap();
        let m = bound.propagate_moments(&mut g, x).unwrap();
        assert_eq!(g.value(out), g.value(m.mean));
    }

    /// Plain-loop Monte Carlo of `x·w + b` with independently drawn weights.
    fn monte_carlo_moments(layer: &BayesianLinear, x: &[f64], n: usize, r: &mut ChaCha8Rng) -> Vec<(f64, f64, f64)> {
        let (ws, bs) = (layer.w_sigma(), layer.b_sigma());
        (0..layer.out_dim())
            .map(|j| {
                let draws: Vec<f64> = (0..n)
                    .map(|_| {
                        let mut z = layer.b_mu.data()[j] + bs.data()[j] * r.sample::<f64, _>(StandardNormal);
                        for (i, xi) in x.iter().enumerate() {
                            z += xi * (layer.w_mu.at(i, j) + ws.at(i, j) * r.sample::<f64, _>(StandardNormal));
                        }
                        z
                    })
                    .collect();
                let (mean, se) = mean_and_se(&draws);
                (mean, se, se * (n as f64).sqrt())
            })
            .collect()
    }

    #[test]
    fn moments_match_monte_carlo() {
        let mut r = rng(12);
        for trial in 0..20 {
            let in_dim = r.random_range(1..5);
            let out_dim = r.random_range(1..4);
            let mut layer = init_bayesian_linear(in_dim, out_dim, &mut r, 0.05).unwrap();
            layer.w_rho = Tensor::matrix(in_dim, out_dim, (0..in_dim * out_dim).map(|_| r.random_range(-2.0..0.5)).collect()).unwrap();
            layer.b_rho = Tensor::vector((0..out_dim).map(|_| r.random_range(-2.0..0.5)).collect());
            layer.b_mu = Tensor::vector((0..out_dim).map(|_| r.random_range(-1.0..1.0)).collect());
            let x: Vec<f64> = (0..in_dim).map(|_| r.random_range(-2.0..2.0)).collect();
            let mut g = Graph::new();
            let bound = layer.bind(&mut g, false, true).unwrap();
            let xv = g.constant(Tensor::matrix(1, in_dim, x.clone()).unwrap()).unwrap();
            let m = bound.propagate_moments(&mut g, xv).unwrap();
            // one full-size run, the rest at 10⁵ where the 2% std bound is still > 9 SE
            let n = if trial == 0 { 1_000_000 } else { 100_000 };
            for (j, (mean, se, std)) in monte_carlo_moments(&layer, &x, n, &mut r).into_iter().enumerate() {
                assert!((mean - g.value(m.mean).at(0, j)).abs() < 4.0 * se, "trial {trial}");
                assert!((std / g.value(m.std).at(0, j) - 1.0).abs() < 0.02, "trial {trial}");
            }
        }
    }

    #[test]
    fn degenerate_prior_gives_zero_kl() {
        let sigma = 0.1;
        let prior = ScaleMixturePrior::new(0.5, sigma, sigma).unwrap();
        let mut layer = init_bayesian_linear(4, 3, &mut rng(13), sigma).unwrap();
        layer.w_mu = Tensor::zeros(&[4, 3]);
        let mut g = Graph::new();
        let bound = layer.bind(&mut g, true, true).unwrap();
        let mut r = rng(14);
        let samples: Vec<RealizedWeights> = (0..10).map(|_| bound.sample_weights(&mut g, &mut r).unwrap()).collect();
        let kl = layer_prior_kl(&mut g, &bound, &prior, &samples).unwrap();
        assert!(g.item(kl).abs() < 1e-9);
        assert!(layer_prior_kl(&mut g, &bound, &prior, &[]).is_err());
    }

    fn chunked_prior_kl(layer: &BayesianLinear, prior: &ScaleMixturePrior, total: usize, r: &mut ChaCha8Rng) -> (f64, f64) {
        let chunk = 1000;
        let estimates: Vec<f64> = (0..total / chunk)
            .map(|_| {
                let mut g = Graph::new();
                let bound = layer.bind(&mut g, false, true).unwrap();
                let samples: Vec<RealizedWeights> = (0..chunk).map(|_| bound.sample_weights(&mut g, r).unwrap()).collect();
                let kl = layer_prior_kl(&mut g, &bound, prior, &samples).unwrap();
                g.item(kl)
            })
            .collect();
        mean_and_se(&estimates)
    }

    #[test]
    fn prior_kl_is_additive_over_entries() {
        let prior = ScaleMixturePrior::default();
        let layer = |in_dim: usize| {
            let mut l = init_bayesian_linear(in_dim, 8, &mut rng(1), 0.05).unwrap();
            l.w_mu = Tensor::full(&[in_dim, 8], 0.2);
            l.b_mu = Tensor::full(&[8], 0.2);
            l
        };
        let (small, large) = (layer(7), layer(15));
        assert_eq!(large.num_entries(), 2 * small.num_entries());
        let mut r = rng(15);
        let (ks, se_s) = chunked_prior_kl(&small, &prior, 100_000, &mut r);
        let (kl, _) = chunked_prior_kl(&large, &prior, 100_000, &mut r);
        assert!((kl / ks - 2.0).abs() < 0.1, "{ks} {kl}");
        assert!(ks >= -3.0 * se_s);
    }
}
