//! Self-contained numerical checks behind `bdil verify`.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bayes_layers::{init_bayesian_linear, BayesianLinear};
use crate::data::{Episode, SourceSet};
use crate::distributions::quadrature::{kl_gaussian_1d_numeric, kl_gaussian_to_mixture_numeric};
use crate::distributions::{kl_categorical, kl_diag_gaussian, Categorical, DiagGaussian};
use crate::model::{build_network, Network, NetworkConfig, Variant};
use crate::objective::{total_objective, Noise, ObjectiveConfig};
use crate::tensor::{finite_difference_check, Graph, Tensor};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl Check {
    /// Passes when `measured <= threshold`.
    fn at_most(name: &'static str, measured: f64, threshold: f64, started: Instant) -> Self {
        Self {
            name,
            measured,
            threshold,
            passed: measured <= threshold,
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<26} measured {:.3e}  threshold {:.1e}  ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.threshold,
            self.seconds
        )
    }
}

fn rng(seed: u64, check: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(check);
    r
}

fn random_probs(r: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| r.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

fn mix(parts: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; parts[0].len()];
    for (p, &wk) in parts.iter().zip(w) {
        for (o, &x) in out.iter_mut().zip(p) {
            *o += wk * x;
        }
    }
    out
}

fn cat(p: &[f64]) -> Categorical {
    Categorical::from_probs(p.to_vec()).expect("normalized by construction")
}

fn g1(m: f64, s: f64) -> DiagGaussian {
    DiagGaussian::new(vec![m], vec![s]).expect("positive std")
}

pub const MOMENT_LAYERS: usize = 20;
pub const MOMENT_DRAWS: usize = 1_000_000;

/// Per output: MC mean, its standard error, and the MC standard deviation of
/// `x·w + b` with every weight drawn independently from the posterior.
fn monte_carlo_moments(layer: &BayesianLinear, x: &[f64], n: usize, r: &mut ChaCha8Rng) -> Vec<(f64, f64, f64)> {
    let (ws, bs) = (layer.w_sigma(), layer.b_sigma());
    (0..layer.out_dim())
        .map(|j| {
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let mut y = layer.b_mu.data()[j] + bs.data()[j] * r.sample::<f64, _>(StandardNormal);
                for (i, &xi) in x.iter().enumerate() {
                    y += xi * (layer.w_mu.at(i, j) + ws.at(i, j) * r.sample::<f64, _>(StandardNormal));
                }
                s1 += y;
                s2 += y * y;
            }
            let nf = n as f64;
            let mean = s1 / nf;
            let var = (s2 - nf * mean * mean) / (nf - 1.0);
            (mean, (var / nf).sqrt(), var.sqrt())
        })
        .collect()
}

/// Propagated moments against Monte Carlo: worst mean deviation in standard
/// errors, and worst relative std error.
pub fn moment_propagation(seed: u64) -> Result<[Check; 2]> {
    let started = Instant::now();
    let mut r = rng(seed, 1);
    let (mut worst_z, mut worst_rel) = (0.0f64, 0.0f64);
    for _ in 0..MOMENT_LAYERS {
        let in_dim = r.random_range(1..5);
        let out_dim = r.random_range(1..4);
        let mut layer = init_bayesian_linear(in_dim, out_dim, &mut r, 0.05)?;
        layer.w_rho = Tensor::matrix(in_dim, out_dim, (0..in_dim * out_dim).map(|_| r.random_range(-2.0..0.5)).collect())?;
        layer.b_rho = Tensor::vector((0..out_dim).map(|_| r.random_range(-2.0..0.5)).collect());
        layer.b_mu = Tensor::vector((0..out_dim).map(|_| r.random_range(-1.0..1.0)).collect());
        let x: Vec<f64> = (0..in_dim).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let bound = layer.bind(&mut g, false, true)?;
        let xv = g.constant(Tensor::matrix(1, in_dim, x.clone())?)?;
        let m = bound.propagate_moments(&mut g, xv)?;
        for (j, (mean, se, std)) in monte_carlo_moments(&layer, &x, MOMENT_DRAWS, &mut r).into_iter().enumerate() {
            worst_z = worst_z.max((mean - g.value(m.mean).at(0, j)).abs() / se);
            worst_rel = worst_rel.max((std / g.value(m.std).at(0, j) - 1.0).abs());
        }
    }
    Ok([
        Check::at_most("moment_mean_std_errors", worst_z, 4.0, started),
        Check::at_most("moment_std_relative", worst_rel, 0.02, started),
    ])
}

/// `KL(r ‖ Σ w p) − Σ w KL(r ‖ p)` over 100 random categorical mixtures.
pub fn jensen_categorical(seed: u64) -> Result<Check> {
    let started = Instant::now();
    let mut r = rng(seed, 2);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let c = r.random_range(2..7);
        let k = r.random_range(2..6);
        let reference = cat(&random_probs(&mut r, c));
        let comps: Vec<Vec<f64>> = (0..k).map(|_| random_probs(&mut r, c)).collect();
        let w = random_probs(&mut r, k);
        let lhs = kl_categorical(&reference, &cat(&mix(&comps, &w)))?;
        let mut rhs = 0.0;
        for (p, wk) in comps.iter().zip(&w) {
            rhs += wk * kl_categorical(&reference, &cat(p))?;
        }
        worst = worst.max(lhs - rhs);
    }
    Ok(Check::at_most("jensen_categorical", worst, 1e-12, started))
}

/// `KL(Σ w p ‖ Σ w q) − Σ w KL(p ‖ q)` over 100 random categorical families.
pub fn convexity_categorical(seed: u64) -> Result<Check> {
    let started = Instant::now();
    let mut r = rng(seed, 3);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let c = r.random_range(2..7);
        let k = r.random_range(2..6);
        let ps: Vec<Vec<f64>> = (0..k).map(|_| random_probs(&mut r, c)).collect();
        let qs: Vec<Vec<f64>> = (0..k).map(|_| random_probs(&mut r, c)).collect();
        let w = random_probs(&mut r, k);
        let lhs = kl_categorical(&cat(&mix(&ps, &w)), &cat(&mix(&qs, &w)))?;
        let mut rhs = 0.0;
        for ((p, q), wk) in ps.iter().zip(&qs).zip(&w) {
            rhs += wk * kl_categorical(&cat(p), &cat(q))?;
        }
        worst = worst.max(lhs - rhs);
    }
    Ok(Check::at_most("convexity_categorical", worst, 1e-12, started))
}

/// Jensen bound for 20 Gaussian mixtures, the left side by quadrature.
pub fn jensen_gaussian_mixture(seed: u64) -> Result<Check> {
    let started = Instant::now();
    let mut r = rng(seed, 4);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..20 {
        let k = r.random_range(2..5);
        let (rm, rs) = (r.random_range(-2.0..2.0), r.random_range(0.3..2.0));
        let comps: Vec<(f64, f64)> = (0..k).map(|_| (r.random_range(-2.0..2.0), r.random_range(0.3..2.0))).collect();
        let w = random_probs(&mut r, k);
        let lhs = kl_gaussian_to_mixture_numeric(rm, rs, &comps, &w);
        let mut rhs = 0.0;
        for (&(m, s), wk) in comps.iter().zip(&w) {
            rhs += wk * kl_diag_gaussian(&g1(rm, rs), &g1(m, s))?;
        }
        worst = worst.max(lhs - rhs);
    }
    Ok(Check::at_most("jensen_gaussian_mixture", worst, 1e-6, started))
}

/// Closed-form Gaussian KL against quadrature on 50 random pairs, worst
/// relative error.
pub fn gaussian_kl_quadrature(seed: u64) -> Result<Check> {
    let started = Instant::now();
    let mut r = rng(seed, 5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (mp, sp) = (r.random_range(-3.0..3.0), r.random_range(0.2..3.0));
        let (mq, sq) = (r.random_range(-3.0..3.0), r.random_range(0.2..3.0));
        let closed = kl_diag_gaussian(&g1(mp, sp), &g1(mq, sq))?;
        let numeric = kl_gaussian_1d_numeric(mp, sp, mq, sq);
        worst = worst.max((closed - numeric).abs() / numeric.abs().max(1e-300));
    }
    Ok(Check::at_most("gaussian_kl_quadrature", worst, 1e-6, started))
}

/// The two-class episode used by the gradient check: `b` target rows and `s`
/// meta-sources with `n` rows per class.
pub fn tiny_episode(classes: usize, b: usize, s: usize, n: usize, seed: u64) -> Episode {
    let mut r = rng(seed, 6);
    let mut rows = |n: usize| Tensor::matrix(n, 2, (0..2 * n).map(|_| r.random_range(-3.0..3.0)).collect()).expect("shape");
    let sources = (0..s)
        .map(|k| SourceSet {
            domain_id: k + 1,
            per_class: (0..classes).map(|c| (c, rows(n))).collect::<BTreeMap<_, _>>(),
        })
        .collect();
    Episode {
        target_features: rows(b),
        target_labels: (0..b).map(|i| i % classes).collect(),
        target_domain: 0,
        sources,
    }
}

/// A network small enough for central differences over every parameter, with
/// posterior scales large enough that the noise paths matter.
pub fn tiny_network(variant: Variant, classes: usize, seed: u64) -> Result<Network> {
    let cfg = NetworkConfig {
        stem_widths: vec![6],
        z_dim: 4,
        classes,
        ..Default::default()
    };
    let mut net = build_network(&cfg, variant, &mut rng(seed, 7))?;
    for l in [&mut net.phi, &mut net.psi] {
        l.w_rho = l.w_rho.map(|_| -1.5);
        l.b_rho = l.b_rho.map(|_| -2.0);
    }
    Ok(net)
}

/// Worst relative error between backpropagated and central-difference
/// gradients of the full objective, noise replayed from `seed`. `fault`
/// corrupts one op's backward rule.
pub fn objective_gradient_error(net: &Network, ep: &Episode, cfg: &ObjectiveConfig, seed: u64, fault: Option<&'static str>) -> Result<f64> {
    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_fault(op);
    }
    let out = total_objective(&mut g, net, ep, cfg, &mut Noise::seeded(seed))?;
    g.backward(out.total)?;
    let vars = out.net.trainable();
    let sizes: Vec<usize> = vars.iter().map(|&v| g.value(v).len()).collect();
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| g.grad_or_zeros(v).data().to_vec()).collect();
    let start: Vec<f64> = net.clone().trainable_mut().iter().flat_map(|t| t.data().to_vec()).collect();
    let f = |flat: &[f64]| {
        let mut n = net.clone();
        let mut off = 0;
        for (t, &len) in n.trainable_mut().into_iter().zip(&sizes) {
            t.data_mut().copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        let mut g = Graph::new();
        total_objective(&mut g, &n, ep, cfg, &mut Noise::seeded(seed))
            .map(|o| o.breakdown.total)
            .unwrap_or(f64::NAN)
    };
    Ok(finite_difference_check(f, &start, &analytic, 1e-6).max_rel_error)
}

/// Full-objective gradient check for variant (j) on a 2-class, B=4, L=M=2 episode.
pub fn objective_gradient(seed: u64, fault: Option<&'static str>) -> Result<Check> {
    let started = Instant::now();
    let ep = tiny_episode(2, 4, 2, 2, seed);
    let net = tiny_network(Variant::from_id('j')?, 2, seed)?;
    let cfg = ObjectiveConfig { l: 2, m: 2, ..Default::default() };
    let err = objective_gradient_error(&net, &ep, &cfg, seed, fault)?;
    Ok(Check::at_most("objective_gradient", if err.is_nan() { f64::INFINITY } else { err }, 1e-4, started))
}

/// Every bundled check in report order.
pub fn run_checks(seed: u64, fault: Option<&'static str>) -> Result<Vec<Check>> {
    let mut out = moment_propagation(seed)?.to_vec();
    out.push(jensen_categorical(seed)?);
    out.push(convexity_categorical(seed)?);
    out.push(jensen_gaussian_mixture(seed)?);
    out.push(gaussian_kl_quadrature(seed)?);
    out.push(objective_gradient(seed, fault)?);
    Ok(out)
}
