//! The network: a deterministic ReLU stem, a Bayesian feature layer `φ` and a
//! Bayesian classifier `ψ`, plus Monte Carlo predictive inference.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::bayes_layers::{
    forward_sampled, init_bayesian_linear, BayesianLinear, BoundBayesianLinear, BoundLinear, DeterministicLinear,
    GaussianActivations, RealizedWeights, DEFAULT_INIT_SIGMA,
};
use crate::checkpoint::Checkpoint;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Standard deviation substituted for a non-Bayesian `φ` wherever a feature
/// distribution is needed.
pub const EPS_STD: f64 = 1e-6;

/// One row of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub id: char,
    pub psi_bayesian: bool,
    pub psi_invariant: bool,
    pub phi_bayesian: bool,
    pub phi_invariant: bool,
}

const TABLE: [(char, [bool; 4]); 10] = [
    ('a', [false, false, false, false]),
    ('b', [true, false, false, false]),
    ('c', [false, true, false, false]),
    ('d', [true, true, false, false]),
    ('e', [false, false, true, false]),
    ('f', [false, false, false, true]),
    ('g', [false, false, true, true]),
    ('h', [true, false, true, false]),
    ('i', [false, true, false, true]),
    ('j', [true, true, true, true]),
];

impl Variant {
    /// Flags in the order `(psi_bayesian, psi_invariant, phi_bayesian, phi_invariant)`.
    pub fn from_id(id: char) -> Result<Self> {
        TABLE
            .iter()
            .find(|(c, _)| *c == id)
            .map(|&(c, [pb, pi, fb, fi])| Self {
                id: c,
                psi_bayesian: pb,
                psi_invariant: pi,
                phi_bayesian: fb,
                phi_invariant: fi,
            })
            .ok_or_else(|| Error::Config(format!("unknown variant {id:?}, expected a..j")))
    }

    pub fn all() -> Vec<Self> {
        TABLE.iter().map(|(c, _)| Self::from_id(*c).expect("table entry")).collect()
    }

    pub fn flags(&self) -> [bool; 4] {
        [self.psi_bayesian, self.psi_invariant, self.phi_bayesian, self.phi_invariant]
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id)
    }
}

/// How the feature sample fed to `ψ` in the classifier invariance term is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ZMode {
    #[default]
    Sample,
    Mean,
}

impl FromStr for ZMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Self::Sample),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::Config(format!("invariance_z_mode must be sample or mean, got {s:?}"))),
        }
    }
}

impl fmt::Display for ZMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sample => "sample",
            Self::Mean => "mean",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub stem_widths: Vec<usize>,
    pub z_dim: usize,
    pub classes: usize,
    pub init_sigma: f64,
    /// Adds a Bayesian `h → h` layer (with ReLU) between the stem and `φ`.
    /// It is sampled alongside `φ` but enters feature distributions at its mean.
    pub extra_bayesian_layer: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            stem_widths: vec![64, 64],
            z_dim: 16,
            classes: 3,
            init_sigma: DEFAULT_INIT_SIGMA,
            extra_bayesian_layer: false,
        }
    }
}

impl NetworkConfig {
    pub fn h_dim(&self) -> usize {
        *self.stem_widths.last().unwrap_or(&self.input_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub variant: Variant,
    pub stem: Vec<DeterministicLinear>,
    pub extra: Option<BayesianLinear>,
    pub phi: BayesianLinear,
    pub psi: BayesianLinear,
}

pub fn build_network<R: Rng + ?Sized>(cfg: &NetworkConfig, variant: Variant, rng: &mut R) -> Result<Network> {
    if cfg.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.input_dim == 0 || cfg.z_dim == 0 || cfg.stem_widths.is_empty() || cfg.stem_widths.contains(&0) {
        return Err(Error::Config("network dimensions must be ≥ 1 and the stem nonempty".into()));
    }
    let mut stem = Vec::with_capacity(cfg.stem_widths.len());
    let mut width = cfg.input_dim;
    for &w in &cfg.stem_widths {
        stem.push(DeterministicLinear::init(width, w, rng)?);
        width = w;
    }
    let extra = if cfg.extra_bayesian_layer {
        Some(init_bayesian_linear(width, width, rng, cfg.init_sigma)?)
    } else {
        None
    };
    let phi = init_bayesian_linear(width, cfg.z_dim, rng, cfg.init_sigma)?;
    let psi = init_bayesian_linear(cfg.z_dim, cfg.classes, rng, cfg.init_sigma)?;
    Ok(Network {
        config: cfg.clone(),
        variant,
        stem,
        extra,
        phi,
        psi,
    })
}

impl Network {
    /// Weight and bias entries whose posterior is stochastic under the variant.
    pub fn stochastic_parameter_count(&self) -> usize {
        let mut n = 0;
        if self.variant.phi_bayesian {
            n += self.phi.num_entries() + self.extra.as_ref().map_or(0, |e| e.num_entries());
        }
        if self.variant.psi_bayesian {
            n += self.psi.num_entries();
        }
        n
    }

    /// Weight entries over all layers (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.stem.iter().map(|l| l.w.len()).sum::<usize>()
            + self.extra.as_ref().map_or(0, |e| e.w_mu.len())
            + self.phi.w_mu.len()
            + self.psi.w_mu.len()
    }

    /// Trainable tensors in a fixed order shared with [`BoundNetwork::trainable`].
    /// `ρ` of a non-Bayesian layer is not trainable.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let (fb, pb) = (self.variant.phi_bayesian, self.variant.psi_bayesian);
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.stem {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        fn bayes<'a>(l: &'a mut BayesianLinear, stochastic: bool, out: &mut Vec<&'a mut Tensor>) {
            let BayesianLinear { w_mu, w_rho, b_mu, b_rho } = l;
            out.push(w_mu);
            out.push(b_mu);
            if stochastic {
                out.push(w_rho);
                out.push(b_rho);
            }
        }
        if let Some(e) = self.extra.as_mut() {
            bayes(e, fb, &mut out);
        }
        bayes(&mut self.phi, fb, &mut out);
        bayes(&mut self.psi, pb, &mut out);
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundNetwork> {
        let v = self.variant;
        let stem = self.stem.iter().map(|l| l.bind(g, trainable)).collect::<Result<Vec<_>>>()?;
        let extra = match &self.extra {
            Some(e) => Some(e.bind(g, trainable, v.phi_bayesian)?),
            None => None,
        };
        Ok(BoundNetwork {
            stem,
            extra,
            phi: self.phi.bind(g, trainable, v.phi_bayesian)?,
            psi: self.psi.bind(g, trainable, v.psi_bayesian)?,
            variant: v,
            z_dim: self.config.z_dim,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::default();
        ck.push_meta("variant", self.variant.id);
        ck.push_meta("input_dim", c.input_dim);
        let widths: Vec<String> = c.stem_widths.iter().map(|w| w.to_string()).collect();
        ck.push_meta("stem_widths", widths.join(","));
        ck.push_meta("z_dim", c.z_dim);
        ck.push_meta("classes", c.classes);
        ck.push_meta("init_sigma", format!("{:?}", c.init_sigma));
        ck.push_meta("extra_bayesian_layer", c.extra_bayesian_layer);
        for (i, l) in self.stem.iter().enumerate() {
            l.export(&format!("stem.{i}"), &mut ck);
        }
        if let Some(e) = &self.extra {
            e.export("extra", &mut ck);
        }
        self.phi.export("phi", &mut ck);
        self.psi.export("psi", &mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        fn num<T: FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
            let v = ck.meta(key)?;
            v.parse().map_err(|_| Error::Checkpoint(format!("bad value {v:?} for {key}")))
        }
        let id = ck.meta("variant")?;
        let mut chars = id.chars();
        let variant = match (chars.next(), chars.next()) {
            (Some(c), None) => Variant::from_id(c)?,
            _ => return Err(Error::Checkpoint(format!("bad variant {id:?}"))),
        };
        let stem_widths = ck
            .meta("stem_widths")?
            .split(',')
            .map(|w| w.parse().map_err(|_| Error::Checkpoint(format!("bad stem width {w:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        let config = NetworkConfig {
            input_dim: num(ck, "input_dim")?,
            stem_widths,
            z_dim: num(ck, "z_dim")?,
            classes: num(ck, "classes")?,
            init_sigma: num(ck, "init_sigma")?,
            extra_bayesian_layer: num(ck, "extra_bayesian_layer")?,
        };
        let stem = (0..config.stem_widths.len())
            .map(|i| DeterministicLinear::import(&format!("stem.{i}"), ck))
            .collect::<Result<Vec<_>>>()?;
        let extra = if config.extra_bayesian_layer {
            Some(BayesianLinear::import("extra", ck)?)
        } else {
            None
        };
        let net = Network {
            phi: BayesianLinear::import("phi", ck)?,
            psi: BayesianLinear::import("psi", ck)?,
            config,
            variant,
            stem,
            extra,
        };
        net.check_topology()?;
        Ok(net)
    }

    fn check_topology(&self) -> Result<()> {
        let c = &self.config;
        let mut width = c.input_dim;
        for (i, l) in self.stem.iter().enumerate() {
            if l.in_dim() != width || l.out_dim() != c.stem_widths[i] {
                return Err(Error::Checkpoint(format!("stem.{i} has shape {}×{}", l.in_dim(), l.out_dim())));
            }
            width = l.out_dim();
        }
        if let Some(e) = &self.extra {
            if e.in_dim() != width || e.out_dim() != width {
                return Err(Error::Checkpoint("extra layer does not match stem width".into()));
            }
        }
        if self.phi.in_dim() != width || self.phi.out_dim() != c.z_dim {
            return Err(Error::Checkpoint("phi does not match topology".into()));
        }
        if self.psi.in_dim() != c.z_dim || self.psi.out_dim() != c.classes {
            return Err(Error::Checkpoint("psi does not match topology".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Realized weights of the `φ` block for one sample index `m`.
#[derive(Clone, Debug)]
pub struct PhiSample {
    pub extra: Option<RealizedWeights>,
    pub phi: RealizedWeights,
}

/// Weight samples for one forward pass. A non-Bayesian layer contributes a
/// single realization at its mean.
#[derive(Clone, Debug)]
pub struct McSamples {
    pub phi: Vec<PhiSample>,
    pub psi: Vec<RealizedWeights>,
}

/// A [`Network`] attached to a graph.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub stem: Vec<BoundLinear>,
    pub extra: Option<BoundBayesianLinear>,
    pub phi: BoundBayesianLinear,
    pub psi: BoundBayesianLinear,
    pub variant: Variant,
    z_dim: usize,
}

impl BoundNetwork {
    pub fn trainable(&self) -> Vec<Var> {
        let (fb, pb) = (self.variant.phi_bayesian, self.variant.psi_bayesian);
        let mut out = Vec::new();
        for l in &self.stem {
            out.extend([l.w, l.b]);
        }
        let bayes = |l: &BoundBayesianLinear, stochastic: bool, out: &mut Vec<Var>| {
            out.extend([l.w_mu, l.b_mu]);
            if stochastic {
                out.extend([l.w_rho, l.b_rho]);
            }
        };
        if let Some(e) = &self.extra {
            bayes(e, fb, &mut out);
        }
        bayes(&self.phi, fb, &mut out);
        bayes(&self.psi, pb, &mut out);
        out
    }

    /// Stem output `h`: ReLU after every stem layer.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.stem {
            let a = l.forward(g, h)?;
            h = g.relu(a)?;
        }
        Ok(h)
    }

    /// Draws `M` samples of `φ` (each with its extra layer), then `L` of `ψ`.
    pub fn draw_samples<R: Rng + ?Sized>(&self, g: &mut Graph, l: usize, m: usize, rng: &mut R) -> Result<McSamples> {
        if l == 0 || m == 0 {
            return Err(Error::Config("L and M must be ≥ 1".into()));
        }
        let v = self.variant;
        let phi = if v.phi_bayesian {
            (0..m)
                .map(|_| {
                    let extra = match &self.extra {
                        Some(e) => Some(e.sample_weights(g, rng)?),
                        None => None,
                    };
                    Ok(PhiSample {
                        extra,
                        phi: self.phi.sample_weights(g, rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![PhiSample {
                extra: self.extra.as_ref().map(|e| e.mean_weights()),
                phi: self.phi.mean_weights(),
            }]
        };
        let psi = if v.psi_bayesian {
            (0..l).map(|_| self.psi.sample_weights(g, rng)).collect::<Result<Vec<_>>>()?
        } else {
            vec![self.psi.mean_weights()]
        };
        Ok(McSamples { phi, psi })
    }

    pub fn mean_samples(&self) -> McSamples {
        McSamples {
            phi: vec![PhiSample {
                extra: self.extra.as_ref().map(|e| e.mean_weights()),
                phi: self.phi.mean_weights(),
            }],
            psi: vec![self.psi.mean_weights()],
        }
    }

    fn extra_forward(g: &mut Graph, extra: Option<&RealizedWeights>, h: Var) -> Result<Var> {
        match extra {
            Some(w) => {
                let a = forward_sampled(g, w, h)?;
                Ok(g.relu(a)?)
            }
            None => Ok(h),
        }
    }

    /// Logits for every `(ℓ, m)` pair stacked as `[L·M·B × C]`, ordered
    /// `ℓ`-major then `m` then row.
    pub fn mc_logits(&self, g: &mut Graph, h: Var, samples: &McSamples) -> Result<Var> {
        let zs = samples
            .phi
            .iter()
            .map(|s| {
                let h2 = Self::extra_forward(g, s.extra.as_ref(), h)?;
                forward_sampled(g, &s.phi, h2)
            })
            .collect::<Result<Vec<_>>>()?;
        let z = if zs.len() == 1 { zs[0] } else { g.concat_rows(&zs)? };
        let logits = samples.psi.iter().map(|w| forward_sampled(g, w, z)).collect::<Result<Vec<_>>>()?;
        Ok(if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? })
    }

    /// Per-row Gaussian over `z`. A non-Bayesian `φ` gets `std = EPS_STD`.
    pub fn feature_distribution(&self, g: &mut Graph, h: Var) -> Result<GaussianActivations> {
        let h = match &self.extra {
            Some(e) => Self::extra_forward(g, Some(&e.mean_weights()), h)?,
            None => h,
        };
        if self.variant.phi_bayesian {
            self.phi.propagate_moments(g, h)
        } else {
            let mean = forward_sampled(g, &self.phi.mean_weights(), h)?;
            let rows = g.shape(mean)[0];
            let std = g.constant(Tensor::full(&[rows, self.z_dim], EPS_STD))?;
            Ok(GaussianActivations { mean, std })
        }
    }

    /// `z = mean + ε ⊙ std` with one `ε ∈ R^z` shared by every row.
    pub fn sample_features<R: Rng + ?Sized>(&self, g: &mut Graph, dist: &GaussianActivations, rng: &mut R) -> Result<Var> {
        let eps: Vec<f64> = (0..self.z_dim).map(|_| rng.sample(StandardNormal)).collect();
        let e = g.constant(Tensor::vector(eps))?;
        let noise = g.mul(dist.std, e)?;
        Ok(g.add(dist.mean, noise)?)
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[B × C]`, rows sum to one.
    pub probs: Tensor,
    /// `[L × M × B × C]` where a non-Bayesian layer contributes one sample.
    pub per_sample_logits: Tensor,
}

fn softmax_average(logits: &Tensor, rows: usize) -> Tensor {
    let c = logits.cols();
    let samples = logits.rows() / rows;
    let mut probs = vec![0.0; rows * c];
    for (k, row) in logits.data().chunks(c).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let dst = &mut probs[(k % rows) * c..(k % rows + 1) * c];
        for (p, e) in dst.iter_mut().zip(&exps) {
            *p += e / z;
        }
    }
    for p in &mut probs {
        *p /= samples as f64;
    }
    Tensor::matrix(rows, c, probs).expect("sized")
}

fn predict_with(net: &Network, x: &Tensor, draw: impl FnOnce(&BoundNetwork, &mut Graph) -> Result<McSamples>) -> Result<Prediction> {
    if x.rank() != 2 || x.cols() != net.config.input_dim {
        return Err(Error::Config(format!("input shape {:?}, expected [B × {}]", x.shape(), net.config.input_dim)));
    }
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false)?;
    let xv = g.constant(x.clone())?;
    let h = bound.features(&mut g, xv)?;
    let samples = draw(&bound, &mut g)?;
    let (l, m) = (samples.psi.len(), samples.phi.len());
    let logits = bound.mc_logits(&mut g, h, &samples)?;
    let value = g.value(logits);
    let rows = x.rows();
    Ok(Prediction {
        probs: softmax_average(value, rows),
        per_sample_logits: value.reshape(&[l, m, rows, net.config.classes])?,
    })
}

/// MC predictive: mean over `(ℓ, m)` of `softmax(ψ⁽ℓ⁾ · φ⁽ᵐ⁾(h))`.
pub fn predict_mc<R: Rng + ?Sized>(net: &Network, x: &Tensor, l: usize, m: usize, rng: &mut R) -> Result<Prediction> {
    predict_with(net, x, |b, g| b.draw_samples(g, l, m, rng))
}

/// Prediction with every layer at its posterior mean.
pub fn predict_map(net: &Network, x: &Tensor) -> Result<Prediction> {
    predict_with(net, x, |b, _| Ok(b.mean_samples()))
}
