//! The training loss: MC cross-entropy, classifier and representation
//! invariance over class-matched pairs, and prior KLs.
//!
//! `total = ce + λ_ψ·inv_psi + λ_φ·inv_phi + kl_scale·(kl_psi + kl_phi)`,
//! each term gated by the variant.

use rand::Rng;
use serde::Serialize;

use crate::bayes_layers::{layer_prior_kl, GaussianActivations, RealizedWeights};
use crate::data::{DataError, Episode};
use crate::distributions::{ops as dist_ops, ScaleMixturePrior};
use crate::model::{BoundNetwork, Network, ZMode};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub l: usize,
    pub m: usize,
    pub lambda_psi: f64,
    pub lambda_phi: f64,
    pub kl_scale: f64,
    pub prior: ScaleMixturePrior,
    pub z_mode: ZMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            l: 10,
            m: 10,
            lambda_psi: 100.0,
            lambda_phi: 0.1,
            kl_scale: 1.0,
            prior: ScaleMixturePrior::default(),
            z_mode: ZMode::Sample,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub inv_psi: f64,
    pub inv_phi: f64,
    pub kl_psi: f64,
    pub kl_phi: f64,
    pub total: f64,
    pub lambda_psi: f64,
    pub lambda_phi: f64,
    pub kl_scale: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ce={} inv_psi={} inv_phi={} kl_psi={} kl_phi={} total={}",
            self.ce, self.inv_psi, self.inv_phi, self.kl_psi, self.kl_phi, self.total
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Ce,
    InvPsi,
    InvPhi,
    KlPsi,
    KlPhi,
}

/// Mean over rows of `−log softmax(logits)[label]`. `logits` is `[K × C]` with
/// `K` a multiple of `labels.len()`; row `k` carries `labels[k % B]`.
pub fn cross_entropy_mc(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || labels.is_empty() || !shape[0].is_multiple_of(labels.len()) {
        return Err(Error::Config(format!("logits {shape:?} do not tile {} labels", labels.len())));
    }
    let (k, c) = (shape[0], shape[1]);
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Config(format!("label {bad} out of range for {c} classes")));
    }
    let mut mask = vec![0.0; k * c];
    for r in 0..k {
        mask[r * c + labels[r % labels.len()]] = 1.0;
    }
    let lsm = g.log_softmax(logits)?;
    let m = g.constant(Tensor::matrix(k, c, mask)?)?;
    let picked = g.mul(lsm, m)?;
    let s = g.sum(picked)?;
    Ok(g.scale(s, -1.0 / k as f64)?)
}

/// Class-matched (target row, source row) comparisons over a stacked batch.
/// The weights sum to one and average over target rows, meta-source domains
/// and the rows available in each class set.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairs {
    pub target: Vec<usize>,
    pub source: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Pairs {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// The same comparisons grouped by class set: link `k` compares target row
/// `link_target[k]` with every row of group `link_group[k]`, and the group
/// average is weighted by `link_weight[k]`. The losses only ever need group
/// statistics, so their cost scales with links rather than pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Groups {
    /// Stacked rows that belong to some group.
    pub source_rows: Vec<usize>,
    /// `[groups × source_rows]`, row `g` holds `1/|g|` on its members.
    pub average: Tensor,
    pub link_target: Vec<usize>,
    pub link_group: Vec<usize>,
    pub link_weight: Vec<f64>,
}

impl Groups {
    pub fn num_groups(&self) -> usize {
        self.average.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.link_weight.is_empty()
    }

    /// Members of each group as stacked row indices.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let n = self.source_rows.len();
        (0..self.num_groups())
            .map(|g| {
                let row = &self.average.data()[g * n..(g + 1) * n];
                row.iter().zip(&self.source_rows).filter(|(w, _)| **w != 0.0).map(|(_, &r)| r).collect()
            })
            .collect()
    }

    /// Expands every link into its individual pairs.
    pub fn pairs(&self) -> Pairs {
        let members = self.members();
        let mut pairs = Pairs { target: Vec::new(), source: Vec::new(), weights: Vec::new() };
        for ((&t, &grp), &w) in self.link_target.iter().zip(&self.link_group).zip(&self.link_weight) {
            let rows = &members[grp];
            for &s in rows {
                pairs.target.push(t);
                pairs.source.push(s);
                pairs.weights.push(w / rows.len() as f64);
            }
        }
        pairs
    }
}

impl From<&Pairs> for Groups {
    /// One singleton group per pair.
    fn from(p: &Pairs) -> Self {
        let n = p.len();
        let mut average = Tensor::zeros(&[n, n]);
        for k in 0..n {
            average.data_mut()[k * n + k] = 1.0;
        }
        Groups {
            source_rows: p.source.clone(),
            average,
            link_target: p.target.clone(),
            link_group: (0..n).collect(),
            link_weight: p.weights.clone(),
        }
    }
}

/// Meta-target rows first, then each meta-source's class sets in order.
#[derive(Clone, Debug)]
pub struct StackedEpisode {
    pub features: Tensor,
    pub batch: usize,
    pub groups: Groups,
}

pub fn stack_episode(ep: &Episode) -> Result<StackedEpisode> {
    let b = ep.batch_size();
    let s = ep.num_sources();
    let mut parts: Vec<&Tensor> = vec![&ep.target_features];
    let mut offset = b;
    // (source, class) → group index
    let mut index = Vec::with_capacity(s);
    let mut spans = Vec::new();
    for src in &ep.sources {
        let mut map = std::collections::BTreeMap::new();
        for (&c, rows) in &src.per_class {
            if rows.rows() > 0 {
                map.insert(c, spans.len());
                spans.push((offset - b, rows.rows()));
            }
            offset += rows.rows();
            parts.push(rows);
        }
        index.push(map);
    }
    let features = Tensor::concat_rows(&parts)?;
    let n_src = offset - b;
    let mut average = Tensor::zeros(&[spans.len(), n_src]);
    for (grp, &(start, n)) in spans.iter().enumerate() {
        average.data_mut()[grp * n_src + start..grp * n_src + start + n].fill(1.0 / n as f64);
    }
    let mut groups = Groups {
        source_rows: (b..offset).collect(),
        average,
        link_target: Vec::new(),
        link_group: Vec::new(),
        link_weight: Vec::new(),
    };
    let w = 1.0 / (b * s) as f64;
    for (t, &y) in ep.target_labels.iter().enumerate() {
        for (src, map) in ep.sources.iter().zip(&index) {
            let &grp = map.get(&y).ok_or(DataError::MissingClass {
                class: y,
                domain: src.domain_id,
            })?;
            groups.link_target.push(t);
            groups.link_group.push(grp);
            groups.link_weight.push(w);
        }
    }
    Ok(StackedEpisode { features, batch: b, groups })
}

fn weighted_sum(g: &mut Graph, per_pair: Var, weights: &[f64]) -> Result<Var> {
    let w = g.constant(Tensor::vector(weights.to_vec()))?;
    let t = g.mul(per_pair, w)?;
    Ok(g.sum(t)?)
}

fn check_groups(groups: &Groups) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::Config("no class-matched pairs".into()));
    }
    Ok(())
}

/// Average over `ψ⁽ℓ⁾` and pairs of `KL(softmax(ψ⁽ℓ⁾ z_t) ‖ softmax(ψ⁽ℓ⁾ z_s))`.
/// `z[ℓ]` holds the stacked feature rows used with `psi[ℓ]`.
///
/// The KL is linear in `log q`, so a link's average over its group is one KL
/// against the group-mean log-probabilities.
pub fn classifier_invariance_loss(g: &mut Graph, psi: &[RealizedWeights], z: &[Var], groups: &Groups) -> Result<Var> {
    if psi.is_empty() || psi.len() != z.len() {
        return Err(Error::Config(format!("{} ψ samples for {} feature samples", psi.len(), z.len())));
    }
    check_groups(groups)?;
    let average = g.constant(groups.average.clone())?;
    let mut total: Option<Var> = None;
    for (w, &zl) in psi.iter().zip(z) {
        let logits = crate::bayes_layers::forward_sampled(g, w, zl)?;
        let lsm = g.log_softmax(logits)?;
        let src = g.gather_rows(lsm, &groups.source_rows)?;
        let mean_lq = g.matmul(average, src)?;
        let lp = g.gather_rows(lsm, &groups.link_target)?;
        let lq = g.gather_rows(mean_lq, &groups.link_group)?;
        let kl = dist_ops::kl_categorical_rows(g, lp, lq)?;
        let term = weighted_sum(g, kl, &groups.link_weight)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(g.div_scalar(total.expect("nonempty"), psi.len() as f64)?)
}

/// Average over pairs of the closed-form Gaussian KL between feature distributions.
///
/// Per dimension, with `a = 1/σ_s²` and the `a`-weighted group mean `μ̄`,
/// `Σ_s a (μ_t − μ_s)² = Σ_s a · (μ_t − μ̄)² + Σ_s a (μ_s − μ̄)²`. Both parts are
/// sums of squares, so near-deterministic features do not cancel.
pub fn representation_invariance_loss(g: &mut Graph, dist: &GaussianActivations, groups: &Groups) -> Result<Var> {
    check_groups(groups)?;
    let average = g.constant(groups.average.clone())?;
    let rows = &groups.source_rows;
    let mu_s = g.gather_rows(dist.mean, rows)?;
    let sd_s = g.gather_rows(dist.std, rows)?;
    let var_s = g.square(sd_s)?;
    let one = g.scalar(1.0)?;
    let a = g.div(one, var_s)?;
    let log_sd_s = g.log(sd_s)?;
    let a_mu = g.mul(a, mu_s)?;

    let mean_log_sd = g.matmul(average, log_sd_s)?;
    let mean_a = g.matmul(average, a)?;
    let mean_a_mu = g.matmul(average, a_mu)?;
    let centre = g.div(mean_a_mu, mean_a)?;

    let member_group: Vec<usize> = {
        let mut of = vec![0; rows.len()];
        let n = rows.len();
        for (grp, row) in groups.average.data().chunks_exact(n).enumerate() {
            for (slot, &w) in of.iter_mut().zip(row) {
                if w != 0.0 {
                    *slot = grp;
                }
            }
        }
        of
    };
    let centre_s = g.gather_rows(centre, &member_group)?;
    let dev = g.sub(mu_s, centre_s)?;
    let dev2 = g.square(dev)?;
    let spread = g.mul(a, dev2)?;
    let mean_spread = g.matmul(average, spread)?;

    let t = &groups.link_target;
    let k = &groups.link_group;
    let mu_t = g.gather_rows(dist.mean, t)?;
    let sd_t = g.gather_rows(dist.std, t)?;
    let var_t = g.square(sd_t)?;
    let log_sd_t = g.log(sd_t)?;
    let l_log_sd = g.gather_rows(mean_log_sd, k)?;
    let l_a = g.gather_rows(mean_a, k)?;
    let l_centre = g.gather_rows(centre, k)?;
    let l_spread = g.gather_rows(mean_spread, k)?;

    let log_ratio = g.sub(l_log_sd, log_sd_t)?;
    let var_ratio = g.mul(var_t, l_a)?;
    let off = g.sub(mu_t, l_centre)?;
    let off2 = g.square(off)?;
    let shift = g.mul(l_a, off2)?;
    let quad = g.add(var_ratio, shift)?;
    let quad = g.add(quad, l_spread)?;
    let quad = g.add_scalar(quad, -1.0)?;
    let half = g.scale(quad, 0.5)?;
    let per_dim = g.add(log_ratio, half)?;
    let kl = g.sum_axis(per_dim, 1)?;
    weighted_sum(g, kl, &groups.link_weight)
}

/// Generators for one objective evaluation: weight samples come from
/// `weights`, feature samples for the classifier invariance term from
/// `features`. Keeping them apart means gating that term off leaves every
/// weight sample unchanged.
#[derive(Clone, Debug)]
pub struct Noise<R> {
    pub weights: R,
    pub features: R,
}

impl Noise<rand_chacha::ChaCha8Rng> {
    pub fn seeded(seed: u64) -> Self {
        use rand::SeedableRng;
        let mut weights = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut features = weights.clone();
        weights.set_stream(0);
        features.set_stream(1);
        Self { weights, features }
    }
}

pub struct ObjectiveOutput {
    pub breakdown: LossBreakdown,
    pub total: Var,
    pub terms: Vec<Term>,
    pub net: BoundNetwork,
}

/// Builds the full loss on `g`. Weight noise is drawn as `M` `φ` samples then
/// `L` `ψ` samples; feature noise as one vector per `ψ` sample.
pub fn total_objective<R: Rng>(
    g: &mut Graph,
    net: &Network,
    episode: &Episode,
    cfg: &ObjectiveConfig,
    noise: &mut Noise<R>,
) -> Result<ObjectiveOutput> {
    let v = net.variant;
    let invariant = v.psi_invariant || v.phi_invariant;
    let bound = net.bind(g, true)?;
    let b = episode.batch_size();

    let (x, groups) = if invariant {
        let st = stack_episode(episode)?;
        (st.features, Some(st.groups))
    } else {
        (episode.target_features.clone(), None)
    };
    let xv = g.constant(x)?;
    let h = bound.features(g, xv)?;
    let samples = bound.draw_samples(g, cfg.l, cfg.m, &mut noise.weights)?;

    let h_target = if invariant { g.gather_rows(h, &(0..b).collect::<Vec<_>>())? } else { h };
    let logits = bound.mc_logits(g, h_target, &samples)?;
    let ce = cross_entropy_mc(g, logits, &episode.target_labels)?;

    let mut terms = vec![Term::Ce];
    let mut total = ce;
    let mut bd = LossBreakdown {
        lambda_psi: cfg.lambda_psi,
        lambda_phi: cfg.lambda_phi,
        kl_scale: cfg.kl_scale,
        ..Default::default()
    };
    bd.ce = g.item(ce);

    if let Some(groups) = &groups {
        let dist = bound.feature_distribution(g, h)?;
        if v.psi_invariant {
            let zs = samples
                .psi
                .iter()
                .map(|_| match cfg.z_mode {
                    ZMode::Sample => bound.sample_features(g, &dist, &mut noise.features),
                    ZMode::Mean => Ok(dist.mean),
                })
                .collect::<Result<Vec<_>>>()?;
            let inv = classifier_invariance_loss(g, &samples.psi, &zs, groups)?;
            bd.inv_psi = g.item(inv);
            let t = g.scale(inv, cfg.lambda_psi)?;
            total = g.add(total, t)?;
            terms.push(Term::InvPsi);
        }
        if v.phi_invariant {
            let inv = representation_invariance_loss(g, &dist, groups)?;
            bd.inv_phi = g.item(inv);
            let t = g.scale(inv, cfg.lambda_phi)?;
            total = g.add(total, t)?;
            terms.push(Term::InvPhi);
        }
    }
    if v.psi_bayesian {
        let kl = layer_prior_kl(g, &bound.psi, &cfg.prior, &samples.psi)?;
        bd.kl_psi = g.item(kl);
        let t = g.scale(kl, cfg.kl_scale)?;
        total = g.add(total, t)?;
        terms.push(Term::KlPsi);
    }
    if v.phi_bayesian {
        let phi: Vec<RealizedWeights> = samples.phi.iter().map(|s| s.phi.clone()).collect();
        let mut kl = layer_prior_kl(g, &bound.phi, &cfg.prior, &phi)?;
        if let Some(extra) = &bound.extra {
            let ws: Vec<RealizedWeights> = samples.phi.iter().filter_map(|s| s.extra.clone()).collect();
            let ke = layer_prior_kl(g, extra, &cfg.prior, &ws)?;
            kl = g.add(kl, ke)?;
        }
        bd.kl_phi = g.item(kl);
        let t = g.scale(kl, cfg.kl_scale)?;
        total = g.add(total, t)?;
        terms.push(Term::KlPhi);
    }
    bd.total = g.item(total);
    Ok(ObjectiveOutput {
        breakdown: bd,
        total,
        terms,
        net: bound,
    })
}
