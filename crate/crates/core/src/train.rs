//! Adam, the episodic training loop with source-validation model selection,
//! evaluation, and the ablation / sweep harnesses.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{pool, sample_episode, DataError, Dataset, Episode, SplitBenchmark};
use crate::distributions::{ScaleMixturePrior, PROB_FLOOR};
use crate::model::{build_network, predict_map, predict_mc, Network, NetworkConfig, Variant};
use crate::objective::{total_objective, LossBreakdown, Noise, ObjectiveConfig};
use crate::tensor::{Graph, Tensor, TensorError};
use crate::{Error, Result};

pub const SEED_DATA: u64 = 1;
pub const SEED_INIT: u64 = 2;
pub const SEED_EPISODES: u64 = 3;
pub const SEED_MC: u64 = 4;
pub const SEED_EVAL: u64 = 5;

/// Generator for one component of a run. `stream` separates independent uses
/// of the same component seed.
pub fn component_rng(seed: u64, offset: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(offset));
    r.set_stream(stream);
    r
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TensorError::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            }
            .into());
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mk, &gk) in m.iter_mut().zip(g) {
            *mk = b1 * *mk + (1.0 - b1) * gk;
        }
        let v = state.v[i].data_mut();
        for (vk, &gk) in v.iter_mut().zip(g) {
            *vk = b2 * *vk + (1.0 - b2) * gk * gk;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((x, &mk), &vk) in p.data_mut().iter_mut().zip(m).zip(v) {
            *x -= lr * (mk / c1) / ((vk / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub variant: Variant,
    pub objective: ObjectiveConfig,
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    pub n_per_class: usize,
    pub val_frac: f64,
    pub val_every: usize,
    pub seed: u64,
    /// Evaluate with mean weights instead of the MC predictive.
    pub map_eval: bool,
    /// Include wall-clock time in metrics records (breaks byte-identical streams).
    pub log_wall_time: bool,
    pub episode_retries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            variant: Variant::from_id('j').expect("table entry"),
            objective: ObjectiveConfig::default(),
            lr: 1e-4,
            iters: 10_000,
            batch: 128,
            n_per_class: 16,
            val_frac: 0.2,
            val_every: 200,
            seed: 0,
            map_eval: false,
            log_wall_time: false,
            episode_retries: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.objective;
        let checks = [
            (self.lr > 0.0, "lr must be positive"),
            (self.batch >= 1, "batch must be ≥ 1"),
            (self.n_per_class >= 1, "n_per_class must be ≥ 1"),
            (self.val_every >= 1, "val_every must be ≥ 1"),
            (self.val_frac > 0.0 && self.val_frac < 1.0, "val_frac must be in (0, 1)"),
            (o.l >= 1 && o.m >= 1, "L and M must be ≥ 1"),
            (o.lambda_psi >= 0.0 && o.lambda_phi >= 0.0 && o.kl_scale >= 0.0, "loss weights must be ≥ 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iter: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub val_accuracy: Option<f64>,
    /// Diagnostic only; never read by model selection.
    pub target_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
}

pub const ECE_BINS: usize = 15;

/// Accuracy (lowest-index argmax), mean NLL with probabilities floored at
/// `PROB_FLOOR`, and equal-width `ECE_BINS`-bin expected calibration error.
pub fn metrics_from_probs(probs: &Tensor, labels: &[usize]) -> EvalMetrics {
    let n = labels.len();
    let c = probs.cols();
    let mut correct = 0usize;
    let mut nll = 0.0;
    let mut bins = [(0usize, 0.0f64, 0.0f64); ECE_BINS];
    for (row, &y) in probs.data().chunks(c).zip(labels) {
        let (arg, conf) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best });
        let hit = arg == y;
        correct += hit as usize;
        nll -= row[y].max(PROB_FLOOR).ln();
        let b = ((conf * ECE_BINS as f64) as usize).min(ECE_BINS - 1);
        bins[b].0 += 1;
        bins[b].1 += hit as u8 as f64;
        bins[b].2 += conf;
    }
    let ece = bins
        .iter()
        .filter(|b| b.0 > 0)
        .map(|&(k, hits, conf)| (k as f64 / n as f64) * (hits / k as f64 - conf / k as f64).abs())
        .sum();
    EvalMetrics {
        accuracy: correct as f64 / n as f64,
        nll: nll / n as f64,
        ece,
    }
}

/// Evaluation settings. The generator is rebuilt from `seed` on every call,
/// so evaluating the same network twice gives the same numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub l: usize,
    pub m: usize,
    pub map: bool,
    pub seed: u64,
}

pub fn evaluate(net: &Network, ds: &Dataset, cfg: &EvalConfig) -> Result<EvalMetrics> {
    if ds.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let pred = if cfg.map {
        predict_map(net, &ds.features)?
    } else {
        predict_mc(net, &ds.features, cfg.l, cfg.m, &mut component_rng(cfg.seed, SEED_EVAL, 0))?
    };
    Ok(metrics_from_probs(&pred.probs, &ds.labels))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Network,
    pub best_iter: usize,
    pub best_val_accuracy: Option<f64>,
    pub last: Network,
    pub history: Vec<MetricsRecord>,
}

fn draw_episode(cfg: &TrainConfig, train: &[Dataset], iter: usize, rng: &mut ChaCha8Rng) -> Result<Episode> {
    let mut last = None;
    for _ in 0..=cfg.episode_retries {
        match sample_episode(train, cfg.batch, cfg.n_per_class, rng) {
            Ok(ep) => return Ok(ep),
            Err(e @ DataError::MissingClass { .. }) => last = Some(e),
            Err(e) => return Err(Error::Episode { iter, source: e }),
        }
    }
    Err(Error::Episode {
        iter,
        source: last.expect("at least one attempt"),
    })
}

fn train_step(net: &mut Network, adam: &mut AdamState, ep: &Episode, cfg: &TrainConfig, noise: &mut Noise<ChaCha8Rng>) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let out = total_objective(&mut g, net, ep, &cfg.objective, noise)?;
    if !out.breakdown.total.is_finite() {
        return Err(Error::Config(format!("non-finite loss ({})", out.breakdown)));
    }
    g.backward(out.total)?;
    let grads: Vec<Tensor> = out.net.trainable().into_iter().map(|v| g.grad_or_zeros(v)).collect();
    adam_step(&mut net.trainable_mut(), &grads, adam, cfg.lr)?;
    Ok(out.breakdown)
}

/// Episodic training. Every `val_every` iterations and at the last one, the
/// network is scored on the pooled source-validation split and kept if it
/// strictly improves on the best so far.
pub fn train(cfg: &TrainConfig, data: &SplitBenchmark) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.len() < 2 {
        return Err(Error::Config(format!("need at least 2 source domains, got {}", data.train.len())));
    }
    let mut net = build_network(&cfg.network, cfg.variant, &mut component_rng(cfg.seed, SEED_INIT, 0))?;
    let mut episodes = component_rng(cfg.seed, SEED_EPISODES, 0);
    let mut mc = Noise {
        weights: component_rng(cfg.seed, SEED_MC, 0),
        features: component_rng(cfg.seed, SEED_MC, 1),
    };
    let eval_cfg = EvalConfig {
        l: cfg.objective.l,
        m: cfg.objective.m,
        map: cfg.map_eval,
        seed: cfg.seed,
    };
    let val = pool(&data.val)?;
    let targets = if data.targets.is_empty() { None } else { Some(pool(&data.targets)?) };

    let shapes: Vec<Vec<usize>> = net.trainable_mut().iter().map(|t| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = AdamState::new(&shape_refs);
    let mut history = Vec::with_capacity(cfg.iters);
    let mut best: Option<(Network, usize, f64)> = None;
    let start = Instant::now();

    for iter in 1..=cfg.iters {
        let ep = draw_episode(cfg, &data.train, iter, &mut episodes)?;
        let loss = train_step(&mut net, &mut adam, &ep, cfg, &mut mc).map_err(|e| match e {
            Error::Config(msg) if msg.starts_with("non-finite loss") => Error::NonFiniteLoss {
                iter,
                breakdown: msg,
            },
            other => Error::Step {
                iter,
                source: Box::new(other),
            },
        })?;
        let mut record = MetricsRecord {
            iter,
            loss,
            val_accuracy: None,
            target_accuracy: None,
            wall_ms: None,
        };
        if iter % cfg.val_every == 0 || iter == cfg.iters {
            let acc = evaluate(&net, &val, &eval_cfg)?.accuracy;
            record.val_accuracy = Some(acc);
            if let Some(t) = &targets {
                record.target_accuracy = Some(evaluate(&net, t, &eval_cfg)?.accuracy);
            }
            if best.as_ref().is_none_or(|b| acc > b.2) {
                best = Some((net.clone(), iter, acc));
            }
        }
        if cfg.log_wall_time {
            record.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
        }
        history.push(record);
    }
    let (best, best_iter, best_val) = match best {
        Some((n, i, a)) => (n, i, Some(a)),
        None => (net.clone(), 0, None),
    };
    Ok(TrainOutcome {
        best,
        best_iter,
        best_val_accuracy: best_val,
        last: net,
        history,
    })
}

/// Serializes a history as one JSON object per line.
pub fn metrics_jsonl(history: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

/// One trained run scored in and out of distribution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub variant: char,
    pub seed: u64,
    pub best_iter: usize,
    /// Pooled source-validation accuracy of the selected network.
    pub in_dist: f64,
    /// Pooled target-domain accuracy of the selected network.
    pub ood: f64,
    pub ood_by_angle: Vec<(f64, f64)>,
}

pub fn score(net: &Network, data: &SplitBenchmark, cfg: &TrainConfig) -> Result<(f64, f64, Vec<(f64, f64)>)> {
    let ev = EvalConfig {
        l: cfg.objective.l,
        m: cfg.objective.m,
        map: cfg.map_eval,
        seed: cfg.seed,
    };
    let in_dist = evaluate(net, &pool(&data.val)?, &ev)?.accuracy;
    let ood = if data.targets.is_empty() { f64::NAN } else { evaluate(net, &pool(&data.targets)?, &ev)?.accuracy };
    let by_angle = data
        .targets
        .iter()
        .map(|t| Ok((t.angle_deg, evaluate(net, t, &ev)?.accuracy)))
        .collect::<Result<Vec<_>>>()?;
    Ok((in_dist, ood, by_angle))
}

pub fn train_and_score(cfg: &TrainConfig, data: &SplitBenchmark) -> Result<RunResult> {
    let out = train(cfg, data)?;
    let (in_dist, ood, ood_by_angle) = score(&out.best, data, cfg)?;
    Ok(RunResult {
        variant: cfg.variant.id,
        seed: cfg.seed,
        best_iter: out.best_iter,
        in_dist,
        ood,
        ood_by_angle,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `jobs` independent closures with a bounded thread pool; results keep
/// input order.
fn run_all<T: Send, F: Fn(usize) -> Result<T> + Sync + Send>(n: usize, jobs: usize, f: F) -> Result<Vec<T>> {
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: char,
    pub in_mean: f64,
    pub in_std: f64,
    pub ood_mean: f64,
    pub ood_std: f64,
    pub runs: Vec<RunResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, id: char) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == id)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,psi_bayesian,psi_invariant,phi_bayesian,phi_invariant,in_mean,in_std,ood_mean,ood_std,seeds\n");
        for r in &self.rows {
            let f = Variant::from_id(r.variant).map(|v| v.flags()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.variant,
                f[0] as u8,
                f[1] as u8,
                f[2] as u8,
                f[3] as u8,
                r.in_mean,
                r.in_std,
                r.ood_mean,
                r.ood_std,
                r.runs.len()
            ));
        }
        out
    }
}

/// Trains every variant for every seed. `data_for_seed` supplies the split
/// benchmark used for that seed.
pub fn run_ablation<D>(base: &TrainConfig, variants: &[Variant], seeds: &[u64], jobs: usize, data_for_seed: D) -> Result<AblationTable>
where
    D: Fn(u64) -> Result<SplitBenchmark> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let data = seeds.iter().map(|&s| data_for_seed(s)).collect::<Result<Vec<_>>>()?;
    let jobs_list: Vec<(usize, usize)> = (0..variants.len()).flat_map(|v| (0..seeds.len()).map(move |s| (v, s))).collect();
    let results = run_all(jobs_list.len(), jobs, |k| {
        let (v, s) = jobs_list[k];
        let cfg = TrainConfig {
            variant: variants[v],
            seed: seeds[s],
            ..base.clone()
        };
        train_and_score(&cfg, &data[s])
    })?;
    let rows = variants
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            let runs: Vec<RunResult> = jobs_list.iter().zip(&results).filter(|((i, _), _)| *i == vi).map(|(_, r)| r.clone()).collect();
            let (in_mean, in_std) = mean_std(&runs.iter().map(|r| r.in_dist).collect::<Vec<_>>());
            let (ood_mean, ood_std) = mean_std(&runs.iter().map(|r| r.ood).collect::<Vec<_>>());
            AblationRow {
                variant: v.id,
                in_mean,
                in_std,
                ood_mean,
                ood_std,
                runs,
            }
        })
        .collect();
    Ok(AblationTable { rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SweepParam {
    LambdaPhi,
    LambdaPsi,
    Pi,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda_phi" => Ok(Self::LambdaPhi),
            "lambda_psi" => Ok(Self::LambdaPsi),
            "pi" => Ok(Self::Pi),
            _ => Err(Error::Config(format!("sweep parameter must be lambda_phi, lambda_psi or pi, got {s:?}"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::LambdaPhi => "lambda_phi",
            Self::LambdaPsi => "lambda_psi",
            Self::Pi => "pi",
        }
    }

    pub fn apply(self, cfg: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut c = cfg.clone();
        match self {
            Self::LambdaPhi => c.objective.lambda_phi = value,
            Self::LambdaPsi => c.objective.lambda_psi = value,
            Self::Pi => {
                let p = &cfg.objective.prior;
                c.objective.prior = ScaleMixturePrior::new(value, p.sigma1(), p.sigma2())?;
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub val_mean: f64,
    pub val_std: f64,
    pub ood_mean: f64,
    pub ood_std: f64,
    pub runs: Vec<RunResult>,
}

pub fn sweep<D>(base: &TrainConfig, param: SweepParam, values: &[f64], seeds: &[u64], jobs: usize, data_for_seed: D) -> Result<Vec<SweepRow>>
where
    D: Fn(u64) -> Result<SplitBenchmark> + Sync,
{
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let cfgs = values.iter().map(|&v| param.apply(base, v)).collect::<Result<Vec<_>>>()?;
    let data = seeds.iter().map(|&s| data_for_seed(s)).collect::<Result<Vec<_>>>()?;
    let n = seeds.len();
    let results = run_all(values.len() * n, jobs, |k| {
        let cfg = TrainConfig { seed: seeds[k % n], ..cfgs[k / n].clone() };
        train_and_score(&cfg, &data[k % n])
    })?;
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let runs = results[i * n..(i + 1) * n].to_vec();
            let (val_mean, val_std) = mean_std(&runs.iter().map(|r| r.in_dist).collect::<Vec<_>>());
            let (ood_mean, ood_std) = mean_std(&runs.iter().map(|r| r.ood).collect::<Vec<_>>());
            SweepRow {
                value,
                val_mean,
                val_std,
                ood_mean,
                ood_std,
                runs,
            }
        })
        .collect())
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut out = format!("{},val_mean,val_std,ood_mean,ood_std,seeds\n", param.name());
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.value, r.val_mean, r.val_std, r.ood_mean, r.ood_std, r.runs.len()));
    }
    out
}
