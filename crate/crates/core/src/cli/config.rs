//! Flat `key = value` run configuration.
//!
//! Sources in increasing precedence: built-in defaults, the `--config` file,
//! the `BDIL_SEED` environment variable, then `--key value` flags. Unknown
//! keys are rejected everywhere.

use std::path::PathBuf;
use std::str::FromStr;

use crate::data::BenchmarkConfig;
use crate::distributions::ScaleMixturePrior;
use crate::model::Variant;
use crate::train::{SweepParam, TrainConfig};
use crate::{Error, Result};

pub const SEED_ENV: &str = "BDIL_SEED";

/// `(key, description)` in the order [`RunConfig::render`] writes them.
pub const KEYS: &[(&str, &str)] = &[
    ("data_dir", "directory holding the domain CSVs and manifest"),
    ("out_dir", "directory for run artifacts"),
    ("checkpoint", "checkpoint read by eval (empty: <out_dir>/best.ckpt)"),
    ("classes", "blob classes"),
    ("per_class", "points per class per domain"),
    ("radius", "radius of the circle holding the class means"),
    ("blob_std", "per-class isotropic standard deviation"),
    ("source_angles", "comma-separated source rotation angles in degrees"),
    ("target_angles", "comma-separated target rotation angles in degrees"),
    ("val_frac", "stratified validation fraction per source domain"),
    ("stem_widths", "comma-separated hidden widths of the deterministic stem"),
    ("z_dim", "feature dimension produced by phi"),
    ("init_sigma", "initial posterior standard deviation"),
    ("extra_bayesian_layer", "insert a Bayesian hidden layer before phi"),
    ("l", "classifier samples per step"),
    ("m", "feature-extractor samples per step"),
    ("lambda_psi", "classifier invariance weight"),
    ("lambda_phi", "representation invariance weight"),
    ("kl_scale", "multiplier on the prior KL terms"),
    ("prior_pi", "scale-mixture prior weight of the first component"),
    ("prior_sigma1", "scale-mixture prior first standard deviation"),
    ("prior_sigma2", "scale-mixture prior second standard deviation"),
    ("invariance_z_mode", "features in the classifier invariance term: sample or mean"),
    ("variant", "ablation variant a..j"),
    ("lr", "Adam learning rate"),
    ("iters", "training iterations"),
    ("batch", "meta-target batch size"),
    ("n_per_class", "meta-source rows per class"),
    ("val_every", "iterations between validations"),
    ("seed", "master seed"),
    ("map_eval", "evaluate with posterior means instead of MC averaging"),
    ("log_wall_time", "add wall_ms to metrics records"),
    ("episode_retries", "resamples allowed when a class is missing"),
    ("variants", "variants run by ablate"),
    ("seeds", "comma-separated seeds for ablate and sweep"),
    ("sweep_param", "swept hyperparameter: lambda_phi, lambda_psi or pi"),
    ("sweep_values", "comma-separated swept values"),
    ("jobs", "concurrent runs for ablate and sweep"),
    ("fault", "verify only: op whose backward rule is corrupted (test fixture)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub bench: BenchmarkConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub sweep_param: SweepParam,
    pub sweep_values: Vec<f64>,
    pub jobs: usize,
    pub fault: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            bench: BenchmarkConfig::default(),
            data_dir: "data".into(),
            out_dir: "out".into(),
            checkpoint: None,
            variants: Variant::all(),
            seeds: vec![0, 1, 2, 3, 4],
            sweep_param: SweepParam::LambdaPhi,
            sweep_values: vec![0.01, 0.1, 1.0],
            jobs: 1,
            fault: None,
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("invalid value {value:?} for {key}: {why}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path_or_empty(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn is_key(key: &str) -> bool {
        KEYS.iter().any(|(k, _)| *k == key)
    }

    pub fn is_flag(key: &str) -> bool {
        matches!(key, "map_eval" | "log_wall_time" | "extra_bayesian_layer")
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let o = &mut t.objective;
        let blobs = &mut self.bench.blobs;
        match key {
            "data_dir" => self.data_dir = value.into(),
            "out_dir" => self.out_dir = value.into(),
            "checkpoint" => self.checkpoint = (!value.is_empty()).then(|| value.into()),
            "classes" => blobs.classes = parse(key, value)?,
            "per_class" => blobs.per_class = parse(key, value)?,
            "radius" => blobs.radius = parse(key, value)?,
            "blob_std" => blobs.std = parse(key, value)?,
            "source_angles" => self.bench.source_angles = parse_list(key, value)?,
            "target_angles" => self.bench.target_angles = parse_list(key, value)?,
            "val_frac" => t.val_frac = parse(key, value)?,
            "stem_widths" => t.network.stem_widths = parse_list(key, value)?,
            "z_dim" => t.network.z_dim = parse(key, value)?,
            "init_sigma" => t.network.init_sigma = parse(key, value)?,
            "extra_bayesian_layer" => t.network.extra_bayesian_layer = parse_bool(key, value)?,
            "l" => o.l = parse(key, value)?,
            "m" => o.m = parse(key, value)?,
            "lambda_psi" => o.lambda_psi = parse(key, value)?,
            "lambda_phi" => o.lambda_phi = parse(key, value)?,
            "kl_scale" => o.kl_scale = parse(key, value)?,
            "prior_pi" | "prior_sigma1" | "prior_sigma2" => {
                let (mut pi, mut s1, mut s2) = (o.prior.pi(), o.prior.sigma1(), o.prior.sigma2());
                let v: f64 = parse(key, value)?;
                match key {
                    "prior_pi" => pi = v,
                    "prior_sigma1" => s1 = v,
                    _ => s2 = v,
                }
                o.prior = ScaleMixturePrior::new(pi, s1, s2).map_err(|e| bad(key, value, e))?;
            }
            "invariance_z_mode" => o.z_mode = value.parse().map_err(|e: Error| bad(key, value, e))?,
            "variant" => t.variant = single_variant(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "iters" => t.iters = parse(key, value)?,
            "batch" => t.batch = parse(key, value)?,
            "n_per_class" => t.n_per_class = parse(key, value)?,
            "val_every" => t.val_every = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "map_eval" => t.map_eval = parse_bool(key, value)?,
            "log_wall_time" => t.log_wall_time = parse_bool(key, value)?,
            "episode_retries" => t.episode_retries = parse(key, value)?,
            "variants" => {
                self.variants = value
                    .chars()
                    .filter(|c| !matches!(c, ',' | ' '))
                    .map(|c| Variant::from_id(c).map_err(|e| bad(key, value, e)))
                    .collect::<Result<_>>()?
            }
            "seeds" => self.seeds = parse_list(key, value)?,
            "sweep_param" => self.sweep_param = value.parse().map_err(|e: Error| bad(key, value, e))?,
            "sweep_values" => self.sweep_values = parse_list(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            "fault" => self.fault = (!value.is_empty()).then(|| value.to_string()),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let o = &t.objective;
        let b = &self.bench.blobs;
        Some(match key {
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "checkpoint" => path_or_empty(&self.checkpoint),
            "classes" => b.classes.to_string(),
            "per_class" => b.per_class.to_string(),
            "radius" => b.radius.to_string(),
            "blob_std" => b.std.to_string(),
            "source_angles" => join(&self.bench.source_angles),
            "target_angles" => join(&self.bench.target_angles),
            "val_frac" => t.val_frac.to_string(),
            "stem_widths" => join(&t.network.stem_widths),
            "z_dim" => t.network.z_dim.to_string(),
            "init_sigma" => t.network.init_sigma.to_string(),
            "extra_bayesian_layer" => t.network.extra_bayesian_layer.to_string(),
            "l" => o.l.to_string(),
            "m" => o.m.to_string(),
            "lambda_psi" => o.lambda_psi.to_string(),
            "lambda_phi" => o.lambda_phi.to_string(),
            "kl_scale" => o.kl_scale.to_string(),
            "prior_pi" => o.prior.pi().to_string(),
            "prior_sigma1" => o.prior.sigma1().to_string(),
            "prior_sigma2" => o.prior.sigma2().to_string(),
            "invariance_z_mode" => o.z_mode.to_string(),
            "variant" => t.variant.id.to_string(),
            "lr" => t.lr.to_string(),
            "iters" => t.iters.to_string(),
            "batch" => t.batch.to_string(),
            "n_per_class" => t.n_per_class.to_string(),
            "val_every" => t.val_every.to_string(),
            "seed" => t.seed.to_string(),
            "map_eval" => t.map_eval.to_string(),
            "log_wall_time" => t.log_wall_time.to_string(),
            "episode_retries" => t.episode_retries.to_string(),
            "variants" => self.variants.iter().map(|v| v.id).collect(),
            "seeds" => join(&self.seeds),
            "sweep_param" => self.sweep_param.name().to_string(),
            "sweep_values" => join(&self.sweep_values),
            "jobs" => self.jobs.to_string(),
            "fault" => self.fault.clone().unwrap_or_default(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value, found {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Every key with its resolved value, re-readable by [`RunConfig::apply_text`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&self.get(k).expect("every listed key has a getter"));
            out.push('\n');
        }
        out
    }

    /// Cross-field checks that individual setters cannot make.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let b = &self.bench;
        if b.blobs.classes < 2 || b.blobs.per_class < 2 {
            return Err(Error::Config("need at least 2 classes and 2 points per class".into()));
        }
        if b.source_angles.is_empty() {
            return Err(Error::Config("source_angles must not be empty".into()));
        }
        if self.train.network.classes != b.blobs.classes {
            return Err(Error::Config("network classes must match data classes".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be ≥ 1".into()));
        }
        Ok(())
    }
}

fn single_variant(key: &str, value: &str) -> Result<Variant> {
    let mut chars = value.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => Variant::from_id(c).map_err(|e| bad(key, value, e)),
        _ => Err(bad(key, value, "expected one letter a..j")),
    }
}

/// Splits `--key value`, `--key=value` and bare boolean `--flag` arguments.
/// `--config` is returned separately.
pub fn parse_overrides(args: &[String]) -> Result<(Option<PathBuf>, Vec<(String, String)>)> {
    let mut config = None;
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(body) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!("unexpected argument {arg:?}, expected --key value")));
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let key = body.replace('-', "_");
                let next = args.get(i + 1).filter(|n| !n.starts_with("--"));
                match next {
                    Some(v) => {
                        i += 1;
                        (key, v.clone())
                    }
                    None if RunConfig::is_flag(&alias(&key)) => (key, "true".into()),
                    None => return Err(Error::Config(format!("--{body} needs a value"))),
                }
            }
        };
        let key = alias(&key.replace('-', "_"));
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else if RunConfig::is_key(&key) {
            pairs.push((key, value));
        } else {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        i += 1;
    }
    Ok((config, pairs))
}

fn alias(key: &str) -> String {
    match key {
        "map" => "map_eval".into(),
        other => other.into(),
    }
}

/// Resolves defaults, file, environment and flags in precedence order.
pub fn resolve(args: &[String], env_seed: Option<String>) -> Result<RunConfig> {
    let (file, pairs) = parse_overrides(args)?;
    let mut cfg = RunConfig::default();
    if let Some(path) = &file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    if let Some(seed) = env_seed {
        cfg.set("seed", seed.trim()).map_err(|e| Error::Config(format!("{SEED_ENV}: {e}")))?;
    }
    for (k, v) in &pairs {
        cfg.set(k, v)?;
    }
    cfg.train.network.classes = cfg.bench.blobs.classes;
    cfg.validate()?;
    Ok(cfg)
}
