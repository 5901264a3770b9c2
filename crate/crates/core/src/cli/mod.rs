//! `bdil` command-line surface.
//!
//! Every command takes `--config FILE` and `--key value` overrides for the
//! keys in [`config::KEYS`]. Exit codes: 0 success, 1 failed check or runtime
//! failure, 2 usage, configuration or IO error.

pub mod config;
pub mod verify;

use std::fmt::Write as _;
use std::path::Path;

use clap::{Args, Parser, Subcommand};

use crate::data::{generate_benchmark, load_csv, save_csv, split_benchmark, Benchmark, Dataset, SplitBenchmark};
use crate::model::Network;
use crate::train::{component_rng, evaluate, metrics_jsonl, run_ablation, sweep, sweep_csv, train, EvalConfig, RunResult, SEED_DATA};
use crate::{Error, Result};
pub use config::RunConfig;

pub const MANIFEST: &str = "manifest.txt";

/// Ops whose backward rule `verify --fault` can corrupt.
pub const FAULT_OPS: &[&str] = &[
    "add", "sub", "mul", "div", "exp", "log", "sqrt", "square", "softplus", "relu", "matmul", "log_softmax", "logsumexp", "sum_axis",
];

#[derive(Parser)]
#[command(name = "bdil", version, about = "Bayesian domain-invariant learning on rotated synthetic domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source and target domain CSVs plus a manifest to data_dir.
    GenData(Overrides),
    /// Train one variant on data_dir; artifacts go to out_dir.
    Train(Overrides),
    /// Score a checkpoint on the source-validation split and the targets.
    Eval(Overrides),
    /// Train every listed variant over every seed and tabulate accuracies.
    Ablate(Overrides),
    /// Sweep one hyperparameter over seeds.
    Sweep(Overrides),
    /// Run the bundled numerical checks.
    Verify(Overrides),
    /// List configuration keys with their defaults.
    Keys,
}

#[derive(Args)]
struct Overrides {
    /// `--config FILE` and `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    args: Vec<String>,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let outcome = match cli.command {
        Command::Keys => {
            print!("{}", keys_listing());
            Ok(true)
        }
        Command::GenData(o) => with_config(&o, env_seed, cmd_gen_data),
        Command::Train(o) => with_config(&o, env_seed, cmd_train),
        Command::Eval(o) => with_config(&o, env_seed, cmd_eval),
        Command::Ablate(o) => with_config(&o, env_seed, cmd_ablate),
        Command::Sweep(o) => with_config(&o, env_seed, cmd_sweep),
        Command::Verify(o) => with_config(&o, env_seed, cmd_verify),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn with_config(o: &Overrides, env_seed: Option<String>, f: fn(&RunConfig) -> Result<bool>) -> Result<bool> {
    f(&config::resolve(&o.args, env_seed)?)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) | Error::Io { .. } | Error::Data(_) => 2,
        _ => 1,
    }
}

fn keys_listing() -> String {
    let d = RunConfig::default();
    let mut out = String::new();
    for (k, doc) in config::KEYS {
        let _ = writeln!(out, "{k:<22} {:<28} {doc}", d.get(k).unwrap_or_default());
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn domain_file(role: &str, angle: f64) -> String {
    format!("{role}_{angle}.csv")
}

/// Writes the benchmark as one CSV per domain plus `manifest.txt`.
pub fn write_data_dir(dir: &Path, b: &Benchmark, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    let blobs = &cfg.bench.blobs;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "seed = {}", cfg.train.seed);
    let _ = writeln!(manifest, "classes = {}", blobs.classes);
    let _ = writeln!(manifest, "per_class = {}", blobs.per_class);
    let _ = writeln!(manifest, "radius = {}", blobs.radius);
    let _ = writeln!(manifest, "blob_std = {}", blobs.std);
    for (role, sets) in [("source", &b.sources), ("target", &b.targets)] {
        for ds in sets {
            let name = domain_file(role, ds.angle_deg);
            save_csv(ds, &dir.join(&name))?;
            let _ = writeln!(manifest, "{role} = {name} {} {}", ds.angle_deg, ds.len());
        }
    }
    write(&dir.join(MANIFEST), &manifest)
}

/// Reads a directory written by [`write_data_dir`].
pub fn read_data_dir(dir: &Path) -> Result<Benchmark> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found (run gen-data first)"),
        ));
    }
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut b = Benchmark { sources: Vec::new(), targets: Vec::new() };
    for (n, line) in text.lines().enumerate() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let sets = match key.trim() {
            "source" => &mut b.sources,
            "target" => &mut b.targets,
            _ => continue,
        };
        let bad = |msg: &str| Error::Config(format!("{}:{}: {msg}", path.display(), n + 1));
        let mut fields = value.split_whitespace();
        let (Some(name), Some(angle), Some(rows)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(bad("expected file angle rows"));
        };
        let ds = load_csv(&dir.join(name))?;
        if angle.parse::<f64>().ok() != Some(ds.angle_deg) || rows.parse::<usize>().ok() != Some(ds.len()) {
            return Err(bad(&format!("{name} does not match its manifest entry")));
        }
        sets.push(ds);
    }
    if b.sources.is_empty() {
        return Err(Error::Config(format!("{}: no source domains listed", path.display())));
    }
    Ok(b)
}

/// Loads `data_dir` and applies the seed's stratified validation split.
pub fn load_split(cfg: &RunConfig, seed: u64) -> Result<SplitBenchmark> {
    let b = read_data_dir(&cfg.data_dir)?;
    let classes = b.sources.iter().chain(&b.targets).map(Dataset::num_classes).max().unwrap_or(0);
    if classes > cfg.train.network.classes {
        return Err(Error::Config(format!(
            "{} holds {classes} classes but classes = {}",
            cfg.data_dir.display(),
            cfg.train.network.classes
        )));
    }
    Ok(split_benchmark(&b, cfg.train.val_frac, &mut component_rng(seed, SEED_DATA, 1))?)
}

/// Generates the benchmark for a seed in memory; equal to `gen-data` then loading.
pub fn generate_split(cfg: &RunConfig, seed: u64) -> Result<SplitBenchmark> {
    let b = generate_benchmark(&cfg.bench, &mut component_rng(seed, SEED_DATA, 0))?;
    Ok(split_benchmark(&b, cfg.train.val_frac, &mut component_rng(seed, SEED_DATA, 1))?)
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<bool> {
    let b = generate_benchmark(&cfg.bench, &mut component_rng(cfg.train.seed, SEED_DATA, 0))?;
    write_data_dir(&cfg.data_dir, &b, cfg)?;
    println!(
        "wrote {} source and {} target domains to {}",
        b.sources.len(),
        b.targets.len(),
        cfg.data_dir.display()
    );
    Ok(true)
}

fn start_out_dir(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("config.txt"), &cfg.render())
}

fn run_header(angles: &[f64]) -> String {
    let mut h = String::from("variant,seed,best_iter,in_dist,ood");
    for a in angles {
        let _ = write!(h, ",ood_{a}");
    }
    h.push('\n');
    h
}

fn run_row(r: &RunResult) -> String {
    let mut s = format!("{},{},{},{},{}", r.variant, r.seed, r.best_iter, r.in_dist, r.ood);
    for (_, acc) in &r.ood_by_angle {
        let _ = write!(s, ",{acc}");
    }
    s.push('\n');
    s
}

fn runs_csv<'a>(runs: impl IntoIterator<Item = &'a RunResult>, angles: &[f64]) -> String {
    let mut out = run_header(angles);
    for r in runs {
        out.push_str(&run_row(r));
    }
    out
}

fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig {
        l: cfg.train.objective.l,
        m: cfg.train.objective.m,
        map: cfg.train.map_eval,
        seed: cfg.train.seed,
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<bool> {
    let data = load_split(cfg, cfg.train.seed)?;
    start_out_dir(cfg)?;
    let out = train(&cfg.train, &data)?;
    let dir = &cfg.out_dir;
    write(&dir.join("metrics.jsonl"), &metrics_jsonl(&out.history))?;
    out.best.save(&dir.join("best.ckpt"))?;
    out.last.save(&dir.join("last.ckpt"))?;
    let (in_dist, ood, ood_by_angle) = crate::train::score(&out.best, &data, &cfg.train)?;
    let r = RunResult {
        variant: cfg.train.variant.id,
        seed: cfg.train.seed,
        best_iter: out.best_iter,
        in_dist,
        ood,
        ood_by_angle,
    };
    let angles: Vec<f64> = data.targets.iter().map(|t| t.angle_deg).collect();
    write(&dir.join("summary.csv"), &runs_csv([&r], &angles))?;
    println!(
        "variant {} seed {}: best_iter {} val {:.4} ood {:.4} -> {}",
        r.variant,
        r.seed,
        r.best_iter,
        r.in_dist,
        r.ood,
        dir.display()
    );
    Ok(true)
}

fn cmd_eval(cfg: &RunConfig) -> Result<bool> {
    let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("best.ckpt"));
    let net = Network::load(&path)?;
    let data = load_split(cfg, cfg.train.seed)?;
    let ev = eval_config(cfg);
    let mut report = vec![("val".to_string(), evaluate(&net, &crate::data::pool(&data.val)?, &ev)?)];
    if !data.targets.is_empty() {
        report.push(("ood".into(), evaluate(&net, &crate::data::pool(&data.targets)?, &ev)?));
        for t in &data.targets {
            report.push((format!("ood_{}", t.angle_deg), evaluate(&net, t, &ev)?));
        }
    }
    println!("checkpoint {} (variant {})", path.display(), net.variant.id);
    println!("split,accuracy,nll,ece");
    for (name, m) in report {
        println!("{name},{},{},{}", m.accuracy, m.nll, m.ece);
    }
    Ok(true)
}

fn target_angles(cfg: &RunConfig) -> Result<Vec<f64>> {
    Ok(read_data_dir(&cfg.data_dir)?.targets.iter().map(|t| t.angle_deg).collect())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<bool> {
    let angles = target_angles(cfg)?;
    start_out_dir(cfg)?;
    let table = run_ablation(&cfg.train, &cfg.variants, &cfg.seeds, cfg.jobs, |s| load_split(cfg, s))?;
    write(&cfg.out_dir.join("ablation.csv"), &table.to_csv())?;
    write(&cfg.out_dir.join("runs.csv"), &runs_csv(table.rows.iter().flat_map(|r| &r.runs), &angles))?;
    println!("variant  in_dist          ood");
    for r in &table.rows {
        println!("{}        {:.4} ± {:.4}  {:.4} ± {:.4}", r.variant, r.in_mean, r.in_std, r.ood_mean, r.ood_std);
    }
    Ok(true)
}

fn cmd_sweep(cfg: &RunConfig) -> Result<bool> {
    let angles = target_angles(cfg)?;
    start_out_dir(cfg)?;
    let rows = sweep(&cfg.train, cfg.sweep_param, &cfg.sweep_values, &cfg.seeds, cfg.jobs, |s| load_split(cfg, s))?;
    write(&cfg.out_dir.join("sweep.csv"), &sweep_csv(cfg.sweep_param, &rows))?;
    write(&cfg.out_dir.join("runs.csv"), &runs_csv(rows.iter().flat_map(|r| &r.runs), &angles))?;
    for r in &rows {
        println!(
            "{} = {}: val {:.4} ± {:.4} ood {:.4} ± {:.4}",
            cfg.sweep_param.name(),
            r.value,
            r.val_mean,
            r.val_std,
            r.ood_mean,
            r.ood_std
        );
    }
    Ok(true)
}

fn cmd_verify(cfg: &RunConfig) -> Result<bool> {
    let fault = match &cfg.fault {
        None => None,
        Some(op) => Some(
            *FAULT_OPS
                .iter()
                .find(|k| **k == op.as_str())
                .ok_or_else(|| Error::Config(format!("fault must be one of {}, got {op:?}", FAULT_OPS.join(", "))))?,
        ),
    };
    let checks = verify::run_checks(cfg.train.seed, fault)?;
    for c in &checks {
        println!("{c}");
    }
    let passed = checks.iter().filter(|c| c.passed).count();
    println!("{passed}/{} checks passed", checks.len());
    Ok(passed == checks.len())
}
