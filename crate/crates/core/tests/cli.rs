use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const BIN: &str = env!("CARGO_BIN_EXE_bdil");
const SMOKE: &[&str] = &["--iters", "50", "--batch", "16", "--l", "2", "--m", "2", "--val_every", "10"];

fn bdil(args: &[&str]) -> Output {
    bdil_env(args, None)
}

fn bdil_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("BDIL_SEED");
    if let Some(s) = seed {
        c.env("BDIL_SEED", s);
    }
    c.output().expect("bdil runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn gen_data(dir: &Path, extra: &[&str]) {
    let d = s(dir);
    let mut args = vec!["gen-data", "--data_dir", &d, "--per_class", "60"];
    args.extend_from_slice(extra);
    let o = bdil(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let (d, o) = (s(data), s(out));
    let mut args = vec!["train", "--data_dir", &d, "--out_dir", &o];
    args.extend_from_slice(SMOKE);
    args.extend_from_slice(extra);
    bdil(&args)
}

#[test]
fn gen_data_writes_seven_domains_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        let o = bdil(&["gen-data", "--data_dir", &s(d), "--seed", "9"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut names: Vec<String> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".csv")).count(), 7);
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n}");
    }
    let manifest = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l == "seed = 9"), "{manifest}");
    assert_eq!(manifest.lines().filter(|l| l.starts_with("source = ")).count(), 5);
    assert_eq!(manifest.lines().filter(|l| l.starts_with("target = ")).count(), 2);
}

#[test]
fn missing_data_dir_exits_2_naming_the_path() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("no_such_data");
    let o = train(&missing, &t.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&s(&missing)), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bdil(&["train", "--not_a_key", "1"]).status.code(), Some(2));
    assert_eq!(bdil(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bdil(&["train", "--iters", "many"]).status.code(), Some(2));
    assert_eq!(bdil(&["verify", "--fault", "nonsense"]).status.code(), Some(2));
    let o = bdil(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.cfg"));
    assert_eq!(bdil(&["--help"]).status.code(), Some(0));
}

#[test]
fn corrupt_data_file_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen_data(&data, &[]);
    let csv = data.join("source_30.csv");
    let mut text = std::fs::read_to_string(&csv).unwrap();
    text.push_str("1.0,oops,0,1,30\n");
    std::fs::write(&csv, text).unwrap();
    let o = train(&data, &t.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("source_30.csv"), "{}", stderr(&o));
}

#[test]
fn smoke_train_writes_artifacts_quickly_and_eval_reproduces_val() {
    let t = tempfile::tempdir().unwrap();
    let (data, out) = (t.path().join("data"), t.path().join("run"));
    let o = bdil(&["gen-data", "--data_dir", &s(&data)]);
    assert!(o.status.success());
    let started = Instant::now();
    let o = train(&data, &out, &[]);
    let secs = started.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(secs < 10.0, "smoke run took {secs:.1} s");
    for f in ["config.txt", "metrics.jsonl", "summary.csv", "best.ckpt", "last.ckpt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 50);
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    let final_val = last["val_accuracy"].as_f64().unwrap();

    let cfg = s(&out.join("config.txt"));
    let ck = s(&out.join("last.ckpt"));
    let o = bdil(&["eval", "--config", &cfg, "--checkpoint", &ck]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let val_line = text.lines().find(|l| l.starts_with("val,")).unwrap();
    let acc: f64 = val_line.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(acc, final_val, "{text}");

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("variant,seed,best_iter,in_dist,ood,ood_0,ood_90\n"), "{summary}");
}

#[test]
fn echoed_config_reproduces_the_run() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen_data(&data, &[]);
    let first = t.path().join("first");
    assert!(train(&data, &first, &["--variant", "h", "--lr", "0.003"]).status.success());
    let again = t.path().join("again");
    let o = bdil(&["train", "--config", &s(&first.join("config.txt")), "--out_dir", &s(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.jsonl", "best.ckpt", "summary.csv"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_precedence_flag_over_env_over_file() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let cfg = t.path().join("run.cfg");
    std::fs::write(&cfg, format!("data_dir = {}\nseed = 4\nper_class = 60\n", s(&data))).unwrap();
    let c = s(&cfg);
    let seed_of = |args: &[&str], env: Option<&str>| {
        let o = bdil_env(args, env);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(data.join("manifest.txt")).unwrap().lines().next().unwrap().to_string()
    };
    assert_eq!(seed_of(&["gen-data", "--config", &c], None), "seed = 4");
    assert_eq!(seed_of(&["gen-data", "--config", &c], Some("5")), "seed = 5");
    assert_eq!(seed_of(&["gen-data", "--config", &c, "--seed", "6"], Some("5")), "seed = 6");
}

#[test]
fn verify_passes_and_fault_fixture_fails() {
    let o = bdil(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    let checks: Vec<&str> = text.lines().filter(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")).collect();
    assert!(checks.len() >= 4 && checks.iter().all(|l| l.starts_with("PASS ")), "{text}");
    assert!(text.contains("threshold"));

    let o = bdil(&["verify", "--fault", "softplus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL objective_gradient")), "{}", stdout(&o));
}

#[test]
fn ablate_and_sweep_write_tables() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen_data(&data, &[]);
    let (d, out) = (s(&data), s(&t.path().join("abl")));
    let mut args = vec!["ablate", "--data_dir", &d, "--out_dir", &out, "--variants", "a,b,j", "--seeds", "0,1"];
    args.extend_from_slice(SMOKE);
    let o = bdil(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(t.path().join("abl/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");
    let runs = std::fs::read_to_string(t.path().join("abl/runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 7, "{runs}");

    let out = s(&t.path().join("sw"));
    let mut args = vec!["sweep", "--data_dir", &d, "--out_dir", &out, "--variant", "c", "--sweep_param", "lambda_psi", "--sweep_values", "1,10", "--seeds", "0"];
    args.extend_from_slice(SMOKE);
    let o = bdil(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = std::fs::read_to_string(t.path().join("sw/sweep.csv")).unwrap();
    assert!(sweep.starts_with("lambda_psi,"), "{sweep}");
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn keys_lists_every_config_key() {
    let o = bdil(&["keys"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for k in ["lambda_psi", "kl_scale", "data_dir", "invariance_z_mode", "jobs"] {
        assert!(text.lines().any(|l| l.starts_with(k)), "{k}");
    }
}
