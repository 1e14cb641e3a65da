use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SMALL: &str = r#"
[model]
d_model = 8
n_heads = 2
d_hidden = 12
max_len = 48
[data]
corpus_size = 300
pairs = 300
[sft]
steps = 40
batch_size = 8
[rm]
steps = 20
batch_size = 8
[cm]
steps = 20
batch_size = 8
[disc]
steps = 20
batch_size = 8
[align]
steps = 6
eval_every = 3
eval_queries = 8
[ppo]
batch_queries = 4
rollouts_per_query = 2
minibatch_size = 4
[eval]
n_queries = 40
[ablation]
seeds = [0]
"#;

fn rlhb(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlhb")).args(args).current_dir(cwd).env_remove("RLHB_OUTPUT_ROOT").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A workspace with data and every warm-up plus an RLHF run, built once.
struct Prepared {
    _dir: tempfile::TempDir,
    cwd: PathBuf,
}

impl Prepared {
    fn root(&self) -> PathBuf {
        self.cwd.join("runs")
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = args.to_vec();
        all.extend(["-c", "small.toml"]);
        rlhb(&all, &self.cwd)
    }
}

fn prepared() -> &'static Prepared {
    static P: OnceLock<Prepared> = OnceLock::new();
    P.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cwd = dir.path().to_path_buf();
        fs::write(cwd.join("small.toml"), SMALL).unwrap();
        let p = Prepared { _dir: dir, cwd };
        for args in [&["gen-data"][..], &["train", "sft"], &["train", "rm"], &["train", "cm"], &["train", "disc"], &["train", "rlhf"]] {
            let o = p.run(args);
            assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        }
        p
    })
}

fn toml_value(text: &str, key: &str) -> toml_lite::Value {
    toml_lite::lookup(text, key)
}

/// Just enough TOML reading for the checks here.
mod toml_lite {
    pub type Value = String;

    pub fn lookup(text: &str, dotted: &str) -> Value {
        let (section, key) = dotted.rsplit_once('.').unwrap_or(("", dotted));
        let mut current = String::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = s.to_string();
            } else if let Some((k, v)) = line.split_once('=') {
                if current == section && k.trim() == key {
                    return v.trim().to_string();
                }
            }
        }
        panic!("{dotted} not found")
    }
}

#[test]
fn help_lists_every_config_key_with_default() {
    let dir = tempfile::tempdir().unwrap();
    let o = rlhb(&["--help"], dir.path());
    assert_eq!(code(&o), 0);
    let help = stdout(&o);
    for key in [
        "seed",
        "ppo.kappa",
        "ppo.kl_estimator",
        "align.frozen_disc",
        "align.literal_eq4",
        "align.disc_reward",
        "model.d_model",
        "paths.stack_base",
    ] {
        assert!(help.lines().any(|l| l.trim_start().starts_with(&format!("{key} = "))), "{key} missing from help");
    }
    assert!(help.contains("ppo.kappa = 0.125"));
    let o = rlhb(&["train", "--help"], dir.path());
    assert!(stdout(&o).contains("ablation.kappas = [0.0, 0.125, 0.25, 0.5]"));
}

#[test]
fn gen_data_defaults_manifest_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let o = rlhb(&["gen-data", "--out", "a"], cwd);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let corpus = fs::read_to_string(cwd.join("a/data/corpus.tsv")).unwrap();
    let pairs = fs::read_to_string(cwd.join("a/data/pairs.tsv")).unwrap();
    assert_eq!(corpus.lines().count(), 10_000);
    let default_pairs: usize = toml_value(&stdout(&o), "data.pairs").replace('_', "").parse().unwrap();
    assert_eq!(pairs.lines().count(), default_pairs);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(cwd.join("a/data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["corpus"]["count"], corpus.lines().count());
    assert_eq!(manifest["pairs"]["count"], pairs.lines().count());
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    // same seed, different root: byte-identical
    assert_eq!(code(&rlhb(&["gen-data", "--out", "b"], cwd)), 0);
    for f in ["corpus.tsv", "pairs.tsv", "manifest.json"] {
        assert_eq!(fs::read(cwd.join("a/data").join(f)).unwrap(), fs::read(cwd.join("b/data").join(f)).unwrap(), "{f}");
    }
    // refuses to overwrite unless asked
    let o = rlhb(&["gen-data", "--out", "a"], cwd);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--overwrite"));
    let o = rlhb(&["gen-data", "--out", "a", "--overwrite", "--seed", "5", "--set", "data.corpus_size=50", "--set", "data.pairs=20"], cwd);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(cwd.join("a/data/corpus.tsv")).unwrap().lines().count(), 50);
}

#[test]
fn missing_prerequisites_name_the_fix() {
    let dir = tempfile::tempdir().unwrap();
    let o = rlhb(&["train", "rlhb"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("gen-data") || stderr(&o).contains("train sft"), "{}", stderr(&o));
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    assert_eq!(code(&rlhb(&["gen-data", "-c", "small.toml"], dir.path())), 0);
    let o = rlhb(&["train", "rlhf", "-c", "small.toml"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("train sft"), "{}", stderr(&o));
    // nothing was started
    assert!(!dir.path().join("runs/rlhf").exists());
    let o = rlhb(&["train", "stacked", "-c", "small.toml"], dir.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn rlhb_without_corpus_names_gen_data() {
    let p = prepared();
    let o = p.run(&["train", "rlhb", "--set", "paths.corpus=elsewhere/none.tsv", "--run-dir", "no-corpus"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_two() {
    let p = prepared();
    for bad in ["ppo.kapa=0.5", "ppo.kappa=2", "align.steps=-1"] {
        let o = p.run(&["train", "rlhf", "--set", bad, "--run-dir", "bad"]);
        assert_eq!(code(&o), 2, "{bad}: {}", stderr(&o));
    }
    let o = rlhb(&["train", "rlhf", "-c", "missing.toml"], &p.cwd);
    assert_eq!(code(&o), 2);
}

#[test]
fn completed_runs_hold_config_metrics_and_checkpoints() {
    let p = prepared();
    for (target, dir, ckpt) in [
        ("sft", "sft", "policy.ckpt"),
        ("rm", "rm", "reward.ckpt"),
        ("cm", "cm", "classifier.ckpt"),
        ("disc", "disc", "discriminator.ckpt"),
        ("rlhf", "rlhf", "policy.ckpt"),
    ] {
        let d = p.root().join(dir);
        for f in ["config.toml", "metrics.csv", "report.json", ckpt] {
            assert!(d.join(f).is_file(), "{target}: {f}");
        }
        assert!(!d.join(".rlhb.lock").exists());
    }
    for (target, extra) in [("rlhbc", None), ("rlhb", Some("discriminator.ckpt"))] {
        let o = p.run(&["train", target, "--set", "ppo.kappa=0.5"]);
        assert_eq!(code(&o), 0, "{target}: {}", stderr(&o));
        // override echoed before any work and stored with the run
        let out = stdout(&o);
        assert!(out.starts_with("# effective configuration"));
        assert_eq!(toml_value(&out, "ppo.kappa"), "0.5");
        let d = p.root().join(target);
        assert_eq!(toml_value(&fs::read_to_string(d.join("config.toml")).unwrap(), "ppo.kappa"), "0.5");
        for f in ["metrics.csv", "policy.ckpt", "critic.ckpt", "report.json"].into_iter().chain(extra) {
            assert!(d.join(f).is_file(), "{target}: {f}");
        }
        let metrics = fs::read_to_string(d.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 6);
    }
}

#[test]
fn stacked_runs_leave_their_base_alone() {
    let p = prepared();
    let base = p.root().join("rlhf/policy.ckpt");
    let before = fs::read(&base).unwrap();
    let o = p.run(&["train", "stacked"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&base).unwrap(), before);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.root().join("stacked-rlhb/report.json")).unwrap()).unwrap();
    assert_eq!(report["stacked"], true);
    assert!(report["vs_base"]["n"].as_u64().unwrap() > 0);
    let o = p.run(&["train", "stacked", "--set", "align.stack_loop=rlhbc"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(p.root().join("stacked-rlhbc/policy.ckpt").is_file());
    assert_eq!(fs::read(&base).unwrap(), before);
}

#[test]
fn reruns_are_byte_identical() {
    let p = prepared();
    for d in ["again-1", "again-2"] {
        let o = p.run(&["train", "rlhb", "--run-dir", d]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["metrics.csv", "policy.ckpt", "discriminator.ckpt", "report.json"] {
        assert_eq!(fs::read(p.root().join("again-1").join(f)).unwrap(), fs::read(p.root().join("again-2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn collapse_flag_exits_four_after_saving() {
    let p = prepared();
    let o = p.run(&[
        "train",
        "rlhb",
        "--run-dir",
        "collapsed",
        "--set",
        "align.collapse_high=0.001",
        "--set",
        "align.collapse_low=0",
        "--set",
        "align.collapse_window=3",
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("collapse flagged at step 2"), "{}", stderr(&o));
    assert!(p.root().join("collapsed/metrics.csv").is_file());
    assert!(p.root().join("collapsed/policy.ckpt").is_file());
}

#[test]
fn locked_directories_are_refused() {
    let p = prepared();
    let d = p.root().join("locked");
    fs::create_dir_all(&d).unwrap();
    fs::write(d.join(".rlhb.lock"), "1").unwrap();
    let o = p.run(&["train", "rlhf", "--run-dir", "locked"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("in use"), "{}", stderr(&o));
    assert!(!d.join("metrics.csv").exists());
}

#[test]
fn eval_reports_ties_and_refuses_foreign_vocabularies() {
    let p = prepared();
    let sft = p.root().join("sft/policy.ckpt");
    let rlhf = p.root().join("rlhf/policy.ckpt");
    let s = |x: &Path| x.display().to_string();
    let o = p.run(&["eval", &s(&sft), &s(&sft), "--report-dir", "eval-self"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.root().join("eval-self/wtl.json")).unwrap()).unwrap();
    assert_eq!(r["tie"], 1.0);
    assert_eq!(r["p_value"], 1.0);
    assert_eq!(r["n"], 40);

    let o = p.run(&["eval", &s(&rlhf), &s(&sft), "--a-behavior", "best", "-n", "30", "--report-dir", "eval-pair"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.root().join("eval-pair/wtl.json")).unwrap()).unwrap();
    let total = r["win"].as_f64().unwrap() + r["tie"].as_f64().unwrap() + r["loss"].as_f64().unwrap();
    assert!((total - 1.0).abs() < 1e-12);
    assert_eq!(r["n"], 30);

    // a checkpoint built for another vocabulary
    let o = p.run(&["eval", &s(&sft), &s(&sft), "--set", "grammar.n_symbols=7", "--report-dir", "eval-bad"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("vocabulary"), "{}", stderr(&o));
}

#[test]
fn ablate_writes_one_metrics_file_per_cell_and_a_report() {
    let p = prepared();
    let o = p.run(&["ablate", "--only", "kappa=0.5", "--only", "rollouts=1", "--run-dir", "grid"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let d = p.root().join("grid");
    for cell in ["kappa-0.5", "rollouts-1"] {
        assert!(d.join(cell).join("seed-0/metrics.csv").is_file(), "{cell}");
        assert!(d.join(cell).join("seed-0/config.toml").is_file(), "{cell}");
    }
    let report = fs::read_to_string(d.join("report.tsv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    let o = p.run(&["ablate", "--only", "kappa=0.7"]);
    assert_eq!(code(&o), 2);

    // the kappa sweep as one table
    let out = p.cwd.join("kappa.csv");
    let o = rlhb(
        &[
            "export-metrics",
            &d.join("kappa-0.5/seed-0").display().to_string(),
            &d.join("rollouts-1/seed-0").display().to_string(),
            "-o",
            &out.display().to_string(),
        ],
        &p.cwd,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out).unwrap().lines().count(), 1 + 6);
}

#[test]
fn export_merges_by_step_and_checks_columns() {
    let p = prepared();
    let out = p.cwd.join("single.csv");
    let rlhf = p.root().join("rlhf");
    let o = rlhb(&["export-metrics", &rlhf.display().to_string(), "-o", &out.display().to_string()], &p.cwd);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let original = fs::read_to_string(rlhf.join("metrics.csv")).unwrap();
    let merged = fs::read_to_string(&out).unwrap();
    // identical modulo the run prefix in the header
    assert_eq!(original.lines().skip(1).collect::<Vec<_>>(), merged.lines().skip(1).collect::<Vec<_>>());
    let normalized: Vec<String> = merged.lines().next().unwrap().split(',').map(|c| c.trim_start_matches("rlhf.").to_string()).collect();
    assert_eq!(normalized.join(","), original.lines().next().unwrap());

    let stacked_dir = tempfile::tempdir().unwrap();
    let copy = stacked_dir.path().join("copy");
    fs::create_dir_all(&copy).unwrap();
    fs::copy(rlhf.join("metrics.csv"), copy.join("metrics.csv")).unwrap();
    let out2 = p.cwd.join("double.csv");
    let o = rlhb(&["export-metrics", &rlhf.display().to_string(), &copy.display().to_string(), "-o", &out2.display().to_string()], &p.cwd);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let header = fs::read_to_string(&out2).unwrap().lines().next().unwrap().split(',').count();
    let per_run = original.lines().next().unwrap().split(',').count() - 1;
    assert_eq!(header, 1 + 2 * per_run);

    // warm-up tables have other columns
    let o = rlhb(&["export-metrics", &rlhf.display().to_string(), &p.root().join("sft").display().to_string(), "-o", "bad.csv"], &p.cwd);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("only in"), "{}", stderr(&o));
}

#[test]
fn output_root_comes_from_flag_or_environment() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rlhb"))
        .args(["gen-data", "-c", "small.toml"])
        .current_dir(dir.path())
        .env("RLHB_OUTPUT_ROOT", "from-env")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("from-env/data/corpus.tsv").is_file());
    // nothing else appeared in the working directory
    let mut entries: Vec<String> =
        fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    entries.sort();
    assert_eq!(entries, ["from-env", "small.toml"]);
}
