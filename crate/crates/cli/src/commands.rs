use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use rlhb_core::behavior::BehaviorLevels;
use rlhb_core::env::{load_corpus, load_pairs, save_corpus, save_pairs, DemonstrationTriplet, PreferencePair};
use rlhb_core::models::vocab::TokenId;
use rlhb_core::models::{load_checkpoint, save_checkpoint, ClassifierModel, DiscriminatorModel, Model, PolicyModel, RewardModel};
use rlhb_core::train::{
    ablation_factors, ablation_report, classifier_accuracy, disc_accuracy, evaluate_winrate, pair_accuracy, run_ablations, run_rlhb,
    run_rlhbc, run_rlhf, run_stacked, summarize, train_cm, train_rm, train_sft, warmup_discriminator, write_rows, AlignOutcome, Lab,
    PolicyAnswerer, StackLoop, StackWith, TrainConfig, WarmupOutcome, WinTieLoss,
};

use crate::run::{
    echo_config, effective_config, lab, output_root, require, write_json, CliResult, DirLock, Failure, EXIT_COLLAPSE, EXIT_CONFIG,
};
use crate::{Common, Conditioning, TrainTarget};

/// Artifact locations resolved against the output root.
struct Artifacts {
    corpus: PathBuf,
    pairs: PathBuf,
    sft: PathBuf,
    rm: PathBuf,
    cm: PathBuf,
    disc: PathBuf,
    stack_base: PathBuf,
}

impl Artifacts {
    fn new(root: &Path, cfg: &TrainConfig) -> Self {
        let p = &cfg.paths;
        Self {
            corpus: root.join(&p.corpus),
            pairs: root.join(&p.pairs),
            sft: root.join(&p.sft),
            rm: root.join(&p.rm),
            cm: root.join(&p.cm),
            disc: root.join(&p.disc),
            stack_base: root.join(&p.stack_base),
        }
    }

    fn corpus(&self, lab: &Lab) -> CliResult<Vec<DemonstrationTriplet>> {
        require(&self.corpus, "demonstration corpus", "gen-data")?;
        Ok(load_corpus(&self.corpus, &lab.vocab, &lab.discretizer)?)
    }

    fn pairs(&self, lab: &Lab) -> CliResult<Vec<PreferencePair>> {
        require(&self.pairs, "preference pairs", "gen-data")?;
        Ok(load_pairs(&self.pairs, &lab.vocab)?)
    }

    fn model<M: Model>(&self, lab: &Lab, path: &Path, what: &str, how: &str) -> CliResult<M> {
        require(path, what, how)?;
        Ok(load_checkpoint(path, &lab.vocab)?)
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn gen_data(common: &Common, overwrite: bool) -> CliResult {
    let cfg = effective_config(common)?;
    echo_config(&cfg);
    let lab = lab(&cfg)?;
    let art = Artifacts::new(&output_root(common), &cfg);
    let dir = parent_dir(&art.corpus);
    let manifest = dir.join("manifest.json");
    if !overwrite {
        for p in [&art.corpus, &art.pairs, &manifest] {
            if p.exists() {
                return Err(Failure::new(EXIT_CONFIG, format!("{} already exists; pass --overwrite to replace it", p.display())));
            }
        }
    }
    let _lock = DirLock::acquire(&dir)?;
    fs::create_dir_all(parent_dir(&art.pairs))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let (corpus, pairs) = lab.generate_data()?;
    save_corpus(&corpus, &lab.vocab, &art.corpus)?;
    save_pairs(&pairs, &lab.vocab, &art.pairs)?;
    write_json(
        &manifest,
        &json!({
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
            "vocabulary": lab.vocab.hash(),
            "corpus": { "path": cfg.paths.corpus, "count": corpus.len() },
            "pairs": { "path": cfg.paths.pairs, "count": pairs.len() },
        }),
    )?;
    eprintln!("wrote {} triplets to {} and {} pairs to {}", corpus.len(), art.corpus.display(), pairs.len(), art.pairs.display());
    Ok(())
}

fn default_run_dir(what: TrainTarget, cfg: &TrainConfig) -> PathBuf {
    let p = &cfg.paths;
    match what {
        TrainTarget::Sft => parent_dir(Path::new(&p.sft)),
        TrainTarget::Rm => parent_dir(Path::new(&p.rm)),
        TrainTarget::Cm => parent_dir(Path::new(&p.cm)),
        TrainTarget::Disc => parent_dir(Path::new(&p.disc)),
        TrainTarget::Rlhf => "rlhf".into(),
        TrainTarget::Rlhbc => "rlhbc".into(),
        TrainTarget::Rlhb => "rlhb".into(),
        TrainTarget::Stacked => match cfg.align.stack_loop {
            StackLoop::Rlhb => "stacked-rlhb".into(),
            StackLoop::Rlhbc => "stacked-rlhbc".into(),
        },
    }
}

fn file_name(path: &str) -> PathBuf {
    Path::new(path).file_name().map(PathBuf::from).unwrap_or_else(|| "model.ckpt".into())
}

pub fn train(what: TrainTarget, common: &Common, run_dir: Option<PathBuf>) -> CliResult {
    let cfg = effective_config(common)?;
    echo_config(&cfg);
    let lab = lab(&cfg)?;
    let root = output_root(common);
    let art = Artifacts::new(&root, &cfg);
    let dir = root.join(run_dir.unwrap_or_else(|| default_run_dir(what, &cfg)));
    match what {
        TrainTarget::Sft | TrainTarget::Rm | TrainTarget::Cm | TrainTarget::Disc => warmup(what, &lab, &art, &dir),
        _ => align(what, &lab, &art, &dir),
    }
}

fn start_run(dir: &Path, cfg: &TrainConfig) -> CliResult<DirLock> {
    let lock = DirLock::acquire(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(lock)
}

fn finish_warmup<M: Model>(lab: &Lab, dir: &Path, ckpt: &Path, out: &WarmupOutcome<M>, mut report: serde_json::Value) -> CliResult {
    save_checkpoint(&out.model, &lab.vocab, ckpt)?;
    write_rows(&dir.join("metrics.csv"), &out.rows)?;
    report["checkpoint"] = json!(ckpt.display().to_string());
    report["diverged_at"] = json!(out.diverged_at);
    write_json(&dir.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    match out.diverged_at {
        Some(step) => Err(Failure::new(
            EXIT_COLLAPSE,
            format!("loss became non-finite at step {step}; saved the last finite parameters to {}", ckpt.display()),
        )),
        None => Ok(()),
    }
}

fn warmup(what: TrainTarget, lab: &Lab, art: &Artifacts, dir: &Path) -> CliResult {
    let cfg = &lab.config;
    match what {
        TrainTarget::Sft => {
            let corpus = art.corpus(lab)?;
            let _lock = start_run(dir, cfg)?;
            let (train, _) = lab.split(&corpus);
            let out = train_sft(lab, train)?;
            let queries = lab.eval_queries(cfg.eval.n_queries);
            let quality =
                rlhb_core::train::mean_quality(lab, &mut PolicyAnswerer::new(&out.model, &[], cfg.align.max_response_len), &queries)?;
            let ckpt = dir.join(file_name(&cfg.paths.sft));
            finish_warmup(lab, dir, &ckpt, &out, json!({ "model": "sft", "held_out_quality": quality }))
        }
        TrainTarget::Rm => {
            let pairs = art.pairs(lab)?;
            let sft: PolicyModel = art.model(lab, &art.sft, "fine-tuned policy", "train sft")?;
            let _lock = start_run(dir, cfg)?;
            let (train, held) = lab.split(&pairs);
            let out = train_rm(lab, Some(sft.params()), train)?;
            let acc = pair_accuracy(lab, &out.model, held)?;
            let ckpt = dir.join(file_name(&cfg.paths.rm));
            finish_warmup(lab, dir, &ckpt, &out, json!({ "model": "reward", "held_out_accuracy": acc }))
        }
        TrainTarget::Cm => {
            let corpus = art.corpus(lab)?;
            let sft: PolicyModel = art.model(lab, &art.sft, "fine-tuned policy", "train sft")?;
            let _lock = start_run(dir, cfg)?;
            let (train, held) = lab.split(&corpus);
            let out = train_cm(lab, Some(sft.params()), train)?;
            let acc = classifier_accuracy(lab, &out.model, held)?;
            let ckpt = dir.join(file_name(&cfg.paths.cm));
            finish_warmup(
                lab,
                dir,
                &ckpt,
                &out,
                json!({ "model": "classifier", "held_out_accuracy": { "pv": acc[0], "clicks": acc[1], "likes": acc[2], "dislikes": acc[3] } }),
            )
        }
        _ => {
            let corpus = art.corpus(lab)?;
            let sft: PolicyModel = art.model(lab, &art.sft, "fine-tuned policy", "train sft")?;
            let _lock = start_run(dir, cfg)?;
            let (train, held) = lab.split(&corpus);
            let out = warmup_discriminator(lab, Some(sft.params()), train, false)?;
            let acc = disc_accuracy(lab, &out.model, held, &mut lab.seeds().child("disc").stream("held-out"))?;
            let ckpt = dir.join(file_name(&cfg.paths.disc));
            finish_warmup(lab, dir, &ckpt, &out, json!({ "model": "discriminator", "held_out_accuracy": acc }))
        }
    }
}

enum Source {
    Rm(RewardModel),
    Cm(ClassifierModel),
    Disc(DiscriminatorModel, Vec<DemonstrationTriplet>),
}

fn align(what: TrainTarget, lab: &Lab, art: &Artifacts, dir: &Path) -> CliResult {
    let cfg = &lab.config;
    // Every prerequisite is loaded before the run directory is touched.
    let (start, reference_name): (PolicyModel, &str) = if what == TrainTarget::Stacked {
        (art.model(lab, &art.stack_base, "stacking base policy", "train rlhf")?, "base")
    } else {
        (art.model(lab, &art.sft, "fine-tuned policy", "train sft")?, "sft")
    };
    let source = match (what, cfg.align.stack_loop) {
        (TrainTarget::Rlhf, _) => Source::Rm(art.model(lab, &art.rm, "reward model", "train rm")?),
        (TrainTarget::Rlhbc, _) | (TrainTarget::Stacked, StackLoop::Rlhbc) => {
            Source::Cm(art.model(lab, &art.cm, "behavior classifier", "train cm")?)
        }
        _ => {
            let corpus = art.corpus(lab)?;
            Source::Disc(art.model(lab, &art.disc, "warmed discriminator", "train disc")?, corpus)
        }
    };
    let _lock = start_run(dir, cfg)?;
    let stacked = what == TrainTarget::Stacked;
    let outcome = match &source {
        Source::Rm(rm) => run_rlhf(lab, &start, rm),
        Source::Cm(cm) if stacked => run_stacked(lab, &start, StackWith::Rlhbc { cm }),
        Source::Cm(cm) => run_rlhbc(lab, &start, cm),
        Source::Disc(dm, corpus) if stacked => run_stacked(lab, &start, StackWith::Rlhb { disc: dm, corpus }),
        Source::Disc(dm, corpus) => run_rlhb(lab, &start, dm, corpus),
    }?;
    save_aligned(lab, dir, &outcome)?;

    let queries = lab.eval_queries(cfg.eval.n_queries);
    let behavior = outcome.eval_behavior(lab);
    let len = cfg.align.max_response_len;
    let wtl = evaluate_winrate(
        lab,
        &mut PolicyAnswerer::new(&outcome.policy, &behavior, len),
        &mut PolicyAnswerer::new(&start, &[], len),
        &queries,
        cfg.eval.tie_band,
    )?;
    let summary = summarize(&outcome.metrics);
    let first = outcome.metrics.first().cloned().unwrap_or_default();
    let last = outcome.metrics.last().cloned().unwrap_or_default();
    let report = json!({
        "loop": outcome.kind.name(),
        "stacked": stacked,
        "steps": outcome.metrics.len(),
        "collapse_step": outcome.collapse_step,
        "first_mean_reward": first.mean_reward,
        "last_mean_reward": last.mean_reward,
        "final_disc_reward": summary.final_disc_reward,
        "tail_disc_std": summary.tail_disc_std,
        "tail_return_var": summary.tail_return_var,
        "frozen_versions": outcome.frozen_versions.iter().map(|(m, a, b)| json!({ "model": m, "before": a, "after": b })).collect::<Vec<_>>(),
        format!("vs_{reference_name}"): wtl_json(&wtl),
    });
    write_json(&dir.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    if let Some(step) = outcome.collapse_step {
        return Err(Failure::new(
            EXIT_COLLAPSE,
            format!(
                "discriminator collapse flagged at step {step}: mean D on generated samples stayed outside [{}, {}] for {} steps",
                cfg.align.collapse_low, cfg.align.collapse_high, cfg.align.collapse_window
            ),
        ));
    }
    Ok(())
}

fn save_aligned(lab: &Lab, dir: &Path, outcome: &AlignOutcome) -> CliResult {
    save_checkpoint(&outcome.policy, &lab.vocab, &dir.join("policy.ckpt"))?;
    save_checkpoint(&outcome.critic, &lab.vocab, &dir.join("critic.ckpt"))?;
    if let Some(d) = &outcome.disc {
        save_checkpoint(d, &lab.vocab, &dir.join("discriminator.ckpt"))?;
    }
    write_rows(&dir.join("metrics.csv"), &outcome.metrics)?;
    Ok(())
}

fn wtl_json(w: &WinTieLoss) -> serde_json::Value {
    json!({
        "n": w.n(),
        "wins": w.wins,
        "ties": w.ties,
        "losses": w.losses,
        "win": w.win,
        "tie": w.tie,
        "loss": w.loss,
        "decisive_win_rate": w.decisive_win_rate(),
        "mean_quality_a": w.mean_quality_a,
        "mean_quality_b": w.mean_quality_b,
        "p_value": w.p_value,
    })
}

fn conditioning(lab: &Lab, c: Conditioning) -> Vec<TokenId> {
    let parts = lab.config.simulator.parts;
    match c {
        Conditioning::None => Vec::new(),
        Conditioning::Best => lab.behavior_tokens(&BehaviorLevels::most_preferred(parts)),
        Conditioning::Worst => lab.behavior_tokens(&BehaviorLevels::least_preferred(parts)),
    }
}

pub fn eval(
    a: &Path,
    b: &Path,
    common: &Common,
    a_behavior: Conditioning,
    b_behavior: Conditioning,
    n: Option<usize>,
    report_dir: &Path,
) -> CliResult {
    let cfg = effective_config(common)?;
    echo_config(&cfg);
    let lab = lab(&cfg)?;
    let load = |p: &Path| -> CliResult<PolicyModel> {
        require(p, "policy checkpoint", "train")?;
        Ok(load_checkpoint(p, &lab.vocab)?)
    };
    let (pa, pb) = (load(a)?, load(b)?);
    let dir = output_root(common).join(report_dir);
    let _lock = start_run(&dir, &cfg)?;
    let n = n.unwrap_or(cfg.eval.n_queries);
    if n == 0 {
        return Err(Failure::new(EXIT_CONFIG, "evaluation needs at least one query"));
    }
    let queries = lab.eval_queries(n);
    let (ba, bb) = (conditioning(&lab, a_behavior), conditioning(&lab, b_behavior));
    let len = cfg.align.max_response_len;
    let w = evaluate_winrate(
        &lab,
        &mut PolicyAnswerer::new(&pa, &ba, len),
        &mut PolicyAnswerer::new(&pb, &bb, len),
        &queries,
        cfg.eval.tie_band,
    )?;
    let mut report = wtl_json(&w);
    report["a"] = json!(a.display().to_string());
    report["b"] = json!(b.display().to_string());
    report["tie_band"] = json!(cfg.eval.tie_band);
    write_json(&dir.join("wtl.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}

fn cell_dir_name(name: &str) -> String {
    name.replace('=', "-")
}

pub fn ablate(common: &Common, only: &[String], run_dir: &Path) -> CliResult {
    let cfg = effective_config(common)?;
    echo_config(&cfg);
    let lab = lab(&cfg)?;
    let root = output_root(common);
    let art = Artifacts::new(&root, &cfg);
    let corpus = art.corpus(&lab)?;
    let sft: PolicyModel = art.model(&lab, &art.sft, "fine-tuned policy", "train sft")?;
    let dm: DiscriminatorModel = art.model(&lab, &art.disc, "warmed discriminator", "train disc")?;
    let mut factors = ablation_factors(&cfg);
    if !only.is_empty() {
        let names: Vec<String> = factors.iter().map(|f| f.name()).collect();
        if let Some(bad) = only.iter().find(|o| !names.contains(o)) {
            return Err(Failure::new(EXIT_CONFIG, format!("unknown ablation cell `{bad}`; known cells: {}", names.join(", "))));
        }
        factors.retain(|f| only.contains(&f.name()));
    }
    let dir = root.join(run_dir);
    let _lock = start_run(&dir, &cfg)?;
    let mut io_error = None;
    let cells = run_ablations(&cfg, &factors, &sft, &dm, &corpus, |cell| {
        let cdir = dir.join(cell_dir_name(&cell.factor.name())).join(format!("seed-{}", cell.seed));
        let write = || -> CliResult {
            fs::create_dir_all(&cdir)?;
            fs::write(cdir.join("config.toml"), cell.config.to_toml())?;
            if let Some(rows) = cell.metrics() {
                write_rows(&cdir.join("metrics.csv"), rows)?;
            }
            Ok(())
        };
        if let Err(e) = write() {
            io_error.get_or_insert(e);
        }
        match &cell.outcome {
            Ok(o) => eprintln!("cell {} done (collapse step {:?})", cell.name(), o.collapse_step),
            Err(e) => eprintln!("cell {} failed: {e}", cell.name()),
        }
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let report = ablation_report(&cells);
    fs::write(dir.join("report.tsv"), &report)?;
    print!("{report}");
    Ok(())
}
