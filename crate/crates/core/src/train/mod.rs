//! Experimental protocol: warm-up of the baseline policy and the reward,
//! classifier and discriminator models, the PPO alignment loops, win-rate
//! evaluation and ablation grids.

mod ablation;
mod align;
mod config;
mod eval;
mod metrics;
mod warmup;

pub use ablation::{
    ablation_factors, ablation_report, mean_of, run_ablations, summarize, variance_of, AblationCell, AblationFactor, TrajectorySummary,
};
pub use align::{
    classifier_reward, run_oracle, run_rlhb, run_rlhbc, run_rlhf, run_stacked, AlignOutcome, LoopKind, StackWith, UpdateEvent,
};
pub use config::{
    config_keys, AblationConfig, AlignConfig, DataConfig, DiscReward, EvalConfig, PathsConfig, SftConfig, StackLoop, TrainConfig,
    WarmupConfig, SCHEMA_VERSION,
};
pub use eval::{evaluate_winrate, mean_quality, sign_test, Answerer, PolicyAnswerer, WinTieLoss};
pub use metrics::{read_rows, write_rows, MetricsRow, WarmupRow, METRICS_COLUMNS};
pub use warmup::{
    classifier_accuracy, disc_accuracy, greedy_quality, pair_accuracy, sequence_nll, train_cm, train_rm, train_sft, warmup_discriminator,
    WarmupOutcome,
};

use crate::behavior::{render_text, BehaviorLevels, Discretizer};
use crate::env::{build_corpus, preference_pairs, DemonstrationTriplet, Environment, PreferencePair, ScriptedResponder};
use crate::error::Result;
use crate::models::vocab::{TokenId, Vocabulary};
use crate::rng::SeedTree;

/// A validated configuration together with the objects derived from it.
#[derive(Clone, Debug)]
pub struct Lab {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub discretizer: Discretizer,
}

impl Lab {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::new(config.grammar.n_symbols, config.simulator.parts)?;
        let discretizer = config.simulator.discretizer()?;
        Ok(Self { config, vocab, discretizer })
    }

    pub fn env(&self) -> Environment<'_> {
        Environment { vocab: &self.vocab, grammar: &self.config.grammar, oracle: &self.config.oracle, simulator: &self.config.simulator }
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.config.seed)
    }

    /// Token form of the rendered behavior text.
    pub fn behavior_tokens(&self, levels: &BehaviorLevels) -> Vec<TokenId> {
        self.vocab.encode(render_text(levels).words()).expect("level words are in the vocabulary")
    }

    pub fn quality(&self, query: &crate::env::Query, response: &[TokenId]) -> f64 {
        self.config.oracle.quality(&self.vocab, query, response)
    }

    /// Demonstration corpus and preference pairs for this configuration.
    pub fn generate_data(&self) -> Result<(Vec<DemonstrationTriplet>, Vec<PreferencePair>)> {
        let cfg = &self.config;
        let seeds = self.seeds().child("data");
        let mut responder = ScriptedResponder::new(cfg.responder.clone(), cfg.grammar.clone())?;
        let corpus = build_corpus(cfg.data.corpus_size, &mut responder, &seeds, &self.env())?;
        let pairs = preference_pairs(cfg.data.pairs, &mut responder, &seeds, &self.env(), cfg.data.label_noise)?;
        Ok((corpus, pairs))
    }

    /// Fresh evaluation queries, disjoint in stream from anything trained on.
    pub fn eval_queries(&self, n: usize) -> Vec<crate::env::Query> {
        let mut rng = self.seeds().child("eval").stream(crate::rng::streams::EVAL);
        (0..n).map(|_| crate::env::gen_query(&mut rng, &self.config.grammar)).collect()
    }

    /// Split a data set into (train, held-out) by position.
    pub fn split<'a, T>(&self, items: &'a [T]) -> (&'a [T], &'a [T]) {
        let n = items.len();
        let held = (((n as f64) * self.config.data.held_out).round() as usize).min(n.saturating_sub(1));
        items.split_at(n - held)
    }
}
