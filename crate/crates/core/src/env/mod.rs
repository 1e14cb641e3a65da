//! Synthetic online environment: a pattern-echo query grammar, a hidden
//! quality oracle, a stochastic user-behavior simulator, and construction
//! and persistence of demonstration and preference corpora.

mod corpus;
mod oracle;
mod simulator;
mod task;

pub use corpus::{
    build_corpus, label_pair, load_corpus, load_pairs, preference_pairs, save_corpus, save_pairs, DemonstrationTriplet, Environment,
    PreferencePair, CORPUS_FORMAT, PAIRS_FORMAT,
};
pub use oracle::{content_of, HiddenQualityOracle};
pub use simulator::{simulate_behavior, Responder, ResponderMix, ResponseKind, ScriptedResponder, SimulatorConfig};
pub use task::{gen_query, GrammarConfig, Query};
