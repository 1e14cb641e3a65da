use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{GrammarConfig, HiddenQualityOracle, ResponderMix, SimulatorConfig};
use crate::error::{Error, Result};
use crate::models::BackboneConfig;
use crate::rl::PPOConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Full experiment configuration. Serialized as TOML; every run directory
/// holds the exact effective copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub paths: PathsConfig,
    pub grammar: GrammarConfig,
    pub oracle: HiddenQualityOracle,
    pub simulator: SimulatorConfig,
    pub responder: ResponderMix,
    pub model: BackboneConfig,
    pub sft: SftConfig,
    pub rm: WarmupConfig,
    pub cm: WarmupConfig,
    pub disc: WarmupConfig,
    pub ppo: PPOConfig,
    pub align: AlignConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: DataConfig::default(),
            paths: PathsConfig::default(),
            grammar: GrammarConfig::default(),
            oracle: HiddenQualityOracle::default(),
            simulator: SimulatorConfig::default(),
            responder: ResponderMix::default(),
            model: BackboneConfig::default(),
            sft: SftConfig::default(),
            rm: WarmupConfig { steps: 8_000, batch_size: 64, ..WarmupConfig::default() },
            cm: WarmupConfig::default(),
            disc: WarmupConfig::default(),
            ppo: PPOConfig::default(),
            align: AlignConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus_size: usize,
    pub pairs: usize,
    pub label_noise: f64,
    /// Fraction of each data set held out for warm-up evaluation.
    pub held_out: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { corpus_size: 10_000, pairs: 20_000, label_noise: 0.1, held_out: 0.1 }
    }
}

/// Artifact locations, relative to the output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: String,
    pub pairs: String,
    pub sft: String,
    pub rm: String,
    pub cm: String,
    pub disc: String,
    /// Policy checkpoint that stacked runs start from.
    pub stack_base: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "data/corpus.tsv".into(),
            pairs: "data/pairs.tsv".into(),
            sft: "sft/policy.ckpt".into(),
            rm: "rm/reward.ckpt".into(),
            cm: "cm/classifier.ckpt".into(),
            disc: "disc/discriminator.ckpt".into(),
            stack_base: "rlhf/policy.ckpt".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Only demonstrations with oracle quality at or above this are used.
    pub quality_threshold: f64,
    /// Probability that a training example carries its behavior text.
    pub behavior_fraction: f64,
    pub log_every: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 16, lr: 2e-3, quality_threshold: 0.7, behavior_fraction: 0.5, log_every: 10 }
    }
}

/// Shared knobs of the reward-model, classifier and discriminator warm-ups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub log_every: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self { steps: 1_000, batch_size: 16, lr: 1e-3, log_every: 10 }
    }
}

/// Terminal reward read off the discriminator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscReward {
    /// `D(s, a; b)`.
    #[default]
    Probability,
    /// `log D(s, a; b)`.
    LogD,
}

/// Which alignment loop a stacked run continues with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackLoop {
    #[default]
    Rlhb,
    Rlhbc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub steps: usize,
    pub max_response_len: usize,
    pub temperature: f64,
    pub disc_reward: DiscReward,
    pub literal_eq4: bool,
    pub frozen_disc: bool,
    /// Discriminator updates per policy iteration.
    pub disc_steps: usize,
    /// Abort when the batch mean per-token KL exceeds this.
    pub kl_cap: f64,
    pub collapse_window: usize,
    pub collapse_high: f64,
    pub collapse_low: f64,
    /// Steps between win-rate probes against the starting policy.
    pub eval_every: usize,
    pub eval_queries: usize,
    pub stack_loop: StackLoop,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            max_response_len: 6,
            temperature: 1.0,
            disc_reward: DiscReward::Probability,
            literal_eq4: false,
            frozen_disc: false,
            disc_steps: 1,
            kl_cap: 5.0,
            collapse_window: 50,
            collapse_high: 0.95,
            collapse_low: 0.05,
            eval_every: 50,
            eval_queries: 64,
            stack_loop: StackLoop::Rlhb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_queries: usize,
    pub tie_band: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_queries: 500, tie_band: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub kappas: Vec<f64>,
    pub rollouts: Vec<usize>,
    pub batches: Vec<usize>,
    pub frozen: bool,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { kappas: vec![0.0, 0.125, 0.25, 0.5], rollouts: vec![1, 4, 6], batches: vec![8, 16], frozen: true, seeds: vec![0, 1, 2] }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        self.grammar.validate()?;
        self.simulator.validate()?;
        self.model.validate()?;
        self.ppo.validate()?;
        let d = &self.data;
        if d.corpus_size == 0 || d.pairs == 0 {
            return Err(Error::Config("data.corpus_size and data.pairs must be positive".into()));
        }
        if !(0.0..0.5).contains(&d.label_noise) {
            return Err(Error::Config(format!("data.label_noise must be in [0, 0.5), got {}", d.label_noise)));
        }
        if !(d.held_out > 0.0 && d.held_out < 1.0) {
            return Err(Error::Config(format!("data.held_out must be in (0, 1), got {}", d.held_out)));
        }
        if !(0.0..=1.0).contains(&self.sft.quality_threshold) || !(0.0..=1.0).contains(&self.sft.behavior_fraction) {
            return Err(Error::Config("sft.quality_threshold and sft.behavior_fraction must be in [0, 1]".into()));
        }
        for (name, lr, bs) in [
            ("sft", self.sft.lr, self.sft.batch_size),
            ("rm", self.rm.lr, self.rm.batch_size),
            ("cm", self.cm.lr, self.cm.batch_size),
            ("disc", self.disc.lr, self.disc.batch_size),
        ] {
            if !(lr > 0.0 && lr.is_finite()) || bs == 0 {
                return Err(Error::Config(format!("{name}.lr and {name}.batch_size must be positive")));
            }
        }
        let a = &self.align;
        if a.max_response_len == 0 || !(a.temperature > 0.0) || a.collapse_window == 0 || a.eval_every == 0 {
            return Err(Error::Config("align.max_response_len, temperature, collapse_window and eval_every must be positive".into()));
        }
        if !(a.collapse_low < a.collapse_high) || !(a.kl_cap > 0.0) {
            return Err(Error::Config("align.collapse_low < align.collapse_high and align.kl_cap > 0 required".into()));
        }
        if !(self.eval.tie_band >= 0.0) || self.eval.n_queries == 0 {
            return Err(Error::Config("eval.tie_band must be nonnegative and eval.n_queries positive".into()));
        }
        if self.ablation.kappas.iter().any(|k| !(0.0..1.0).contains(k)) {
            return Err(Error::Config("ablation.kappas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Apply `dotted.key=value` overrides. Keys must already exist; values
    /// are read as TOML literals, falling back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) =
                raw.split_once('=').ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
            let key = key.trim();
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot.get_mut(part).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            if slot.is_table() {
                return Err(Error::Config(format!("`{key}` is a section, not a value")));
            }
            let parsed = parse_literal(value.trim());
            *slot = match (&*slot, parsed) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_literal(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Every leaf key of the default configuration with its default value.
pub fn config_keys() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", &toml::Value::try_from(TrainConfig::default()).expect("config serializes"), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_exactly() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("schema_version = 1"));
    }

    #[test]
    fn overrides() {
        let cfg = TrainConfig::default()
            .with_overrides(&["ppo.kappa=0.5", "align.steps = 12", "ppo.kl_estimator=sampled-ratio", "ppo.gamma=1"])
            .unwrap();
        assert_eq!(cfg.ppo.kappa, 0.5);
        assert_eq!(cfg.align.steps, 12);
        assert_eq!(cfg.ppo.kl_estimator, crate::rl::KlEstimator::SampledRatio);
        assert!(cfg.to_toml().contains("kappa = 0.5"));
        for bad in ["ppo.kapa=0.5", "ppo=1", "nokey", "ppo.kappa=1.5", "ppo.kappa=abc"] {
            assert!(matches!(TrainConfig::default().with_overrides(&[bad]), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn unknown_keys_and_schema_rejected() {
        assert!(TrainConfig::from_toml("schema_version = 1\nbogus = 3\n").is_err());
        assert!(TrainConfig::from_toml("schema_version = 2\n").is_err());
        assert!(TrainConfig::from_toml("[ppo]\nclip = 0.1\n").is_err());
        assert_eq!(TrainConfig::from_toml("seed = 4\n").unwrap().seed, 4);
    }

    #[test]
    fn key_listing_covers_sections() {
        let keys = config_keys();
        for k in ["seed", "ppo.kappa", "align.frozen_disc", "model.d_model", "ablation.kappas", "paths.corpus"] {
            assert!(keys.iter().any(|(name, _)| name == k), "{k}");
        }
    }
}
