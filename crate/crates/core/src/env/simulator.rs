use rand::Rng as _;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::task::{GrammarConfig, Query};
use crate::behavior::{BehaviorRecord, Discretizer};
use crate::error::{Error, Result};
use crate::models::vocab::{TokenId, Vocabulary};
use crate::rng::Rng;

/// Parameters of the stochastic user-behavior model.
///
/// `pv = min(x_max, 1 + Poisson(λ))` with `λ = pv_mean · exp(σZ − σ²/2)`
/// (σ = `pv_skew`, Z standard normal); then
/// `clicks ~ Bin(pv, ctr(q))`, `likes ~ Bin(clicks, p_like(q))`,
/// `dislikes ~ Bin(clicks − likes, p_dislike(1 − q))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    pub pv_mean: f64,
    /// Log-normal spread of the per-exposure traffic rate; larger values
    /// make strong-feedback samples rarer and heavier-tailed.
    pub pv_skew: f64,
    pub x_max: u64,
    pub parts: u8,
    pub ctr_base: f64,
    pub ctr_slope: f64,
    pub like_slope: f64,
    pub dislike_slope: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self { pv_mean: 60.0, pv_skew: 0.5, x_max: 100, parts: 4, ctr_base: 0.1, ctr_slope: 0.7, like_slope: 0.6, dislike_slope: 0.5 }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("ctr(0)", self.ctr_base),
            ("ctr(1)", self.ctr_base + self.ctr_slope),
            ("p_like(1)", self.like_slope),
            ("p_dislike(1)", self.dislike_slope),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("simulator {name} = {p} is not a probability")));
            }
        }
        if self.ctr_base < 0.0 || self.ctr_slope < 0.0 || self.like_slope < 0.0 || self.dislike_slope < 0.0 {
            return Err(Error::Config("simulator curve parameters must be nonnegative".into()));
        }
        if !(self.pv_mean > 0.0) || !(self.pv_skew >= 0.0) {
            return Err(Error::Config("simulator pv_mean must be positive and pv_skew nonnegative".into()));
        }
        if self.x_max < 1 || self.parts < 2 {
            return Err(Error::Config("simulator x_max >= 1 and parts >= 2 required".into()));
        }
        Ok(())
    }

    pub fn ctr(&self, quality: f64) -> f64 {
        (self.ctr_base + self.ctr_slope * quality).clamp(0.0, 1.0)
    }

    pub fn p_like(&self, quality: f64) -> f64 {
        (self.like_slope * quality).clamp(0.0, 1.0)
    }

    pub fn p_dislike(&self, unhappiness: f64) -> f64 {
        (self.dislike_slope * unhappiness).clamp(0.0, 1.0)
    }

    pub fn discretizer(&self) -> Result<Discretizer> {
        Discretizer::new(self.parts, self.x_max)
    }
}

fn binomial(rng: &mut Rng, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Draw one behavior record for an answer of the given quality.
pub fn simulate_behavior(quality: f64, rng: &mut Rng, config: &SimulatorConfig) -> Result<BehaviorRecord> {
    if !(0.0..=1.0).contains(&quality) {
        return Err(Error::InvalidArgument(format!("quality {quality} outside [0, 1]")));
    }
    let z: f64 = StandardNormal.sample(rng);
    let s = config.pv_skew;
    let rate = (config.pv_mean * (s * z - 0.5 * s * s).exp()).clamp(1e-9, 1e7);
    let extra = Poisson::new(rate).expect("positive rate").sample(rng) as u64;
    let pv = (1 + extra).min(config.x_max);
    let clicks = binomial(rng, pv, config.ctr(quality));
    let likes = binomial(rng, clicks, config.p_like(quality));
    let dislikes = binomial(rng, clicks - likes, config.p_dislike(1.0 - quality));
    BehaviorRecord::new(pv, clicks, likes, dislikes)
}

/// Anything that answers queries for corpus construction.
pub trait Responder {
    fn respond(&mut self, query: &Query, vocab: &Vocabulary, rng: &mut Rng) -> Result<Vec<TokenId>>;
}

/// Mix of scripted answerers spanning the quality range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResponderMix {
    /// Exact styled target.
    pub good: f64,
    /// One structured mistake: wrong style, a substituted, dropped or extra symbol.
    pub mediocre: f64,
    /// Random symbols of random length (possibly empty).
    pub bad: f64,
}

impl Default for ResponderMix {
    fn default() -> Self {
        Self { good: 0.35, mediocre: 0.35, bad: 0.3 }
    }
}

/// Scripted answerer drawing from a [`ResponderMix`].
#[derive(Clone, Debug)]
pub struct ScriptedResponder {
    pub mix: ResponderMix,
    pub grammar: GrammarConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResponseKind {
    Good,
    Mediocre,
    Bad,
}

impl ScriptedResponder {
    pub fn new(mix: ResponderMix, grammar: GrammarConfig) -> Result<Self> {
        let total = mix.good + mix.mediocre + mix.bad;
        if mix.good < 0.0 || mix.mediocre < 0.0 || mix.bad < 0.0 || !(total > 0.0) {
            return Err(Error::Config("responder mix weights must be nonnegative with a positive sum".into()));
        }
        Ok(Self { mix, grammar })
    }

    pub fn pick_kind(&self, rng: &mut Rng) -> ResponseKind {
        let total = self.mix.good + self.mix.mediocre + self.mix.bad;
        let u = rng.random::<f64>() * total;
        if u < self.mix.good {
            ResponseKind::Good
        } else if u < self.mix.good + self.mix.mediocre {
            ResponseKind::Mediocre
        } else {
            ResponseKind::Bad
        }
    }

    pub fn respond_as(&self, kind: ResponseKind, query: &Query, rng: &mut Rng) -> Vec<u8> {
        let n = self.grammar.n_symbols;
        let target = query.target();
        match kind {
            ResponseKind::Good => target,
            ResponseKind::Mediocre => {
                let mut out = target.clone();
                match rng.random_range(0..4) {
                    0 => out = query.style.other().apply(&query.pattern),
                    1 => {
                        let i = rng.random_range(0..out.len());
                        out[i] = ((out[i] as usize + rng.random_range(1..n.max(2))) % n) as u8;
                    }
                    2 if out.len() > 1 => {
                        out.remove(rng.random_range(0..out.len()));
                    }
                    _ => out.push(rng.random_range(0..n) as u8),
                }
                out
            }
            ResponseKind::Bad => {
                let len = rng.random_range(0..=self.grammar.max_len + 1);
                (0..len).map(|_| rng.random_range(0..n) as u8).collect()
            }
        }
    }
}

impl Responder for ScriptedResponder {
    fn respond(&mut self, query: &Query, vocab: &Vocabulary, rng: &mut Rng) -> Result<Vec<TokenId>> {
        let kind = self.pick_kind(rng);
        Ok(self.respond_as(kind, query, rng).into_iter().map(|s| vocab.symbol_id(s)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::shape_reward;
    use crate::rng::SeedTree;

    #[test]
    fn perfect_quality_never_dislikes() {
        let cfg = SimulatorConfig::default();
        let mut rng = SeedTree::new(2).stream("sim");
        for _ in 0..2000 {
            let r = simulate_behavior(1.0, &mut rng, &cfg).unwrap();
            assert_eq!(r.dislikes, 0);
        }
    }

    #[test]
    fn records_respect_invariants() {
        let cfg = SimulatorConfig::default();
        let mut rng = SeedTree::new(5).stream("sim");
        for i in 0..10_000 {
            let q = (i % 11) as f64 / 10.0;
            let r = simulate_behavior(q, &mut rng, &cfg).unwrap();
            assert!(r.pv >= 1 && r.pv <= cfg.x_max);
            assert!(r.clicks <= r.pv);
            assert!(r.likes + r.dislikes <= r.clicks);
        }
        assert!(simulate_behavior(1.5, &mut rng, &cfg).is_err());
    }

    #[test]
    fn mean_shaped_reward_increases_with_quality() {
        let cfg = SimulatorConfig::default();
        let mut rng = SeedTree::new(9).stream("sim");
        let means: Vec<f64> = [0.1, 0.5, 0.9]
            .iter()
            .map(|&q| (0..10_000).map(|_| shape_reward(&simulate_behavior(q, &mut rng, &cfg).unwrap()).unwrap()).sum::<f64>() / 10_000.0)
            .collect();
        assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
    }

    #[test]
    fn scripted_kinds_span_quality() {
        let grammar = GrammarConfig::default();
        let vocab = Vocabulary::new(grammar.n_symbols, 4).unwrap();
        let oracle = super::super::oracle::HiddenQualityOracle::default();
        let r = ScriptedResponder::new(ResponderMix::default(), grammar.clone()).unwrap();
        let mut rng = SeedTree::new(4).stream("resp");
        let q = Query { style: crate::models::vocab::Style::Copy, pattern: vec![0, 1, 2, 3] };
        let score = |kind, rng: &mut Rng| {
            let syms = r.respond_as(kind, &q, rng);
            let toks: Vec<_> = syms.into_iter().map(|s| vocab.symbol_id(s)).collect();
            oracle.quality(&vocab, &q, &toks)
        };
        assert_eq!(score(ResponseKind::Good, &mut rng), 1.0);
        for _ in 0..50 {
            let m = score(ResponseKind::Mediocre, &mut rng);
            assert!(m < 1.0 && m > 0.0, "{m}");
        }
    }
}
