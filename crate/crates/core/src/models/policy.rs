use rand::Rng as _;

use super::backbone::{self, BackboneConfig};
use super::vocab::{TokenId, EOS};
use super::{context_ids, teacher_forced_ids, Model};
use crate::diffcore::{log_softmax_row, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Autoregressive policy `π(a_t | s, b, a_<t)` with a linear vocabulary head.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

/// Tape handles produced by a teacher-forced policy pass.
#[derive(Clone, Copy, Debug)]
pub struct PolicyForward {
    /// `[L]` log-probability of each action.
    pub action_logprobs: Var,
    /// `[L, V]` full log-distribution at each action position.
    pub log_dist: Var,
}

/// A sampled response. `tokens` ends with `<eos>` unless `truncated`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    pub truncated: bool,
}

impl Model for PolicyModel {
    const KIND: &'static str = "policy";

    fn init(config: &BackboneConfig, vocab_size: usize, _extra: usize, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        backbone::init(&mut params, config, vocab_size, rng)?;
        params.insert("head.w", Tensor::zeros(vec![config.d_model, vocab_size])?)?;
        params.insert("head.b", Tensor::zeros(vec![vocab_size])?)?;
        Ok(Self { config: config.clone(), params })
    }

    fn backbone(&self) -> &BackboneConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl PolicyModel {
    pub fn new(config: &BackboneConfig, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        Self::init(config, vocab_size, 0, rng)
    }

    fn logits(&self, tape: &mut Tape, params: &ParamStore, ids: &[TokenId], rows: Option<(usize, usize)>) -> Result<Var> {
        let h = backbone::forward(tape, params, &self.config, ids)?;
        let h = match rows {
            Some((start, len)) => tape.select_rows(h, &(start..start + len).collect::<Vec<_>>())?,
            None => h,
        };
        let w = tape.param(params, "head.w")?;
        let b = tape.param(params, "head.b")?;
        let z = tape.matmul(h, w)?;
        tape.add_row(z, b)
    }

    /// Teacher-forced pass over `actions` using `params` (which may differ
    /// from `self.params`, e.g. during gradient checks).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        query: &[TokenId],
        behavior: &[TokenId],
        actions: &[TokenId],
    ) -> Result<PolicyForward> {
        if actions.is_empty() {
            return Err(Error::InvalidArgument("policy forward needs at least one action".into()));
        }
        backbone::check_ids(actions, self.vocab_size(), usize::MAX)?;
        let (ids, first) = teacher_forced_ids(query, behavior, actions);
        let z = self.logits(tape, params, &ids, Some((first, actions.len())))?;
        let log_dist = tape.log_softmax(z);
        let cols: Vec<usize> = actions.iter().map(|&a| a as usize).collect();
        let action_logprobs = tape.gather(log_dist, &cols)?;
        Ok(PolicyForward { action_logprobs, log_dist })
    }

    /// Per-token log-probabilities of `response` (teacher-forced).
    pub fn logprobs(&self, query: &[TokenId], behavior: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        if response.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, &self.params, query, behavior, response)?;
        Ok(tape.value(f.action_logprobs).to_vec())
    }

    /// Full log-distributions (`L` rows of `V`) at each response position.
    pub fn log_distributions(&self, query: &[TokenId], behavior: &[TokenId], response: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        if response.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, &self.params, query, behavior, response)?;
        let v = self.vocab_size();
        Ok(tape.value(f.log_dist).chunks(v).map(<[f64]>::to_vec).collect())
    }

    fn next_logits(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let z = self.logits(&mut tape, &self.params, ids, Some((ids.len() - 1, 1)))?;
        Ok(tape.value(z).to_vec())
    }

    /// Ancestral sampling at `temperature`; stops after `<eos>` or
    /// `max_len` tokens. Log-probs are under the tempered distribution.
    pub fn sample(&self, query: &[TokenId], behavior: &[TokenId], max_len: usize, temperature: f64, rng: &mut Rng) -> Result<Sample> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
        }
        self.decode(query, behavior, max_len, |logits, lp| {
            for z in logits.iter_mut() {
                *z /= temperature;
            }
            log_softmax_row(logits, lp);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = lp.len() - 1;
            for (i, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        })
    }

    /// Argmax decoding (lowest id wins ties).
    pub fn greedy(&self, query: &[TokenId], behavior: &[TokenId], max_len: usize) -> Result<Sample> {
        self.decode(query, behavior, max_len, |logits, lp| {
            log_softmax_row(logits, lp);
            let mut best = 0;
            for (i, &l) in lp.iter().enumerate() {
                if l > lp[best] {
                    best = i;
                }
            }
            best
        })
    }

    fn decode(
        &self,
        query: &[TokenId],
        behavior: &[TokenId],
        max_len: usize,
        mut choose: impl FnMut(&mut [f64], &mut [f64]) -> usize,
    ) -> Result<Sample> {
        let mut ids = context_ids(query, behavior);
        let budget = max_len.min(self.config.max_len.saturating_sub(ids.len()) + 1);
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut lp = vec![0.0; self.vocab_size()];
        for _ in 0..budget {
            let mut logits = self.next_logits(&ids)?;
            let tok = choose(&mut logits, &mut lp);
            tokens.push(tok as TokenId);
            logprobs.push(lp[tok]);
            if tok as TokenId == EOS {
                return Ok(Sample { tokens, logprobs, truncated: false });
            }
            ids.push(tok as TokenId);
        }
        Ok(Sample { tokens, logprobs, truncated: true })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::rng::SeedTree;

    fn tiny(v: usize, seed: u64) -> PolicyModel {
        PolicyModel::new(&BackboneConfig::tiny(), v, &mut SeedTree::new(seed).stream("init")).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_logprobs() {
        let p = tiny(20, 1);
        let lp = p.logprobs(&[4, 6, 7], &[], &[6, 7, 2]).unwrap();
        assert_eq!(lp.len(), 3);
        for l in lp {
            assert!((l + (20f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn distributions_normalize() {
        let mut p = tiny(20, 2);
        let mut rng = SeedTree::new(3).stream("perturb");
        for (_, t) in p.params.iter_mut() {
            for x in t.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        for row in p.log_distributions(&[4, 6], &[8, 9], &[6, 6, 2]).unwrap() {
            let s: f64 = row.iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() < 1e-10);
            assert!(row.iter().all(|&l| l <= 0.0));
        }
    }

    #[test]
    fn errors_on_bad_input() {
        let p = tiny(20, 1);
        assert!(matches!(p.logprobs(&[40], &[], &[5]), Err(Error::UnknownToken(_))));
        assert!(matches!(p.logprobs(&[4], &[], &[25]), Err(Error::UnknownToken(_))));
        let long = vec![4; 40];
        assert!(matches!(p.logprobs(&long, &[], &[5]), Err(Error::ContextOverflow { .. })));
    }

    fn two_token(p: &mut PolicyModel, other: usize) {
        let b = p.params.get_mut("head.b").unwrap();
        for (i, x) in b.data_mut().iter_mut().enumerate() {
            *x = if i == EOS as usize || i == other { 0.0 } else { -1e3 };
        }
    }

    #[test]
    fn geometric_length_from_two_token_model() {
        let mut p = tiny(10, 4);
        two_token(&mut p, 5);
        let mut rng = SeedTree::new(8).stream("sampling");
        let n = 1000;
        let mut total = 0usize;
        for _ in 0..n {
            let s = p.sample(&[4, 5], &[], 28, 1.0, &mut rng).unwrap();
            assert!(!s.truncated);
            assert!(s.logprobs.iter().all(|l| (l - 0.5f64.ln()).abs() < 1e-12));
            total += s.tokens.len();
        }
        let mean = total as f64 / n as f64;
        assert!((mean - 2.0).abs() < 0.2, "mean length {mean}");
    }

    #[test]
    fn sampling_is_seeded_and_cold_limit_is_greedy() {
        let mut p = tiny(12, 5);
        let mut rng = SeedTree::new(1).stream("perturb");
        for x in p.params.get_mut("head.w").unwrap().data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        let a = p.sample(&[4, 6], &[], 6, 1.0, &mut SeedTree::new(2).stream("s")).unwrap();
        let b = p.sample(&[4, 6], &[], 6, 1.0, &mut SeedTree::new(2).stream("s")).unwrap();
        assert_eq!(a, b);
        let g = p.greedy(&[4, 6], &[], 6).unwrap();
        let cold = p.sample(&[4, 6], &[], 6, 1e-9, &mut SeedTree::new(3).stream("s")).unwrap();
        assert_eq!(g.tokens, cold.tokens);
        assert!(p.sample(&[4], &[], 6, 0.0, &mut rng).is_err());
    }

    #[test]
    fn truncation_is_recorded() {
        let mut p = tiny(10, 6);
        let b = p.params.get_mut("head.b").unwrap();
        b.data_mut()[5] = 50.0;
        let s = p.greedy(&[4], &[], 3).unwrap();
        assert!(s.truncated);
        assert_eq!(s.tokens, vec![5, 5, 5]);
    }

    #[test]
    fn gradient_check_on_sequence_nll() {
        let mut p = tiny(9, 7);
        let mut rng = SeedTree::new(7).stream("perturb");
        for x in p.params.get_mut("head.w").unwrap().data_mut() {
            *x = rng.random_range(-0.5..0.5);
        }
        let report = grad_check(&p.params, 1e-5, |tape, params| {
            let f = p.forward(tape, params, &[4, 5, 6], &[7, 8], &[5, 6, 2])?;
            let s = tape.sum(f.action_logprobs);
            Ok(tape.neg(s))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn sampled_logprobs_match_teacher_forcing() {
        let mut p = PolicyModel::new(&BackboneConfig::tiny(), 14, &mut SeedTree::new(11).stream("init")).unwrap();
        let mut rng = SeedTree::new(12).stream("perturb");
        for (_, t) in p.params.iter_mut() {
            for x in t.data_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
        for i in 0..50 {
            let q: Vec<TokenId> = (0..rng.random_range(1..5)).map(|_| rng.random_range(4..14)).collect();
            let b: Vec<TokenId> = if i % 2 == 0 { vec![] } else { vec![9, 10, 11] };
            let s = p.sample(&q, &b, 6, 1.0, &mut rng).unwrap();
            let tf = p.logprobs(&q, &b, &s.tokens).unwrap();
            for (a, c) in s.logprobs.iter().zip(&tf) {
                assert!((a - c).abs() < 1e-9, "{:?} vs {:?}", s.logprobs, tf);
            }
        }
    }
}
