use statrs::distribution::{Binomial, DiscreteCDF};

use super::Lab;
use crate::env::Query;
use crate::error::{Error, Result};
use crate::models::vocab::TokenId;
use crate::models::PolicyModel;

/// Something that answers a query with response tokens.
pub trait Answerer {
    fn answer(&mut self, query: &Query, tokens: &[TokenId]) -> Result<Vec<TokenId>>;
}

/// Greedy decoding from a policy under a fixed behavior text.
pub struct PolicyAnswerer<'a> {
    pub policy: &'a PolicyModel,
    pub behavior: &'a [TokenId],
    pub max_len: usize,
}

impl<'a> PolicyAnswerer<'a> {
    pub fn new(policy: &'a PolicyModel, behavior: &'a [TokenId], max_len: usize) -> Self {
        Self { policy, behavior, max_len }
    }
}

impl Answerer for PolicyAnswerer<'_> {
    fn answer(&mut self, _query: &Query, tokens: &[TokenId]) -> Result<Vec<TokenId>> {
        Ok(self.policy.greedy(tokens, self.behavior, self.max_len)?.tokens)
    }
}

impl<F: FnMut(&Query) -> Result<Vec<TokenId>>> Answerer for F {
    fn answer(&mut self, query: &Query, _tokens: &[TokenId]) -> Result<Vec<TokenId>> {
        self(query)
    }
}

/// Head-to-head outcome of system A against system B.
#[derive(Clone, Debug, PartialEq)]
pub struct WinTieLoss {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub win: f64,
    pub tie: f64,
    pub loss: f64,
    pub mean_quality_a: f64,
    pub mean_quality_b: f64,
    /// Two-sided exact sign test over the decisive comparisons.
    pub p_value: f64,
}

impl WinTieLoss {
    pub fn n(&self) -> usize {
        self.wins + self.ties + self.losses
    }

    /// Wins over decisive comparisons; 0.5 when every comparison tied.
    pub fn decisive_win_rate(&self) -> f64 {
        let d = self.wins + self.losses;
        if d == 0 {
            0.5
        } else {
            self.wins as f64 / d as f64
        }
    }

    pub fn from_counts(wins: usize, ties: usize, losses: usize, mean_quality_a: f64, mean_quality_b: f64) -> Self {
        let n = (wins + ties + losses).max(1) as f64;
        Self {
            wins,
            ties,
            losses,
            win: wins as f64 / n,
            tie: ties as f64 / n,
            loss: losses as f64 / n,
            mean_quality_a,
            mean_quality_b,
            p_value: sign_test(wins, losses),
        }
    }
}

/// Two-sided exact binomial sign test with p = 1/2.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.max(losses) as u64;
    let binom = Binomial::new(0.5, n as u64).expect("valid binomial");
    // P(X >= k) = P(X > k - 1)
    (2.0 * binom.sf(k - 1)).min(1.0)
}

/// Compare two answerers query by query on oracle quality. A difference
/// within `tie_band` counts as a tie.
pub fn evaluate_winrate(lab: &Lab, a: &mut dyn Answerer, b: &mut dyn Answerer, queries: &[Query], tie_band: f64) -> Result<WinTieLoss> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("win-rate evaluation needs at least one query".into()));
    }
    if !(tie_band >= 0.0) {
        return Err(Error::InvalidArgument(format!("tie band must be non-negative, got {tie_band}")));
    }
    let (mut wins, mut ties, mut losses) = (0, 0, 0);
    let (mut qa, mut qb) = (0.0, 0.0);
    for q in queries {
        let tokens = q.tokens(&lab.vocab);
        let ya = lab.quality(q, &a.answer(q, &tokens)?);
        let yb = lab.quality(q, &b.answer(q, &tokens)?);
        qa += ya;
        qb += yb;
        if (ya - yb).abs() <= tie_band {
            ties += 1;
        } else if ya > yb {
            wins += 1;
        } else {
            losses += 1;
        }
    }
    let n = queries.len() as f64;
    Ok(WinTieLoss::from_counts(wins, ties, losses, qa / n, qb / n))
}

/// Mean oracle quality of an answerer over `queries`.
pub fn mean_quality(lab: &Lab, a: &mut dyn Answerer, queries: &[Query]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("mean quality needs at least one query".into()));
    }
    let mut total = 0.0;
    for q in queries {
        let tokens = q.tokens(&lab.vocab);
        total += lab.quality(q, &a.answer(q, &tokens)?);
    }
    Ok(total / queries.len() as f64)
}
