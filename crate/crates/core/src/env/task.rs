use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::vocab::{Style, TokenId, Vocabulary};
use crate::rng::Rng;

/// The pattern-echo task grammar: `<style> <symbol>{min_len..=max_len}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarConfig {
    pub n_symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self { n_symbols: 6, min_len: 1, max_len: 4 }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_symbols == 0 || self.n_symbols > 26 {
            return Err(Error::Config(format!("grammar.n_symbols must be in 1..=26, got {}", self.n_symbols)));
        }
        // query length = 1 style token + pattern, must stay within [2, 16]
        if self.min_len < 1 || self.max_len < self.min_len || self.max_len > 15 {
            return Err(Error::Config(format!(
                "grammar pattern length range {}..={} must satisfy 1 <= min <= max <= 15",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// A user query: a style directive and a target pattern.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Query {
    pub style: Style,
    pub pattern: Vec<u8>,
}

impl Query {
    pub fn tokens(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.pattern.len() + 1);
        out.push(vocab.style_id(self.style));
        out.extend(self.pattern.iter().map(|&s| vocab.symbol_id(s)));
        out
    }

    pub fn from_tokens(vocab: &Vocabulary, tokens: &[TokenId]) -> Result<Self> {
        let (&head, rest) = tokens.split_first().ok_or_else(|| Error::InvalidArgument("empty query".into()))?;
        let style = vocab.style_of(head).ok_or_else(|| {
            Error::InvalidArgument(format!("query must start with a style token, found `{}`", vocab.token(head).unwrap_or("?")))
        })?;
        let pattern = rest
            .iter()
            .map(|&t| {
                vocab
                    .symbol_of(t)
                    .ok_or_else(|| Error::InvalidArgument(format!("non-symbol `{}` in query pattern", vocab.token(t).unwrap_or("?"))))
            })
            .collect::<Result<Vec<_>>>()?;
        if pattern.is_empty() {
            return Err(Error::InvalidArgument("query has no pattern".into()));
        }
        Ok(Self { style, pattern })
    }

    /// Ideal response symbols.
    pub fn target(&self) -> Vec<u8> {
        self.style.apply(&self.pattern)
    }

    pub fn target_tokens(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        self.target().into_iter().map(|s| vocab.symbol_id(s)).collect()
    }

    pub fn is_valid(&self, grammar: &GrammarConfig) -> bool {
        (grammar.min_len..=grammar.max_len).contains(&self.pattern.len()) && self.pattern.iter().all(|&s| (s as usize) < grammar.n_symbols)
    }

    pub fn len(&self) -> usize {
        self.pattern.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Uniform over styles, pattern lengths and symbols.
pub fn gen_query(rng: &mut Rng, grammar: &GrammarConfig) -> Query {
    let style = Style::ALL[rng.random_range(0..Style::ALL.len())];
    let len = rng.random_range(grammar.min_len..=grammar.max_len);
    let pattern = (0..len).map(|_| rng.random_range(0..grammar.n_symbols) as u8).collect();
    Query { style, pattern }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn fixed_seed_fixed_query() {
        let g = GrammarConfig::default();
        let a = gen_query(&mut SeedTree::new(3).stream("q"), &g);
        let b = gen_query(&mut SeedTree::new(3).stream("q"), &g);
        assert_eq!(a, b);
    }

    #[test]
    fn draws_are_grammar_valid_and_round_trip() {
        let g = GrammarConfig::default();
        let vocab = Vocabulary::new(g.n_symbols, 4).unwrap();
        let mut rng = SeedTree::new(1).stream("q");
        for _ in 0..1000 {
            let q = gen_query(&mut rng, &g);
            assert!(q.is_valid(&g));
            assert!((2..=16).contains(&q.len()));
            assert_eq!(Query::from_tokens(&vocab, &q.tokens(&vocab)).unwrap(), q);
        }
    }

    /// Each production's count should fall within 3σ of its multinomial
    /// expectation over 10k draws.
    #[test]
    fn productions_are_uniform() {
        let g = GrammarConfig::default();
        let mut rng = SeedTree::new(11).stream("q");
        let n = 10_000usize;
        let mut styles = [0usize; 2];
        let mut lens = vec![0usize; g.max_len + 1];
        let mut syms = vec![0usize; g.n_symbols];
        let mut total_syms = 0usize;
        for _ in 0..n {
            let q = gen_query(&mut rng, &g);
            styles[q.style as usize] += 1;
            lens[q.pattern.len()] += 1;
            for &s in &q.pattern {
                syms[s as usize] += 1;
                total_syms += 1;
            }
        }
        let within = |count: usize, trials: usize, p: f64| {
            let mean = trials as f64 * p;
            let sd = (trials as f64 * p * (1.0 - p)).sqrt();
            (count as f64 - mean).abs() <= 3.0 * sd
        };
        assert!(styles.iter().all(|&c| within(c, n, 0.5)), "{styles:?}");
        let k = (g.max_len - g.min_len + 1) as f64;
        assert!(lens[g.min_len..].iter().all(|&c| within(c, n, 1.0 / k)), "{lens:?}");
        let p = 1.0 / g.n_symbols as f64;
        assert!(syms.iter().all(|&c| within(c, total_syms, p)), "{syms:?}");
    }

    #[test]
    fn malformed_query_tokens_rejected() {
        let vocab = Vocabulary::new(6, 4).unwrap();
        assert!(Query::from_tokens(&vocab, &[]).is_err());
        let a = vocab.symbol_id(0);
        assert!(Query::from_tokens(&vocab, &[a, a]).is_err());
        assert!(Query::from_tokens(&vocab, &[vocab.style_id(Style::Copy)]).is_err());
    }
}
