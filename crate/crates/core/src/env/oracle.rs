use serde::{Deserialize, Serialize};

use super::task::Query;
use crate::models::vocab::{TokenId, Vocabulary, EOS};

/// Deterministic ground-truth answer quality, standing in for real user
/// satisfaction.
///
/// `quality = clamp(w_pattern·content + w_style·order − w_length·len_penalty, 0, 1)`
/// where `content` is the multiset overlap with the styled target,
/// `order` the fraction of target positions reproduced exactly, and
/// `len_penalty = min(1, |len − target_len| / target_len)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HiddenQualityOracle {
    pub pattern_weight: f64,
    pub style_weight: f64,
    pub length_weight: f64,
}

impl Default for HiddenQualityOracle {
    fn default() -> Self {
        Self { pattern_weight: 0.4, style_weight: 0.6, length_weight: 0.3 }
    }
}

/// Response tokens up to (not including) the first end marker.
pub fn content_of(response: &[TokenId]) -> &[TokenId] {
    match response.iter().position(|&t| t == EOS) {
        Some(i) => &response[..i],
        None => response,
    }
}

impl HiddenQualityOracle {
    pub fn quality(&self, vocab: &Vocabulary, query: &Query, response: &[TokenId]) -> f64 {
        let response = content_of(response);
        let target = query.target();
        let tlen = target.len() as f64;
        let symbols: Vec<Option<u8>> = response.iter().map(|&t| vocab.symbol_of(t)).collect();

        let mut want = [0usize; 26];
        let mut have = [0usize; 26];
        for &s in &target {
            want[s as usize] += 1;
        }
        for s in symbols.iter().flatten() {
            have[*s as usize] += 1;
        }
        let overlap: usize = want.iter().zip(&have).map(|(w, h)| (*w).min(*h)).sum();
        let content = overlap as f64 / tlen;

        let aligned = target.iter().zip(&symbols).filter(|(t, s)| **s == Some(**t)).count();
        let order = aligned as f64 / tlen;

        let len_penalty = ((response.len() as f64 - tlen).abs() / tlen).min(1.0);

        let q = self.pattern_weight * content + self.style_weight * order - self.length_weight * len_penalty;
        q.clamp(0.0, 1.0)
    }
}
