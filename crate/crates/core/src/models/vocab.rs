use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::behavior::{level_words, Indicator};
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;

/// Task styles. The style token leads every query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Style {
    Copy,
    Reverse,
}

impl Style {
    pub const ALL: [Style; 2] = [Style::Copy, Style::Reverse];

    pub fn word(self) -> &'static str {
        match self {
            Style::Copy => "copy",
            Style::Reverse => "reverse",
        }
    }

    /// Apply the style to a symbol pattern.
    pub fn apply(self, pattern: &[u8]) -> Vec<u8> {
        match self {
            Style::Copy => pattern.to_vec(),
            Style::Reverse => pattern.iter().rev().copied().collect(),
        }
    }

    pub fn other(self) -> Style {
        match self {
            Style::Copy => Style::Reverse,
            Style::Reverse => Style::Copy,
        }
    }
}

/// Fixed token set: reserved markers, style words, pattern symbols,
/// indicator names and level words.
///
/// Layout: `<pad> <bos> <eos> <sep>`, styles, symbols `a b c ...`,
/// `pv clicks likes dislikes`, then the level words for the configured
/// number of parts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    n_symbols: usize,
    parts: u8,
}

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

impl Vocabulary {
    pub fn new(n_symbols: usize, parts: u8) -> Result<Self> {
        if n_symbols == 0 || n_symbols > 26 {
            return Err(Error::InvalidArgument(format!("symbol count must be in 1..=26, got {n_symbols}")));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(Style::ALL.iter().map(|s| s.word().to_string()));
        tokens.extend((0..n_symbols).map(|k| ((b'a' + k as u8) as char).to_string()));
        tokens.extend(Indicator::ALL.iter().map(|i| i.word().to_string()));
        tokens.extend(level_words(parts));
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index, n_symbols, parts })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    pub fn parts(&self) -> u8 {
        self.parts
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index.get(token).copied().ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens.get(id as usize).map(String::as_str).ok_or_else(|| Error::UnknownToken(format!("#{id}")))
    }

    pub fn check(&self, id: TokenId) -> Result<()> {
        self.token(id).map(|_| ())
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<&str>> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Space-joined rendering, for files and logs.
    pub fn render(&self, ids: &[TokenId]) -> Result<String> {
        Ok(self.decode(ids)?.join(" "))
    }

    /// Inverse of [`Self::render`]; the empty string is the empty sequence.
    pub fn parse(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn style_id(&self, style: Style) -> TokenId {
        RESERVED.len() as TokenId + style as TokenId
    }

    pub fn style_of(&self, id: TokenId) -> Option<Style> {
        Style::ALL.into_iter().find(|s| self.style_id(*s) == id)
    }

    fn symbol_base(&self) -> TokenId {
        (RESERVED.len() + Style::ALL.len()) as TokenId
    }

    pub fn symbol_id(&self, symbol: u8) -> TokenId {
        debug_assert!((symbol as usize) < self.n_symbols);
        self.symbol_base() + TokenId::from(symbol)
    }

    /// Pattern symbol index of a token, if it is a symbol.
    pub fn symbol_of(&self, id: TokenId) -> Option<u8> {
        let base = self.symbol_base();
        (id >= base && id < base + self.n_symbols as TokenId).then(|| (id - base) as u8)
    }

    /// Hex SHA-256 over the token list; checkpoints record it so models
    /// built over different vocabularies are never mixed.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
