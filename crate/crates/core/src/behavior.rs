//! Human behavior signals: raw indicator counts, log smoothing, equal-width
//! discretization, scalar reward shaping and the natural-language template
//! that carries discretized behavior inside a prompt.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four behavior indicators, in template order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Indicator {
    PageViews,
    Clicks,
    Likes,
    Dislikes,
}

impl Indicator {
    pub const ALL: [Indicator; 4] = [Self::PageViews, Self::Clicks, Self::Likes, Self::Dislikes];

    /// Token naming the indicator inside behavior text.
    pub fn word(self) -> &'static str {
        match self {
            Self::PageViews => "pv",
            Self::Clicks => "clicks",
            Self::Likes => "likes",
            Self::Dislikes => "dislikes",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Raw counts for one exposed (query, response) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BehaviorRecord {
    pub pv: u64,
    pub clicks: u64,
    pub likes: u64,
    pub dislikes: u64,
}

impl BehaviorRecord {
    pub fn new(pv: u64, clicks: u64, likes: u64, dislikes: u64) -> Result<Self> {
        let r = Self { pv, clicks, likes, dislikes };
        r.validate()?;
        Ok(r)
    }

    /// `clicks ≤ pv`, `likes + dislikes ≤ clicks`, `pv ≥ 1`.
    pub fn validate(&self) -> Result<()> {
        if self.pv == 0 {
            return Err(Error::InvalidRecord("pv must be at least 1".into()));
        }
        if self.clicks > self.pv {
            return Err(Error::InvalidRecord(format!("clicks {} exceed pv {}", self.clicks, self.pv)));
        }
        if self.likes + self.dislikes > self.clicks {
            return Err(Error::InvalidRecord(format!("likes {} + dislikes {} exceed clicks {}", self.likes, self.dislikes, self.clicks)));
        }
        Ok(())
    }

    pub fn count(&self, ind: Indicator) -> u64 {
        match ind {
            Indicator::PageViews => self.pv,
            Indicator::Clicks => self.clicks,
            Indicator::Likes => self.likes,
            Indicator::Dislikes => self.dislikes,
        }
    }
}

/// `ln(1 + x)`.
pub fn smooth(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::InvalidArgument(format!("smooth expects a nonnegative count, got {x}")));
    }
    Ok(x.ln_1p())
}

/// Bin index of `v` given ascending `edges`: the number of edges `≤ v`,
/// so a value sitting exactly on an edge lands in the upper bin.
pub fn discretize(v: f64, edges: &[f64]) -> Result<u8> {
    if !v.is_finite() {
        return Err(Error::InvalidArgument(format!("cannot discretize non-finite value {v}")));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("bin edges must be strictly ascending".into()));
    }
    let level = edges.partition_point(|&e| e <= v);
    Ok(level.min(edges.len()) as u8)
}

/// `(likes − dislikes) / (pv + clicks)` on raw counts.
pub fn shape_reward(record: &BehaviorRecord) -> Result<f64> {
    record.validate()?;
    Ok(shaped_ratio(record.pv as f64, record.clicks as f64, record.likes as f64, record.dislikes as f64))
}

/// The shaping ratio on real-valued (e.g. expected) counts.
pub fn shaped_ratio(pv: f64, clicks: f64, likes: f64, dislikes: f64) -> f64 {
    (likes - dislikes) / (pv + clicks)
}

/// Equal-width bins over the smoothed range `[0, smooth(x_max)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discretizer {
    parts: u8,
    width: f64,
    edges: Vec<f64>,
}

impl Discretizer {
    pub fn new(parts: u8, x_max: u64) -> Result<Self> {
        if parts < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 parts, got {parts}")));
        }
        if x_max == 0 {
            return Err(Error::InvalidArgument("x_max must be positive".into()));
        }
        let width = (x_max as f64).ln_1p() / f64::from(parts);
        let edges = (1..parts).map(|k| f64::from(k) * width).collect();
        Ok(Self { parts, width, edges })
    }

    pub fn parts(&self) -> u8 {
        self.parts
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn level(&self, count: u64) -> u8 {
        let v = (count as f64).ln_1p();
        discretize(v, &self.edges).expect("edges ascending and count finite")
    }

    pub fn levels(&self, record: &BehaviorRecord) -> BehaviorLevels {
        let mut levels = [0u8; 4];
        for ind in Indicator::ALL {
            levels[ind.index()] = self.level(record.count(ind));
        }
        BehaviorLevels { levels, parts: self.parts }
    }

    /// Raw count represented by a (possibly fractional) level: the bin
    /// midpoint in smoothed space, mapped back through `exp(v) − 1`.
    pub fn representative_count(&self, level: f64) -> f64 {
        ((level + 0.5) * self.width).exp_m1()
    }
}

/// Discretized level per indicator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BehaviorLevels {
    levels: [u8; 4],
    parts: u8,
}

impl BehaviorLevels {
    /// Levels in template order: pv, clicks, likes, dislikes.
    pub fn new(levels: [u8; 4], parts: u8) -> Result<Self> {
        if parts < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 parts, got {parts}")));
        }
        if let Some(l) = levels.iter().find(|&&l| l >= parts) {
            return Err(Error::InvalidArgument(format!("level {l} out of range for {parts} parts")));
        }
        Ok(Self { levels, parts })
    }

    pub fn get(&self, ind: Indicator) -> u8 {
        self.levels[ind.index()]
    }

    pub fn as_array(&self) -> [u8; 4] {
        self.levels
    }

    pub fn parts(&self) -> u8 {
        self.parts
    }

    /// Highest engagement, most likes, fewest dislikes.
    pub fn most_preferred(parts: u8) -> Self {
        let top = parts - 1;
        Self { levels: [top, top, top, 0], parts }
    }

    /// Mirror image of [`Self::most_preferred`].
    pub fn least_preferred(parts: u8) -> Self {
        let top = parts - 1;
        Self { levels: [0, 0, 0, top], parts }
    }

    /// Every level tuple for `parts`, in lexicographic order.
    pub fn enumerate(parts: u8) -> impl Iterator<Item = BehaviorLevels> {
        let n = u32::from(parts);
        (0..n.pow(4)).map(move |mut code| {
            let mut levels = [0u8; 4];
            for slot in levels.iter_mut().rev() {
                *slot = (code % n) as u8;
                code /= n;
            }
            BehaviorLevels { levels, parts }
        })
    }

    /// Dense index in `0..parts^4`.
    pub fn code(&self) -> usize {
        let n = self.parts as usize;
        self.levels.iter().fold(0, |acc, &l| acc * n + l as usize)
    }
}

/// Level words used in behavior text for `parts` bins.
pub fn level_words(parts: u8) -> Vec<String> {
    let named: &[&str] = match parts {
        2 => &["low", "high"],
        3 => &["low", "medium", "high"],
        4 => &["none", "low", "medium", "high"],
        _ => &[],
    };
    if named.is_empty() {
        (0..parts).map(|k| format!("level{k}")).collect()
    } else {
        named.iter().map(|s| s.to_string()).collect()
    }
}

/// Behavior rendered as a fixed slotted sentence:
/// `pv <w> clicks <w> likes <w> dislikes <w>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BehaviorText {
    words: Vec<String>,
}

impl BehaviorText {
    pub const LEN: usize = 8;

    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        Self { words: words.iter().map(|w| w.as_ref().to_string()).collect() }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl fmt::Display for BehaviorText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.words.join(" "))
    }
}

pub fn render_text(levels: &BehaviorLevels) -> BehaviorText {
    let vocab = level_words(levels.parts);
    let mut words = Vec::with_capacity(BehaviorText::LEN);
    for ind in Indicator::ALL {
        words.push(ind.word().to_string());
        words.push(vocab[levels.get(ind) as usize].clone());
    }
    BehaviorText { words }
}

pub fn parse_text(text: &BehaviorText, parts: u8) -> Result<BehaviorLevels> {
    let vocab = level_words(parts);
    let words = text.words();
    let mut levels = [0u8; 4];
    for (i, ind) in Indicator::ALL.iter().enumerate() {
        let pos = 2 * i;
        match words.get(pos) {
            Some(w) if w == ind.word() => {}
            Some(w) => return Err(Error::MalformedText { position: pos, reason: format!("expected `{}`, found `{w}`", ind.word()) }),
            None => return Err(Error::MalformedText { position: pos, reason: format!("text ends before `{}`", ind.word()) }),
        }
        let w = words.get(pos + 1).ok_or_else(|| Error::MalformedText { position: pos + 1, reason: "missing level word".into() })?;
        levels[i] = vocab
            .iter()
            .position(|v| v == w)
            .ok_or_else(|| Error::MalformedText { position: pos + 1, reason: format!("unknown level word `{w}`") })?
            as u8;
    }
    if words.len() != BehaviorText::LEN {
        return Err(Error::MalformedText {
            position: BehaviorText::LEN,
            reason: format!("expected {} tokens, found {}", BehaviorText::LEN, words.len()),
        });
    }
    BehaviorLevels::new(levels, parts)
}
