use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng as _;

use super::oracle::HiddenQualityOracle;
use super::simulator::{simulate_behavior, Responder, SimulatorConfig};
use super::task::{gen_query, GrammarConfig, Query};
use crate::behavior::{render_text, BehaviorLevels, BehaviorRecord, BehaviorText, Discretizer};
use crate::error::{Error, Result};
use crate::models::vocab::{TokenId, Vocabulary};
use crate::rng::SeedTree;

pub const CORPUS_FORMAT: &str = "rlhb-demo/1";
pub const PAIRS_FORMAT: &str = "rlhb-pref/1";

/// One `<query, response, behavior>` demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct DemonstrationTriplet {
    pub query: Query,
    /// Response content, without an end marker.
    pub response: Vec<TokenId>,
    pub record: BehaviorRecord,
    pub levels: BehaviorLevels,
}

impl DemonstrationTriplet {
    pub fn new(query: Query, response: Vec<TokenId>, record: BehaviorRecord, discretizer: &Discretizer) -> Result<Self> {
        record.validate()?;
        let levels = discretizer.levels(&record);
        Ok(Self { query, response, record, levels })
    }

    pub fn text(&self) -> BehaviorText {
        render_text(&self.levels)
    }
}

/// Everything needed to simulate the online environment.
pub struct Environment<'a> {
    pub vocab: &'a Vocabulary,
    pub grammar: &'a GrammarConfig,
    pub oracle: &'a HiddenQualityOracle,
    pub simulator: &'a SimulatorConfig,
}

/// Build a real demonstration set of `n` triplets. Triplet `i` draws from its
/// own substream, so the corpus is a pure function of the seed.
pub fn build_corpus(n: usize, responder: &mut dyn Responder, seeds: &SeedTree, env: &Environment<'_>) -> Result<Vec<DemonstrationTriplet>> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be at least 1".into()));
    }
    let discretizer = env.simulator.discretizer()?;
    (0..n)
        .map(|i| {
            let mut rng = seeds.indexed("corpus", i as u64);
            let query = gen_query(&mut rng, env.grammar);
            let response = responder.respond(&query, env.vocab, &mut rng)?;
            let q = env.oracle.quality(env.vocab, &query, &response);
            let record = simulate_behavior(q, &mut rng, env.simulator)?;
            DemonstrationTriplet::new(query, response, record, &discretizer)
        })
        .collect()
}

pub fn save_corpus(corpus: &[DemonstrationTriplet], vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in corpus {
        let r = &t.record;
        writeln!(
            w,
            "{CORPUS_FORMAT}\t{}\t{}\t{}\t{}\t{}\t{}",
            vocab.render(&t.query.tokens(vocab))?,
            vocab.render(&t.response)?,
            r.pv,
            r.clicks,
            r.likes,
            r.dislikes
        )?;
    }
    w.flush()?;
    Ok(())
}

fn check_tag(tag: &str, expected: &str) -> Result<()> {
    if tag != expected {
        return Err(Error::VersionMismatch { expected: expected.into(), found: tag.into() });
    }
    Ok(())
}

pub fn load_corpus(path: &Path, vocab: &Vocabulary, discretizer: &Discretizer) -> Result<Vec<DemonstrationTriplet>> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, reason: String| Error::Parse { path: path.to_path_buf(), line, reason };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        check_tag(fields[0], CORPUS_FORMAT)?;
        if fields.len() != 7 {
            return Err(parse_err(lineno, format!("expected 7 tab-separated fields, found {}", fields.len())));
        }
        let query = vocab
            .parse(fields[1])
            .and_then(|toks| Query::from_tokens(vocab, &toks))
            .map_err(|e| parse_err(lineno, format!("query: {e}")))?;
        let response = vocab.parse(fields[2]).map_err(|e| parse_err(lineno, format!("response: {e}")))?;
        let counts = fields[3..]
            .iter()
            .map(|f| f.parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(lineno, format!("count: {e}")))?;
        let record = BehaviorRecord::new(counts[0], counts[1], counts[2], counts[3]).map_err(|e| parse_err(lineno, e.to_string()))?;
        out.push(DemonstrationTriplet::new(query, response, record, discretizer)?);
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(parse_err(out.len(), "final line is not newline-terminated (truncated file?)".into()));
    }
    Ok(out)
}

/// A simulated preference annotation: `chosen` is preferred over `rejected`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub query: Query,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

/// Draw `n` preference pairs. Both answers come from `responder`; the oracle
/// decides which one wins, identical answers and quality ties are dropped,
/// and with probability `label_noise` the label is flipped.
pub fn preference_pairs(
    n: usize,
    responder: &mut dyn Responder,
    seeds: &SeedTree,
    env: &Environment<'_>,
    label_noise: f64,
) -> Result<Vec<PreferencePair>> {
    if !(0.0..0.5).contains(&label_noise) {
        return Err(Error::InvalidArgument(format!("label noise {label_noise} outside [0, 0.5)")));
    }
    let mut rng = seeds.stream("preferences");
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * n.max(1) {
            return Err(Error::InvalidArgument("could not draw enough non-tied pairs".into()));
        }
        let query = gen_query(&mut rng, env.grammar);
        let a = responder.respond(&query, env.vocab, &mut rng)?;
        let b = responder.respond(&query, env.vocab, &mut rng)?;
        if let Some(pair) = label_pair(query, a, b, env)? {
            let flip = rng.random::<f64>() < label_noise;
            out.push(if flip { PreferencePair { query: pair.query, chosen: pair.rejected, rejected: pair.chosen } } else { pair });
        }
    }
    Ok(out)
}

/// Oracle-labelled pair, or `None` for identical answers or tied quality.
pub fn label_pair(query: Query, a: Vec<TokenId>, b: Vec<TokenId>, env: &Environment<'_>) -> Result<Option<PreferencePair>> {
    if a == b {
        return Ok(None);
    }
    let qa = env.oracle.quality(env.vocab, &query, &a);
    let qb = env.oracle.quality(env.vocab, &query, &b);
    Ok(if qa > qb {
        Some(PreferencePair { query, chosen: a, rejected: b })
    } else if qb > qa {
        Some(PreferencePair { query, chosen: b, rejected: a })
    } else {
        None
    })
}

pub fn save_pairs(pairs: &[PreferencePair], vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        writeln!(
            w,
            "{PAIRS_FORMAT}\t{}\t{}\t{}",
            vocab.render(&p.query.tokens(vocab))?,
            vocab.render(&p.chosen)?,
            vocab.render(&p.rejected)?
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_pairs(path: &Path, vocab: &Vocabulary) -> Result<Vec<PreferencePair>> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, reason: String| Error::Parse { path: path.to_path_buf(), line, reason };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        check_tag(fields[0], PAIRS_FORMAT)?;
        if fields.len() != 4 {
            return Err(parse_err(i + 1, format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let query = vocab
            .parse(fields[1])
            .and_then(|toks| Query::from_tokens(vocab, &toks))
            .map_err(|e| parse_err(i + 1, format!("query: {e}")))?;
        let chosen = vocab.parse(fields[2]).map_err(|e| parse_err(i + 1, e.to_string()))?;
        let rejected = vocab.parse(fields[3]).map_err(|e| parse_err(i + 1, e.to_string()))?;
        out.push(PreferencePair { query, chosen, rejected });
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(parse_err(out.len(), "final line is not newline-terminated (truncated file?)".into()));
    }
    Ok(out)
}
