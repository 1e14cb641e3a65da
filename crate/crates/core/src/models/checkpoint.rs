use std::fs;
use std::path::Path;

use super::backbone::BackboneConfig;
use super::vocab::Vocabulary;
use super::Model;
use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::rng::SeedTree;

pub const CHECKPOINT_FORMAT: &str = "rlhb-checkpoint/1";

/// Header lines (format, kind, vocab hash, head width, backbone JSON)
/// followed by the parameter store text.
pub fn save_checkpoint<M: Model>(model: &M, vocab: &Vocabulary, path: &Path) -> Result<()> {
    if model.vocab_size() != vocab.len() {
        return Err(Error::InvalidArgument(format!(
            "model vocabulary size {} does not match vocabulary of {} tokens",
            model.vocab_size(),
            vocab.len()
        )));
    }
    let backbone = serde_json::to_string(model.backbone()).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = format!("{CHECKPOINT_FORMAT}\nkind {}\nvocab {}\nextra {}\nbackbone {backbone}\n", M::KIND, vocab.hash(), model.extra());
    out.push_str(&model.params().to_text());
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn header<'a>(path: &Path, lines: &mut impl Iterator<Item = &'a str>, line: usize, key: &str) -> Result<&'a str> {
    let text = lines.next().ok_or_else(|| Error::Parse { path: path.into(), line, reason: format!("missing `{key}` line") })?;
    text.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).ok_or_else(|| Error::Parse {
        path: path.into(),
        line,
        reason: format!("expected `{key} ...`, found `{text}`"),
    })
}

/// Load a checkpoint of model type `M`, refusing a different model kind, a
/// different vocabulary, or a parameter layout that does not match the
/// recorded backbone.
pub fn load_checkpoint<M: Model>(path: &Path, vocab: &Vocabulary) -> Result<M> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::MissingPrerequisite(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let mut lines = text.split_inclusive('\n').map(|l| l.trim_end_matches('\n'));
    let tag = lines.next().unwrap_or_default();
    if tag != CHECKPOINT_FORMAT {
        return Err(Error::VersionMismatch { expected: CHECKPOINT_FORMAT.into(), found: tag.into() });
    }
    let kind = header(path, &mut lines, 2, "kind")?;
    if kind != M::KIND {
        return Err(Error::InvalidArgument(format!("{} holds a {kind} model, expected {}", path.display(), M::KIND)));
    }
    let hash = header(path, &mut lines, 3, "vocab")?;
    if hash != vocab.hash() {
        return Err(Error::VersionMismatch { expected: format!("vocabulary {}", vocab.hash()), found: format!("vocabulary {hash}") });
    }
    let extra: usize = header(path, &mut lines, 4, "extra")?.parse().map_err(|e| Error::Parse {
        path: path.into(),
        line: 4,
        reason: format!("bad head width: {e}"),
    })?;
    let backbone: BackboneConfig = serde_json::from_str(header(path, &mut lines, 5, "backbone")?).map_err(|e| Error::Parse {
        path: path.into(),
        line: 5,
        reason: e.to_string(),
    })?;
    let consumed: usize = text.split_inclusive('\n').take(5).map(str::len).sum();
    let params = ParamStore::from_text(&text[consumed..])?;

    let mut model = M::init(&backbone, vocab.len(), extra, &mut SeedTree::new(0).stream("init"))?;
    let template = model.params();
    let same_layout = template.len() == params.len()
        && template.iter().zip(params.iter()).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape());
    if !same_layout {
        return Err(Error::Parse {
            path: path.into(),
            line: 6,
            reason: format!("parameter layout does not match a {} with the recorded backbone", M::KIND),
        });
    }
    *model.params_mut() = params;
    Ok(model)
}
