//! The five trainable models and their shared backbone.
//!
//! Every model reads one flat token sequence laid out as
//! `<bos> query <sep> behavior <sep> response`, where the behavior slot is
//! empty for unconditional models. Scorers (discriminator, reward model,
//! classifier) always see the response closed by `<eos>` and read the
//! hidden state of that final position. Parameters are split into
//! `backbone.*` and `head.*`, so a backbone can be copied between models.

mod backbone;
mod checkpoint;
mod critic;
mod policy;
mod scorers;
pub mod vocab;

pub use backbone::BackboneConfig;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use critic::CriticModel;
pub use policy::{PolicyForward, PolicyModel, Sample};
pub use scorers::{ClassifierModel, DiscriminatorModel, RewardModel};

use crate::diffcore::ParamStore;
use crate::env::content_of;
use crate::error::Result;
use crate::rng::Rng;
use vocab::{TokenId, BOS, EOS, SEP};

/// Common surface used for checkpointing and backbone transfer.
pub trait Model: Sized {
    const KIND: &'static str;

    /// Build a freshly initialized model. `extra` is the head width for the
    /// classifier (levels per indicator) and ignored elsewhere.
    fn init(backbone: &BackboneConfig, vocab_size: usize, extra: usize, rng: &mut Rng) -> Result<Self>;
    fn backbone(&self) -> &BackboneConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    fn extra(&self) -> usize {
        0
    }

    fn vocab_size(&self) -> usize {
        self.params().get("backbone.tok_emb").map(|t| t.shape()[0]).unwrap_or(0)
    }

    /// Overwrite this model's backbone with another model's.
    fn load_backbone_from(&mut self, src: &ParamStore) -> Result<usize> {
        self.params_mut().copy_prefix_from(src, backbone::PREFIX)
    }
}

/// `<bos> query <sep> behavior <sep>`
pub fn context_ids(query: &[TokenId], behavior: &[TokenId]) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(query.len() + behavior.len() + 3);
    ids.push(BOS);
    ids.extend_from_slice(query);
    ids.push(SEP);
    ids.extend_from_slice(behavior);
    ids.push(SEP);
    ids
}

/// Context followed by the response content and a closing `<eos>`.
pub fn scored_ids(query: &[TokenId], behavior: &[TokenId], response: &[TokenId]) -> Vec<TokenId> {
    let mut ids = context_ids(query, behavior);
    ids.extend_from_slice(content_of(response));
    ids.push(EOS);
    ids
}

/// Tokens fed to the network when teacher-forcing `actions` after the
/// context, and the row index predicting the first action.
pub(crate) fn teacher_forced_ids(query: &[TokenId], behavior: &[TokenId], actions: &[TokenId]) -> (Vec<TokenId>, usize) {
    let mut ids = context_ids(query, behavior);
    let first = ids.len() - 1;
    if let Some((_, init)) = actions.split_last() {
        ids.extend_from_slice(init);
    }
    (ids, first)
}
