use super::backbone::{self, BackboneConfig};
use super::vocab::TokenId;
use super::{scored_ids, Model};
use crate::diffcore::{sigmoid, softmax_row, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Hidden state of the closing `<eos>` as a `[1, d]` row.
fn summary(tape: &mut Tape, params: &ParamStore, config: &BackboneConfig, ids: &[TokenId]) -> Result<Var> {
    let h = backbone::forward(tape, params, config, ids)?;
    tape.select_rows(h, &[ids.len() - 1])
}

fn linear_head(tape: &mut Tape, params: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.w"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    let z = tape.matmul(x, w)?;
    tape.add_row(z, b)
}

fn init_scalar(config: &BackboneConfig, vocab_size: usize, rng: &mut Rng) -> Result<ParamStore> {
    let mut params = ParamStore::new();
    backbone::init(&mut params, config, vocab_size, rng)?;
    params.insert("head.w", Tensor::zeros(vec![config.d_model, 1])?)?;
    params.insert("head.b", Tensor::zeros(vec![1])?)?;
    Ok(params)
}

fn scalar_forward(
    tape: &mut Tape,
    params: &ParamStore,
    config: &BackboneConfig,
    query: &[TokenId],
    behavior: &[TokenId],
    response: &[TokenId],
) -> Result<Var> {
    let ids = scored_ids(query, behavior, response);
    let h = summary(tape, params, config, &ids)?;
    let z = linear_head(tape, params, h, "head")?;
    tape.reshape(z, vec![1])
}

macro_rules! model_impl {
    ($ty:ty, $kind:literal) => {
        impl Model for $ty {
            const KIND: &'static str = $kind;

            fn init(config: &BackboneConfig, vocab_size: usize, _extra: usize, rng: &mut Rng) -> Result<Self> {
                Ok(Self { config: config.clone(), params: init_scalar(config, vocab_size, rng)? })
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
    };
}

/// Behavior-conditioned discriminator `D(s, a; b) = σ(logit)`.
#[derive(Clone, Debug)]
pub struct DiscriminatorModel {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

model_impl!(DiscriminatorModel, "discriminator");

impl DiscriminatorModel {
    pub fn new(config: &BackboneConfig, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        Self::init(config, vocab_size, 0, rng)
    }

    /// `[1]` pre-sigmoid logit. An empty `behavior` gives the unconditional
    /// variant used by the behavior-free baseline.
    pub fn forward_logit(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        query: &[TokenId],
        behavior: &[TokenId],
        response: &[TokenId],
    ) -> Result<Var> {
        scalar_forward(tape, params, &self.config, query, behavior, response)
    }

    pub fn logit(&self, query: &[TokenId], behavior: &[TokenId], response: &[TokenId]) -> Result<f64> {
        let mut tape = Tape::new();
        let z = self.forward_logit(&mut tape, &self.params, query, behavior, response)?;
        Ok(tape.scalar(z))
    }

    /// Probability that `(query, response, behavior)` is a real demonstration.
    pub fn score(&self, query: &[TokenId], response: &[TokenId], behavior: &[TokenId]) -> Result<f64> {
        if behavior.is_empty() {
            return Err(Error::InvalidArgument("conditional discriminator requires a behavior text".into()));
        }
        Ok(sigmoid(self.logit(query, behavior, response)?))
    }

    pub fn score_unconditional(&self, query: &[TokenId], response: &[TokenId]) -> Result<f64> {
        Ok(sigmoid(self.logit(query, &[], response)?))
    }
}

/// Pairwise-trained scalar reward model `r(s, a)`.
#[derive(Clone, Debug)]
pub struct RewardModel {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

model_impl!(RewardModel, "reward");

impl RewardModel {
    pub fn new(config: &BackboneConfig, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        Self::init(config, vocab_size, 0, rng)
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, query: &[TokenId], response: &[TokenId]) -> Result<Var> {
        scalar_forward(tape, params, &self.config, query, &[], response)
    }

    pub fn score(&self, query: &[TokenId], response: &[TokenId]) -> Result<f64> {
        let mut tape = Tape::new();
        let z = self.forward(&mut tape, &self.params, query, response)?;
        Ok(tape.scalar(z))
    }
}

/// Four-headed behavior classifier, one softmax over levels per indicator.
#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub config: BackboneConfig,
    pub params: ParamStore,
    pub parts: usize,
}

const HEADS: [&str; 4] = ["head.pv", "head.clicks", "head.likes", "head.dislikes"];

impl Model for ClassifierModel {
    const KIND: &'static str = "classifier";

    fn init(config: &BackboneConfig, vocab_size: usize, parts: usize, rng: &mut Rng) -> Result<Self> {
        if parts < 2 {
            return Err(Error::Config(format!("classifier needs at least 2 levels, got {parts}")));
        }
        let mut params = ParamStore::new();
        backbone::init(&mut params, config, vocab_size, rng)?;
        for h in HEADS {
            params.insert(format!("{h}.w"), Tensor::zeros(vec![config.d_model, parts])?)?;
            params.insert(format!("{h}.b"), Tensor::zeros(vec![parts])?)?;
        }
        Ok(Self { config: config.clone(), params, parts })
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

    fn extra(&self) -> usize {
        self.parts
    }
}

impl ClassifierModel {
    pub fn new(config: &BackboneConfig, vocab_size: usize, parts: usize, rng: &mut Rng) -> Result<Self> {
        Self::init(config, vocab_size, parts, rng)
    }

    /// `[4, N]` logits, rows in indicator order (pv, clicks, likes, dislikes).
    pub fn forward_logits(&self, tape: &mut Tape, params: &ParamStore, query: &[TokenId], response: &[TokenId]) -> Result<Var> {
        let ids = scored_ids(query, &[], response);
        let h = summary(tape, params, &self.config, &ids)?;
        let rows = HEADS.iter().map(|p| linear_head(tape, params, h, p)).collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&rows)
    }

    /// Level distributions per indicator.
    pub fn predict(&self, query: &[TokenId], response: &[TokenId]) -> Result<[Vec<f64>; 4]> {
        let mut tape = Tape::new();
        let z = self.forward_logits(&mut tape, &self.params, query, response)?;
        let logits = tape.value(z);
        let n = self.parts;
        Ok(std::array::from_fn(|i| {
            let mut p = vec![0.0; n];
            softmax_row(&logits[i * n..(i + 1) * n], &mut p);
            p
        }))
    }
}
