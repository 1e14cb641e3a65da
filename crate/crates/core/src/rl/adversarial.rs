use rand::Rng as _;

use crate::diffcore::{log_sigmoid, sigmoid, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::models::vocab::TokenId;
use crate::models::DiscriminatorModel;
use crate::rng::Rng;

/// A `(query, behavior, response)` triple at the token level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenTriplet {
    pub query: Vec<TokenId>,
    pub behavior: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

/// Summary of one discriminator batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscBatchStats {
    pub mean_real: f64,
    pub mean_fake: f64,
    /// Fraction classified correctly at threshold 0.5.
    pub accuracy: f64,
}

fn mean(tape: &mut Tape, parts: Vec<Var>) -> Result<Var> {
    let n = parts.len() as f64;
    let mut it = parts.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::InvalidArgument("empty discriminator batch".into()))?;
    for p in it {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, 1.0 / n))
}

/// Discriminator loss on precomputed `[1]` logits.
///
/// Standard form: `−(mean_real log D + mean_fake log(1 − D))`.
/// With `literal` the fake term is `1 − log D` instead.
pub fn disc_loss(tape: &mut Tape, real_logits: &[Var], fake_logits: &[Var], literal: bool) -> Result<(Var, DiscBatchStats)> {
    if real_logits.is_empty() || fake_logits.is_empty() {
        return Err(Error::InvalidArgument("discriminator loss needs nonempty real and fake batches".into()));
    }
    let real_terms: Vec<Var> = real_logits.iter().map(|&z| tape.log_sigmoid(z)).collect();
    let fake_terms: Vec<Var> = fake_logits
        .iter()
        .map(|&z| {
            if literal {
                let l = tape.log_sigmoid(z);
                let nl = tape.neg(l);
                tape.add_scalar(nl, 1.0)
            } else {
                let nz = tape.neg(z);
                tape.log_sigmoid(nz)
            }
        })
        .collect();
    let r = mean(tape, real_terms)?;
    let f = mean(tape, fake_terms)?;
    let total = tape.add(r, f)?;
    let loss = tape.neg(total);

    let d = |tape: &Tape, z: &Var| sigmoid(tape.scalar(*z));
    let real_d: Vec<f64> = real_logits.iter().map(|z| d(tape, z)).collect();
    let fake_d: Vec<f64> = fake_logits.iter().map(|z| d(tape, z)).collect();
    let correct = real_d.iter().filter(|&&p| p > 0.5).count() + fake_d.iter().filter(|&&p| p < 0.5).count();
    let stats = DiscBatchStats {
        mean_real: real_d.iter().sum::<f64>() / real_d.len() as f64,
        mean_fake: fake_d.iter().sum::<f64>() / fake_d.len() as f64,
        accuracy: correct as f64 / (real_d.len() + fake_d.len()) as f64,
    };
    Ok((loss, stats))
}

fn logits(tape: &mut Tape, disc: &DiscriminatorModel, params: &ParamStore, batch: &[TokenTriplet], conditional: bool) -> Result<Vec<Var>> {
    batch
        .iter()
        .map(|t| {
            if conditional && t.behavior.is_empty() {
                return Err(Error::InvalidArgument("conditional discriminator requires a behavior text".into()));
            }
            let b: &[TokenId] = if conditional { &t.behavior } else { &[] };
            disc.forward_logit(tape, params, &t.query, b, &t.response)
        })
        .collect()
}

/// Behavior-conditioned adversarial loss over real and fake triplets.
pub fn disc_loss_conditional(
    tape: &mut Tape,
    disc: &DiscriminatorModel,
    params: &ParamStore,
    real: &[TokenTriplet],
    fake: &[TokenTriplet],
    literal: bool,
) -> Result<(Var, DiscBatchStats)> {
    let r = logits(tape, disc, params, real, true)?;
    let f = logits(tape, disc, params, fake, true)?;
    disc_loss(tape, &r, &f, literal)
}

/// Behavior-free variant: every triplet is scored with an empty behavior slot.
pub fn disc_loss_unconditional(
    tape: &mut Tape,
    disc: &DiscriminatorModel,
    params: &ParamStore,
    real: &[TokenTriplet],
    fake: &[TokenTriplet],
    literal: bool,
) -> Result<(Var, DiscBatchStats)> {
    let r = logits(tape, disc, params, real, false)?;
    let f = logits(tape, disc, params, fake, false)?;
    disc_loss(tape, &r, &f, literal)
}

/// `Q(s, a) = log D(s, a; b)`, computed from the logit for stability.
/// An empty `behavior` scores unconditionally.
pub fn gail_action_value(disc: &DiscriminatorModel, query: &[TokenId], response: &[TokenId], behavior: &[TokenId]) -> Result<f64> {
    Ok(log_sigmoid(disc.logit(query, behavior, response)?))
}

/// `(relabeled reals, generated)` making up a fake batch of `batch` items.
pub fn fake_batch_split(kappa: f64, batch: usize) -> Result<(usize, usize)> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::InvalidArgument(format!("bootstrap proportion {kappa} outside [0, 1)")));
    }
    let reals = ((kappa * batch as f64) - 1e-9).ceil().max(0.0) as usize;
    let reals = reals.min(batch);
    Ok((reals, batch - reals))
}

/// Indices of the highly rewarded demonstrations (top quartile by shaped
/// reward, ties at the cut included).
#[derive(Clone, Debug)]
pub struct BootstrapPool {
    indices: Vec<usize>,
    threshold: f64,
}

impl BootstrapPool {
    pub fn new(rewards: &[f64]) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::InvalidArgument("bootstrap pool over an empty corpus".into()));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("shaped reward in bootstrap pool".into()));
        }
        let mut sorted = rewards.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let keep = rewards.len().div_ceil(4);
        let threshold = sorted[keep - 1];
        let indices = (0..rewards.len()).filter(|&i| rewards[i] >= threshold).collect();
        Ok(Self { indices, threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Draw `⌈κ·batch⌉` corpus indices (with replacement) from the pool.
pub fn bootstrap_mix(pool: &BootstrapPool, kappa: f64, batch: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let (reals, _) = fake_batch_split(kappa, batch)?;
    Ok((0..reals).map(|_| pool.indices[rng.random_range(0..pool.indices.len())]).collect())
}
