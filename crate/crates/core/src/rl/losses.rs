use crate::behavior::BehaviorLevels;
use crate::diffcore::{log_sigmoid, Tape, Var};
use crate::error::{Error, Result};

/// Bound on `new − old` log-prob differences before exponentiation.
const MAX_LOG_RATIO: f64 = 20.0;
/// Floor applied to predicted probabilities in [`classifier_loss_probs`].
const PROB_FLOOR: f64 = 1e-12;

fn aligned(op: &'static str, tape: &Tape, v: Var, xs: &[f64]) -> Result<()> {
    if tape.value(v).len() != xs.len() || xs.is_empty() {
        return Err(Error::ShapeMismatch { op, lhs: tape.shape(v).to_vec(), rhs: vec![xs.len()] });
    }
    if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{op} input {x}")));
    }
    Ok(())
}

/// Result of building the clipped surrogate on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PpoLoss {
    pub loss: Var,
    /// Tokens whose ratio was outside `[1−ε, 1+ε]`.
    pub clip_fraction: f64,
    /// Tokens whose log-ratio hit the exponent guard.
    pub guarded: usize,
}

/// `−mean_t min(ℓ_t Â_t, clip(ℓ_t, 1−ε, 1+ε) Â_t)` with `ℓ_t = exp(new − old)`.
/// `old_logprobs` and `advantages` are constants.
pub fn ppo_policy_loss(tape: &mut Tape, new_logprobs: Var, old_logprobs: &[f64], advantages: &[f64], eps: f64) -> Result<PpoLoss> {
    aligned("ppo_policy_loss", tape, new_logprobs, old_logprobs)?;
    aligned("ppo_policy_loss", tape, new_logprobs, advantages)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("clip epsilon {eps} outside (0, 1)")));
    }
    let n = old_logprobs.len();
    let old = tape.constant(vec![n], old_logprobs.to_vec())?;
    let adv = tape.constant(vec![n], advantages.to_vec())?;
    let diff = tape.sub(new_logprobs, old)?;
    let guarded = tape.value(diff).iter().filter(|d| d.abs() > MAX_LOG_RATIO).count();
    let diff = tape.clamp(diff, -MAX_LOG_RATIO, MAX_LOG_RATIO);
    let ratio = tape.exp(diff);
    let clip_fraction = tape.value(ratio).iter().filter(|r| (**r - 1.0).abs() > eps).count() as f64 / n as f64;
    let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let unclipped_term = tape.mul(ratio, adv)?;
    let clipped_term = tape.mul(clipped, adv)?;
    let surrogate = tape.minimum(unclipped_term, clipped_term)?;
    let m = tape.mean(surrogate);
    Ok(PpoLoss { loss: tape.neg(m), clip_fraction, guarded })
}

/// Mean squared error between predicted values and constant returns.
pub fn critic_loss(tape: &mut Tape, values: Var, returns: &[f64]) -> Result<Var> {
    aligned("critic_loss", tape, values, returns)?;
    let r = tape.constant(tape.shape(values).to_vec(), returns.to_vec())?;
    let d = tape.sub(values, r)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// `−log σ(score_w − score_l)` on `[1]` scores.
pub fn rm_pair_loss(tape: &mut Tape, score_w: Var, score_l: Var) -> Result<Var> {
    let d = tape.sub(score_w, score_l)?;
    let l = tape.log_sigmoid(d);
    let s = tape.sum(l);
    Ok(tape.neg(s))
}

pub fn rm_pair_loss_value(score_w: f64, score_l: f64) -> f64 {
    -log_sigmoid(score_w - score_l)
}

/// Mean over the four heads of the cross-entropy of `[4, N]` logits
/// against the observed levels.
pub fn classifier_loss(tape: &mut Tape, logits: Var, observed: &BehaviorLevels) -> Result<Var> {
    let n = observed.parts() as usize;
    if tape.shape(logits) != [4, n] {
        return Err(Error::ShapeMismatch { op: "classifier_loss", lhs: tape.shape(logits).to_vec(), rhs: vec![4, n] });
    }
    let lp = tape.log_softmax(logits);
    let cols: Vec<usize> = observed.as_array().iter().map(|&l| l as usize).collect();
    let picked = tape.gather(lp, &cols)?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

/// [`classifier_loss`] on explicit probability vectors. Probabilities at
/// the target are floored at 1e-12; the flag reports whether that happened.
pub fn classifier_loss_probs(predicted: &[Vec<f64>; 4], observed: &BehaviorLevels) -> Result<(f64, bool)> {
    let n = observed.parts() as usize;
    let mut floored = false;
    let mut total = 0.0;
    for (head, &level) in predicted.iter().zip(observed.as_array().iter()) {
        if head.len() != n {
            return Err(Error::ShapeMismatch { op: "classifier_loss_probs", lhs: vec![head.len()], rhs: vec![n] });
        }
        let p = head[level as usize];
        if p < PROB_FLOOR {
            floored = true;
        }
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok((total / 4.0, floored))
}
