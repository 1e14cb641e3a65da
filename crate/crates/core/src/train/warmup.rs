use rand::Rng as _;

use super::config::WarmupConfig;
use super::metrics::WarmupRow;
use super::Lab;
use crate::behavior::BehaviorLevels;
use crate::diffcore::{AdamConfig, AdamState, ParamStore, Tape, Var};
use crate::env::{gen_query, DemonstrationTriplet, PreferencePair};
use crate::error::{Error, Result};
use crate::models::vocab::{TokenId, EOS};
use crate::models::{ClassifierModel, DiscriminatorModel, Model, PolicyModel, RewardModel};
use crate::rl::{classifier_loss, disc_loss_conditional, rm_pair_loss, TokenTriplet};
use crate::rng::Rng;

/// A trained model, its log, and the step at which training stopped early
/// on a non-finite loss (the model then holds the last finite parameters).
#[derive(Clone, Debug)]
pub struct WarmupOutcome<M> {
    pub model: M,
    pub rows: Vec<WarmupRow>,
    pub diverged_at: Option<usize>,
}

/// Shared minibatch driver: `batch_loss` builds one summed loss on a fresh
/// tape and returns it with the batch accuracy.
fn optimize<M: Model>(
    mut model: M,
    cfg: &WarmupConfig,
    rng: &mut Rng,
    mut batch_loss: impl FnMut(&M, &mut Tape, &mut Rng) -> Result<(Var, f64)>,
) -> Result<WarmupOutcome<M>> {
    let mut adam = AdamState::new(model.params(), AdamConfig::with_lr(cfg.lr));
    let mut rows = Vec::new();
    let (mut loss_acc, mut acc_acc, mut n_acc) = (0.0, 0.0, 0usize);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let (loss, acc) = batch_loss(&model, &mut tape, rng)?;
        let value = tape.scalar(loss);
        let grads = match tape.gradients(loss) {
            Ok(g) => g,
            Err(Error::NonFinite(_)) => return Ok(WarmupOutcome { model, rows, diverged_at: Some(step) }),
            Err(e) => return Err(e),
        };
        let params = model.params_mut();
        params.accumulate(&grads)?;
        params.clip_grad_norm(1.0);
        adam.step(params)?;
        loss_acc += value;
        acc_acc += acc;
        n_acc += 1;
        if (step + 1) % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            rows.push(WarmupRow { step: step + 1, loss: loss_acc / n_acc as f64, accuracy: acc_acc / n_acc as f64 });
            (loss_acc, acc_acc, n_acc) = (0.0, 0.0, 0);
        }
    }
    Ok(WarmupOutcome { model, rows, diverged_at: None })
}

fn with_eos(response: &[TokenId]) -> Vec<TokenId> {
    let mut a = response.to_vec();
    a.push(EOS);
    a
}

/// Supervised fine-tuning by next-token cross-entropy on the demonstrations
/// whose oracle quality reaches `sft.quality_threshold`. Each example carries
/// its own behavior text with probability `sft.behavior_fraction`.
pub fn train_sft(lab: &Lab, corpus: &[DemonstrationTriplet]) -> Result<WarmupOutcome<PolicyModel>> {
    let cfg = &lab.config.sft;
    let data: Vec<(Vec<TokenId>, Vec<TokenId>, Vec<TokenId>)> = corpus
        .iter()
        .filter(|t| lab.quality(&t.query, &t.response) >= cfg.quality_threshold)
        .map(|t| (t.query.tokens(&lab.vocab), lab.behavior_tokens(&t.levels), with_eos(&t.response)))
        .collect();
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("no demonstrations reach quality {} for fine-tuning", cfg.quality_threshold)));
    }
    let seeds = lab.seeds().child("sft");
    let policy = PolicyModel::new(&lab.config.model, lab.vocab.len(), &mut seeds.stream("init"))?;
    let warm = WarmupConfig { steps: cfg.steps, batch_size: cfg.batch_size, lr: cfg.lr, log_every: cfg.log_every };
    let fraction = cfg.behavior_fraction;
    optimize(policy, &warm, &mut seeds.stream("data"), |p, tape, rng| {
        let picks: Vec<usize> = (0..warm.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let tokens: usize = picks.iter().map(|&i| data[i].2.len()).sum();
        let mut total: Option<Var> = None;
        for i in picks {
            let (q, b, a) = &data[i];
            let b: &[TokenId] = if rng.random::<f64>() < fraction { b } else { &[] };
            let f = p.forward(tape, &p.params, q, b, a)?;
            let s = tape.sum(f.action_logprobs);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        let nll = tape.scale(total.expect("nonempty batch"), -1.0 / tokens as f64);
        Ok((nll, 0.0))
    })
}

/// Memorization helper for tests and diagnostics: per-token NLL of `data`
/// (query, behavior, response-with-eos) under `policy`.
pub fn sequence_nll(policy: &PolicyModel, data: &[(Vec<TokenId>, Vec<TokenId>, Vec<TokenId>)]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (q, b, a) in data {
        let lp = policy.logprobs(q, b, a)?;
        total -= lp.iter().sum::<f64>();
        n += lp.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Fresh reward model with its backbone copied from `init`, trained with the
/// pairwise ranking loss.
pub fn train_rm(lab: &Lab, init: Option<&ParamStore>, pairs: &[PreferencePair]) -> Result<WarmupOutcome<RewardModel>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("reward model needs preference pairs".into()));
    }
    let seeds = lab.seeds().child("rm");
    let mut rm = RewardModel::new(&lab.config.model, lab.vocab.len(), &mut seeds.stream("init"))?;
    if let Some(src) = init {
        rm.load_backbone_from(src)?;
    }
    let data: Vec<(Vec<TokenId>, &PreferencePair)> = pairs.iter().map(|p| (p.query.tokens(&lab.vocab), p)).collect();
    let bs = lab.config.rm.batch_size;
    optimize(rm, &lab.config.rm, &mut seeds.stream("data"), |m, tape, rng| {
        let mut terms = Vec::with_capacity(bs);
        let mut correct = 0usize;
        for _ in 0..bs {
            let (q, p) = &data[rng.random_range(0..data.len())];
            let w = m.forward(tape, &m.params, q, &p.chosen)?;
            let l = m.forward(tape, &m.params, q, &p.rejected)?;
            if tape.scalar(w) > tape.scalar(l) {
                correct += 1;
            }
            terms.push(rm_pair_loss(tape, w, l)?);
        }
        Ok((mean(tape, terms)?, correct as f64 / bs as f64))
    })
}

/// Fraction of pairs where the chosen answer scores higher; a tie counts
/// as half, so an uninformative model sits at chance.
pub fn pair_accuracy(lab: &Lab, rm: &RewardModel, pairs: &[PreferencePair]) -> Result<f64> {
    let mut correct = 0.0;
    for p in pairs {
        let q = p.query.tokens(&lab.vocab);
        correct += credit(rm.score(&q, &p.chosen)? - rm.score(&q, &p.rejected)?);
    }
    Ok(correct / pairs.len().max(1) as f64)
}

fn credit(margin: f64) -> f64 {
    if margin > 0.0 {
        1.0
    } else if margin == 0.0 {
        0.5
    } else {
        0.0
    }
}

/// Fresh classifier with its backbone copied from `init`, trained with the
/// per-head cross-entropy against observed levels.
pub fn train_cm(lab: &Lab, init: Option<&ParamStore>, corpus: &[DemonstrationTriplet]) -> Result<WarmupOutcome<ClassifierModel>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("classifier needs demonstrations".into()));
    }
    let seeds = lab.seeds().child("cm");
    let parts = lab.config.simulator.parts as usize;
    let mut cm = ClassifierModel::new(&lab.config.model, lab.vocab.len(), parts, &mut seeds.stream("init"))?;
    if let Some(src) = init {
        cm.load_backbone_from(src)?;
    }
    let data: Vec<(Vec<TokenId>, &DemonstrationTriplet)> = corpus.iter().map(|t| (t.query.tokens(&lab.vocab), t)).collect();
    let bs = lab.config.cm.batch_size;
    optimize(cm, &lab.config.cm, &mut seeds.stream("data"), |m, tape, rng| {
        let mut terms = Vec::with_capacity(bs);
        let mut correct = 0usize;
        for _ in 0..bs {
            let (q, t) = &data[rng.random_range(0..data.len())];
            let z = m.forward_logits(tape, &m.params, q, &t.response)?;
            let logits = tape.value(z);
            for (h, &level) in t.levels.as_array().iter().enumerate() {
                if argmax(&logits[h * parts..(h + 1) * parts]) == level as usize {
                    correct += 1;
                }
            }
            terms.push(classifier_loss(tape, z, &t.levels)?);
        }
        Ok((mean(tape, terms)?, correct as f64 / (4 * bs) as f64))
    })
}

/// Per-head argmax accuracy on `corpus`.
pub fn classifier_accuracy(lab: &Lab, cm: &ClassifierModel, corpus: &[DemonstrationTriplet]) -> Result<[f64; 4]> {
    let mut correct = [0usize; 4];
    for t in corpus {
        let pred = cm.predict(&t.query.tokens(&lab.vocab), &t.response)?;
        for h in 0..4 {
            if argmax(&pred[h]) == t.levels.as_array()[h] as usize {
                correct[h] += 1;
            }
        }
    }
    Ok(correct.map(|c| c as f64 / corpus.len().max(1) as f64))
}

/// A uniformly random level tuple different from `levels`.
fn replaced_levels(levels: &BehaviorLevels, rng: &mut Rng) -> BehaviorLevels {
    let parts = levels.parts();
    let total = (parts as usize).pow(4);
    let mut code = rng.random_range(0..total - 1);
    if code >= levels.code() {
        code += 1;
    }
    BehaviorLevels::enumerate(parts).nth(code).expect("code within range")
}

fn real_and_fake(lab: &Lab, t: &DemonstrationTriplet, rng: &mut Rng) -> (TokenTriplet, TokenTriplet) {
    let query = t.query.tokens(&lab.vocab);
    let real = TokenTriplet { query: query.clone(), behavior: lab.behavior_tokens(&t.levels), response: t.response.clone() };
    let fake = TokenTriplet { query, behavior: lab.behavior_tokens(&replaced_levels(&t.levels, rng)), response: t.response.clone() };
    (real, fake)
}

/// Warm the conditional discriminator: real triplets against copies whose
/// behavior text was replaced by a different random level tuple. With
/// `invert_labels` the two sides swap roles (a sanity baseline).
pub fn warmup_discriminator(
    lab: &Lab,
    init: Option<&ParamStore>,
    corpus: &[DemonstrationTriplet],
    invert_labels: bool,
) -> Result<WarmupOutcome<DiscriminatorModel>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("discriminator needs demonstrations".into()));
    }
    let seeds = lab.seeds().child("disc");
    let mut dm = DiscriminatorModel::new(&lab.config.model, lab.vocab.len(), &mut seeds.stream("init"))?;
    if let Some(src) = init {
        dm.load_backbone_from(src)?;
    }
    let bs = lab.config.disc.batch_size;
    let literal = lab.config.align.literal_eq4;
    optimize(dm, &lab.config.disc, &mut seeds.stream("data"), |m, tape, rng| {
        let (mut real, mut fake) = (Vec::with_capacity(bs), Vec::with_capacity(bs));
        for _ in 0..bs {
            let (r, f) = real_and_fake(lab, &corpus[rng.random_range(0..corpus.len())], rng);
            real.push(r);
            fake.push(f);
        }
        if invert_labels {
            std::mem::swap(&mut real, &mut fake);
        }
        let (loss, stats) = disc_loss_conditional(tape, m, &m.params, &real, &fake, literal)?;
        Ok((loss, stats.accuracy))
    })
}

/// Real-versus-replaced accuracy at threshold 0.5 on `corpus`, one real and
/// one fake per triplet. A score of exactly 0.5 counts as half.
pub fn disc_accuracy(lab: &Lab, dm: &DiscriminatorModel, corpus: &[DemonstrationTriplet], rng: &mut Rng) -> Result<f64> {
    let mut correct = 0.0;
    for t in corpus {
        let (r, f) = real_and_fake(lab, t, rng);
        correct += credit(dm.score(&r.query, &r.response, &r.behavior)? - 0.5);
        correct += credit(0.5 - dm.score(&f.query, &f.response, &f.behavior)?);
    }
    Ok(correct / (2 * corpus.len()).max(1) as f64)
}

/// Mean oracle quality of greedy answers on `n` fresh queries.
pub fn greedy_quality(lab: &Lab, policy: &PolicyModel, behavior: &[TokenId], n: usize, rng: &mut Rng) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..n {
        let q = gen_query(rng, &lab.config.grammar);
        let s = policy.greedy(&q.tokens(&lab.vocab), behavior, lab.config.align.max_response_len)?;
        total += lab.quality(&q, &s.tokens);
    }
    Ok(total / n.max(1) as f64)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn mean(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len() as f64;
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / n))
}
