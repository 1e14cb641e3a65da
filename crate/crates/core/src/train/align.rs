use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{DiscReward, StackLoop};
use super::eval::{evaluate_winrate, PolicyAnswerer};
use super::metrics::MetricsRow;
use super::Lab;
use crate::behavior::{shape_reward, shaped_ratio, BehaviorLevels};
use crate::diffcore::{log_sigmoid, sigmoid, AdamConfig, AdamState, ParamStore, Tape, Var};
use crate::env::{content_of, gen_query, DemonstrationTriplet, Query};
use crate::error::{Error, Result};
use crate::models::vocab::TokenId;
use crate::models::{ClassifierModel, CriticModel, DiscriminatorModel, Model, PolicyModel, RewardModel};
use crate::rl::{
    bootstrap_mix, critic_loss, disc_loss_conditional, fake_batch_split, kl_full, kl_sampled, ppo_policy_loss, whiten, BootstrapPool,
    KlEstimator, Rollout, TokenTriplet,
};
use crate::rng::SeedTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopKind {
    Rlhf,
    Rlhbc,
    Rlhb,
}

impl LoopKind {
    pub fn name(self) -> &'static str {
        match self {
            LoopKind::Rlhf => "rlhf",
            LoopKind::Rlhbc => "rlhbc",
            LoopKind::Rlhb => "rlhb",
        }
    }
}

/// A parameter update, in the order it happened.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateEvent {
    pub step: usize,
    pub model: &'static str,
    pub version: u64,
}

/// Everything an alignment run produces.
#[derive(Clone, Debug)]
pub struct AlignOutcome {
    pub kind: LoopKind,
    pub policy: PolicyModel,
    pub critic: CriticModel,
    pub disc: Option<DiscriminatorModel>,
    pub metrics: Vec<MetricsRow>,
    /// First step at which the collapse detector fired.
    pub collapse_step: Option<usize>,
    pub updates: Vec<UpdateEvent>,
    /// `(model, version before, version after)` for models that must stay fixed.
    pub frozen_versions: Vec<(&'static str, u64, u64)>,
}

impl AlignOutcome {
    /// Conditioning text used when evaluating this policy.
    pub fn eval_behavior(&self, lab: &Lab) -> Vec<TokenId> {
        eval_behavior(lab, self.kind)
    }
}

pub(crate) fn eval_behavior(lab: &Lab, kind: LoopKind) -> Vec<TokenId> {
    match kind {
        LoopKind::Rlhf => Vec::new(),
        LoopKind::Rlhbc | LoopKind::Rlhb => lab.behavior_tokens(&BehaviorLevels::most_preferred(lab.config.simulator.parts)),
    }
}

enum Reward<'a> {
    /// Hidden quality as reward; a diagnostic for the PPO machinery.
    Oracle,
    Rm(&'a RewardModel),
    Cm(&'a ClassifierModel),
    Disc,
}

struct Setup<'a> {
    lab: &'a Lab,
    kind: LoopKind,
    policy: PolicyModel,
    anchor: PolicyModel,
    critic: CriticModel,
    reward: Reward<'a>,
    disc: Option<DiscriminatorModel>,
    corpus: &'a [DemonstrationTriplet],
}

/// PPO against a frozen reward model; critic backbone from the reward model.
pub fn run_rlhf(lab: &Lab, sft: &PolicyModel, rm: &RewardModel) -> Result<AlignOutcome> {
    let critic = critic_from(lab, rm.params())?;
    run(Setup {
        lab,
        kind: LoopKind::Rlhf,
        policy: sft.clone(),
        anchor: sft.clone(),
        critic,
        reward: Reward::Rm(rm),
        disc: None,
        corpus: &[],
    })
}

/// PPO directly on hidden quality. Only useful as a sanity check of the
/// optimizer, since no real feedback source exposes this signal.
pub fn run_oracle(lab: &Lab, sft: &PolicyModel) -> Result<AlignOutcome> {
    let critic = critic_from(lab, sft.params())?;
    run(Setup {
        lab,
        kind: LoopKind::Rlhf,
        policy: sft.clone(),
        anchor: sft.clone(),
        critic,
        reward: Reward::Oracle,
        disc: None,
        corpus: &[],
    })
}

/// PPO against the classifier-shaped reward; critic backbone from the
/// classifier; the policy is conditioned on the most-preferred behavior.
pub fn run_rlhbc(lab: &Lab, sft: &PolicyModel, cm: &ClassifierModel) -> Result<AlignOutcome> {
    let critic = critic_from(lab, cm.params())?;
    run(Setup {
        lab,
        kind: LoopKind::Rlhbc,
        policy: sft.clone(),
        anchor: sft.clone(),
        critic,
        reward: Reward::Cm(cm),
        disc: None,
        corpus: &[],
    })
}

/// Adversarial alignment with a behavior-conditioned discriminator trained
/// alongside the policy; critic backbone from the starting policy.
pub fn run_rlhb(lab: &Lab, sft: &PolicyModel, dm: &DiscriminatorModel, corpus: &[DemonstrationTriplet]) -> Result<AlignOutcome> {
    if corpus.is_empty() {
        return Err(Error::MissingPrerequisite("adversarial alignment needs a demonstration corpus".into()));
    }
    let critic = critic_from(lab, sft.params())?;
    run(Setup {
        lab,
        kind: LoopKind::Rlhb,
        policy: sft.clone(),
        anchor: sft.clone(),
        critic,
        reward: Reward::Disc,
        disc: Some(dm.clone()),
        corpus,
    })
}

/// Models a stacked run continues with.
pub enum StackWith<'a> {
    Rlhb { disc: &'a DiscriminatorModel, corpus: &'a [DemonstrationTriplet] },
    Rlhbc { cm: &'a ClassifierModel },
}

impl StackWith<'_> {
    pub fn kind(&self) -> StackLoop {
        match self {
            StackWith::Rlhb { .. } => StackLoop::Rlhb,
            StackWith::Rlhbc { .. } => StackLoop::Rlhbc,
        }
    }
}

/// Continue alignment from an already aligned policy; the KL anchor is
/// that base policy.
pub fn run_stacked(lab: &Lab, base: &PolicyModel, with: StackWith<'_>) -> Result<AlignOutcome> {
    match with {
        StackWith::Rlhb { disc, corpus } => run_rlhb(lab, base, disc, corpus),
        StackWith::Rlhbc { cm } => run_rlhbc(lab, base, cm),
    }
}

fn critic_from(lab: &Lab, backbone: &ParamStore) -> Result<CriticModel> {
    let mut critic = CriticModel::new(&lab.config.model, lab.vocab.len(), &mut lab.seeds().child("align").stream("critic-init"))?;
    critic.load_backbone_from(backbone)?;
    Ok(critic)
}

/// Classifier output folded into one scalar: expected level per head,
/// mapped back to a representative count, then shaped as engagement.
pub fn classifier_reward(lab: &Lab, cm: &ClassifierModel, query: &[TokenId], response: &[TokenId]) -> Result<f64> {
    let pred = cm.predict(query, response)?;
    let counts: Vec<f64> = pred
        .iter()
        .map(|p| {
            let expected: f64 = p.iter().enumerate().map(|(l, q)| l as f64 * q).sum();
            lab.discretizer.representative_count(expected)
        })
        .collect();
    Ok(shaped_ratio(counts[0], counts[1], counts[2], counts[3]))
}

struct Generated {
    rollout: Rollout,
    disc_prob: f64,
    quality: f64,
}

fn flatten(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let cols: Vec<Var> = parts
        .iter()
        .map(|&v| {
            let n = tape.value(v).len();
            tape.reshape(v, vec![n, 1])
        })
        .collect::<Result<_>>()?;
    let stacked = tape.concat_rows(&cols)?;
    let n = tape.value(stacked).len();
    tape.reshape(stacked, vec![n])
}

fn run(mut s: Setup<'_>) -> Result<AlignOutcome> {
    let lab = s.lab;
    let cfg = &lab.config;
    let ppo = &cfg.ppo;
    let acfg = &cfg.align;
    let seeds: SeedTree = lab.seeds().child("align");
    let mut q_rng = seeds.stream("queries");
    let mut b_rng = seeds.stream("behavior");
    let mut s_rng = seeds.stream(crate::rng::streams::SAMPLING);
    let mut ppo_rng = seeds.stream("ppo");
    let mut d_rng = seeds.stream("disc");
    let mut boot_rng = seeds.stream(crate::rng::streams::BOOTSTRAP);
    let probe: Vec<Query> = {
        let mut r = seeds.stream(crate::rng::streams::EVAL);
        (0..acfg.eval_queries).map(|_| gen_query(&mut r, &cfg.grammar)).collect()
    };

    let pool = if s.kind == LoopKind::Rlhb {
        let rewards = s.corpus.iter().map(|t| shape_reward(&t.record)).collect::<Result<Vec<_>>>()?;
        Some(BootstrapPool::new(&rewards)?)
    } else {
        None
    };
    let behavior_pool: Vec<Vec<TokenId>> = s.corpus.iter().map(|t| lab.behavior_tokens(&t.levels)).collect();
    let eval_b = eval_behavior(lab, s.kind);
    let fixed_b = match s.kind {
        LoopKind::Rlhf => Vec::new(),
        _ => eval_b.clone(),
    };

    let mut pol_adam = AdamState::new(&s.policy.params, AdamConfig::with_lr(ppo.policy_lr));
    let mut crit_adam = AdamState::new(&s.critic.params, AdamConfig::with_lr(ppo.critic_lr));
    let mut disc_adam = s.disc.as_ref().map(|d| AdamState::new(&d.params, AdamConfig::with_lr(ppo.disc_lr)));
    let frozen_before: Vec<(&'static str, u64)> = match (&s.reward, &s.disc) {
        (Reward::Rm(m), _) => vec![("reward", m.params.version())],
        (Reward::Cm(m), _) => vec![("classifier", m.params.version())],
        (Reward::Disc, Some(d)) if acfg.frozen_disc => vec![("discriminator", d.params.version())],
        _ => Vec::new(),
    };

    let mut metrics = Vec::with_capacity(acfg.steps);
    let mut updates = Vec::new();
    let mut win_rate = 0.5;
    let mut extreme_run = 0usize;
    let mut collapse_step = None;

    for step in 0..acfg.steps {
        if step % acfg.eval_every == 0 {
            let mut a = PolicyAnswerer::new(&s.policy, &eval_b, acfg.max_response_len);
            let mut b = PolicyAnswerer::new(&s.anchor, &[], acfg.max_response_len);
            win_rate = evaluate_winrate(lab, &mut a, &mut b, &probe, cfg.eval.tie_band)?.decisive_win_rate();
        }

        // Rollouts from the current (pre-update) policy.
        let mut batch: Vec<Generated> = Vec::with_capacity(ppo.batch_rollouts());
        for _ in 0..ppo.batch_queries {
            let query = gen_query(&mut q_rng, &cfg.grammar);
            let qt = query.tokens(&lab.vocab);
            let behavior = match s.kind {
                LoopKind::Rlhb => behavior_pool[b_rng.random_range(0..behavior_pool.len())].clone(),
                _ => fixed_b.clone(),
            };
            for _ in 0..ppo.rollouts_per_query {
                let sample = s.policy.sample(&qt, &behavior, acfg.max_response_len, acfg.temperature, &mut s_rng)?;
                let actions = sample.tokens;
                let cur = s.policy.log_distributions(&qt, &behavior, &actions)?;
                let anc = s.anchor.log_distributions(&qt, &behavior, &actions)?;
                let old: Vec<f64> = actions.iter().zip(&cur).map(|(&a, row)| row[a as usize]).collect();
                let kl: Vec<f64> = match ppo.kl_estimator {
                    KlEstimator::Full => cur.iter().zip(&anc).map(|(p, q)| kl_full(p, q)).collect(),
                    KlEstimator::SampledRatio => {
                        actions.iter().zip(cur.iter().zip(&anc)).map(|(&a, (p, q))| kl_sampled(p[a as usize], q[a as usize])).collect()
                    }
                };
                let values = s.critic.values(&qt, &behavior, &actions)?;
                let mut disc_prob = 0.0;
                let terminal = match &s.reward {
                    Reward::Oracle => lab.quality(&query, &actions),
                    Reward::Rm(rm) => rm.score(&qt, &actions)?,
                    Reward::Cm(cm) => classifier_reward(lab, cm, &qt, &actions)?,
                    Reward::Disc => {
                        let d = s.disc.as_ref().expect("adversarial loop has a discriminator");
                        let z = d.logit(&qt, &behavior, &actions)?;
                        disc_prob = sigmoid(z);
                        match acfg.disc_reward {
                            DiscReward::Probability => disc_prob,
                            DiscReward::LogD => log_sigmoid(z),
                        }
                    }
                };
                let quality = lab.quality(&query, &actions);
                let mut rollout = Rollout::new(qt.clone(), behavior.clone(), actions, old, values, terminal, kl)?;
                rollout.estimate(ppo.kl_coef, ppo.gamma, ppo.lambda)?;
                batch.push(Generated { rollout, disc_prob, quality });
            }
        }

        let n_tokens: usize = batch.iter().map(|g| g.rollout.len()).sum();
        let mean_kl = batch.iter().flat_map(|g| g.rollout.kl.iter()).sum::<f64>() / n_tokens as f64;
        if !(mean_kl <= acfg.kl_cap) {
            return Err(Error::Diverged { step, reason: format!("mean per-token KL {mean_kl} exceeds align.kl_cap {}", acfg.kl_cap) });
        }

        // Whitened advantages over the whole batch.
        let mut flat_adv: Vec<f64> = batch.iter().flat_map(|g| g.rollout.advantages.clone().unwrap()).collect();
        whiten(&mut flat_adv);
        let mut offset = 0;
        let mut advantages = Vec::with_capacity(batch.len());
        for g in &batch {
            advantages.push(flat_adv[offset..offset + g.rollout.len()].to_vec());
            offset += g.rollout.len();
        }

        // Actor, then critic, then discriminator.
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut policy_losses = Vec::new();
        let mut critic_losses = Vec::new();
        for _ in 0..ppo.epochs {
            order.shuffle(&mut ppo_rng);
            for chunk in order.chunks(ppo.minibatch_size) {
                let mut tape = Tape::new();
                let mut news = Vec::with_capacity(chunk.len());
                let (mut olds, mut advs) = (Vec::new(), Vec::new());
                for &i in chunk {
                    let r = &batch[i].rollout;
                    news.push(s.policy.forward(&mut tape, &s.policy.params, &r.query, &r.behavior, &r.response)?.action_logprobs);
                    olds.extend_from_slice(&r.old_logprobs);
                    advs.extend_from_slice(&advantages[i]);
                }
                let new = flatten(&mut tape, &news)?;
                let l = ppo_policy_loss(&mut tape, new, &olds, &advs, ppo.clip_eps)?;
                policy_losses.push(tape.scalar(l.loss));
                let g = tape.gradients(l.loss).map_err(|e| diverged(step, "policy", e))?;
                s.policy.params.accumulate(&g)?;
                s.policy.params.clip_grad_norm(ppo.max_grad_norm);
                pol_adam.step(&mut s.policy.params)?;
            }
        }
        updates.push(UpdateEvent { step, model: "policy", version: s.policy.params.version() });
        for _ in 0..ppo.epochs {
            order.shuffle(&mut ppo_rng);
            for chunk in order.chunks(ppo.minibatch_size) {
                let mut tape = Tape::new();
                let mut vals = Vec::with_capacity(chunk.len());
                let mut rets = Vec::new();
                for &i in chunk {
                    let r = &batch[i].rollout;
                    vals.push(s.critic.forward(&mut tape, &s.critic.params, &r.query, &r.behavior, &r.response)?);
                    rets.extend_from_slice(r.returns.as_ref().unwrap());
                }
                let v = flatten(&mut tape, &vals)?;
                let l = critic_loss(&mut tape, v, &rets)?;
                critic_losses.push(tape.scalar(l));
                let g = tape.gradients(l).map_err(|e| diverged(step, "critic", e))?;
                s.critic.params.accumulate(&g)?;
                s.critic.params.clip_grad_norm(ppo.max_grad_norm);
                crit_adam.step(&mut s.critic.params)?;
            }
        }
        updates.push(UpdateEvent { step, model: "critic", version: s.critic.params.version() });

        let mut disc_loss_value = 0.0;
        if let (Some(disc), Some(adam), Some(pool)) = (s.disc.as_mut(), disc_adam.as_mut(), pool.as_ref()) {
            if !acfg.frozen_disc {
                let n = batch.len();
                let mut losses = Vec::new();
                for _ in 0..acfg.disc_steps {
                    let real: Vec<TokenTriplet> = (0..n)
                        .map(|_| {
                            let i = d_rng.random_range(0..s.corpus.len());
                            triplet_of(lab, &s.corpus[i], &behavior_pool[i])
                        })
                        .collect();
                    let (n_boot, n_gen) = fake_batch_split(ppo.kappa, n)?;
                    let mut picks: Vec<usize> = (0..n).collect();
                    picks.shuffle(&mut d_rng);
                    let mut fake: Vec<TokenTriplet> = picks[..n_gen]
                        .iter()
                        .map(|&i| {
                            let r = &batch[i].rollout;
                            TokenTriplet {
                                query: r.query.clone(),
                                behavior: r.behavior.clone(),
                                response: content_of(&r.response).to_vec(),
                            }
                        })
                        .collect();
                    for i in bootstrap_mix(pool, ppo.kappa, n, &mut boot_rng)? {
                        fake.push(triplet_of(lab, &s.corpus[i], &behavior_pool[i]));
                    }
                    debug_assert_eq!(fake.len(), n_boot + n_gen);
                    let mut tape = Tape::new();
                    let (loss, _) = disc_loss_conditional(&mut tape, disc, &disc.params, &real, &fake, acfg.literal_eq4)?;
                    losses.push(tape.scalar(loss));
                    let g = tape.gradients(loss).map_err(|e| diverged(step, "discriminator", e))?;
                    disc.params.accumulate(&g)?;
                    disc.params.clip_grad_norm(ppo.max_grad_norm);
                    adam.step(&mut disc.params)?;
                }
                disc_loss_value = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
                updates.push(UpdateEvent { step, model: "discriminator", version: disc.params.version() });
            }
        }

        let n = batch.len() as f64;
        let disc_reward = if s.kind == LoopKind::Rlhb { batch.iter().map(|g| g.disc_prob).sum::<f64>() / n } else { 0.0 };
        if s.kind == LoopKind::Rlhb {
            if disc_reward > acfg.collapse_high || disc_reward < acfg.collapse_low {
                extreme_run += 1;
            } else {
                extreme_run = 0;
            }
            if extreme_run >= acfg.collapse_window && collapse_step.is_none() {
                collapse_step = Some(step);
            }
        }
        let row = MetricsRow {
            step,
            policy_loss: avg(&policy_losses),
            critic_loss: avg(&critic_losses),
            disc_loss: disc_loss_value,
            disc_reward,
            mean_reward: batch.iter().map(|g| g.rollout.terminal_reward).sum::<f64>() / n,
            mean_return: batch.iter().map(|g| g.rollout.total_reward().unwrap()).sum::<f64>() / n,
            mean_kl,
            win_rate,
            mean_quality: batch.iter().map(|g| g.quality).sum::<f64>() / n,
        };
        if !row.is_finite() {
            return Err(Error::Diverged { step, reason: format!("non-finite metrics {row:?}") });
        }
        metrics.push(row);
    }

    let frozen_versions = frozen_before
        .into_iter()
        .map(|(name, before)| {
            let after = match (&s.reward, &s.disc) {
                (Reward::Rm(m), _) => m.params.version(),
                (Reward::Cm(m), _) => m.params.version(),
                (Reward::Disc, Some(d)) => d.params.version(),
                _ => before,
            };
            (name, before, after)
        })
        .collect();

    Ok(AlignOutcome { kind: s.kind, policy: s.policy, critic: s.critic, disc: s.disc, metrics, collapse_step, updates, frozen_versions })
}

fn triplet_of(lab: &Lab, t: &DemonstrationTriplet, behavior: &[TokenId]) -> TokenTriplet {
    TokenTriplet { query: t.query.tokens(&lab.vocab), behavior: behavior.to_vec(), response: t.response.clone() }
}

fn diverged(step: usize, model: &str, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::Diverged { step, reason: format!("{model} loss: {m}") },
        other => other,
    }
}

fn avg(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
