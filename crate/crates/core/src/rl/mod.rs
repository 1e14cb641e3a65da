//! Training objectives and estimators for PPO-style alignment and for the
//! adversarial behavior discriminator.

mod adversarial;
mod estimators;
mod losses;

pub use adversarial::{
    bootstrap_mix, disc_loss, disc_loss_conditional, disc_loss_unconditional, fake_batch_split, gail_action_value, BootstrapPool,
    DiscBatchStats, TokenTriplet,
};
pub use estimators::{gae, kl_full, kl_sampled, token_rewards, whiten};
pub use losses::{classifier_loss, classifier_loss_probs, critic_loss, ppo_policy_loss, rm_pair_loss, rm_pair_loss_value, PpoLoss};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::vocab::TokenId;

/// How the per-position KL penalty is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlEstimator {
    /// Exact `KL(π ‖ π_ref)` over the whole vocabulary. The penalty does not
    /// depend on the sampled token, so the score-function gradient carries no
    /// pull back toward the reference policy.
    Full,
    /// `log π(a_t) − log π_ref(a_t)` at the sampled token.
    #[default]
    SampledRatio,
}

/// PPO and adversarial-training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PPOConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub kl_coef: f64,
    pub kappa: f64,
    pub rollouts_per_query: usize,
    pub batch_queries: usize,
    /// Rollouts per gradient step.
    pub minibatch_size: usize,
    pub epochs: usize,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub disc_lr: f64,
    pub max_grad_norm: f64,
    pub kl_estimator: KlEstimator,
}

impl Default for PPOConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            gamma: 1.0,
            lambda: 0.95,
            kl_coef: 0.3,
            kappa: 0.125,
            rollouts_per_query: 4,
            batch_queries: 16,
            minibatch_size: 32,
            epochs: 2,
            policy_lr: 2e-4,
            critic_lr: 1e-3,
            disc_lr: 1e-4,
            max_grad_norm: 1.0,
            kl_estimator: KlEstimator::SampledRatio,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("ppo.clip_eps must be in (0, 1), got {}", self.clip_eps));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("ppo.gamma and ppo.lambda must be in [0, 1], got {} and {}", self.gamma, self.lambda));
        }
        if !(self.kl_coef >= 0.0) {
            return bad(format!("ppo.kl_coef must be nonnegative, got {}", self.kl_coef));
        }
        if !(0.0..1.0).contains(&self.kappa) {
            return bad(format!("ppo.kappa must be in [0, 1), got {}", self.kappa));
        }
        if self.rollouts_per_query == 0 || self.batch_queries == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return bad("ppo.rollouts_per_query, batch_queries, minibatch_size and epochs must be positive".into());
        }
        for (name, lr) in [("policy_lr", self.policy_lr), ("critic_lr", self.critic_lr), ("disc_lr", self.disc_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("ppo.{name} must be positive, got {lr}"));
            }
        }
        if !(self.max_grad_norm > 0.0) {
            return bad(format!("ppo.max_grad_norm must be positive, got {}", self.max_grad_norm));
        }
        Ok(())
    }

    pub fn batch_rollouts(&self) -> usize {
        self.rollouts_per_query * self.batch_queries
    }
}

/// One sampled trajectory with everything PPO needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub query: Vec<TokenId>,
    /// Conditioning behavior text, empty for unconditional policies.
    pub behavior: Vec<TokenId>,
    /// Actions, normally ending in `<eos>`.
    pub response: Vec<TokenId>,
    pub old_logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub terminal_reward: f64,
    pub kl: Vec<f64>,
    /// Filled by [`Rollout::estimate`].
    pub rewards: Option<Vec<f64>>,
    pub advantages: Option<Vec<f64>>,
    pub returns: Option<Vec<f64>>,
}

impl Rollout {
    pub fn new(
        query: Vec<TokenId>,
        behavior: Vec<TokenId>,
        response: Vec<TokenId>,
        old_logprobs: Vec<f64>,
        values: Vec<f64>,
        terminal_reward: f64,
        kl: Vec<f64>,
    ) -> Result<Self> {
        let l = response.len();
        if l == 0 || old_logprobs.len() != l || values.len() != l || kl.len() != l {
            return Err(Error::InvalidArgument(format!(
                "rollout buffers disagree: response {l}, logprobs {}, values {}, kl {}",
                old_logprobs.len(),
                values.len(),
                kl.len()
            )));
        }
        Ok(Self { query, behavior, response, old_logprobs, values, terminal_reward, kl, rewards: None, advantages: None, returns: None })
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// Shape per-token rewards and run GAE.
    pub fn estimate(&mut self, kl_coef: f64, gamma: f64, lambda: f64) -> Result<()> {
        let rewards = token_rewards(self.terminal_reward, &self.kl, kl_coef)?;
        let (adv, ret) = gae(&rewards, &self.values, gamma, lambda)?;
        self.rewards = Some(rewards);
        self.advantages = Some(adv);
        self.returns = Some(ret);
        Ok(())
    }

    /// Undiscounted sum of shaped rewards.
    pub fn total_reward(&self) -> Option<f64> {
        self.rewards.as_ref().map(|r| r.iter().sum())
    }
}
