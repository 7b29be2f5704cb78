//! PPO machinery shared by the distiller and the direct-RL baseline.

pub mod baseline;
pub mod gae;
pub mod loss;

pub use baseline::{train_rl_baseline, BaselineRun};
pub use loss::{critic_loss, ppo_policy_loss};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::DiffError;
use crate::env::{CartPole, EnvError};
use crate::matrix::Matrix;
use crate::nets::{log_softmax, policy_probs, LearnerParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PpoError {
    #[error(transparent)]
    Numerical(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoHyperparams {
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub policy_epochs: usize,
    pub batch_size: usize,
    pub episodes_per_epoch: usize,
    pub critic_lr: f64,
    /// Actor learning rate for direct RL training (the distiller uses its own).
    pub actor_lr: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoHyperparams {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            policy_epochs: 4,
            batch_size: 512,
            episodes_per_epoch: 10,
            critic_lr: 2.5e-4,
            actor_lr: 2.5e-4,
            normalize_advantages: true,
        }
    }
}

impl PpoHyperparams {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: String| Err(PpoError::InvalidHyperparams(m));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip must lie in (0, 1), got {}", self.clip));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda must lie in [0, 1], got {}", self.gae_lambda));
        }
        if self.batch_size == 0 || self.policy_epochs == 0 || self.episodes_per_epoch == 0 {
            return bad("batch_size, policy_epochs and episodes_per_epoch must be >= 1".into());
        }
        if !(self.critic_lr >= 0.0 && self.actor_lr >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        Ok(())
    }
}

/// Anything that maps an observation to action logits.
pub trait Policy {
    fn logits(&self, obs: &[f64]) -> Vec<f64>;
}

impl Policy for LearnerParams {
    fn logits(&self, obs: &[f64]) -> Vec<f64> {
        self.forward_logits(obs).expect("observation width matches policy")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    /// log π_behavior(a|s) at collection time.
    pub log_prob: f64,
    pub reward: f64,
    /// Last transition of its episode.
    pub done: bool,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub start: usize,
    pub len: usize,
    pub reward: f64,
    pub terminated: bool,
    /// Critic value of the state after a truncated episode; 0 if terminated.
    pub bootstrap_value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub episodes: Vec<EpisodeSummary>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn episode_rewards(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.reward).collect()
    }

    pub fn mean_episode_reward(&self) -> f64 {
        mean_std(&self.episode_rewards()).0
    }

    /// Fills `advantages` and `returns`, one episode at a time.
    pub fn compute_gae(&mut self, gamma: f64, lambda: f64) {
        self.advantages.clear();
        self.returns.clear();
        for ep in &self.episodes {
            let slice = &self.transitions[ep.start..ep.start + ep.len];
            let rewards: Vec<f64> = slice.iter().map(|t| t.reward).collect();
            let values: Vec<f64> = slice.iter().map(|t| t.value).collect();
            let (a, r) = gae::gae_episode(
                &rewards,
                &values,
                ep.terminated,
                ep.bootstrap_value,
                gamma,
                lambda,
            );
            self.advantages.extend(a);
            self.returns.extend(r);
        }
    }

    /// Gathers a minibatch, normalizing its advantages when asked.
    pub fn batch(&self, idx: &[usize], normalize: bool) -> Batch {
        assert_eq!(self.advantages.len(), self.transitions.len(), "compute_gae first");
        let width = self.transitions[0].state.len();
        let mut states = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            states.extend_from_slice(&self.transitions[i].state);
        }
        let mut advantages: Vec<f64> = idx.iter().map(|&i| self.advantages[i]).collect();
        if normalize {
            gae::normalize(&mut advantages);
        }
        Batch {
            states: Matrix::from_vec(idx.len(), width, states),
            actions: idx.iter().map(|&i| self.transitions[i].action).collect(),
            old_log_probs: idx.iter().map(|&i| self.transitions[i].log_prob).collect(),
            advantages,
            returns: idx.iter().map(|&i| self.returns[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Matrix,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Shuffled index chunks of size `batch_size`; the last chunk may be short.
pub fn minibatches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Samples an action index from softmax probabilities.
pub fn sample_action<R: Rng>(logits: &[f64], rng: &mut R) -> usize {
    let probs = policy_probs(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

/// Runs `episodes` episodes capped at `cap` steps, sampling actions from the
/// policy and recording behavior log-probs and critic values.
pub fn collect_episodes<P, R>(
    env: &CartPole,
    policy: &P,
    critic: Option<&LearnerParams>,
    episodes: usize,
    cap: usize,
    rng: &mut R,
) -> Result<Trajectory, PpoError>
where
    P: Policy + ?Sized,
    R: Rng,
{
    let value_of = |obs: &[f64]| critic.map_or(0.0, |c| c.forward_logits(obs).expect("critic width")[0]);
    let mut traj = Trajectory::default();
    for _ in 0..episodes {
        let start = traj.transitions.len();
        let mut state = env.reset_with(rng);
        let mut reward = 0.0;
        loop {
            let obs = state.observation();
            let logits = policy.logits(&obs);
            let action = sample_action(&logits, rng);
            let log_prob = log_softmax(&logits)[action];
            let value = value_of(&obs);
            let step = env.step_capped(&state, action, cap)?;
            reward += step.reward;
            let done = step.terminated || step.truncated;
            traj.transitions.push(Transition {
                state: obs,
                action,
                log_prob,
                reward: step.reward,
                done,
                value,
            });
            if done {
                let bootstrap_value = if step.terminated {
                    0.0
                } else {
                    value_of(&step.next_state.observation())
                };
                traj.episodes.push(EpisodeSummary {
                    start,
                    len: traj.transitions.len() - start,
                    reward,
                    terminated: step.terminated,
                    bootstrap_value,
                });
                break;
            }
            state = step.next_state;
        }
    }
    Ok(traj)
}

/// Total reward of one episode; no transitions are kept.
pub fn run_episode<P, R>(env: &CartPole, policy: &P, cap: usize, rng: &mut R) -> Result<f64, PpoError>
where
    P: Policy + ?Sized,
    R: Rng,
{
    let mut state = env.reset_with(rng);
    let mut reward = 0.0;
    loop {
        let logits = policy.logits(&state.observation());
        let action = sample_action(&logits, rng);
        let step = env.step_capped(&state, action, cap)?;
        reward += step.reward;
        if step.terminated || step.truncated {
            return Ok(reward);
        }
        state = step.next_state;
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One row of a reward curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub episodes: usize,
    pub transitions: usize,
}

impl EpochStats {
    pub fn from_trajectory(epoch: usize, traj: &Trajectory) -> Self {
        let (mean_reward, std_reward) = mean_std(&traj.episode_rewards());
        Self {
            epoch,
            mean_reward,
            std_reward,
            episodes: traj.episodes.len(),
            transitions: traj.len(),
        }
    }
}

/// `epoch,mean_reward,std_reward,episodes,transitions`
pub fn reward_curve_csv(curve: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_reward,std_reward,episodes,transitions\n");
    for s in curve {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.epoch, s.mean_reward, s.std_reward, s.episodes, s.transitions
        ));
    }
    out
}
