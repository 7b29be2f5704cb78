use serde::{Deserialize, Serialize};

use super::{inner_train, meta_gradient, DistillError, EncodedPolicy, EncoderState, SyntheticDataset};
use crate::env::{CartPole, CartPoleConfig};
use crate::matrix::Matrix;
use crate::nets::{
    actor_arch, ArchSampler, ArchitectureSpec, InitKind, InitScheme, LearnerDistribution, LearnerParams,
};
use crate::optim::{Adam, AdamConfig};
use crate::ppo::baseline::{critic_step, init_critic};
use crate::ppo::{collect_episodes, mean_std, minibatches, run_episode, PpoHyperparams, Policy};
use crate::rng;

/// Lower bound projected onto the inner learning rate after each update.
pub const ETA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Convergence {
    /// Moving-average window over per-meta-epoch mean rollout rewards.
    pub window: usize,
    /// Stop after this many epochs without sufficient improvement.
    pub patience: usize,
    /// Relative gain over the last reference value that counts as improvement.
    pub min_improvement: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            window: 100,
            patience: 300,
            min_improvement: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub k: usize,
    /// Meta-epoch budget.
    pub meta_epochs: usize,
    pub ppo: PpoHyperparams,
    pub distiller: AdamConfig,
    pub inner_steps: usize,
    pub convergence: Convergence,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            k: 2,
            meta_epochs: 4000,
            ppo: PpoHyperparams::default(),
            distiller: AdamConfig::default(),
            inner_steps: 1,
            convergence: Convergence::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        self.ppo.validate()?;
        if self.k == 0 || self.meta_epochs == 0 || self.inner_steps == 0 {
            return Err(DistillError::InvalidConfig(
                "k, meta_epochs and inner_steps must be >= 1".into(),
            ));
        }
        if self.convergence.window == 0 || self.convergence.patience == 0 {
            return Err(DistillError::InvalidConfig("window and patience must be >= 1".into()));
        }
        if !(self.distiller.lr >= 0.0) {
            return Err(DistillError::InvalidConfig("distiller lr must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything that changes across meta-epochs.
#[derive(Clone, Debug)]
pub struct DistillState {
    pub dataset: SyntheticDataset,
    pub encoder: LearnerParams,
    pub critic: LearnerParams,
    theta_opt: Adam,
    critic_opt: Adam,
}

impl DistillState {
    pub fn new(dataset: SyntheticDataset, encoder: LearnerParams, critic: LearnerParams, config: &DistillConfig) -> Self {
        Self {
            dataset,
            encoder,
            critic,
            theta_opt: Adam::new(config.distiller),
            critic_opt: Adam::new(AdamConfig::with_lr(config.ppo.critic_lr)),
        }
    }

    fn theta_step(&mut self, g: &super::MetaGradient) {
        let mut eta = Matrix::scalar(self.dataset.inner_lr);
        let mut params: Vec<&mut Matrix> = vec![&mut self.dataset.x_d, &mut self.dataset.y_d, &mut eta];
        params.extend(self.encoder.tensors_mut());
        let mut grads = vec![g.x.clone(), g.y.clone(), Matrix::scalar(g.eta)];
        grads.extend(g.xi.iter().cloned());
        self.theta_opt.step(&mut params, &grads);
        self.dataset.inner_lr = eta.item().max(ETA_FLOOR);
    }
}

/// Per-meta-epoch report row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaEpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub episodes: usize,
    pub transitions: usize,
    /// Mean over minibatches.
    pub policy_loss: f64,
    pub critic_loss: f64,
    /// Inner loss of the behavior learner before its step.
    pub inner_loss: f64,
    /// After the epoch's updates.
    pub inner_lr: f64,
    pub moving_average: f64,
}

impl MetaEpochStats {
    pub const CSV_HEADER: &'static str =
        "epoch,mean_reward,std_reward,episodes,transitions,policy_loss,critic_loss,inner_loss,inner_lr,moving_average";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.mean_reward,
            self.std_reward,
            self.episodes,
            self.transitions,
            self.policy_loss,
            self.critic_loss,
            self.inner_loss,
            self.inner_lr,
            self.moving_average
        )
    }
}

/// One meta-epoch: sample a learner initialization, train it on the dataset,
/// gather episodes with it, then alternate meta-gradient steps on θ (and the
/// encoder) with critic steps, retraining from the same initialization after
/// every minibatch. On failure `state` is restored to its value on entry.
pub fn ppmo_meta_epoch(
    state: &mut DistillState,
    learners: &LearnerDistribution,
    env: &CartPole,
    config: &DistillConfig,
    epoch: usize,
) -> Result<MetaEpochStats, DistillError> {
    let backup = state.clone();
    run_epoch(state, learners, env, config, epoch).map_err(|e| {
        *state = backup;
        match e {
            DistillError::Numerical(d) => DistillError::EpochFailed {
                epoch,
                detail: d.to_string(),
            },
            other => other,
        }
    })
}

fn run_epoch(
    state: &mut DistillState,
    learners: &LearnerDistribution,
    env: &CartPole,
    config: &DistillConfig,
    epoch: usize,
) -> Result<MetaEpochStats, DistillError> {
    let hp = &config.ppo;
    let init = learners.sample(epoch as u64);
    let (behavior, record) = inner_train(&init, &state.encoder, &state.dataset, config.inner_steps)?;
    let inner_loss = record.losses[0];
    let mut traj = {
        let policy = EncodedPolicy {
            encoder: &state.encoder,
            learner: &behavior,
        };
        let mut r = rng::stream(config.seed, "rollout", epoch as u64);
        collect_episodes(
            env,
            &policy,
            Some(&state.critic),
            hp.episodes_per_epoch,
            env.config().rollout_truncation,
            &mut r,
        )?
    };
    traj.compute_gae(hp.gamma, hp.gae_lambda);

    let mut shuffle = rng::stream(config.seed, "shuffle", epoch as u64);
    let mut current = Some((behavior, record));
    let (mut policy_losses, mut critic_losses) = (Vec::new(), Vec::new());
    for _ in 0..hp.policy_epochs {
        for idx in minibatches(traj.len(), hp.batch_size, &mut shuffle) {
            let batch = traj.batch(&idx, hp.normalize_advantages);
            let (trained, mut record) = match current.take() {
                Some(c) => c,
                None => inner_train(&init, &state.encoder, &state.dataset, config.inner_steps)?,
            };
            let g = meta_gradient(&mut record, &trained, &state.encoder, &batch, hp.clip)?;
            policy_losses.push(g.loss);
            state.theta_step(&g);
            critic_losses.push(critic_step(&mut state.critic, &mut state.critic_opt, &batch)?);
        }
    }
    if !(state.dataset.x_d.is_finite() && state.dataset.y_d.is_finite() && state.dataset.inner_lr.is_finite()) {
        return Err(DistillError::EpochFailed {
            epoch,
            detail: "synthetic dataset became non-finite".into(),
        });
    }
    let (mean_reward, std_reward) = mean_std(&traj.episode_rewards());
    Ok(MetaEpochStats {
        epoch,
        mean_reward,
        std_reward,
        episodes: traj.episodes.len(),
        transitions: traj.len(),
        policy_loss: mean_std(&policy_losses).0,
        critic_loss: mean_std(&critic_losses).0,
        inner_loss,
        inner_lr: state.dataset.inner_lr,
        moving_average: mean_reward,
    })
}

/// An encoder with no layers: the identity on `dim`-wide inputs.
pub fn identity_encoder(dim: usize) -> LearnerParams {
    LearnerParams {
        arch: ArchitectureSpec { layer_dims: vec![dim] },
        layers: Vec::new(),
        linear_output: true,
        provenance: None,
    }
}

/// The encoder and learner distribution for one distillation run.
#[derive(Clone, Debug)]
pub struct MetaSetup {
    pub encoder: LearnerParams,
    pub learners: LearnerDistribution,
    pub split_layer: Option<usize>,
}

impl MetaSetup {
    pub fn plain(env: &CartPoleConfig, learners: LearnerDistribution) -> Self {
        Self {
            encoder: identity_encoder(env.obs_dim()),
            learners,
            split_layer: None,
        }
    }
}

/// Splits the reference actor (`4N → 64 → 64 → 2N`) at layer `l`: the first
/// `l` layers become a fixed-shape encoder drawn once, the rest define the
/// learner distribution.
pub fn split_setup(env: &CartPoleConfig, l: usize, seed: u64) -> Result<MetaSetup, DistillError> {
    let reference = actor_arch(env.obs_dim(), env.n_actions());
    let total = reference.n_layers();
    if l > total {
        return Err(DistillError::InvalidConfig(format!(
            "split layer {l} exceeds the {total} layers of the reference network"
        )));
    }
    let init = InitScheme::actor(InitKind::Orthogonal);
    let full = LearnerParams::init(&reference, &init, &mut rng::stream(seed, "encoder", 0));
    let encoder = LearnerParams {
        arch: ArchitectureSpec {
            layer_dims: reference.layer_dims[..=l].to_vec(),
        },
        layers: full.layers[..l].to_vec(),
        linear_output: l == total,
        provenance: None,
    };
    let learners = LearnerDistribution {
        id: format!("lambda-split{l}"),
        arch: ArchSampler::Fixed(ArchitectureSpec {
            layer_dims: reference.layer_dims[l..].to_vec(),
        }),
        init,
        base_seed: 0,
    };
    Ok(MetaSetup {
        encoder,
        learners,
        split_layer: Some(l),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub curve: Vec<MetaEpochStats>,
    /// Epoch whose moving average was best; its pre-update dataset is kept.
    pub best_epoch: usize,
    pub best_window_reward: f64,
    pub meta_epochs_run: usize,
    /// Stopped by the patience rule rather than the budget or the observer.
    pub converged: bool,
    pub did_not_learn: bool,
    /// Mean reward of uniformly random actions at the rollout truncation.
    pub random_baseline: f64,
}

impl DistillReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from(MetaEpochStats::CSV_HEADER);
        out.push('\n');
        for s in &self.curve {
            out.push_str(&s.csv_row());
            out.push('\n');
        }
        out
    }
}

pub struct DistillOutcome {
    /// Best snapshot, with the encoder embedded for split runs.
    pub dataset: SyntheticDataset,
    /// State after the last meta-epoch.
    pub final_state: DistillState,
    pub report: DistillReport,
}

struct UniformPolicy(usize);

impl Policy for UniformPolicy {
    fn logits(&self, _: &[f64]) -> Vec<f64> {
        vec![0.0; self.0]
    }
}

fn random_baseline(env: &CartPole, seed: u64) -> Result<f64, DistillError> {
    let mut r = rng::stream(seed, "random-baseline", 0);
    let policy = UniformPolicy(env.config().n_actions());
    let cap = env.config().rollout_truncation;
    let rewards = (0..1000)
        .map(|_| run_episode(env, &policy, cap, &mut r))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(mean_std(&rewards).0)
}

/// Runs meta-epochs until the patience rule fires, the budget runs out, or
/// `observe` returns false. `observe` sees each epoch's statistics and the
/// state after that epoch.
pub fn run_distillation<F>(
    env_config: &CartPoleConfig,
    setup: MetaSetup,
    config: &DistillConfig,
    mut observe: F,
) -> Result<DistillOutcome, DistillError>
where
    F: FnMut(&MetaEpochStats, &DistillState) -> bool,
{
    config.validate()?;
    let env = CartPole::new(env_config.clone())?;
    let learners = setup
        .learners
        .with_seed(rng::derive_seed(config.seed, "learner-draws", 0));
    let dataset = super::initialize_dataset(env_config, config.k, config.seed)?;
    let critic = init_critic(env_config.obs_dim(), config.seed);
    let mut state = DistillState::new(dataset, setup.encoder, critic, config);
    let baseline = random_baseline(&env, config.seed)?;

    let conv = &config.convergence;
    let mut curve: Vec<MetaEpochStats> = Vec::new();
    let mut best: Option<(usize, f64, SyntheticDataset, LearnerParams)> = None;
    let mut reference = f64::NEG_INFINITY;
    let mut stall = 0usize;
    let mut converged = false;
    for epoch in 0..config.meta_epochs {
        let before = (state.dataset.clone(), state.encoder.clone());
        let mut stats = ppmo_meta_epoch(&mut state, &learners, &env, config, epoch)?;
        curve.push(stats.clone());
        let start = curve.len().saturating_sub(conv.window);
        let window: Vec<f64> = curve[start..].iter().map(|s| s.mean_reward).collect();
        stats.moving_average = mean_std(&window).0;
        curve.last_mut().expect("pushed").moving_average = stats.moving_average;
        let ma = stats.moving_average;
        if best.as_ref().is_none_or(|b| ma > b.1) {
            best = Some((epoch, ma, before.0, before.1));
        }
        if ma > reference && ma - reference >= conv.min_improvement * reference.abs() {
            reference = ma;
            stall = 0;
        } else {
            stall += 1;
        }
        let keep_going = observe(&stats, &state);
        if stall >= conv.patience {
            converged = true;
            break;
        }
        if !keep_going {
            break;
        }
    }
    let (best_epoch, best_window_reward, mut dataset, encoder) = best.expect("at least one meta-epoch");
    dataset.provenance.meta_epochs = curve.len();
    dataset.provenance.lambda_spec = setup.learners.id.clone();
    dataset.provenance.best_window_reward = Some(best_window_reward);
    dataset.encoder = setup.split_layer.map(|split_layer| EncoderState {
        split_layer,
        params: encoder,
    });
    let report = DistillReport {
        meta_epochs_run: curve.len(),
        curve,
        best_epoch,
        best_window_reward,
        converged,
        did_not_learn: best_window_reward <= baseline,
        random_baseline: baseline,
    };
    Ok(DistillOutcome {
        dataset,
        final_state: state,
        report,
    })
}

/// Distills `env_config` for learners drawn from `learners`.
pub fn distill(
    env_config: &CartPoleConfig,
    learners: &LearnerDistribution,
    config: &DistillConfig,
) -> Result<DistillOutcome, DistillError> {
    run_distillation(env_config, MetaSetup::plain(env_config, learners.clone()), config, |_, _| true)
}

/// Distills with the reference network split at layer `l`.
pub fn distill_with_encoder(
    env_config: &CartPoleConfig,
    l: usize,
    config: &DistillConfig,
) -> Result<DistillOutcome, DistillError> {
    let setup = split_setup(env_config, l, config.seed)?;
    run_distillation(env_config, setup, config, |_, _| true)
}
