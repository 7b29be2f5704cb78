//! Direct PPO training of a single actor, used as the RL reference point.

use super::{collect_episodes, critic_loss, minibatches, ppo_policy_loss, Batch, EpochStats, PpoError, PpoHyperparams};
use crate::diff::Tape;
use crate::env::CartPole;
use crate::matrix::Matrix;
use crate::nets::{critic_arch, flatten_vars, InitScheme, LearnerParams};
use crate::optim::{Adam, AdamConfig};
use crate::rng;

pub struct BaselineRun {
    pub actor: LearnerParams,
    pub critic: LearnerParams,
    pub curve: Vec<EpochStats>,
}

/// Critic initialized from its own seed stream.
pub fn init_critic(obs_dim: usize, seed: u64) -> LearnerParams {
    LearnerParams::init(&critic_arch(obs_dim), &InitScheme::critic(), &mut rng::stream(seed, "critic", 0))
}

/// One Adam step on the squared-error value loss. Returns the loss.
pub fn critic_step(critic: &mut LearnerParams, adam: &mut Adam, batch: &Batch) -> Result<f64, PpoError> {
    let mut tape = Tape::new();
    let vars = critic.leaves(&mut tape);
    let x = tape.constant(batch.states.clone());
    let v = critic.forward_tape(&mut tape, &vars, x);
    let loss = critic_loss(&mut tape, v, &batch.returns)?;
    let value = tape.value(loss).item();
    let grads = tape.gradient(loss, &flatten_vars(&vars))?.into_matrices();
    adam.step(&mut critic.tensors_mut(), &grads);
    Ok(value)
}

/// One Adam step on the clipped surrogate loss. Returns the loss.
pub fn actor_step(
    actor: &mut LearnerParams,
    adam: &mut Adam,
    batch: &Batch,
    clip: f64,
) -> Result<f64, PpoError> {
    let mut tape = Tape::new();
    let vars = actor.leaves(&mut tape);
    let x = tape.constant(batch.states.clone());
    let logits = actor.forward_tape(&mut tape, &vars, x);
    let loss = ppo_policy_loss(
        &mut tape,
        logits,
        &batch.actions,
        &batch.old_log_probs,
        &batch.advantages,
        clip,
    )?;
    let value = tape.value(loss).item();
    let grads: Vec<Matrix> = tape.gradient(loss, &flatten_vars(&vars))?.into_matrices();
    adam.step(&mut actor.tensors_mut(), &grads);
    Ok(value)
}

/// Trains `actor` with PPO for up to `epochs` epochs. `on_epoch` sees every
/// epoch's rollout statistics and the updated actor; returning `false` stops
/// training early.
pub fn train_rl_baseline<F>(
    env: &CartPole,
    mut actor: LearnerParams,
    hp: &PpoHyperparams,
    epochs: usize,
    seed: u64,
    mut on_epoch: F,
) -> Result<BaselineRun, PpoError>
where
    F: FnMut(&EpochStats, &LearnerParams) -> bool,
{
    hp.validate()?;
    let cfg = env.config();
    let mut critic = init_critic(cfg.obs_dim(), seed);
    let mut actor_opt = Adam::new(AdamConfig::with_lr(hp.actor_lr));
    let mut critic_opt = Adam::new(AdamConfig::with_lr(hp.critic_lr));
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut roll = rng::stream(seed, "rollout", epoch as u64);
        let mut traj = collect_episodes(
            env,
            &actor,
            Some(&critic),
            hp.episodes_per_epoch,
            cfg.rollout_truncation,
            &mut roll,
        )?;
        traj.compute_gae(hp.gamma, hp.gae_lambda);
        let mut shuffle = rng::stream(seed, "shuffle", epoch as u64);
        for _ in 0..hp.policy_epochs {
            for idx in minibatches(traj.len(), hp.batch_size, &mut shuffle) {
                let batch = traj.batch(&idx, hp.normalize_advantages);
                actor_step(&mut actor, &mut actor_opt, &batch, hp.clip)
                    .map_err(|e| diverged(epoch, e))?;
                critic_step(&mut critic, &mut critic_opt, &batch).map_err(|e| diverged(epoch, e))?;
            }
        }
        let stats = EpochStats::from_trajectory(epoch, &traj);
        curve.push(stats.clone());
        if !on_epoch(&stats, &actor) {
            break;
        }
    }
    Ok(BaselineRun { actor, critic, curve })
}

fn diverged(epoch: usize, e: PpoError) -> PpoError {
    match e {
        PpoError::Numerical(d) => PpoError::Diverged {
            epoch,
            detail: d.to_string(),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::CartPoleConfig;
    use crate::nets::{actor_arch, InitKind};

    #[test]
    fn short_run_is_deterministic_and_improves() {
        let env = CartPole::new(CartPoleConfig::default()).unwrap();
        let actor = LearnerParams::init(
            &actor_arch(4, 2),
            &InitScheme::actor(InitKind::Orthogonal),
            &mut rng::stream(3, "actor", 0),
        );
        let hp = PpoHyperparams {
            actor_lr: 1e-3,
            ..PpoHyperparams::default()
        };
        let a = train_rl_baseline(&env, actor.clone(), &hp, 40, 11, |_, _| true).unwrap();
        let b = train_rl_baseline(&env, actor, &hp, 40, 11, |_, _| true).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.actor, b.actor);
        let early: f64 = a.curve[..10].iter().map(|s| s.mean_reward).sum::<f64>() / 10.0;
        let late: f64 = a.curve[30..].iter().map(|s| s.mean_reward).sum::<f64>() / 10.0;
        assert!(late > early, "early {early} late {late}");
    }

    #[test]
    fn callback_stops_training() {
        let env = CartPole::new(CartPoleConfig::default()).unwrap();
        let actor = LearnerParams::init(
            &actor_arch(4, 2),
            &InitScheme::actor(InitKind::Orthogonal),
            &mut rng::stream(3, "actor", 0),
        );
        let run = train_rl_baseline(&env, actor, &PpoHyperparams::default(), 50, 1, |s, _| s.epoch < 2).unwrap();
        assert_eq!(run.curve.len(), 3);
    }
}
