//! k-shot evaluation of synthetic datasets, random-agent baselines and a
//! tabular view of the synthetic instances.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{inner_train, identity_encoder, DatasetProvenance, DistillError, EncodedPolicy, SyntheticDataset};
use crate::env::{CartPole, CartPoleConfig, EnvError};
use crate::nets::{
    actor_arch, policy_probs, ArchSampler, ArchitectureSpec, InitKind, InitScheme, LearnerDistribution,
    LearnerParams,
};
use crate::ppo::{mean_std, run_episode, PpoError, Policy};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("unknown learner distribution {0:?}")]
    UnknownVariant(String),
    #[error("invalid evaluation protocol: {0}")]
    InvalidProtocol(String),
    #[error("distribution {variant} cannot be combined with an encoder split at layer {split}")]
    UnsupportedWithEncoder { variant: Variant, split: usize },
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl From<PpoError> for EvalError {
    fn from(e: PpoError) -> Self {
        EvalError::Distill(e.into())
    }
}

/// The six learner distributions compared in the initialization study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Fixed actor architecture, orthogonal init (√2 hidden, 0.01 final).
    Lambda,
    /// Orthogonal with gain 1 everywhere.
    OrthoSigma1,
    /// Xavier-normal with the Λ gains.
    Xe,
    /// Xavier-normal with gain 1 everywhere.
    XeSigma1,
    /// Λ with both hidden widths drawn from {32, 64, 128, 256}.
    RandomH,
    /// Λ with 1 to 6 hidden layers of width 64.
    RandomL,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Lambda,
        Variant::OrthoSigma1,
        Variant::Xe,
        Variant::XeSigma1,
        Variant::RandomH,
        Variant::RandomL,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lambda => "lambda",
            Variant::OrthoSigma1 => "ortho-sigma1",
            Variant::Xe => "xe",
            Variant::XeSigma1 => "xe-sigma1",
            Variant::RandomH => "random-h",
            Variant::RandomL => "random-l",
        }
    }

    fn init(self) -> InitScheme {
        match self {
            Variant::Lambda | Variant::RandomH | Variant::RandomL => InitScheme::actor(InitKind::Orthogonal),
            Variant::OrthoSigma1 => InitScheme::uniform_gain(InitKind::Orthogonal, 1.0),
            Variant::Xe => InitScheme::actor(InitKind::XavierNormal),
            Variant::XeSigma1 => InitScheme::uniform_gain(InitKind::XavierNormal, 1.0),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| EvalError::UnknownVariant(s.to_string()))
    }
}

pub fn make_distribution(variant: Variant, env: &CartPoleConfig) -> LearnerDistribution {
    let (d, c) = (env.obs_dim(), env.n_actions());
    let arch = match variant {
        Variant::RandomH => ArchSampler::RandomWidth {
            input_dim: d,
            output_dim: c,
            depth: 2,
            widths: vec![32, 64, 128, 256],
        },
        Variant::RandomL => ArchSampler::RandomDepth {
            input_dim: d,
            output_dim: c,
            width: 64,
            depths: (1..=6).collect(),
        },
        _ => ArchSampler::Fixed(actor_arch(d, c)),
    };
    LearnerDistribution {
        id: variant.name().to_string(),
        arch,
        init: variant.init(),
        base_seed: 0,
    }
}

/// Learner distribution for a dataset whose encoder took the first `split`
/// layers of the reference actor. Only fixed-architecture variants apply.
pub fn split_distribution(variant: Variant, env: &CartPoleConfig, split: usize) -> Result<LearnerDistribution, EvalError> {
    if matches!(variant, Variant::RandomH | Variant::RandomL) {
        return Err(EvalError::UnsupportedWithEncoder { variant, split });
    }
    let reference = actor_arch(env.obs_dim(), env.n_actions());
    if split > reference.n_layers() {
        return Err(EvalError::InvalidProtocol(format!("split layer {split} out of range")));
    }
    Ok(LearnerDistribution {
        id: format!("{}-split{split}", variant.name()),
        arch: ArchSampler::Fixed(ArchitectureSpec {
            layer_dims: reference.layer_dims[split..].to_vec(),
        }),
        init: variant.init(),
        base_seed: 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub n_agents: usize,
    pub n_episodes: usize,
    pub distribution: Variant,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            n_agents: 100,
            n_episodes: 100,
            distribution: Variant::Lambda,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_agents == 0 || self.n_episodes == 0 {
            return Err(EvalError::InvalidProtocol("n_agents and n_episodes must be >= 1".into()));
        }
        Ok(())
    }

    /// Base seed of the evaluation learners. Distinct label from any
    /// training stream, so no evaluated agent is a training draw.
    pub fn learner_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "eval-learners", 0)
    }

    pub fn episode_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "eval-episodes", 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub distribution: String,
    pub n_agents: usize,
    pub n_episodes: usize,
    pub seed: u64,
    /// `rewards[agent][episode]`
    pub rewards: Vec<Vec<f64>>,
    pub agent_means: Vec<f64>,
    pub mean: f64,
    /// Pooled over every episode of every agent.
    pub std: f64,
    /// Spread of the per-agent means.
    pub agent_std: f64,
    pub provenance: Option<DatasetProvenance>,
}

impl EvalReport {
    fn from_rewards(distribution: String, seed: u64, rewards: Vec<Vec<f64>>, provenance: Option<DatasetProvenance>) -> Self {
        let agent_means: Vec<f64> = rewards.iter().map(|r| mean_std(r).0).collect();
        let pooled: Vec<f64> = rewards.iter().flatten().copied().collect();
        let (mean, std) = mean_std(&pooled);
        Self {
            distribution,
            n_agents: rewards.len(),
            n_episodes: rewards.first().map_or(0, Vec::len),
            seed,
            agent_std: mean_std(&agent_means).1,
            agent_means,
            rewards,
            mean,
            std,
            provenance,
        }
    }

    pub const CSV_HEADER: &'static str = "agent,mean_reward,std_reward,min_reward,max_reward,episodes";

    /// One row per agent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (i, r) in self.rewards.iter().enumerate() {
            let (m, s) = mean_std(r);
            let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.push_str(&format!("{i},{m},{s},{lo},{hi},{}\n", r.len()));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "distribution: {}\nagents: {}\nepisodes per agent: {}\nmean reward: {:.3}\npooled std: {:.3}\nstd of agent means: {:.3}\n",
            self.distribution, self.n_agents, self.n_episodes, self.mean, self.std, self.agent_std
        )
    }
}

/// Trains `n_agents` fresh learners on the dataset with one inner step each
/// and rolls each out for `n_episodes` full-length episodes. Agents run on the
/// current rayon pool; results are gathered in agent order.
pub fn kshot_eval(dataset: &SyntheticDataset, protocol: &EvalProtocol) -> Result<EvalReport, EvalError> {
    protocol.validate()?;
    dataset.validate().map_err(DistillError::from)?;
    let env_cfg = &dataset.env.config;
    let env = CartPole::new(env_cfg.clone())?;
    let (encoder, learners) = match &dataset.encoder {
        Some(e) => (e.params.clone(), split_distribution(protocol.distribution, env_cfg, e.split_layer)?),
        None => (identity_encoder(env_cfg.obs_dim()), make_distribution(protocol.distribution, env_cfg)),
    };
    let learners = learners.with_seed(protocol.learner_seed());
    let episode_seed = protocol.episode_seed();
    let cap = env_cfg.max_steps;
    let rewards = (0..protocol.n_agents as u64)
        .into_par_iter()
        .map(|agent| -> Result<Vec<f64>, EvalError> {
            let init = learners.sample(agent);
            let (trained, _) = inner_train(&init, &encoder, dataset, 1)?;
            let policy = EncodedPolicy {
                encoder: &encoder,
                learner: &trained,
            };
            let mut r = rng::stream(episode_seed, "agent", agent);
            (0..protocol.n_episodes)
                .map(|_| run_episode(&env, &policy, cap, &mut r).map_err(EvalError::from))
                .collect()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_rewards(
        learners.id.clone(),
        protocol.seed,
        rewards,
        Some(dataset.provenance.clone()),
    ))
}

/// Mean reward of a single trained policy over `episodes` full-length episodes.
pub fn policy_eval(env: &CartPole, policy: &LearnerParams, episodes: usize, seed: u64) -> Result<EvalReport, EvalError> {
    let mut r = rng::stream(seed, "policy-eval", 0);
    let cap = env.config().max_steps;
    let rewards = (0..episodes)
        .map(|_| run_episode(env, policy, cap, &mut r).map_err(EvalError::from))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(EvalReport::from_rewards("trained-policy".into(), seed, vec![rewards], None))
}

struct Uniform(usize);

impl Policy for Uniform {
    fn logits(&self, _: &[f64]) -> Vec<f64> {
        vec![0.0; self.0]
    }
}

/// Uniformly random actions at the full episode cap.
pub fn random_baseline(env_cfg: &CartPoleConfig, episodes: usize, seed: u64) -> Result<EvalReport, EvalError> {
    if episodes == 0 {
        return Err(EvalError::InvalidProtocol("episodes must be >= 1".into()));
    }
    let env = CartPole::new(env_cfg.clone())?;
    let policy = Uniform(env_cfg.n_actions());
    let mut r = rng::stream(seed, "random-agent", 0);
    let rewards = (0..episodes)
        .map(|_| run_episode(&env, &policy, env_cfg.max_steps, &mut r).map_err(EvalError::from))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(EvalReport::from_rewards("uniform-random".into(), seed, vec![rewards], None))
}

/// One row per synthetic instance: state components, raw labels and
/// softmaxed labels.
pub fn export_dataset_view(dataset: &SyntheticDataset) -> String {
    let n = dataset.env.config.n_dims;
    let names = ["x", "x_dot", "theta", "theta_dot"];
    let mut header = vec!["instance".to_string()];
    for d in 0..n {
        header.extend(names.iter().map(|s| format!("{s}_{d}")));
    }
    for a in 0..dataset.action_dim {
        header.push(format!("label_{a}"));
    }
    for a in 0..dataset.action_dim {
        header.push(format!("prob_{a}"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..dataset.k {
        let mut row = vec![i.to_string()];
        row.extend(dataset.x_d.row(i).iter().map(f64::to_string));
        row.extend(dataset.y_d.row(i).iter().map(f64::to_string));
        row.extend(policy_probs(dataset.y_d.row(i)).iter().map(f64::to_string));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::initialize_dataset;

    #[test]
    fn variants_parse_and_reject_unknown() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("gaussian".parse::<Variant>(), Err(EvalError::UnknownVariant(_))));
    }

    #[test]
    fn distributions_match_their_definitions() {
        let env = CartPoleConfig::default();
        let l = make_distribution(Variant::Lambda, &env);
        assert_eq!(l.arch, ArchSampler::Fixed(actor_arch(4, 2)));
        assert_eq!(l.init, InitScheme::actor(InitKind::Orthogonal));
        let s = make_distribution(Variant::OrthoSigma1, &env);
        assert_eq!((s.init.hidden_gain, s.init.final_gain), (1.0, 1.0));
        let rl = make_distribution(Variant::RandomL, &env);
        match rl.arch {
            ArchSampler::RandomDepth { depths, width, .. } => {
                assert_eq!(depths, vec![1, 2, 3, 4, 5, 6]);
                assert_eq!(width, 64);
            }
            other => panic!("unexpected {other:?}"),
        }
        let rh = make_distribution(Variant::RandomH, &env).with_seed(3);
        for draw in 0..20 {
            let p = rh.sample(draw);
            let w = p.arch.hidden_widths();
            assert_eq!(w.len(), 2);
            assert!([32, 64, 128, 256].contains(&w[0]) && w[0] == w[1]);
        }
    }

    #[test]
    fn random_baseline_single_episode() {
        let r = random_baseline(&CartPoleConfig::default(), 1, 0).unwrap();
        assert_eq!(r.rewards, vec![vec![r.mean]]);
        assert_eq!(r.std, 0.0);
        assert!(random_baseline(&CartPoleConfig::default(), 0, 0).is_err());
    }

    #[test]
    fn untrained_dataset_is_near_random() {
        let ds = initialize_dataset(&CartPoleConfig::default(), 2, 1).unwrap();
        let p = EvalProtocol {
            n_agents: 20,
            n_episodes: 10,
            ..EvalProtocol::default()
        };
        let r = kshot_eval(&ds, &p).unwrap();
        assert!((10.0..=40.0).contains(&r.mean), "mean {}", r.mean);
        assert_eq!(r, kshot_eval(&ds, &p).unwrap());
        assert_eq!(r.to_csv().lines().count(), 21);
    }

    #[test]
    fn single_agent_matches_manual_rollout() {
        let ds = initialize_dataset(&CartPoleConfig::default(), 3, 4).unwrap();
        let p = EvalProtocol {
            n_agents: 1,
            n_episodes: 1,
            seed: 12,
            ..EvalProtocol::default()
        };
        let report = kshot_eval(&ds, &p).unwrap();
        let init = make_distribution(Variant::Lambda, &ds.env.config)
            .with_seed(p.learner_seed())
            .sample(0);
        let enc = identity_encoder(4);
        let (trained, _) = inner_train(&init, &enc, &ds, 1).unwrap();
        let env = CartPole::new(ds.env.config.clone()).unwrap();
        let mut r = rng::stream(p.episode_seed(), "agent", 0);
        let manual = run_episode(&env, &trained, 500, &mut r).unwrap();
        assert_eq!(report.rewards, vec![vec![manual]]);
    }

    #[test]
    fn dataset_view_rows_and_round_trip() {
        let ds = initialize_dataset(&CartPoleConfig::with_dims(2), 3, 2).unwrap();
        let csv = export_dataset_view(&ds);
        let mut rdr = csv::Reader::from_reader(csv.as_bytes());
        assert_eq!(rdr.headers().unwrap().len(), 1 + 8 + 4 + 4);
        let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 3);
        for (i, row) in rows.iter().enumerate() {
            let vals: Vec<f64> = row.iter().skip(1).map(|v| v.parse().unwrap()).collect();
            assert_eq!(&vals[..8], ds.x_d.row(i));
            let s: f64 = vals[12..].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
