//! Run configuration. TOML with one table per stage; every key is optional
//! and unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/1d"
//!
//! [env]
//! n_dims = 1
//!
//! [distill]
//! k = 2
//! meta_epochs = 3000
//!
//! [eval]
//! n_agents = 100
//! n_episodes = 100
//! distribution = "lambda"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taskdistill::distill::{Convergence, DistillConfig};
use taskdistill::env::CartPoleConfig;
use taskdistill::eval::{EvalProtocol, Variant};
use taskdistill::optim::AdamConfig;
use taskdistill::ppo::PpoHyperparams;
use taskdistill::rng;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Upper bound on evaluation worker threads.
    pub workers: usize,
    pub env: CartPoleConfig,
    pub ppo: PpoHyperparams,
    pub distill: DistillSection,
    pub eval: EvalSection,
    pub baseline: BaselineSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            workers: 1,
            env: CartPoleConfig::default(),
            ppo: PpoHyperparams::default(),
            distill: DistillSection::default(),
            eval: EvalSection::default(),
            baseline: BaselineSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub k: usize,
    pub meta_epochs: usize,
    pub inner_steps: usize,
    pub optimizer: AdamConfig,
    pub convergence: Convergence,
    /// Split the reference actor at this layer and meta-train the encoder.
    pub split_layer: Option<usize>,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            k: d.k,
            meta_epochs: d.meta_epochs,
            inner_steps: d.inner_steps,
            optimizer: d.distiller,
            convergence: d.convergence,
            split_layer: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_agents: usize,
    pub n_episodes: usize,
    pub distribution: Variant,
    /// Episodes for the uniform-random baseline.
    pub random_episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = EvalProtocol::default();
        Self {
            n_agents: p.n_agents,
            n_episodes: p.n_episodes,
            distribution: p.distribution,
            random_episodes: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub epochs: usize,
    /// Episodes in the final evaluation of the trained policy.
    pub eval_episodes: usize,
    /// Evaluate a checkpoint every this many epochs (0 disables); training
    /// stops once a checkpoint reaches `target_reward`.
    pub eval_every: usize,
    pub target_reward: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            epochs: 1000,
            eval_episodes: 100,
            eval_every: 0,
            target_reward: 475.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub k_values: Vec<usize>,
    /// Mean k-shot reward that counts as a successful distillation.
    pub success_reward: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            k_values: vec![2, 3, 4],
            success_reward: 250.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.env.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.distill_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        if self.eval.n_agents == 0 || self.eval.n_episodes == 0 || self.eval.random_episodes == 0 {
            return bad("eval counts must be >= 1".into());
        }
        if self.baseline.epochs == 0 || self.baseline.eval_episodes == 0 {
            return bad("baseline.epochs and baseline.eval_episodes must be >= 1".into());
        }
        if let Some(l) = self.distill.split_layer {
            if l > 3 {
                return bad(format!("distill.split_layer must be in 0..=3, got {l}"));
            }
        }
        if self.sweep.k_values.is_empty() || self.sweep.k_values.contains(&0) {
            return bad("sweep.k_values must be a nonempty list of counts >= 1".into());
        }
        Ok(())
    }

    /// Seed of a named stage, derived from the master seed.
    pub fn stage_seed(&self, stage: &str, index: u64) -> u64 {
        rng::derive_seed(self.seed, stage, index)
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            k: self.distill.k,
            meta_epochs: self.distill.meta_epochs,
            ppo: self.ppo.clone(),
            distiller: self.distill.optimizer,
            inner_steps: self.distill.inner_steps,
            convergence: self.distill.convergence.clone(),
            seed: self.stage_seed("distill", 0),
        }
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            n_agents: self.eval.n_agents,
            n_episodes: self.eval.n_episodes,
            distribution: self.eval.distribution,
            seed: self.stage_seed("eval", 0),
        }
    }
}
