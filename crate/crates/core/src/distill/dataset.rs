use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{CartPole, CartPoleConfig};
use crate::matrix::Matrix;
use crate::nets::LearnerParams;
use crate::rng;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const INITIAL_INNER_LR: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("malformed dataset document: {0}")]
    Parse(String),
    #[error("unsupported dataset format version {0}")]
    Version(u32),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvDescriptor {
    pub kind: String,
    pub config: CartPoleConfig,
}

impl EnvDescriptor {
    pub fn cartpole(config: &CartPoleConfig) -> Self {
        Self {
            kind: "ndcartpole".into(),
            config: config.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetProvenance {
    pub seed: u64,
    pub meta_epochs: usize,
    pub lambda_spec: String,
    pub best_window_reward: Option<f64>,
}

/// Encoder that maps raw states (and synthetic states) into the learner's
/// input space, together with the layer it was split at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderState {
    pub split_layer: usize,
    pub params: LearnerParams,
}

/// `k` synthetic states with soft labels and the inner learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDataset {
    pub format_version: u32,
    pub env: EnvDescriptor,
    pub k: usize,
    pub input_dim: usize,
    pub action_dim: usize,
    pub inner_lr: f64,
    /// `k x input_dim`
    #[serde(rename = "X_d")]
    pub x_d: Matrix,
    /// `k x action_dim`
    #[serde(rename = "Y_d")]
    pub y_d: Matrix,
    pub provenance: DatasetProvenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderState>,
}

impl SyntheticDataset {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Invalid(m));
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(DatasetError::Version(self.format_version));
        }
        if self.env.kind != "ndcartpole" {
            return bad(format!("unknown environment kind {:?}", self.env.kind));
        }
        if let Err(e) = self.env.config.validate() {
            return bad(e.to_string());
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.input_dim != self.env.config.obs_dim() || self.action_dim != self.env.config.n_actions() {
            return bad(format!(
                "dimensions {}x{} do not match the environment ({}x{})",
                self.input_dim,
                self.action_dim,
                self.env.config.obs_dim(),
                self.env.config.n_actions()
            ));
        }
        if self.x_d.shape() != (self.k, self.input_dim) || self.y_d.shape() != (self.k, self.action_dim) {
            return bad(format!(
                "X_d is {:?} and Y_d is {:?}, expected ({k}, {}) and ({k}, {})",
                self.x_d.shape(),
                self.y_d.shape(),
                self.input_dim,
                self.action_dim,
                k = self.k
            ));
        }
        if !(self.x_d.is_finite() && self.y_d.is_finite()) {
            return bad("non-finite entries".into());
        }
        if !(self.inner_lr.is_finite() && self.inner_lr > 0.0) {
            return bad(format!("inner_lr must be positive, got {}", self.inner_lr));
        }
        if let Some(enc) = &self.encoder {
            if enc.params.input_dim() != self.input_dim {
                return bad("encoder input width does not match the environment".into());
            }
        }
        Ok(())
    }

    pub fn environment(&self) -> Result<CartPole, DatasetError> {
        CartPole::new(self.env.config.clone()).map_err(|e| DatasetError::Invalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("dataset serializes");
        s.push('\n');
        s
    }

    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let ds: Self = serde_json::from_str(text).map_err(|e| DatasetError::Parse(e.to_string()))?;
        ds.validate()?;
        Ok(ds)
    }

    /// Trainable scalars: `X_d`, `Y_d` and `η`.
    pub fn n_params(&self) -> usize {
        self.x_d.len() + self.y_d.len() + 1
    }
}

/// `X_d` and `Y_d` entries drawn i.i.d. from N(0, 1); `η` = 0.02.
pub fn initialize_dataset(env: &CartPoleConfig, k: usize, seed: u64) -> Result<SyntheticDataset, DatasetError> {
    if k == 0 {
        return Err(DatasetError::Invalid("k must be >= 1".into()));
    }
    env.validate().map_err(|e| DatasetError::Invalid(e.to_string()))?;
    let (d, c) = (env.obs_dim(), env.n_actions());
    let mut r = rng::stream(seed, "dataset", 0);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| r.sample(StandardNormal)).collect() };
    let x_d = Matrix::from_vec(k, d, draw(k * d));
    let y_d = Matrix::from_vec(k, c, draw(k * c));
    Ok(SyntheticDataset {
        format_version: DATASET_FORMAT_VERSION,
        env: EnvDescriptor::cartpole(env),
        k,
        input_dim: d,
        action_dim: c,
        inner_lr: INITIAL_INNER_LR,
        x_d,
        y_d,
        provenance: DatasetProvenance {
            seed,
            meta_epochs: 0,
            lambda_spec: String::new(),
            best_window_reward: None,
        },
        encoder: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_shapes_and_determinism() {
        let cfg = CartPoleConfig::with_dims(3);
        let a = initialize_dataset(&cfg, 4, 7).unwrap();
        assert_eq!(a.x_d.shape(), (4, 12));
        assert_eq!(a.y_d.shape(), (4, 6));
        assert_eq!(a.inner_lr, 0.02);
        assert_eq!(a, initialize_dataset(&cfg, 4, 7).unwrap());
        assert_ne!(a.x_d, initialize_dataset(&cfg, 4, 8).unwrap().x_d);
        assert!(initialize_dataset(&cfg, 0, 7).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut ds = initialize_dataset(&CartPoleConfig::with_dims(2), 3, 1).unwrap();
        ds.x_d.as_mut_slice()[0] = 0.1 + 0.2;
        ds.y_d.as_mut_slice()[1] = 1e-300;
        ds.inner_lr = std::f64::consts::PI / 7.0;
        let back = SyntheticDataset::from_json(&ds.to_json()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.x_d.as_slice().iter().zip(ds.x_d.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn validation_failures() {
        let ds = initialize_dataset(&CartPoleConfig::default(), 2, 1).unwrap();
        let mut bad = ds.clone();
        bad.inner_lr = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = ds.clone();
        bad.x_d = Matrix::zeros(2, 8);
        assert!(bad.validate().is_err());
        let mut bad = ds.clone();
        bad.format_version = 99;
        assert_eq!(bad.validate(), Err(DatasetError::Version(99)));
        let text = ds.to_json().replace("\"k\"", "\"extra\": 1, \"k\"");
        assert!(matches!(SyntheticDataset::from_json(&text), Err(DatasetError::Parse(_))));
    }
}
