//! N-dimensional cart-pole.
//!
//! N independent classic cart-poles share one agent. Action `a` pushes
//! dimension `a / 2` with `+F` when `a` is even and `-F` when odd; every
//! other dimension gets zero force but keeps integrating. The episode
//! terminates when any dimension leaves its angle or position band.
//!
//! Observation layout: `[x_0, xdot_0, theta_0, thetadot_0, x_1, ...]`.

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action {action} out of range for {n_actions} actions")]
    ActionOutOfRange { action: usize, n_actions: usize },
    #[error("step called on a finished episode")]
    EpisodeFinished,
    #[error("invalid cart-pole config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartPoleConfig {
    pub n_dims: usize,
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub pole_half_length: f64,
    pub force_mag: f64,
    /// Integration step in seconds.
    pub dt: f64,
    pub angle_threshold: f64,
    pub position_threshold: f64,
    pub max_steps: usize,
    /// Episode cap during distillation rollouts.
    pub rollout_truncation: usize,
}

impl Default for CartPoleConfig {
    fn default() -> Self {
        Self {
            n_dims: 1,
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            force_mag: 10.0,
            dt: 0.02,
            angle_threshold: 12.0 * 2.0 * std::f64::consts::PI / 360.0,
            position_threshold: 2.4,
            max_steps: 500,
            rollout_truncation: 200,
        }
    }
}

impl CartPoleConfig {
    pub fn with_dims(n_dims: usize) -> Self {
        Self {
            n_dims,
            ..Self::default()
        }
    }

    pub fn obs_dim(&self) -> usize {
        4 * self.n_dims
    }

    pub fn n_actions(&self) -> usize {
        2 * self.n_dims
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [
            ("gravity", self.gravity),
            ("cart_mass", self.cart_mass),
            ("pole_mass", self.pole_mass),
            ("pole_half_length", self.pole_half_length),
            ("force_mag", self.force_mag),
            ("dt", self.dt),
            ("angle_threshold", self.angle_threshold),
            ("position_threshold", self.position_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EnvError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.n_dims == 0 {
            return Err(EnvError::InvalidConfig("n_dims must be >= 1".into()));
        }
        if self.max_steps == 0 {
            return Err(EnvError::InvalidConfig("max_steps must be >= 1".into()));
        }
        if self.rollout_truncation == 0 || self.rollout_truncation > self.max_steps {
            return Err(EnvError::InvalidConfig(format!(
                "rollout_truncation must lie in [1, max_steps={}], got {}",
                self.max_steps, self.rollout_truncation
            )));
        }
        Ok(())
    }
}

/// One dimension of the system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub dims: Vec<PoleState>,
    pub step_count: usize,
    pub terminated: bool,
    pub truncated: bool,
}

impl EnvState {
    pub fn observation(&self) -> Vec<f64> {
        self.dims
            .iter()
            .flat_map(|d| [d.x, d.x_dot, d.theta, d.theta_dot])
            .collect()
    }

    pub fn is_done(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// Single-dimension semi-implicit Euler step under `force`.
pub fn integrate_pole(cfg: &CartPoleConfig, s: PoleState, force: f64) -> PoleState {
    let total_mass = cfg.cart_mass + cfg.pole_mass;
    let polemass_length = cfg.pole_mass * cfg.pole_half_length;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + polemass_length * s.theta_dot * s.theta_dot * sin) / total_mass;
    let theta_acc = (cfg.gravity * sin - cos * temp)
        / (cfg.pole_half_length * (4.0 / 3.0 - cfg.pole_mass * cos * cos / total_mass));
    let x_acc = temp - polemass_length * theta_acc * cos / total_mass;

    let x_dot = s.x_dot + cfg.dt * x_acc;
    let x = s.x + cfg.dt * x_dot;
    let theta_dot = s.theta_dot + cfg.dt * theta_acc;
    let theta = s.theta + cfg.dt * theta_dot;
    PoleState {
        x,
        x_dot,
        theta,
        theta_dot,
    }
}

#[derive(Clone, Debug)]
pub struct CartPole {
    config: CartPoleConfig,
}

impl CartPole {
    pub fn new(config: CartPoleConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &CartPoleConfig {
        &self.config
    }

    /// Every component uniform on `[-0.05, 0.05]`.
    pub fn reset(&self, seed: u64) -> EnvState {
        let mut r = rng::stream_from_seed(seed);
        self.reset_with(&mut r)
    }

    pub fn reset_with<R: rand::Rng>(&self, r: &mut R) -> EnvState {
        let u = Uniform::new_inclusive(-0.05, 0.05).expect("valid bounds");
        let dims = (0..self.config.n_dims)
            .map(|_| PoleState {
                x: u.sample(r),
                x_dot: u.sample(r),
                theta: u.sample(r),
                theta_dot: u.sample(r),
            })
            .collect();
        EnvState {
            dims,
            step_count: 0,
            terminated: false,
            truncated: false,
        }
    }

    /// Steps with the full `max_steps` cap.
    pub fn step(&self, state: &EnvState, action: usize) -> Result<StepResult, EnvError> {
        self.step_capped(state, action, self.config.max_steps)
    }

    /// Steps with an explicit episode cap (`rollout_truncation` during
    /// distillation, `max_steps` during evaluation).
    pub fn step_capped(
        &self,
        state: &EnvState,
        action: usize,
        cap: usize,
    ) -> Result<StepResult, EnvError> {
        let n_actions = self.config.n_actions();
        if action >= n_actions {
            return Err(EnvError::ActionOutOfRange { action, n_actions });
        }
        if state.is_done() {
            return Err(EnvError::EpisodeFinished);
        }
        let pushed = action / 2;
        let force = if action % 2 == 0 {
            self.config.force_mag
        } else {
            -self.config.force_mag
        };
        let dims: Vec<PoleState> = state
            .dims
            .iter()
            .enumerate()
            .map(|(d, &s)| integrate_pole(&self.config, s, if d == pushed { force } else { 0.0 }))
            .collect();
        let terminated = dims.iter().any(|d| {
            d.x.abs() > self.config.position_threshold || d.theta.abs() > self.config.angle_threshold
        });
        let step_count = state.step_count + 1;
        let truncated = !terminated && step_count >= cap.min(self.config.max_steps);
        Ok(StepResult {
            next_state: EnvState {
                dims,
                step_count,
                terminated,
                truncated,
            },
            reward: 1.0,
            terminated,
            truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Straight-line transcription of the classic single cart-pole update.
    fn oracle_step(s: [f64; 4], force: f64) -> [f64; 4] {
        let [x, x_dot, theta, theta_dot] = s;
        let (g, mc, mp, l, tau) = (9.8, 1.0, 0.1, 0.5, 0.02);
        let total = mc + mp;
        let pml = mp * l;
        let temp = (force + pml * theta_dot.powi(2) * theta.sin()) / total;
        let thetaacc =
            (g * theta.sin() - theta.cos() * temp) / (l * (4.0 / 3.0 - mp * theta.cos().powi(2) / total));
        let xacc = temp - pml * thetaacc * theta.cos() / total;
        let x_dot = x_dot + tau * xacc;
        let x = x + tau * x_dot;
        let theta_dot = theta_dot + tau * thetaacc;
        let theta = theta + tau * theta_dot;
        [x, x_dot, theta, theta_dot]
    }

    fn zero_state(n: usize) -> EnvState {
        EnvState {
            dims: vec![
                PoleState {
                    x: 0.0,
                    x_dot: 0.0,
                    theta: 0.0,
                    theta_dot: 0.0
                };
                n
            ],
            step_count: 0,
            terminated: false,
            truncated: false,
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn default_constants() {
        let c = CartPoleConfig::default();
        assert!((c.angle_threshold - 0.20943951).abs() < 1e-8);
        assert_eq!((c.max_steps, c.rollout_truncation), (500, 200));
        c.validate().unwrap();
    }

    #[test]
    fn reset_is_deterministic_and_in_range() {
        let env = CartPole::new(CartPoleConfig::with_dims(3)).unwrap();
        let a = env.reset(11);
        assert_eq!(a, env.reset(11));
        assert_ne!(a, env.reset(12));
        assert_eq!(a.observation().len(), 12);
        assert!(a.observation().iter().all(|v| v.abs() <= 0.05));
    }

    #[test]
    fn reset_components_are_centred() {
        let env = CartPole::new(CartPoleConfig::with_dims(2)).unwrap();
        let n = 10_000;
        let mut sums = [0.0; 8];
        for seed in 0..n {
            for (s, v) in sums.iter_mut().zip(env.reset(seed).observation()) {
                *s += v;
            }
        }
        for s in sums {
            assert!((s / n as f64).abs() <= 0.005);
        }
    }

    #[test]
    fn push_right_matches_oracle() {
        let env = CartPole::new(CartPoleConfig::default()).unwrap();
        let r = env.step(&zero_state(1), 0).unwrap();
        let obs = r.next_state.observation();
        assert!(close(&obs, &oracle_step([0.0; 4], 10.0), 1e-12));
        assert!(obs[1] > 0.0 && obs[3] < 0.0);
        assert_eq!(r.reward, 1.0);
        assert!(!r.terminated && !r.truncated);
    }

    #[test]
    fn two_dims_decouple() {
        let env = CartPole::new(CartPoleConfig::with_dims(2)).unwrap();
        let obs = env.step(&zero_state(2), 2).unwrap().next_state.observation();
        assert!(close(&obs[..4], &oracle_step([0.0; 4], 0.0), 1e-12));
        assert!(close(&obs[4..], &oracle_step([0.0; 4], 10.0), 1e-12));
    }

    #[test]
    fn angle_violation_terminates() {
        let cfg = CartPoleConfig::default();
        let env = CartPole::new(cfg.clone()).unwrap();
        let mut s = zero_state(1);
        s.dims[0].theta = cfg.angle_threshold + 0.01;
        s.dims[0].theta_dot = 0.5;
        assert!(env.step(&s, 0).unwrap().terminated);
    }

    #[test]
    fn contract_errors() {
        let env = CartPole::new(CartPoleConfig::with_dims(2)).unwrap();
        let s = zero_state(2);
        assert_eq!(
            env.step(&s, 4),
            Err(EnvError::ActionOutOfRange {
                action: 4,
                n_actions: 4
            })
        );
        let mut done = s.clone();
        done.terminated = true;
        assert_eq!(env.step(&done, 0), Err(EnvError::EpisodeFinished));
        let bad = CartPoleConfig {
            rollout_truncation: 600,
            ..CartPoleConfig::default()
        };
        assert!(CartPole::new(bad).is_err());
    }

    #[test]
    fn nd_trajectory_decomposes_into_independent_poles() {
        let env = CartPole::new(CartPoleConfig::with_dims(3)).unwrap();
        let mut rng = rng::stream(5, "actions", 0);
        let mut state = env.reset(77);
        let mut singles: Vec<[f64; 4]> = state
            .dims
            .iter()
            .map(|d| [d.x, d.x_dot, d.theta, d.theta_dot])
            .collect();
        while !state.is_done() {
            let a = rng.random_range(0..6);
            for (d, s) in singles.iter_mut().enumerate() {
                let f = if a / 2 == d {
                    if a % 2 == 0 { 10.0 } else { -10.0 }
                } else {
                    0.0
                };
                *s = oracle_step(*s, f);
            }
            state = env.step(&state, a).unwrap().next_state;
            let flat: Vec<f64> = singles.iter().flatten().copied().collect();
            assert!(close(&state.observation(), &flat, 1e-12));
        }
    }

    #[test]
    fn truncation_at_cap() {
        let env = CartPole::new(CartPoleConfig::default()).unwrap();
        let s = env.reset(3);
        let r = env.step_capped(&s, 0, 1).unwrap();
        assert!(r.truncated && !r.terminated);
        assert!(env.step(&r.next_state, 0).is_err());
    }
}
