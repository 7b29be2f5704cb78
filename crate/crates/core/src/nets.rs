//! Multilayer perceptrons, their initialization schemes and the learner
//! distributions they are drawn from.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{Tape, Var};
use crate::matrix::Matrix;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("input has length {found}, network expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Layer widths from input to output. `[in, h1, ..., out]`; a spec with a
/// single entry has no layers and acts as the identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub layer_dims: Vec<usize>,
}

impl ArchitectureSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        let mut layer_dims = Vec::with_capacity(hidden.len() + 2);
        layer_dims.push(input_dim);
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(output_dim);
        Self { layer_dims }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("non-empty layer dims")
    }

    pub fn hidden_widths(&self) -> &[usize] {
        let n = self.layer_dims.len();
        if n <= 2 {
            &[]
        } else {
            &self.layer_dims[1..n - 1]
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    Orthogonal,
    XavierNormal,
}

/// Orthogonal: weights are orthogonal matrices scaled by the gain.
/// Xavier-normal: entries ~ N(0, gain² · 2 / (fan_in + fan_out)).
/// Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub kind: InitKind,
    pub hidden_gain: f64,
    pub final_gain: f64,
}

impl InitScheme {
    /// √2 on hidden layers, 0.01 on the output layer.
    pub fn actor(kind: InitKind) -> Self {
        Self {
            kind,
            hidden_gain: std::f64::consts::SQRT_2,
            final_gain: 0.01,
        }
    }

    pub fn critic() -> Self {
        Self {
            kind: InitKind::Orthogonal,
            hidden_gain: std::f64::consts::SQRT_2,
            final_gain: 1.0,
        }
    }

    pub fn uniform_gain(kind: InitKind, gain: f64) -> Self {
        Self {
            kind,
            hidden_gain: gain,
            final_gain: gain,
        }
    }

    fn sample_weight<R: Rng>(&self, r: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Matrix {
        match self.kind {
            InitKind::Orthogonal => orthogonal(r, fan_in, fan_out, gain),
            InitKind::XavierNormal => {
                let std = gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| std * r.sample::<f64, _>(StandardNormal))
                    .collect();
                Matrix::from_vec(fan_in, fan_out, data)
            }
        }
    }
}

/// `rows x cols` matrix whose columns (rows, if `rows < cols`) are
/// orthonormal, then scaled by `gain`.
pub fn orthogonal<R: Rng>(r: &mut R, rows: usize, cols: usize, gain: f64) -> Matrix {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::<f64>::from_fn(tall, short, |_, _| r.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    // sign fix makes the result uniformly distributed over orthogonal matrices
    for j in 0..short {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            out[(i, j)] = gain * if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in x fan_out`
    pub weight: Matrix,
    /// `1 x fan_out`
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub distribution: String,
    pub base_seed: u64,
    pub draw: u64,
}

/// Parameters of a tanh MLP. Every layer but the last is followed by tanh;
/// the last is also followed by tanh when `linear_output` is false (an encoder
/// that stops at a hidden layer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerParams {
    pub arch: ArchitectureSpec,
    pub layers: Vec<Layer>,
    pub linear_output: bool,
    pub provenance: Option<Provenance>,
}

/// Tape handles for one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

impl LearnerParams {
    pub fn init<R: Rng>(arch: &ArchitectureSpec, init: &InitScheme, r: &mut R) -> Self {
        let n = arch.n_layers();
        let layers = (0..n)
            .map(|i| {
                let (fi, fo) = (arch.layer_dims[i], arch.layer_dims[i + 1]);
                let gain = if i + 1 == n { init.final_gain } else { init.hidden_gain };
                Layer {
                    weight: init.sample_weight(r, fi, fo, gain),
                    bias: Matrix::zeros(1, fo),
                }
            })
            .collect();
        Self {
            arch: arch.clone(),
            layers,
            linear_output: true,
            provenance: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights and biases in layer order: `[w0, b0, w1, b1, ...]`.
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Rebuilds the parameters from tensors in [`LearnerParams::tensors`] order.
    pub fn with_tensors(&self, tensors: Vec<Matrix>) -> Self {
        assert_eq!(tensors.len(), 2 * self.layers.len());
        let mut it = tensors.into_iter();
        let layers = self
            .layers
            .iter()
            .map(|_| Layer {
                weight: it.next().expect("weight"),
                bias: it.next().expect("bias"),
            })
            .collect();
        Self {
            arch: self.arch.clone(),
            layers,
            linear_output: self.linear_output,
            provenance: self.provenance.clone(),
        }
    }

    fn activates(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || !self.linear_output
    }

    /// Batched forward pass, one observation per row.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = h.matmul(&l.weight).add_row(&l.bias);
            if self.activates(i) {
                h = h.map(f64::tanh);
            }
        }
        h
    }

    pub fn forward_logits(&self, obs: &[f64]) -> Result<Vec<f64>, NetError> {
        if obs.len() != self.input_dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.input_dim(),
                found: obs.len(),
            });
        }
        Ok(self.forward(&Matrix::row_vector(obs.to_vec())).into_vec())
    }

    /// Registers every tensor as a tape leaf.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.leaf(l.weight.clone()),
                bias: tape.leaf(l.bias.clone()),
            })
            .collect()
    }

    /// Recorded forward pass through `vars`, which must have this network's
    /// layout. Arithmetic is identical to [`LearnerParams::forward`].
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[LayerVars], x: Var) -> Var {
        assert_eq!(vars.len(), self.layers.len(), "layer count mismatch");
        let mut h = x;
        for (i, lv) in vars.iter().enumerate() {
            let z = tape.matmul(h, lv.weight);
            h = tape.add_row(z, lv.bias);
            if self.activates(i) {
                h = tape.tanh(h);
            }
        }
        h
    }
}

/// Flattens layer handles into `[w0, b0, w1, b1, ...]`.
pub fn flatten_vars(vars: &[LayerVars]) -> Vec<Var> {
    vars.iter().flat_map(|l| [l.weight, l.bias]).collect()
}

/// Softmax with max subtraction.
pub fn policy_probs(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Log-softmax with the same operation order as [`Tape::log_softmax`].
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|z| z - m).collect();
    let s: f64 = shifted.iter().map(|v| v.exp()).sum();
    let lse = s.ln();
    shifted.into_iter().map(|v| v - lse).collect()
}

/// How architectures are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ArchSampler {
    Fixed(ArchitectureSpec),
    /// All hidden layers share one width drawn from `widths`.
    RandomWidth {
        input_dim: usize,
        output_dim: usize,
        depth: usize,
        widths: Vec<usize>,
    },
    /// Hidden layer count drawn uniformly from `depths`.
    RandomDepth {
        input_dim: usize,
        output_dim: usize,
        width: usize,
        depths: Vec<usize>,
    },
}

impl ArchSampler {
    fn sample<R: Rng>(&self, r: &mut R) -> ArchitectureSpec {
        match self {
            ArchSampler::Fixed(a) => a.clone(),
            ArchSampler::RandomWidth {
                input_dim,
                output_dim,
                depth,
                widths,
            } => {
                let h = widths[r.random_range(0..widths.len())];
                ArchitectureSpec::mlp(*input_dim, &vec![h; *depth], *output_dim)
            }
            ArchSampler::RandomDepth {
                input_dim,
                output_dim,
                width,
                depths,
            } => {
                let l = depths[r.random_range(0..depths.len())];
                ArchitectureSpec::mlp(*input_dim, &vec![*width; l], *output_dim)
            }
        }
    }
}

/// A distribution over learner architectures and initializations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerDistribution {
    pub id: String,
    pub arch: ArchSampler,
    pub init: InitScheme,
    pub base_seed: u64,
}

impl LearnerDistribution {
    /// Deterministic in `(base_seed, draw)`.
    pub fn sample(&self, draw: u64) -> LearnerParams {
        let mut r = rng::stream(self.base_seed, "learner", draw);
        let arch = self.arch.sample(&mut r);
        let mut p = LearnerParams::init(&arch, &self.init, &mut r);
        p.provenance = Some(Provenance {
            distribution: self.id.clone(),
            base_seed: self.base_seed,
            draw,
        });
        p
    }

    pub fn with_seed(&self, base_seed: u64) -> Self {
        Self {
            base_seed,
            ..self.clone()
        }
    }
}

/// 4N → 64 → 64 → 2N actor architecture.
pub fn actor_arch(obs_dim: usize, n_actions: usize) -> ArchitectureSpec {
    ArchitectureSpec::mlp(obs_dim, &[64, 64], n_actions)
}

/// Critic mirrors the actor with a scalar head.
pub fn critic_arch(obs_dim: usize) -> ArchitectureSpec {
    ArchitectureSpec::mlp(obs_dim, &[64, 64], 1)
}
