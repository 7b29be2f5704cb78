use super::{DistillError, SyntheticDataset};
use crate::diff::{Tape, Var};
use crate::matrix::Matrix;
use crate::nets::{flatten_vars, LayerVars, LearnerParams};
use crate::ppo::{ppo_policy_loss, Batch, Policy};

/// A learner applied on top of an encoder. An encoder with no layers is the
/// identity.
pub struct EncodedPolicy<'a> {
    pub encoder: &'a LearnerParams,
    pub learner: &'a LearnerParams,
}

impl Policy for EncodedPolicy<'_> {
    fn logits(&self, obs: &[f64]) -> Vec<f64> {
        let h = self.encoder.forward(&Matrix::row_vector(obs.to_vec()));
        self.learner.forward(&h).into_vec()
    }
}

/// The recorded inner optimization. `phi` are the trained parameters as
/// functions of `x`, `y`, `eta`, `phi0` and the encoder leaves `xi`.
pub struct InnerRecord {
    pub tape: Tape,
    pub x: Var,
    pub y: Var,
    pub eta: Var,
    pub xi: Vec<Var>,
    pub phi0: Vec<Var>,
    pub phi: Vec<Var>,
    /// Inner loss before each step.
    pub losses: Vec<f64>,
}

impl InnerRecord {
    /// `[X_d, Y_d, η, ξ...]`
    pub fn theta_vars(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.y, self.eta];
        v.extend(&self.xi);
        v
    }
}

fn regroup(flat: &[Var]) -> Vec<LayerVars> {
    flat.chunks(2)
        .map(|c| LayerVars {
            weight: c[0],
            bias: c[1],
        })
        .collect()
}

/// `steps` full-batch SGD steps of `init` on the mean squared error between
/// its logits on `encoder(X_d)` and `Y_d`, recorded end to end.
pub fn inner_train(
    init: &LearnerParams,
    encoder: &LearnerParams,
    dataset: &SyntheticDataset,
    steps: usize,
) -> Result<(LearnerParams, InnerRecord), DistillError> {
    if encoder.input_dim() != dataset.input_dim || init.input_dim() != encoder.output_dim() {
        return Err(DistillError::InvalidConfig(format!(
            "dataset width {} does not fit encoder {:?} and learner {:?}",
            dataset.input_dim, encoder.arch.layer_dims, init.arch.layer_dims
        )));
    }
    if init.output_dim() != dataset.action_dim {
        return Err(DistillError::InvalidConfig(format!(
            "learner emits {} logits, dataset has {} labels",
            init.output_dim(),
            dataset.action_dim
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(dataset.x_d.clone());
    let y = tape.leaf(dataset.y_d.clone());
    let eta = tape.leaf(Matrix::scalar(dataset.inner_lr));
    let xi_layers = encoder.leaves(&mut tape);
    let xi = flatten_vars(&xi_layers);
    let h = encoder.forward_tape(&mut tape, &xi_layers, x);
    let phi0 = flatten_vars(&init.leaves(&mut tape));
    let mut phi = phi0.clone();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let out = init.forward_tape(&mut tape, &regroup(&phi), h);
        let diff = tape.sub(out, y);
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        tape.ensure_finite()?;
        losses.push(tape.value(loss).item());
        let grads = tape.gradient_recorded(loss, &phi)?;
        phi = phi
            .iter()
            .zip(grads)
            .map(|(&p, g)| {
                let (r, c) = tape.shape(p);
                let e = tape.broadcast(eta, r, c);
                let step = tape.mul(e, g);
                tape.sub(p, step)
            })
            .collect();
    }
    tape.ensure_finite()?;
    let trained = init.with_tensors(phi.iter().map(|&p| tape.value(p).clone()).collect());
    let record = InnerRecord {
        tape,
        x,
        y,
        eta,
        xi,
        phi0,
        phi,
        losses,
    };
    Ok((trained, record))
}

/// Clipped PPO loss of `learner ∘ encoder` on `batch`, with the gradient
/// with respect to the learner's tensors and the encoder's tensors.
pub fn outer_policy_loss(
    learner: &LearnerParams,
    encoder: &LearnerParams,
    batch: &Batch,
    clip: f64,
) -> Result<(f64, Vec<Matrix>, Vec<Matrix>), DistillError> {
    let mut tape = Tape::new();
    let xi_layers = encoder.leaves(&mut tape);
    let phi_layers = learner.leaves(&mut tape);
    let s = tape.constant(batch.states.clone());
    let h = encoder.forward_tape(&mut tape, &xi_layers, s);
    let logits = learner.forward_tape(&mut tape, &phi_layers, h);
    let loss = ppo_policy_loss(
        &mut tape,
        logits,
        &batch.actions,
        &batch.old_log_probs,
        &batch.advantages,
        clip,
    )?;
    let phi = flatten_vars(&phi_layers);
    let xi = flatten_vars(&xi_layers);
    let mut wrt = phi.clone();
    wrt.extend(&xi);
    let mut g = tape.gradient(loss, &wrt)?.into_matrices();
    let g_xi = g.split_off(phi.len());
    Ok((tape.value(loss).item(), g, g_xi))
}

/// Gradient of the outer policy loss with respect to θ = {X_d, Y_d, η} and
/// the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    pub loss: f64,
    pub x: Matrix,
    pub y: Matrix,
    pub eta: f64,
    pub xi: Vec<Matrix>,
}

/// `v = ∂L/∂φ₁` is taken with the trained parameters as leaves, then pulled
/// back through the recorded inner optimization as the gradient of `φ₁ · v`.
/// The encoder also receives its direct gradient through the outer forward.
pub fn meta_gradient(
    record: &mut InnerRecord,
    trained: &LearnerParams,
    encoder: &LearnerParams,
    batch: &Batch,
    clip: f64,
) -> Result<MetaGradient, DistillError> {
    let (loss, v, direct_xi) = outer_policy_loss(trained, encoder, batch, clip)?;
    let s = record.tape.dot_constant(&record.phi, &v)?;
    let wrt = record.theta_vars();
    let mut g = record.tape.gradient(s, &wrt)?.into_matrices().into_iter();
    let x = g.next().expect("X_d");
    let y = g.next().expect("Y_d");
    let eta = g.next().expect("eta").item();
    let xi = g.zip(direct_xi).map(|(a, b)| a.zip_map(&b, |p, q| p + q)).collect();
    Ok(MetaGradient { loss, x, y, eta, xi })
}
