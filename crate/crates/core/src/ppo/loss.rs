//! Clipped surrogate policy loss and squared-error critic loss, recorded on a
//! [`Tape`].

use crate::diff::{DiffError, Tape, Var};
use crate::matrix::Matrix;

/// `-(1/b) Σ min(ρ A, clip(ρ, 1-ε, 1+ε) A)` with
/// `ρ = exp(log π(a|s) - log π_behavior(a|s))`.
///
/// `logits` is the `b x c` output of the current policy.
pub fn ppo_policy_loss(
    tape: &mut Tape,
    logits: Var,
    actions: &[usize],
    behavior_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
) -> Result<Var, DiffError> {
    let b = actions.len();
    assert!(b >= 1, "empty batch");
    assert_eq!(behavior_log_probs.len(), b);
    assert_eq!(advantages.len(), b);
    let logp_all = tape.log_softmax(logits);
    let logp = tape.select_cols(logp_all, actions);
    let old = tape.constant(Matrix::from_vec(b, 1, behavior_log_probs.to_vec()));
    let diff = tape.sub(logp, old);
    let ratio = tape.exp(diff);
    let adv = tape.constant(Matrix::from_vec(b, 1, advantages.to_vec()));
    let surr1 = tape.mul(ratio, adv);
    let clipped = tape.clip(ratio, 1.0 - clip, 1.0 + clip);
    let surr2 = tape.mul(clipped, adv);
    let m = tape.min(surr1, surr2);
    let mean = tape.mean(m);
    let loss = tape.neg(mean);
    tape.ensure_finite()?;
    Ok(loss)
}

/// `(1/b) Σ (V(s) - R)²` over a `b x 1` value column.
pub fn critic_loss(tape: &mut Tape, values: Var, returns: &[f64]) -> Result<Var, DiffError> {
    let b = returns.len();
    assert!(b >= 1, "empty batch");
    let r = tape.constant(Matrix::from_vec(b, 1, returns.to_vec()));
    let d = tape.sub(values, r);
    let sq = tape.square(d);
    let loss = tape.mean(sq);
    tape.ensure_finite()?;
    Ok(loss)
}
