//! Generalized advantage estimation.

/// Advantages and returns for a single episode.
///
/// `terminal` marks an episode that ended by failure; its bootstrap value is
/// treated as 0 regardless of `bootstrap`. Otherwise `bootstrap` is the critic
/// value of the state after the last transition.
pub fn gae_episode(
    rewards: &[f64],
    values: &[f64],
    terminal: bool,
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len());
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let (next_value, next_nonterminal) = if t + 1 < n {
            (values[t + 1], 1.0)
        } else if terminal {
            (0.0, 0.0)
        } else {
            (bootstrap, 1.0)
        };
        let delta = rewards[t] + gamma * next_value * next_nonterminal - values[t];
        running = delta + gamma * lambda * next_nonterminal * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Rescales to zero mean and unit (population) variance. A constant batch is
/// only centred.
pub fn normalize(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-12 {
            *a /= std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct double sum: A_t = Σ_l (γλ)^l δ_{t+l}.
    fn oracle(r: &[f64], v: &[f64], terminal: bool, boot: f64, g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let next = |t: usize| {
            if t + 1 < n {
                v[t + 1]
            } else if terminal {
                0.0
            } else {
                boot
            }
        };
        let delta: Vec<f64> = (0..n).map(|t| r[t] + g * next(t) - v[t]).collect();
        (0..n)
            .map(|t| (t..n).map(|k| (g * l).powi((k - t) as i32) * delta[k]).sum())
            .collect()
    }

    #[test]
    fn lambda_zero_gives_td_residual() {
        let r = [1.0, 1.0, 1.0];
        let v = [0.5, 0.2, -0.1];
        let (a, ret) = gae_episode(&r, &v, false, 0.7, 0.9, 0.0);
        assert_eq!(a, vec![1.0 + 0.9 * 0.2 - 0.5, 1.0 + 0.9 * -0.1 - 0.2, 1.0 + 0.9 * 0.7 + 0.1]);
        for i in 0..3 {
            assert_eq!(ret[i], a[i] + v[i]);
        }
    }

    #[test]
    fn gamma_zero_gives_reward_minus_value() {
        let (a, _) = gae_episode(&[1.0, 2.0], &[0.3, 0.4], true, 0.0, 0.0, 0.95);
        assert_eq!(a, vec![0.7, 1.6]);
    }

    #[test]
    fn seven_step_episode_matches_double_sum() {
        let r = [1.0, 0.5, -0.2, 1.0, 1.0, 0.3, 1.0];
        let v = [0.1, 0.4, -0.3, 0.9, 1.2, 0.0, -0.5];
        for terminal in [false, true] {
            let (a, _) = gae_episode(&r, &v, terminal, 0.8, 0.99, 0.95);
            let o = oracle(&r, &v, terminal, 0.8, 0.99, 0.95);
            for (x, y) in a.iter().zip(&o) {
                assert!((x - y).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn normalize_moments() {
        let mut a = vec![1.0, 2.0, 4.0, 8.0, -3.0];
        normalize(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        let mut c = vec![3.0, 3.0];
        normalize(&mut c);
        assert_eq!(c, vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn recursive_equals_double_sum(
            rv in prop::collection::vec((-2.0f64..2.0, -5.0f64..5.0), 1..=10),
            terminal in any::<bool>(),
            boot in -5.0f64..5.0,
            gamma in 0.0f64..=1.0,
            lambda in 0.0f64..=1.0,
        ) {
            let (r, v): (Vec<f64>, Vec<f64>) = rv.into_iter().unzip();
            let (a, ret) = gae_episode(&r, &v, terminal, boot, gamma, lambda);
            let o = oracle(&r, &v, terminal, boot, gamma, lambda);
            for t in 0..r.len() {
                prop_assert!((a[t] - o[t]).abs() <= 1e-10);
                prop_assert_eq!(ret[t], a[t] + v[t]);
            }
        }
    }
}
