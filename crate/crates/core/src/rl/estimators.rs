use crate::error::{Error, Result};

fn finite(name: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{name}[{i}] = {}", xs[i]))),
        None => Ok(()),
    }
}

/// `r_t = −η·kl_t`, plus the terminal reward on the last token.
pub fn token_rewards(terminal_reward: f64, kl: &[f64], kl_coef: f64) -> Result<Vec<f64>> {
    if kl.is_empty() {
        return Err(Error::InvalidArgument("token_rewards needs at least one token".into()));
    }
    finite("kl", kl)?;
    finite("terminal_reward", &[terminal_reward, kl_coef])?;
    let mut r: Vec<f64> = kl.iter().map(|k| -kl_coef * k).collect();
    *r.last_mut().unwrap() += terminal_reward;
    Ok(r)
}

/// Generalized advantage estimation with `V(s_{T+1}) = 0`.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() || rewards.is_empty() {
        return Err(Error::ShapeMismatch { op: "gae", lhs: vec![rewards.len()], rhs: vec![values.len()] });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Shift to zero mean and scale to unit variance (population), in place.
/// A constant batch is only centered.
pub fn whiten(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let scale = if var > 1e-16 { 1.0 / var.sqrt() } else { 1.0 };
    for x in xs {
        *x = (*x - mean) * scale;
    }
}

/// `Σ_v p(v) (log p(v) − log q(v))` for two log-distributions.
pub fn kl_full(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p.iter().zip(log_q).map(|(lp, lq)| if *lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * (lp - lq) }).sum::<f64>().max(0.0)
}

/// Single-sample estimate `log p(a) − log q(a)`.
pub fn kl_sampled(logp_action: f64, logq_action: f64) -> f64 {
    logp_action - logq_action
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn gae_direct(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = r.len();
        let val = |t: usize| if t < n { v[t] } else { 0.0 };
        (0..n)
            .map(|t| {
                let mut total = 0.0;
                for l in 0..n - t {
                    let delta = r[t + l] + gamma * val(t + l + 1) - val(t + l);
                    total += (gamma * lambda).powi(l as i32) * delta;
                }
                total
            })
            .collect()
    }

    #[test]
    fn reward_examples() {
        let r = token_rewards(1.0, &[0.2, 0.3], 0.1).unwrap();
        assert!((r[0] + 0.02).abs() < 1e-15 && (r[1] - 0.97).abs() < 1e-15);
        assert_eq!(token_rewards(2.5, &[0.4, 0.1, 0.7], 0.0).unwrap(), vec![0.0, 0.0, 2.5]);
        assert!(token_rewards(f64::NAN, &[0.1], 0.1).is_err());
        assert!(token_rewards(1.0, &[f64::INFINITY], 0.1).is_err());
    }

    #[test]
    fn gae_matches_double_loop() {
        let mut rng = SeedTree::new(12).stream("gae");
        for _ in 0..1000 {
            let n = rng.random_range(1..=20);
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (g, l) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
            let (adv, ret) = gae(&r, &v, g, l).unwrap();
            let direct = gae_direct(&r, &v, g, l);
            for t in 0..n {
                assert!((adv[t] - direct[t]).abs() < 1e-12);
                assert!((ret[t] - adv[t] - v[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gae_special_cases() {
        let r = [0.5, -1.0, 2.0, 0.25];
        let v = [0.1, 0.3, -0.2, 0.4];
        let (adv, _) = gae(&r, &v, 0.9, 0.0).unwrap();
        for t in 0..4 {
            let next = if t + 1 < 4 { v[t + 1] } else { 0.0 };
            assert_eq!(adv[t], r[t] + 0.9 * next - v[t]);
        }
        let (adv, _) = gae(&r, &[0.0; 4], 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![1.75, 1.25, 2.25, 0.25]);
        assert!(gae(&r, &v[..3], 1.0, 1.0).is_err());
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = [0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()];
        assert_eq!(kl_full(&p, &p), 0.0);
        let q = [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
        let expect = 0.7 * (0.7f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.25).ln() + 0.1 * (0.1f64 / 0.25).ln();
        assert!((kl_full(&p, &q) - expect).abs() < 1e-15);
    }

    #[test]
    fn whitening() {
        let mut x = vec![1.0, 2.0, 3.0, 4.0];
        whiten(&mut x);
        let m: f64 = x.iter().sum::<f64>() / 4.0;
        let v: f64 = x.iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-15 && (v - 1.0).abs() < 1e-12);
        let mut c = vec![3.0; 3];
        whiten(&mut c);
        assert_eq!(c, vec![0.0; 3]);
    }

    proptest! {
        #[test]
        fn reward_mass_is_conserved(kl in proptest::collection::vec(0.0f64..5.0, 1..20), r in -10.0f64..10.0) {
            let total: f64 = token_rewards(r, &kl, 0.0).unwrap().iter().sum();
            prop_assert_eq!(total, r);
        }
    }
}
