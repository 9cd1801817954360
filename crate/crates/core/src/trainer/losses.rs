use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evaluator::AlignmentScoreVars;
use crate::planner::Trajectory;

/// k-step returns `Q_t = sum_{l<k} gamma^l r_{t+l} + gamma^k v_{t+k}`, with `k`
/// truncated at the end of the episode where the bootstrap value is 0.
pub fn k_step_returns(rewards: &[f64], values: &[f64], gamma: f64, k: usize) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::Contract(format!(
            "{} rewards but {} values",
            rewards.len(),
            values.len()
        )));
    }
    let t_len = rewards.len();
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let horizon = k.min(t_len - t);
        let mut q = 0.0;
        let mut discount = 1.0;
        for r in &rewards[t..t + horizon] {
            q += discount * r;
            discount *= gamma;
        }
        if t + horizon < t_len {
            q += discount * values[t + horizon];
        }
        out.push(q);
    }
    Ok(out)
}

/// Returns with `k` equal to the steps remaining, so every bootstrap lands
/// past the horizon and vanishes.
pub fn q_returns(rewards: &[f64], values: &[f64], gamma: f64) -> Result<Vec<f64>> {
    k_step_returns(rewards, values, gamma, rewards.len())
}

/// Components of the actor-critic loss for one trajectory.
#[derive(Debug, Clone, Copy)]
pub struct A2cLoss {
    pub total: Var,
    pub actor: f64,
    pub critic: f64,
    pub entropy: f64,
}

/// Actor-critic loss for a trajectory whose returns and advantages are
/// supplied as constants:
/// `L = -sum_t [A_t log pi(a_t|s_t) + alpha H_t] + sum_t (Q_t - v_t)^2 / T`.
pub fn a2c_loss_with(
    tape: &mut Tape,
    traj: &Trajectory,
    returns: &[f64],
    advantages: &[f64],
    alpha: f64,
) -> Result<A2cLoss> {
    let t_len = traj.len();
    if t_len == 0 || returns.len() != t_len || advantages.len() != t_len {
        return Err(Error::Contract(format!(
            "trajectory of {t_len} steps with {} returns and {} advantages",
            returns.len(),
            advantages.len()
        )));
    }
    let mut actor_terms = Vec::with_capacity(t_len);
    let mut critic_terms = Vec::with_capacity(t_len);
    let mut entropy = 0.0;
    for (t, step) in traj.steps.iter().enumerate() {
        for (what, v) in [
            ("advantage", advantages[t]),
            ("return", returns[t]),
            ("log-prob", tape.item(step.log_prob)),
            ("value", step.value),
        ] {
            if !v.is_finite() {
                return Err(Error::Training {
                    iteration: 0,
                    step: Some(step.step),
                    message: format!("non-finite {what} {v}"),
                });
            }
        }
        let pg = tape.scale(step.log_prob, advantages[t]);
        let ent = tape.scale(step.entropy, alpha);
        actor_terms.push(tape.add(pg, ent)?);
        entropy += tape.item(step.entropy);

        let diff = tape.add_scalar(step.value_var, -returns[t]);
        let sq = tape.mul(diff, diff)?;
        critic_terms.push(tape.scale(sq, 1.0 / t_len as f64));
    }
    let actor_sum = tape.sum_n(&actor_terms)?;
    let actor = tape.neg(actor_sum);
    let critic = tape.sum_n(&critic_terms)?;
    let total = tape.add(actor, critic)?;
    if !tape.item(total).is_finite() {
        return Err(Error::Training {
            iteration: 0,
            step: None,
            message: "non-finite actor-critic loss".into(),
        });
    }
    Ok(A2cLoss {
        total,
        actor: tape.item(actor),
        critic: tape.item(critic),
        entropy,
    })
}

/// Actor-critic loss. Advantages `Q_t - v_t` use detached values, so the
/// actor term does not push gradients into the critic.
pub fn a2c_loss(tape: &mut Tape, traj: &Trajectory, alpha: f64, gamma: f64) -> Result<A2cLoss> {
    let values = traj.values();
    let returns = q_returns(&traj.rewards(), &values, gamma)?;
    let advantages: Vec<f64> = returns.iter().zip(&values).map(|(q, v)| q - v).collect();
    a2c_loss_with(tape, traj, &returns, &advantages, alpha)
}

/// Inter-video ranking loss over a `B x B` score matrix where
/// `scores[i][j] = S(video i, query j)` and the diagonal holds positive pairs.
/// Both query-swapped and video-swapped negatives are hinged against the
/// positive; the sum is averaged over the batch.
pub fn inter_loss(tape: &mut Tape, scores: &[Vec<Var>], margin: f64) -> Result<Var> {
    let b = scores.len();
    if b < 2 {
        return Err(Error::Config(format!(
            "inter-video ranking needs a batch of at least 2, got {b}"
        )));
    }
    if scores.iter().any(|row| row.len() != b) {
        return Err(Error::Dimension("inter-video score matrix must be square".into()));
    }
    let mut terms = Vec::with_capacity(2 * b * (b - 1));
    for i in 0..b {
        let pos = scores[i][i];
        for j in (0..b).filter(|j| *j != i) {
            for neg in [scores[i][j], scores[j][i]] {
                let d = tape.sub(neg, pos)?;
                let d = tape.add_scalar(d, margin);
                terms.push(tape.hinge(d));
            }
        }
    }
    let total = tape.sum_n(&terms)?;
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Intra-video ranking loss for one boundary state. Each of the current,
/// left and right scores that exceeds the global score is pushed above the
/// other two by `margin`.
pub fn intra_loss(tape: &mut Tape, s: &AlignmentScoreVars, margin: f64) -> Result<Var> {
    let g = tape.item(s.global);
    let parts = [
        (s.current, [s.left, s.right]),
        (s.left, [s.current, s.right]),
        (s.right, [s.current, s.left]),
    ];
    let mut terms = Vec::new();
    for (anchor, others) in parts {
        if tape.item(anchor) <= g {
            continue;
        }
        for other in others {
            let d = tape.sub(other, anchor)?;
            let d = tape.add_scalar(d, margin);
            terms.push(tape.hinge(d));
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tape.sum_n(&terms)
}

/// `L_inter + lambda * sum(intra) / batch`.
pub fn rank_loss(
    tape: &mut Tape,
    inter: Var,
    intra_terms: &[Var],
    lambda: f64,
    batch: usize,
) -> Result<Var> {
    if intra_terms.is_empty() || lambda == 0.0 {
        return Ok(inter);
    }
    let intra = tape.sum_n(intra_terms)?;
    let weighted = tape.scale(intra, lambda / batch.max(1) as f64);
    tape.add(inter, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalars(t: &mut Tape, vals: &[f64]) -> Vec<Var> {
        vals.iter().map(|v| t.input(Tensor::scalar(*v))).collect()
    }

    #[test]
    fn returns_examples() {
        let r = [1.0, -1.0, 1.0];
        let v = [0.3, 0.2, 0.1];
        assert_eq!(q_returns(&r, &v, 0.0).unwrap(), r.to_vec());
        let q = q_returns(&[1.0, 1.0, 1.0], &v, 0.4).unwrap();
        for (a, b) in q.iter().zip([1.56, 1.4, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(q_returns(&[-1.0], &[5.0], 0.4).unwrap(), vec![-1.0]);
        assert!(q_returns(&[1.0], &[], 0.4).is_err());
    }

    #[test]
    fn k_step_bootstraps_inside_horizon() {
        let q = k_step_returns(&[1.0, 1.0, 1.0], &[0.0, 10.0, 20.0], 0.5, 1).unwrap();
        assert_eq!(q, vec![1.0 + 0.5 * 10.0, 1.0 + 0.5 * 20.0, 1.0]);
    }

    fn brute_inter(s: &[Vec<f64>], eps: f64) -> f64 {
        let b = s.len();
        let mut total = 0.0;
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    total += (eps + s[i][j] - s[i][i]).max(0.0);
                    total += (eps + s[j][i] - s[i][i]).max(0.0);
                }
            }
        }
        total / b as f64
    }

    fn inter_value(s: &[Vec<f64>], eps: f64) -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Vec<Var>> = s.iter().map(|row| scalars(&mut t, row)).collect();
        let l = inter_loss(&mut t, &vars, eps).unwrap();
        t.item(l)
    }

    #[test]
    fn inter_examples() {
        let b = 4;
        let ident: Vec<Vec<f64>> = (0..b)
            .map(|i| (0..b).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(inter_value(&ident, 0.2), 0.0);
        let flat = vec![vec![0.3; b]; b];
        let expected = 2.0 * (b - 1) as f64 * 0.2;
        assert!((inter_value(&flat, 0.2) - expected).abs() < 1e-12);
        let mut t = Tape::new();
        let one = vec![scalars(&mut t, &[0.5])];
        assert!(matches!(inter_loss(&mut t, &one, 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn inter_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            assert!((inter_value(&s, 0.2) - brute_inter(&s, 0.2)).abs() < 1e-12);
        }
    }

    fn intra_value(g: f64, c: f64, l: f64, r: f64, eps: f64) -> f64 {
        let mut t = Tape::new();
        let v = scalars(&mut t, &[g, c, l, r]);
        let s = AlignmentScoreVars {
            global: v[0],
            current: v[1],
            left: v[2],
            right: v[3],
        };
        let out = intra_loss(&mut t, &s, eps).unwrap();
        t.item(out)
    }

    #[test]
    fn intra_examples() {
        assert_eq!(intra_value(0.5, 0.4, 0.5, -1.0, 0.2), 0.0);
        assert_eq!(intra_value(0.1, 0.4, -0.4, -0.4, 0.2), 0.0);
        // current above global but within margin of left
        let v = intra_value(0.0, 0.3, 0.25, -1.0, 0.2);
        assert!((v - (0.2 + 0.25 - 0.3) - (0.2 + 0.3 - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn rank_loss_weighting() {
        let mut t = Tape::new();
        let v = scalars(&mut t, &[0.7, 0.2, 0.4]);
        let r = rank_loss(&mut t, v[0], &v[1..], 0.0, 2).unwrap();
        assert_eq!(t.item(r), 0.7);
        let r = rank_loss(&mut t, v[0], &v[1..], 0.1, 2).unwrap();
        assert!((t.item(r) - (0.7 + 0.1 * 0.6 / 2.0)).abs() < 1e-12);
    }
}
