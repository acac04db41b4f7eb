use super::TrainError;

/// Advantages and return targets for one agent over one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageEstimate {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// TD residuals `δₜ = rₜ + γV(sₜ₊₁) − V(sₜ)` with `V(s_T) = bootstrap`.
pub fn td_residuals(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64) -> Result<Vec<f64>, TrainError> {
    if rewards.len() != values.len() {
        return Err(TrainError::Misaligned(format!(
            "{} rewards vs {} values",
            rewards.len(),
            values.len()
        )));
    }
    let t_len = rewards.len();
    Ok((0..t_len)
        .map(|t| {
            let next = if t + 1 < t_len { values[t + 1] } else { bootstrap };
            rewards[t] + gamma * next - values[t]
        })
        .collect())
}

/// Backward recursion `Âₜ = δₜ + γλÂₜ₊₁`, `Gₜ = Âₜ + V(sₜ)`. Pass `bootstrap = 0`
/// for terminal ends and `V(s_T)` for truncated ones.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<AdvantageEstimate, TrainError> {
    let delta = td_residuals(rewards, values, bootstrap, gamma)?;
    let mut advantages = vec![0.0; delta.len()];
    let mut acc = 0.0;
    for t in (0..delta.len()).rev() {
        acc = delta[t] + gamma * lambda * acc;
        advantages[t] = acc;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(AdvantageEstimate { advantages, returns })
}

/// Mean 0, standard deviation 1 (population); constant inputs map to 0.
pub fn standardize(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in x.iter_mut() {
        *v = if std > 1e-12 { (*v - mean) / std } else { 0.0 };
    }
}
