//! Generalized advantage estimation.

use super::Trajectory;

/// Raw (unnormalized) GAE advantages and value targets.
///
/// `delta_t = r_t + gamma * V(x_{t+1}) * (1 - done_t) - V(x_t)`, accumulated
/// backwards with factor `gamma * lambda` and cut at episode ends. The value
/// after the last transition is `traj.bootstrap_value`.
pub fn compute_gae(traj: &Trajectory, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = traj.len();
    let mut advantages = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let not_done = if traj.dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n {
            traj.values[t + 1]
        } else {
            traj.bootstrap_value
        };
        let delta = traj.rewards[t] + gamma * next_value * not_done - traj.values[t];
        running = delta + gamma * lambda * not_done * running;
        advantages[t] = running;
    }
    let returns = advantages.iter().zip(&traj.values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

/// Rescales to zero mean and unit standard deviation.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = (*v - mean) / (std + 1e-8);
    }
}
