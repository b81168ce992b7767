use crate::render::Observation;

/// Consecutive transitions, possibly spanning several episodes separated by `dones`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rollout {
    pub obs: Vec<Observation>,
    pub actions: Vec<Vec<f64>>,
    /// Log-density of each action under the behavior policy.
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the state after the last transition when it is not terminal.
    pub last_value: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, obs: Observation, action: Vec<f64>, log_prob: f64, value: f64, reward: f64, done: bool) {
        self.obs.push(obs);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.values.push(value);
        self.rewards.push(reward);
        self.dones.push(done);
    }

    pub fn is_aligned(&self) -> bool {
        let n = self.rewards.len();
        [self.obs.len(), self.actions.len(), self.log_probs.len(), self.values.len(), self.dones.len()].iter().all(|&l| l == n)
    }
}

/// Generalized advantage estimates and the matching value targets.
pub fn compute_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        gae = delta + gamma * lambda * live * gae;
        adv[t] = gae;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Zero mean, unit variance in place. A constant batch is only centred.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    let div = if std > 1e-8 { std } else { 1.0 };
    for a in adv.iter_mut() {
        *a = (*a - mean) / div;
    }
}
