use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{episode_seed, load_policy};
use super::HarnessError;
use crate::algos::act_mean;
use crate::curriculum::Lesson;
use crate::env::{Action, GraspEnv, ACTION_DIM};
use crate::render::Observation;

/// Keeps evaluation scenes disjoint from training scenes of the same seed.
const EVAL_SALT: u64 = 0x5eed_e7a1_0000_0001;

#[derive(Debug, Clone, PartialEq)]
pub enum EvalPolicy {
    /// Emits the action that maps onto the goal pose.
    Oracle,
    /// Uniform actions over the normalized box.
    Random,
    /// Deterministic policy (Gaussian mean or actor output) from a checkpoint.
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    /// Final-step distance from the tooltip to the goal aim point, meters.
    pub pos_err_mean: f64,
    pub pos_err_p95: f64,
    /// Final-step absolute yaw error modulo the target's symmetry, degrees.
    pub yaw_err_mean: f64,
    pub yaw_err_p95: f64,
    pub mean_return: f64,
}

/// Nearest-rank percentile of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Runs `episodes` episodes at `lesson`, choosing each action with `policy`.
pub fn evaluate_with(
    cfg: &RunConfig,
    lesson: &Lesson,
    episodes: usize,
    seed: u64,
    mut policy: impl FnMut(&GraspEnv, &Observation) -> Result<Action, HarnessError>,
) -> Result<EvalReport, HarnessError> {
    if episodes == 0 {
        return Err(HarnessError::Config("evaluation needs at least one episode".into()));
    }
    let mut env = GraspEnv::new(cfg.env.clone())?;
    let (mut successes, mut total) = (0usize, 0.0);
    let mut pos = Vec::with_capacity(episodes);
    let mut yaw = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let (mut obs, _) = env.reset(episode_seed(seed ^ EVAL_SALT, i as u64), lesson)?;
        loop {
            let a = policy(&env, &obs)?;
            let r = env.step(a)?;
            total += r.reward.total;
            obs = r.observation;
            if r.done {
                successes += usize::from(r.info.success);
                break;
            }
        }
        let goal = env.goal().expect("episode is active");
        let tool = env.tool().expect("episode is active");
        pos.push((tool.tooltip - goal.aim_point()).norm());
        yaw.push(goal.yaw_error_deg(tool.yaw_deg()).abs());
    }
    let n = episodes as f64;
    Ok(EvalReport {
        episodes,
        success_rate: successes as f64 / n,
        pos_err_mean: pos.iter().sum::<f64>() / n,
        pos_err_p95: percentile(&pos, 95.0),
        yaw_err_mean: yaw.iter().sum::<f64>() / n,
        yaw_err_p95: percentile(&yaw, 95.0),
        mean_return: total / n,
    })
}

pub fn evaluate(cfg: &RunConfig, policy: &EvalPolicy, episodes: usize) -> Result<EvalReport, HarnessError> {
    let lesson = cfg.eval_lesson()?;
    let seed = cfg.eval.seed;
    match policy {
        EvalPolicy::Oracle => evaluate_with(cfg, &lesson, episodes, seed, |env, _| Ok(env.oracle_action()?)),
        EvalPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(3);
            evaluate_with(cfg, &lesson, episodes, seed, move |_, _| {
                let mut a = [0.0; ACTION_DIM];
                a.iter_mut().for_each(|v| *v = rng.random_range(-1.0..=1.0));
                Ok(Action(a))
            })
        }
        EvalPolicy::Checkpoint(path) => {
            let (spec, params) = load_policy(cfg, path)?;
            evaluate_with(cfg, &lesson, episodes, seed, |_, obs| {
                Ok(Action::from_slice(&act_mean(&spec, &params, obs)?).clamped())
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }

    #[test]
    fn zero_episodes_is_an_error() {
        let cfg = RunConfig::default();
        assert!(evaluate(&cfg, &EvalPolicy::Oracle, 0).is_err());
    }
}
