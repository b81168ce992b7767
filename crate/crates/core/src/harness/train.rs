use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{EpisodeFields, MetricsRow, MetricsWriter, UpdateFields};
use super::HarnessError;
use crate::algos::{
    act_gaussian, beta_at, ddpg_update, exploration_action, ppo_update, trpo_update, Algorithm, DdpgNets,
    ReplayBuffer, Rollout, Transition,
};
use crate::curriculum::{CurriculumState, Lesson};
use crate::env::{Action, GraspEnv, ACTION_DIM};
use crate::nn::{init_params, Adam, Checkpoint, NetworkKind, NetworkSpec, ParameterSet};
use crate::render::Observation;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.glck";
pub const BEST_CHECKPOINT: &str = "best.glck";

pub fn checkpoint_name(update: u64) -> String {
    format!("ckpt_{update:06}.glck")
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scene seed of episode `index` in a run seeded with `run_seed`.
pub fn episode_seed(run_seed: u64, index: u64) -> u64 {
    splitmix(run_seed ^ splitmix(index))
}

/// Streams 0 and 1 of an episode seed drive the scene and the sensor noise;
/// stream 2 drives the behavior policy.
fn policy_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(2);
    r
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// How actions are chosen while collecting.
pub(crate) enum Behavior<'a> {
    Gaussian { spec: &'a NetworkSpec, params: &'a ParameterSet<f32> },
    Actor { nets: &'a DdpgNets<f32>, sigma: f64 },
    Uniform,
}

/// One finished episode.
pub(crate) struct EpisodeTrace {
    pub obs: Vec<Arc<Observation>>,
    pub final_obs: Arc<Observation>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub components: [f64; 6],
    pub success: bool,
    pub episode_return: f64,
}

impl EpisodeTrace {
    pub fn steps(&self) -> usize {
        self.rewards.len()
    }
}

pub(crate) fn run_episode(
    env: &mut GraspEnv,
    lesson: &Lesson,
    seed: u64,
    behavior: &Behavior,
) -> Result<EpisodeTrace, HarnessError> {
    let mut rng = policy_rng(seed);
    let (first, _) = env.reset(seed, lesson)?;
    let mut obs = Arc::new(first);
    let mut t = EpisodeTrace {
        obs: Vec::new(),
        final_obs: obs.clone(),
        actions: Vec::new(),
        log_probs: Vec::new(),
        values: Vec::new(),
        rewards: Vec::new(),
        components: [0.0; 6],
        success: false,
        episode_return: 0.0,
    };
    loop {
        let (action, log_prob, value) = match behavior {
            Behavior::Gaussian { spec, params } => {
                let s = act_gaussian(spec, params, &obs, &mut rng)?;
                (s.action, s.log_prob, s.value)
            }
            Behavior::Actor { nets, sigma } => (exploration_action(&nets.act(&obs)?, *sigma, &mut rng), 0.0, 0.0),
            Behavior::Uniform => ((0..ACTION_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect(), 0.0, 0.0),
        };
        let r = env.step(Action::from_slice(&action).clamped())?;
        for (acc, c) in t.components.iter_mut().zip(r.reward.components()) {
            *acc += c;
        }
        t.episode_return += r.reward.total;
        t.obs.push(obs.clone());
        t.actions.push(action);
        t.log_probs.push(log_prob);
        t.values.push(value);
        t.rewards.push(r.reward.total);
        // frame-grab observations repeat the first frame; keep one allocation
        obs = if r.observation == *obs { obs } else { Arc::new(r.observation) };
        if r.done {
            t.success = r.info.success;
            t.final_obs = obs;
            return Ok(t);
        }
    }
}

/// Everything besides network tensors needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub algorithm: Algorithm,
    pub global_step: u64,
    pub episodes: u64,
    pub updates: u64,
    pub curriculum: CurriculumState,
    pub best_mean_return: Option<f64>,
    pub recent_success: VecDeque<bool>,
    pub recent_returns: VecDeque<f64>,
    pub adam_steps: Vec<u64>,
}

/// Learner parameters for the configured algorithm.
enum Learner {
    Gaussian { spec: NetworkSpec, params: ParameterSet<f32>, adam: Adam<f32> },
    Ddpg { nets: Box<DdpgNets<f32>>, buffer: ReplayBuffer },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub global_step: u64,
    pub episodes: u64,
    pub updates: u64,
    pub lesson: usize,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Success rate and mean return over the last `train.stop_window` episodes.
    pub recent_success_rate: f64,
    pub recent_mean_return: f64,
    pub stopped_early: bool,
}

fn init_learner(cfg: &RunConfig) -> Result<Learner, HarnessError> {
    let mut rng = stream_rng(cfg.seed, 5);
    Ok(match cfg.algorithm {
        Algorithm::Ppo | Algorithm::Trpo => {
            let spec = cfg.policy_spec()?;
            let params: ParameterSet<f32> = init_params(&spec, &mut rng)?;
            let adam = Adam::new(cfg.ppo.adam, &params);
            Learner::Gaussian { spec, params, adam }
        }
        Algorithm::Ddpg => {
            let actor = cfg.network_spec(NetworkKind::Actor)?;
            let critic = cfg.network_spec(NetworkKind::Critic)?;
            let nets = DdpgNets::new(actor, critic, cfg.ddpg.adam, &mut rng)?;
            Learner::Ddpg { nets: Box::new(nets), buffer: ReplayBuffer::new(cfg.ddpg.capacity) }
        }
    })
}

fn policy_hash(cfg: &RunConfig) -> Result<u64, HarnessError> {
    Ok(cfg.policy_spec()?.hash())
}

fn save_checkpoint(cfg: &RunConfig, learner: &Learner, state: &TrainState, path: &Path) -> Result<(), HarnessError> {
    let mut state = state.clone();
    let mut ck = Checkpoint::<f32>::new(policy_hash(cfg)?, String::new());
    match learner {
        Learner::Gaussian { params, adam, .. } => {
            ck.add_params("policy.", params);
            ck.add_tensors("adam.m.", params.names(), &adam.m);
            ck.add_tensors("adam.v.", params.names(), &adam.v);
            state.adam_steps = vec![adam.step];
        }
        Learner::Ddpg { nets, .. } => {
            ck.add_params("actor.", &nets.actor);
            ck.add_params("critic.", &nets.critic);
            ck.add_params("actor_target.", &nets.actor_target);
            ck.add_params("critic_target.", &nets.critic_target);
            ck.add_tensors("actor_adam.m.", nets.actor.names(), &nets.actor_opt.m);
            ck.add_tensors("actor_adam.v.", nets.actor.names(), &nets.actor_opt.v);
            ck.add_tensors("critic_adam.m.", nets.critic.names(), &nets.critic_opt.m);
            ck.add_tensors("critic_adam.v.", nets.critic.names(), &nets.critic_opt.v);
            state.adam_steps = vec![nets.actor_opt.step, nets.critic_opt.step];
        }
    }
    ck.meta = toml::to_string(&state).map_err(|e| HarnessError::Io(e.to_string()))?;
    ck.save(path)?;
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(Learner, TrainState), HarnessError> {
    let ck = Checkpoint::<f32>::load(path)?;
    if ck.spec_hash != policy_hash(cfg)? {
        return Err(HarnessError::SpecMismatch(format!("{} was written for a different network", path.display())));
    }
    let state: TrainState = toml::from_str(&ck.meta).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    if state.algorithm != cfg.algorithm {
        return Err(HarnessError::SpecMismatch(format!(
            "{} holds a {:?} run, config asks for {:?}",
            path.display(),
            state.algorithm,
            cfg.algorithm
        )));
    }
    let mut learner = init_learner(cfg)?;
    match &mut learner {
        Learner::Gaussian { params, adam, .. } => {
            ck.load_params("policy.", params)?;
            ck.load_tensors("adam.m.", params.names(), &mut adam.m)?;
            ck.load_tensors("adam.v.", params.names(), &mut adam.v)?;
            adam.step = state.adam_steps.first().copied().unwrap_or(0);
        }
        Learner::Ddpg { nets, .. } => {
            ck.load_params("actor.", &mut nets.actor)?;
            ck.load_params("critic.", &mut nets.critic)?;
            ck.load_params("actor_target.", &mut nets.actor_target)?;
            ck.load_params("critic_target.", &mut nets.critic_target)?;
            let (an, cn) = (nets.actor.names().to_vec(), nets.critic.names().to_vec());
            ck.load_tensors("actor_adam.m.", &an, &mut nets.actor_opt.m)?;
            ck.load_tensors("actor_adam.v.", &an, &mut nets.actor_opt.v)?;
            ck.load_tensors("critic_adam.m.", &cn, &mut nets.critic_opt.m)?;
            ck.load_tensors("critic_adam.v.", &cn, &mut nets.critic_opt.v)?;
            nets.actor_opt.step = state.adam_steps.first().copied().unwrap_or(0);
            nets.critic_opt.step = state.adam_steps.get(1).copied().unwrap_or(0);
        }
    }
    Ok((learner, state))
}

/// Loads the deterministic policy stored in a checkpoint.
pub fn load_policy(cfg: &RunConfig, path: &Path) -> Result<(NetworkSpec, ParameterSet<f32>), HarnessError> {
    let (learner, _) = load_checkpoint(cfg, path)?;
    Ok(match learner {
        Learner::Gaussian { spec, params, .. } => (spec, params),
        Learner::Ddpg { nets, .. } => (nets.actor_spec.clone(), nets.actor.clone()),
    })
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    envs: Vec<GraspEnv>,
    schedule: Option<Vec<Lesson>>,
    state: TrainState,
    metrics: MetricsWriter,
    started: Instant,
    last_good: Option<PathBuf>,
}

impl Run<'_> {
    fn lesson(&self) -> Lesson {
        match &self.schedule {
            Some(s) => *self.state.curriculum.lesson(s),
            None => self.cfg.frozen_lesson(),
        }
    }

    fn wall_clock(&self) -> Option<f64> {
        (!self.cfg.train.deterministic).then(|| self.started.elapsed().as_secs_f64())
    }

    fn workers(&self) -> usize {
        self.envs.len()
    }

    /// Runs the next `n` episodes, in parallel when several workers exist.
    fn collect_wave(&mut self, n: usize, behavior: &Behavior) -> Result<Vec<EpisodeTrace>, HarnessError> {
        let lesson = self.lesson();
        let seeds: Vec<u64> = (0..n as u64).map(|k| episode_seed(self.cfg.seed, self.state.episodes + k)).collect();
        if n == 1 {
            return Ok(vec![run_episode(&mut self.envs[0], &lesson, seeds[0], behavior)?]);
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = self.envs[..n]
                .iter_mut()
                .zip(&seeds)
                .map(|(env, &seed)| {
                    let lesson = &lesson;
                    s.spawn(move || run_episode(env, lesson, seed, behavior))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("rollout worker panicked")).collect()
        })
    }

    /// Logs a finished episode and feeds the curriculum.
    fn record_episode(&mut self, t: &EpisodeTrace) -> Result<(), HarnessError> {
        self.state.global_step += t.steps() as u64;
        self.state.episodes += 1;
        let lesson = self.lesson().index;
        let steps = t.steps().max(1) as f64;
        let row = MetricsRow {
            global_step: self.state.global_step,
            episode: Some(EpisodeFields {
                episode: self.state.episodes,
                episode_return: t.episode_return,
                success: t.success,
                lesson,
                components: t.components.map(|c| c / steps),
            }),
            update: None,
            wall_clock: self.wall_clock(),
        };
        self.metrics.write(&row)?;
        if let Some(s) = &self.schedule {
            self.state.curriculum.update(s, t.episode_return);
        }
        let w = self.cfg.train.stop_window.max(1);
        push_bounded(&mut self.state.recent_success, t.success, w);
        push_bounded(&mut self.state.recent_returns, t.episode_return, w);
        Ok(())
    }

    fn stop_now(&self) -> bool {
        match self.cfg.train.stop_success_rate {
            Some(target) => {
                self.state.recent_success.len() >= self.cfg.train.stop_window.max(1)
                    && success_rate(&self.state.recent_success) >= target
            }
            None => false,
        }
    }

    fn after_update(&mut self, learner: &Learner, fields: UpdateFields, update_returns: &[f64]) -> Result<(), HarnessError> {
        self.state.updates += 1;
        let row = MetricsRow { global_step: self.state.global_step, episode: None, update: Some(fields), wall_clock: self.wall_clock() };
        self.metrics.write(&row)?;
        if !update_returns.is_empty() {
            let mean = update_returns.iter().sum::<f64>() / update_returns.len() as f64;
            if self.state.best_mean_return.is_none_or(|b| mean > b) {
                self.state.best_mean_return = Some(mean);
                save_checkpoint(self.cfg, learner, &self.state, &self.out.join(BEST_CHECKPOINT))?;
            }
        }
        if self.state.updates % self.cfg.train.checkpoint_every == 0 {
            let p = self.out.join(checkpoint_name(self.state.updates));
            save_checkpoint(self.cfg, learner, &self.state, &p)?;
            self.last_good = Some(p);
        }
        Ok(())
    }

    fn non_finite(&self, e: HarnessError) -> HarnessError {
        match e {
            HarnessError::NonFinite { message, .. } => HarnessError::NonFinite { message, last_good: self.last_good.clone() },
            other => other,
        }
    }
}

fn push_bounded<T>(q: &mut VecDeque<T>, v: T, cap: usize) {
    if q.len() == cap {
        q.pop_front();
    }
    q.push_back(v);
}

fn success_rate(q: &VecDeque<bool>) -> f64 {
    if q.is_empty() {
        0.0
    } else {
        q.iter().filter(|&&s| s).count() as f64 / q.len() as f64
    }
}

/// Collect-update loop until the step budget (or the early-stop rule) is reached.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary, HarnessError> {
    cfg.validate()?;
    let out = cfg.resolved_out_dir();
    std::fs::create_dir_all(&out).map_err(|e| HarnessError::Io(format!("{}: {e}", out.display())))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| HarnessError::Io(e.to_string()))?;
    let metrics_path = out.join(METRICS_FILE);

    let fresh_state = || TrainState {
        algorithm: cfg.algorithm,
        global_step: 0,
        episodes: 0,
        updates: 0,
        curriculum: CurriculumState::new(cfg.curriculum.window),
        best_mean_return: None,
        recent_success: VecDeque::new(),
        recent_returns: VecDeque::new(),
        adam_steps: Vec::new(),
    };
    let (mut learner, state, metrics, last_good) = match &cfg.train.resume {
        Some(p) => {
            let (l, s) = load_checkpoint(cfg, p)?;
            let m = MetricsWriter::resume(&metrics_path, s.global_step)?;
            (l, s, m, Some(p.clone()))
        }
        None => {
            let l = init_learner(cfg)?;
            let s = fresh_state();
            let m = MetricsWriter::create(&metrics_path)?;
            let p = out.join(checkpoint_name(0));
            save_checkpoint(cfg, &l, &s, &p)?;
            (l, s, m, Some(p))
        }
    };
    let workers = if cfg.train.deterministic { 1 } else { cfg.train.workers.max(1) };
    let envs = (0..workers).map(|_| GraspEnv::new(cfg.env.clone())).collect::<Result<Vec<_>, _>>()?;
    let schedule = if cfg.curriculum.enabled { Some(cfg.schedule()?) } else { None };
    let mut run = Run { cfg, out: out.clone(), envs, schedule, state, metrics, started: Instant::now(), last_good };

    let result = match cfg.algorithm {
        Algorithm::Ppo | Algorithm::Trpo => on_policy_loop(&mut run, &mut learner),
        Algorithm::Ddpg => ddpg_loop(&mut run, &mut learner),
    };
    let stopped_early = result.map_err(|e| run.non_finite(e))?;

    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    save_checkpoint(cfg, &learner, &run.state, &final_checkpoint)?;
    let s = &run.state;
    let n = s.recent_returns.len().max(1) as f64;
    Ok(TrainSummary {
        global_step: s.global_step,
        episodes: s.episodes,
        updates: s.updates,
        lesson: run.lesson().index,
        final_checkpoint,
        metrics: metrics_path,
        recent_success_rate: success_rate(&s.recent_success),
        recent_mean_return: s.recent_returns.iter().sum::<f64>() / n,
        stopped_early,
    })
}

/// Returns whether the early-stop rule fired.
fn on_policy_loop(run: &mut Run, learner: &mut Learner) -> Result<bool, HarnessError> {
    let cfg = run.cfg;
    let budget = cfg.train.budget;
    while run.state.global_step < budget {
        let Learner::Gaussian { spec, params, adam } = &mut *learner else { unreachable!("on-policy learner") };
        let mut rollout = Rollout::default();
        let mut returns = Vec::new();
        let mut steps = 0usize;
        while steps < cfg.train.rollout_steps && run.state.global_step < budget && !run.stop_now() {
            let behavior = Behavior::Gaussian { spec, params };
            let wave = run.collect_wave(run.workers(), &behavior)?;
            for t in wave {
                run.record_episode(&t)?;
                steps += t.steps();
                returns.push(t.episode_return);
                let n = t.steps();
                for i in 0..n {
                    rollout.push((*t.obs[i]).clone(), t.actions[i].clone(), t.log_probs[i], t.values[i], t.rewards[i], i + 1 == n);
                }
            }
        }
        if rollout.is_empty() {
            return Ok(run.stop_now());
        }
        let progress = (run.state.global_step as f64 / budget.max(1) as f64).min(1.0);
        let fields = match cfg.algorithm {
            Algorithm::Ppo => {
                let lr = cfg.ppo.lr.with_horizon(budget).at(run.state.global_step);
                let beta = beta_at(cfg.ppo.entropy_coef, progress);
                let mut rng = stream_rng(cfg.seed ^ splitmix(run.state.updates), 3);
                let s = ppo_update(spec, params, adam, &rollout, &cfg.ppo, lr, beta, &mut rng)?;
                UpdateFields {
                    policy_loss: s.policy_loss,
                    value_loss: s.value_loss,
                    entropy: s.entropy,
                    kl: s.kl,
                    clip_fraction: Some(s.clip_fraction),
                    lr,
                    beta: Some(beta),
                }
            }
            _ => {
                let s = trpo_update(spec, params, &rollout, &cfg.trpo)?;
                UpdateFields {
                    policy_loss: -s.surrogate_after,
                    value_loss: s.value_loss,
                    entropy: s.entropy,
                    kl: s.kl,
                    clip_fraction: None,
                    lr: cfg.trpo.value_lr,
                    beta: None,
                }
            }
        };
        run.after_update(learner, fields, &returns)?;
        if run.stop_now() {
            return Ok(true);
        }
    }
    Ok(false)
}

fn ddpg_loop(run: &mut Run, learner: &mut Learner) -> Result<bool, HarnessError> {
    let cfg = run.cfg;
    let d = &cfg.ddpg;
    while run.state.global_step < cfg.train.budget {
        let Learner::Ddpg { nets, buffer } = &mut *learner else { unreachable!("ddpg learner") };
        let warm = run.state.global_step < d.warmup as u64;
        let wave = {
            let behavior = if warm { Behavior::Uniform } else { Behavior::Actor { nets, sigma: d.noise_sigma } };
            run.collect_wave(run.workers(), &behavior)?
        };
        let mut steps = 0usize;
        let mut returns = Vec::new();
        for t in wave {
            run.record_episode(&t)?;
            steps += t.steps();
            returns.push(t.episode_return);
            let n = t.steps();
            for i in 0..n {
                let next = (i + 1 < n).then(|| t.obs[i + 1].clone());
                buffer.push(Transition { obs: t.obs[i].clone(), action: t.actions[i].clone(), reward: t.rewards[i], next_obs: next });
            }
        }
        if run.state.global_step < d.warmup as u64 || buffer.len() < d.batch {
            continue;
        }
        let mut rng = stream_rng(cfg.seed ^ splitmix(run.state.updates), 4);
        let mut acc = UpdateFields { lr: d.actor_lr, ..UpdateFields::default() };
        let k = (steps * d.updates_per_step).max(1);
        for _ in 0..k {
            let s = ddpg_update(nets, buffer, d, &mut rng)?;
            acc.policy_loss += s.actor_loss / k as f64;
            acc.value_loss += s.critic_loss / k as f64;
        }
        run.after_update(learner, acc, &returns)?;
        if run.stop_now() {
            return Ok(true);
        }
    }
    Ok(false)
}
