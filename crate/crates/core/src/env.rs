//! Reset/step facade over scenes, camera and rewards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::Lesson;
use crate::geom::{wrap_deg, Pose, Rotation};
use crate::render::{
    add_noise, dequantize, painted_scene, quantize, render_depth_solids, render_rgb_painted, to_observation,
    CameraIntrinsics, DepthImage, Observation, Painted, RenderError, RgbImage, DEPTH_MAX_V, DEPTH_MIN_V, TOOL_ALBEDO,
};
use crate::reward::{total_reward, RewardBreakdown, RewardConstants, StepGeometry};
use crate::scene::{
    classify_contacts, goal_region, in_goal, sample_episode, tool_from_pose, ContactReport, EpisodeConfig, GoalRegion,
    Interval, RandomizationRanges, SceneError, ToolDims, ToolState,
};

pub const ACTION_DIM: usize = 4;
/// Length of the goal-offset observation: dx, dy, dz, wrapped dyaw / 180.
pub const GOAL_OFFSET_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("episode finished; call reset")]
    EpisodeFinished,
    #[error("no active episode; call reset")]
    NotReset,
    #[error("invalid env config: {0}")]
    BadConfig(String),
    #[error("replay document: {0}")]
    Document(String),
}

/// Normalized tool pose command; each entry is clamped to [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action(pub [f64; ACTION_DIM]);

impl Action {
    pub fn new(ax: f64, ay: f64, az: f64, ayaw: f64) -> Self {
        Self([ax, ay, az, ayaw])
    }

    /// Non-finite entries become 0.
    pub fn clamped(self) -> Self {
        Self(self.0.map(|v| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 }))
    }

    pub fn from_slice(a: &[f64]) -> Self {
        let mut out = [0.0; ACTION_DIM];
        for (o, v) in out.iter_mut().zip(a) {
            *o = *v;
        }
        Self(out)
    }
}

/// Reachable tool poses. `z` is measured above the support top.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceBounds {
    pub x: Interval,
    pub y: Interval,
    pub z: Interval,
    pub yaw_deg: Interval,
}

impl Default for WorkspaceBounds {
    fn default() -> Self {
        Self {
            x: Interval::new(-0.4, 0.4),
            y: Interval::new(0.2, 1.0),
            z: Interval::new(0.0, 0.4),
            yaw_deg: Interval::new(-180.0, 180.0),
        }
    }
}

impl WorkspaceBounds {
    pub fn validate(&self) -> Result<(), EnvError> {
        for (name, i) in [("x", self.x), ("y", self.y), ("z", self.z), ("yaw", self.yaw_deg)] {
            if !(i.lo < i.hi) || !i.lo.is_finite() || !i.hi.is_finite() {
                return Err(EnvError::BadConfig(format!("bounds.{name} must satisfy low < high")));
            }
        }
        Ok(())
    }
}

fn affine(a: f64, i: Interval) -> f64 {
    i.lo + (a + 1.0) * 0.5 * (i.hi - i.lo)
}

fn affine_inv(v: f64, i: Interval) -> f64 {
    (v - i.lo) / (i.hi - i.lo) * 2.0 - 1.0
}

/// Absolute pose for a clamped action. `support_top` lifts the z interval into world height.
pub fn action_to_pose(a: Action, b: &WorkspaceBounds, support_top: f64) -> Pose {
    let a = a.clamped().0;
    Pose::from_xyz_yaw(affine(a[0], b.x), affine(a[1], b.y), support_top + affine(a[2], b.z), affine(a[3], b.yaw_deg))
}

/// Inverse of [`action_to_pose`] on the bounds; values outside map outside [-1, 1].
pub fn pose_to_action(x: f64, y: f64, z_above_support: f64, yaw_deg: f64, b: &WorkspaceBounds) -> Action {
    Action([affine_inv(x, b.x), affine_inv(y, b.y), affine_inv(z_above_support, b.z), affine_inv(yaw_deg, b.yaw_deg)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    /// One normalized depth channel.
    Depth,
    /// Depth plus red, green and blue channels.
    DepthRgb,
    /// Vector `(aim - tooltip, wrapped yaw error / 180)`; no rendering.
    GoalOffset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub observation: ObservationMode,
    pub frame_grab: bool,
    pub max_steps: usize,
    pub bounds: WorkspaceBounds,
    pub noise_sigma: f64,
    pub resolution: usize,
    pub vfov_deg: f64,
    /// Pass depth through the 8-bit sensor encoding before normalization.
    pub quantize_depth: bool,
    pub ranges: RandomizationRanges,
    pub reward: RewardConstants,
    pub tool: ToolDims,
    /// Holds the tooltip at this height above the support and ignores the z action.
    pub fixed_z: Option<f64>,
    /// Tool pose at reset, `[x, y, z above support, yaw]`; the default parks it
    /// behind the camera so the first frame shows the blocks unobstructed.
    pub home: [f64; 4],
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            observation: ObservationMode::Depth,
            frame_grab: true,
            max_steps: 10,
            bounds: WorkspaceBounds::default(),
            noise_sigma: 0.005,
            resolution: 80,
            vfov_deg: 60.0,
            quantize_depth: true,
            ranges: RandomizationRanges::default(),
            reward: RewardConstants::default(),
            tool: ToolDims::default(),
            fixed_z: None,
            home: [0.0, -0.3, 0.6, 0.0],
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.max_steps < 1 {
            return Err(EnvError::BadConfig("max_steps must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(EnvError::BadConfig("noise_sigma must be non-negative".into()));
        }
        self.bounds.validate()?;
        self.ranges.validate()?;
        if self.observation != ObservationMode::GoalOffset {
            CameraIntrinsics::new(self.resolution, self.vfov_deg, DEPTH_MIN_V, DEPTH_MAX_V)?;
        }
        Ok(())
    }

    /// `(channels, height, width)` of the observations this config produces.
    pub fn observation_shape(&self) -> (usize, usize, usize) {
        match self.observation {
            ObservationMode::Depth => (1, self.resolution, self.resolution),
            ObservationMode::DepthRgb => (4, self.resolution, self.resolution),
            ObservationMode::GoalOffset => (GOAL_OFFSET_DIM, 1, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub success: bool,
    pub pos_ok: bool,
    pub rot_ok: bool,
    pub contacts: ContactReport,
    /// 1-based index of the step just taken.
    pub step_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: RewardBreakdown,
    pub done: bool,
    pub info: StepInfo,
}

struct Episode {
    config: EpisodeConfig,
    goal: GoalRegion,
    tool: ToolState,
    noise_rng: ChaCha8Rng,
    first_obs: Observation,
    /// Sensor images behind the latest rendered observation.
    frame: Option<(DepthImage, Option<RgbImage>)>,
    step_index: usize,
    done: bool,
}

pub struct GraspEnv {
    cfg: EnvConfig,
    episode: Option<Episode>,
}

/// Noise draws use a separate stream of the episode seed, so scene sampling
/// and sensor noise never shift each other.
fn episode_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let scene = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(1);
    (scene, noise)
}

impl GraspEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        Ok(Self { cfg, episode: None })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn episode_config(&self) -> Option<&EpisodeConfig> {
        self.episode.as_ref().map(|e| &e.config)
    }

    pub fn goal(&self) -> Option<&GoalRegion> {
        self.episode.as_ref().map(|e| &e.goal)
    }

    pub fn tool(&self) -> Option<&ToolState> {
        self.episode.as_ref().map(|e| &e.tool)
    }

    /// Depth (after noise and encoding) and optional color image of the latest rendered frame.
    pub fn last_frame(&self) -> Option<(&DepthImage, Option<&RgbImage>)> {
        self.episode.as_ref()?.frame.as_ref().map(|(d, c)| (d, c.as_ref()))
    }

    pub fn is_done(&self) -> bool {
        self.episode.as_ref().map_or(true, |e| e.done)
    }

    fn home_pose(&self, support_top: f64) -> Pose {
        let h = self.cfg.home;
        Pose::from_xyz_yaw(h[0], h[1], support_top + h[2], h[3])
    }

    pub fn reset(&mut self, seed: u64, lesson: &Lesson) -> Result<(Observation, EpisodeConfig), EnvError> {
        let (mut scene_rng, noise_rng) = episode_rngs(seed);
        let config = sample_episode(&mut scene_rng, &self.cfg.ranges, seed)?;
        let goal = goal_region(&config, lesson);
        let tool = tool_from_pose(self.home_pose(config.support_top_z()), &self.cfg.tool);
        let mut ep = Episode {
            config: config.clone(),
            goal,
            tool,
            noise_rng,
            first_obs: Observation::vector(Vec::new()),
            frame: None,
            step_index: 0,
            done: false,
        };
        let obs = self.observe(&mut ep)?;
        ep.first_obs = obs.clone();
        self.episode = Some(ep);
        Ok((obs, config))
    }

    /// Tool pose for an action under this config (fixed z applied).
    pub fn command_pose(&self, a: Action, support_top: f64) -> Pose {
        let mut p = action_to_pose(a, &self.cfg.bounds, support_top);
        if let Some(z) = self.cfg.fixed_z {
            p.position.z = support_top + z;
        }
        p
    }

    pub fn step(&mut self, a: Action) -> Result<StepResult, EnvError> {
        let mut ep = self.episode.take().ok_or(EnvError::NotReset)?;
        if ep.done {
            self.episode = Some(ep);
            return Err(EnvError::EpisodeFinished);
        }
        let pose = self.command_pose(a, ep.config.support_top_z());
        let prev_pos = ep.tool.tooltip;
        ep.tool = tool_from_pose(pose, &self.cfg.tool);
        let contacts = classify_contacts(&ep.tool, &ep.config);
        let (pos_ok, rot_ok) = in_goal(&ep.tool, &ep.goal);
        let geom = StepGeometry {
            prev_pos,
            cur_pos: ep.tool.tooltip,
            target: ep.goal.center,
            z_ee: ep.tool.z_ee,
            z_block: ep.config.target().up(),
        };
        let reward = total_reward(&contacts, pos_ok, rot_ok, &geom, &self.cfg.reward);
        ep.step_index += 1;
        let success = pos_ok && rot_ok;
        ep.done = success || ep.step_index >= self.cfg.max_steps;
        let observation = if self.cfg.frame_grab { ep.first_obs.clone() } else { self.observe(&mut ep)? };
        let info = StepInfo { success, pos_ok, rot_ok, contacts, step_index: ep.step_index };
        let done = ep.done;
        self.episode = Some(ep);
        Ok(StepResult { observation, reward, done, info })
    }

    /// Action that lands the tooltip on the goal aim point with the target yaw.
    pub fn oracle_action(&self) -> Result<Action, EnvError> {
        let ep = self.episode.as_ref().ok_or(EnvError::NotReset)?;
        Ok(oracle_action(&ep.goal, &self.cfg.bounds, ep.config.support_top_z(), &self.cfg.tool))
    }

    fn observe(&self, ep: &mut Episode) -> Result<Observation, EnvError> {
        match self.cfg.observation {
            ObservationMode::GoalOffset => Ok(goal_offset_observation(&ep.goal, &ep.tool)),
            mode => {
                let cam = CameraIntrinsics {
                    width: self.cfg.resolution,
                    height: self.cfg.resolution,
                    vfov_deg: self.cfg.vfov_deg,
                    near: ep.config.camera.near,
                    far: ep.config.camera.far,
                };
                let mut items = painted_scene(&ep.config);
                items.extend(ep.tool.body.iter().map(|&solid| Painted { solid, albedo: TOOL_ALBEDO }));
                let solids: Vec<_> = items.iter().map(|p| p.solid).collect();
                let depth = render_depth_solids(&ep.config.camera, &cam, &solids);
                let depth = add_noise(&depth, self.cfg.noise_sigma, &mut ep.noise_rng);
                let depth = self.sensor_encode(depth)?;
                let rgb = (mode == ObservationMode::DepthRgb)
                    .then(|| render_rgb_painted(&ep.config.camera, &cam, &ep.config.light, &items));
                let obs = to_observation(&depth, rgb.as_ref())?;
                ep.frame = Some((depth, rgb));
                Ok(obs)
            }
        }
    }

    /// Clamps to the sensor range, then optionally round-trips the 8-bit encoding.
    fn sensor_encode(&self, mut depth: DepthImage) -> Result<DepthImage, EnvError> {
        for v in &mut depth.data {
            *v = v.clamp(DEPTH_MIN_V, DEPTH_MAX_V);
        }
        depth.near = DEPTH_MIN_V;
        depth.far = DEPTH_MAX_V;
        if self.cfg.quantize_depth {
            let q = quantize(&depth, DEPTH_MIN_V, DEPTH_MAX_V)?;
            depth = dequantize(&q, DEPTH_MIN_V, DEPTH_MAX_V)?;
        }
        Ok(depth)
    }
}

pub fn goal_offset_observation(goal: &GoalRegion, tool: &ToolState) -> Observation {
    let d = goal.aim_point() - tool.tooltip;
    let dyaw = goal.yaw_error_deg(tool.yaw_deg());
    Observation::vector(vec![d.x as f32, d.y as f32, d.z as f32, (-dyaw / 180.0) as f32])
}

/// Yaw equivalent to `target` under `period` that is closest to the middle of `range`.
fn yaw_in_range(target: f64, period: f64, range: Interval) -> f64 {
    let mid = range.mid();
    let k = ((mid - target) / period).round();
    target + k * period
}

pub fn oracle_action(goal: &GoalRegion, b: &WorkspaceBounds, support_top: f64, tool: &ToolDims) -> Action {
    let aim = goal.aim_point();
    let yaw = yaw_in_range(goal.target_yaw_deg, goal.yaw_period_deg, b.yaw_deg);
    // the tip offset turns with the tool, so solve for the pose origin
    let origin = aim - Rotation::from_yaw_deg(yaw).rotate(tool.tip_offset);
    pose_to_action(origin.x, origin.y, origin.z - support_top, wrap_deg(yaw).max(b.yaw_deg.lo).min(b.yaw_deg.hi), b)
        .clamped()
}

/// Everything needed to re-simulate one episode bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub lesson: Lesson,
    pub actions: Vec<[f64; ACTION_DIM]>,
}

impl EpisodeRecord {
    pub fn to_toml(&self) -> Result<String, EnvError> {
        toml::to_string_pretty(self).map_err(|e| EnvError::Document(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self, EnvError> {
        toml::from_str(s).map_err(|e| EnvError::Document(e.to_string()))
    }
}

/// Replays a record, returning each step's result. Stops early if the episode ends.
pub fn replay(env: &mut GraspEnv, record: &EpisodeRecord) -> Result<Vec<StepResult>, EnvError> {
    env.reset(record.seed, &record.lesson)?;
    let mut out = Vec::with_capacity(record.actions.len());
    for a in &record.actions {
        let r = env.step(Action(*a))?;
        let done = r.done;
        out.push(r);
        if done {
            break;
        }
    }
    Ok(out)
}
