use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::algos::{Algorithm, DdpgConfig, PpoConfig, TrpoConfig};
use crate::curriculum::{build_schedule, CurriculumState, Lesson, ScheduleParams};
use crate::env::{EnvConfig, ObservationMode, ACTION_DIM, GOAL_OFFSET_DIM};
use crate::nn::{arch_preset, Activation, ConvSpec, NetworkKind, NetworkSpec};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "GRASPLAB_OUT";

/// Optional changes to the preset network for the configured observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Replaces the resolution preset's conv stack.
    pub conv: Option<Vec<ConvSpec>>,
    pub hidden: Option<Vec<usize>>,
    pub conv_activation: Activation,
    pub hidden_activation: Activation,
    pub init_log_std: f64,
    pub head_init_scale: f64,
    /// Inputs become `(x - input_shift) * input_scale`.
    pub input_shift: f64,
    pub input_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let base = NetworkSpec::default();
        Self {
            conv: None,
            hidden: None,
            conv_activation: base.conv_activation,
            hidden_activation: base.hidden_activation,
            init_log_std: base.init_log_std,
            head_init_scale: base.head_init_scale,
            input_shift: base.input_shift,
            input_scale: base.input_scale,
        }
    }
}

/// Tolerances used when the curriculum is off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrozenLesson {
    pub xy_tol: f64,
    pub z_range: [f64; 2],
    pub yaw_tol_deg: f64,
}

impl Default for FrozenLesson {
    fn default() -> Self {
        Self { xy_tol: 0.10, z_range: [0.01, 0.02], yaw_tol_deg: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub enabled: bool,
    /// Episodes averaged before each advancement check.
    pub window: usize,
    pub schedule: ScheduleParams,
    pub frozen: FrozenLesson,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window: CurriculumState::DEFAULT_WINDOW,
            schedule: ScheduleParams::default(),
            frozen: FrozenLesson::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total environment steps.
    pub budget: u64,
    /// Minimum steps per on-policy update; whole episodes are always kept together.
    pub rollout_steps: usize,
    /// Checkpoint cadence in updates.
    pub checkpoint_every: u64,
    /// Parallel rollout workers; forced to 1 in deterministic mode.
    pub workers: usize,
    /// Single worker and no wall-clock column, so reruns are byte-identical.
    pub deterministic: bool,
    /// Stop once this success rate is reached over the last `stop_window` episodes.
    pub stop_success_rate: Option<f64>,
    pub stop_window: usize,
    /// Resume from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budget: 100_000,
            rollout_steps: 512,
            checkpoint_every: 50,
            workers: 1,
            deterministic: true,
            stop_success_rate: None,
            stop_window: 500,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Lesson index (1-based) to evaluate at; `None` means the frozen lesson, or
    /// the last lesson when the curriculum is enabled.
    pub lesson: Option<usize>,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { lesson: None, episodes: 100, seed: 12_345 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub env: EnvConfig,
    pub network: NetworkConfig,
    pub curriculum: CurriculumConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ppo: PpoConfig,
    pub trpo: TrpoConfig,
    pub ddpg: DdpgConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ppo,
            seed: 0,
            out_dir: None,
            env: EnvConfig::default(),
            network: NetworkConfig::default(),
            curriculum: CurriculumConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ppo: PpoConfig::default(),
            trpo: TrpoConfig::default(),
            ddpg: DdpgConfig::default(),
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let wrapped = format!("v = {value}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Sets a dotted key such as `ppo.clip` inside a TOML table.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: &str) -> Result<(), HarnessError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("malformed override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value));
    Ok(())
}

/// Keys that name an enum variant; a table carrying one replaces the default wholesale.
const TAG_KEYS: [&str; 2] = ["kind", "rule"];

/// Recursively overlays `over` onto `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !TAG_KEYS.iter().any(|t| o.contains_key(*t)) => {
                merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Builds a config from optional file text plus `key=value` overrides, both
    /// layered over the defaults.
    pub fn from_parts(text: Option<&str>, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut table: toml::Table = toml::from_str(&RunConfig::default().to_toml()).expect("defaults round-trip");
        if let Some(t) = text {
            merge(&mut table, toml::from_str(t).map_err(|e| HarnessError::Config(e.to_string()))?);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, k.trim(), v.trim())?;
        }
        let cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())))?),
            None => None,
        };
        Self::from_parts(text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |e: &dyn std::fmt::Display| HarnessError::Config(e.to_string());
        self.env.validate().map_err(|e| bad(&e))?;
        self.policy_spec()?;
        if self.curriculum.enabled {
            self.schedule()?;
        }
        match self.algorithm {
            Algorithm::Ppo => self.ppo.validate().map_err(|e| bad(&e))?,
            Algorithm::Trpo => self.trpo.validate().map_err(|e| bad(&e))?,
            Algorithm::Ddpg => {
                self.ddpg.validate().map_err(|e| bad(&e))?;
                if self.ddpg.capacity < self.ddpg.batch {
                    return Err(HarnessError::Config("ddpg.capacity must be at least ddpg.batch".into()));
                }
            }
        }
        if self.train.rollout_steps == 0 || self.train.checkpoint_every == 0 {
            return Err(HarnessError::Config("train.rollout_steps and train.checkpoint_every must be positive".into()));
        }
        if let Some(l) = self.eval.lesson {
            if self.curriculum.enabled && !(1..=crate::curriculum::LESSON_COUNT).contains(&l) {
                return Err(HarnessError::Config(format!("eval.lesson {l} is outside 1..=19")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Vec<Lesson>, HarnessError> {
        build_schedule(&self.curriculum.schedule).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn frozen_lesson(&self) -> Lesson {
        let f = self.curriculum.frozen;
        Lesson::fixed(f.xy_tol, f.z_range, f.yaw_tol_deg)
    }

    /// Lesson used by `evaluate`.
    pub fn eval_lesson(&self) -> Result<Lesson, HarnessError> {
        if !self.curriculum.enabled {
            return Ok(self.frozen_lesson());
        }
        let s = self.schedule()?;
        let i = self.eval.lesson.unwrap_or(s.len());
        Ok(s[i - 1])
    }

    fn apply_network(&self, mut spec: NetworkSpec) -> NetworkSpec {
        let n = &self.network;
        if let Some(c) = &n.conv {
            spec.conv = c.clone();
        }
        if let Some(h) = &n.hidden {
            spec.hidden = h.clone();
        }
        spec.conv_activation = n.conv_activation;
        spec.hidden_activation = n.hidden_activation;
        spec.init_log_std = n.init_log_std;
        spec.head_init_scale = n.head_init_scale;
        spec.input_shift = n.input_shift;
        spec.input_scale = n.input_scale;
        spec
    }

    /// Network for the configured observation: the resolution preset for images,
    /// a two-layer perceptron for goal offsets.
    pub fn network_spec(&self, kind: NetworkKind) -> Result<NetworkSpec, HarnessError> {
        let base = match self.env.observation {
            ObservationMode::GoalOffset => NetworkSpec::mlp(kind, GOAL_OFFSET_DIM, vec![64, 64], ACTION_DIM),
            _ => {
                let (c, _, _) = self.env.observation_shape();
                let preset = arch_preset(self.env.resolution, c).map_err(|e| HarnessError::Config(e.to_string()))?;
                NetworkSpec { kind, ..preset }
            }
        };
        let spec = self.apply_network(base);
        spec.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let (c, h, w) = self.env.observation_shape();
        if (spec.input_channels, spec.input_height, spec.input_width) != (c, h, w) {
            return Err(HarnessError::Config(format!(
                "network input {:?} does not match observation {:?}",
                (spec.input_channels, spec.input_height, spec.input_width),
                (c, h, w)
            )));
        }
        Ok(spec)
    }

    /// Network stored in checkpoints and used by `evaluate`.
    pub fn policy_spec(&self) -> Result<NetworkSpec, HarnessError> {
        match self.algorithm {
            Algorithm::Ddpg => self.network_spec(NetworkKind::Actor),
            _ => self.network_spec(NetworkKind::GaussianPolicy),
        }
    }

    /// Output directory: config value, else `$GRASPLAB_OUT`, else `./runs`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_parts(Some(&c.to_toml()), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn dotted_overrides() {
        let c = RunConfig::from_parts(
            None,
            &[
                "ppo.clip=0.3".into(),
                "algorithm=trpo".into(),
                "env.resolution = 32".into(),
                "train.budget=7".into(),
                "curriculum.enabled=false".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.ppo.clip, 0.3);
        assert_eq!(c.algorithm, Algorithm::Trpo);
        assert_eq!(c.env.resolution, 32);
        assert_eq!(c.train.budget, 7);
        assert!(!c.curriculum.enabled);
        assert_eq!(c.policy_spec().unwrap().input_height, 32);
    }

    #[test]
    fn partial_tables_keep_defaults() {
        let c = RunConfig::from_parts(Some("[ppo.lr]\ninitial = 0.001\n"), &["ppo.lr.horizon=10".into()]).unwrap();
        assert_eq!(c.ppo.lr.kind, RunConfig::default().ppo.lr.kind);
        assert_eq!((c.ppo.lr.initial, c.ppo.lr.horizon), (0.001, 10));
        let c = RunConfig::from_parts(Some("[ppo]\nlr = { kind = \"constant\", initial = 0.002 }\n"), &[]).unwrap();
        assert_eq!(c.ppo.lr.kind, crate::algos::LrKind::Constant);
        assert_eq!(c.ppo.lr.horizon, 0);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        for o in ["ppo.clip", "ppo..clip=1", "ppo.clip=1.5", "env.resolution=33", "algorithm=a2c", "nope=1"] {
            let r = RunConfig::from_parts(None, &[o.into()]);
            assert!(matches!(r, Err(HarnessError::Config(_))), "{o}: {r:?}");
        }
    }

    #[test]
    fn network_must_match_observation() {
        let mut c = RunConfig::default();
        c.env.observation = ObservationMode::DepthRgb;
        assert_eq!(c.policy_spec().unwrap().input_channels, 4);
        c.env.observation = ObservationMode::GoalOffset;
        let s = c.policy_spec().unwrap();
        assert_eq!((s.input_channels, s.input_height), (GOAL_OFFSET_DIM, 1));
        c.network.conv = Some(vec![ConvSpec::new(4, 3, 1)]);
        assert!(c.policy_spec().is_err());
    }
}
