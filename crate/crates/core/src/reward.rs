//! Sparse event rewards (touch, collision, goal) and the two dense shaping
//! terms (motion towards the target, facing the block), summed per step.

use serde::{Deserialize, Serialize};

use crate::geom::{normalize, Vec3};
use crate::scene::ContactReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FacingMode {
    /// `-k2 * (z_block . z_ee)`: rewarded when the suction face opposes the block's top normal.
    BlockNormal,
    /// `-k2 * (n . z_ee)` with `n` the unit direction from the tooltip to the target.
    TargetDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConstants {
    pub k1: f64,
    pub k2: f64,
    pub touch: f64,
    pub collision: f64,
    pub pos: f64,
    pub rot: f64,
    pub facing: FacingMode,
}

impl Default for RewardConstants {
    fn default() -> Self {
        Self { k1: 0.03, k2: 0.01, touch: 0.1, collision: -0.1, pos: 0.5, rot: 0.5, facing: FacingMode::BlockNormal }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_touch: f64,
    pub r_collision: f64,
    pub r_pos: f64,
    pub r_rot: f64,
    pub r_fmt: f64,
    pub r_fft: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Fills `total` with the component sum, in field order.
    pub fn from_parts(r_touch: f64, r_collision: f64, r_pos: f64, r_rot: f64, r_fmt: f64, r_fft: f64) -> Self {
        let total = r_touch + r_collision + r_pos + r_rot + r_fmt + r_fft;
        Self { r_touch, r_collision, r_pos, r_rot, r_fmt, r_fft, total }
    }

    pub fn components(&self) -> [f64; 6] {
        [self.r_touch, self.r_collision, self.r_pos, self.r_rot, self.r_fmt, self.r_fft]
    }
}

pub fn reward_touch(report: &ContactReport, c: &RewardConstants) -> f64 {
    if report.touched_target {
        c.touch
    } else {
        0.0
    }
}

pub fn reward_collision(report: &ContactReport, c: &RewardConstants) -> f64 {
    c.collision * report.undesired_collisions as f64
}

/// Position reward, plus the rotation reward only when the position is right.
pub fn reward_goal(pos_ok: bool, rot_ok: bool, c: &RewardConstants) -> (f64, f64) {
    match (pos_ok, rot_ok) {
        (false, _) => (0.0, 0.0),
        (true, false) => (c.pos, 0.0),
        (true, true) => (c.pos, c.rot),
    }
}

/// `k1 * (v . n)`: per-step displacement projected on the unit direction from
/// the current position to the target. Zero when already at the target.
pub fn reward_fmt(prev_pos: Vec3, cur_pos: Vec3, target: Vec3, c: &RewardConstants) -> f64 {
    match normalize(target - cur_pos) {
        Ok(n) => c.k1 * (cur_pos - prev_pos).dot(n),
        Err(_) => 0.0,
    }
}

/// `-k2 * (reference . z_ee)`; `reference` is the block's top normal or the
/// target direction depending on [`FacingMode`].
pub fn reward_fft(z_ee: Vec3, reference: Vec3, c: &RewardConstants) -> f64 {
    -c.k2 * reference.dot(z_ee)
}

/// Inputs of one reward evaluation.
#[derive(Debug, Clone, Copy)]
pub struct StepGeometry {
    pub prev_pos: Vec3,
    pub cur_pos: Vec3,
    pub target: Vec3,
    pub z_ee: Vec3,
    pub z_block: Vec3,
}

pub fn total_reward(report: &ContactReport, pos_ok: bool, rot_ok: bool, g: &StepGeometry, c: &RewardConstants) -> RewardBreakdown {
    let (r_pos, r_rot) = reward_goal(pos_ok, rot_ok, c);
    let reference = match c.facing {
        FacingMode::BlockNormal => g.z_block,
        FacingMode::TargetDirection => normalize(g.target - g.cur_pos).unwrap_or(Vec3::ZERO),
    };
    RewardBreakdown::from_parts(
        reward_touch(report, c),
        reward_collision(report, c),
        r_pos,
        r_rot,
        reward_fmt(g.prev_pos, g.cur_pos, g.target, c),
        reward_fft(g.z_ee, reference, c),
    )
}
