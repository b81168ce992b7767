//! Nineteen-lesson tolerance schedule and the return-driven state machine that
//! walks through it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LESSON_COUNT: usize = 19;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurriculumError {
    #[error("bad schedule: {0}")]
    BadSchedule(String),
}

/// Goal-region tolerances for one lesson. `z_range` is measured above the
/// target's top face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesson {
    /// 1-based.
    pub index: usize,
    pub xy_tol: f64,
    pub z_range: [f64; 2],
    pub yaw_tol_deg: f64,
    pub advance_threshold: f64,
}

impl Lesson {
    /// Fixed tolerances outside of any schedule, e.g. for frozen-difficulty runs.
    pub fn fixed(xy_tol: f64, z_range: [f64; 2], yaw_tol_deg: f64) -> Self {
        Lesson { index: 1, xy_tol, z_range, yaw_tol_deg, advance_threshold: f64::INFINITY }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub start_xy: f64,
    pub final_xy: f64,
    pub start_yaw_deg: f64,
    pub final_yaw_deg: f64,
    pub z_range: [f64; 2],
    /// Upper z limit at the last lesson; `None` keeps `z_range` fixed throughout.
    pub final_z_high: Option<f64>,
    pub start_threshold: f64,
    pub final_threshold: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            start_xy: 0.10,
            final_xy: 0.01,
            start_yaw_deg: 10.0,
            final_yaw_deg: 2.0,
            z_range: [0.01, 0.02],
            final_z_high: None,
            start_threshold: -0.2,
            final_threshold: 1.0,
        }
    }
}

/// Linear interpolation of every tolerance across lessons 1..=19.
pub fn build_schedule(p: &ScheduleParams) -> Result<Vec<Lesson>, CurriculumError> {
    if !(p.start_xy > p.final_xy && p.final_xy > 0.0) {
        return Err(CurriculumError::BadSchedule(format!(
            "xy tolerance must shrink to a positive value ({} -> {})",
            p.start_xy, p.final_xy
        )));
    }
    if !(p.start_yaw_deg > p.final_yaw_deg && p.final_yaw_deg > 0.0) {
        return Err(CurriculumError::BadSchedule(format!(
            "yaw tolerance must shrink to a positive value ({} -> {})",
            p.start_yaw_deg, p.final_yaw_deg
        )));
    }
    if !(p.final_threshold > p.start_threshold) {
        return Err(CurriculumError::BadSchedule("thresholds must increase".into()));
    }
    let z_high_end = p.final_z_high.unwrap_or(p.z_range[1]);
    if !(p.z_range[0] < p.z_range[1] && p.z_range[0] < z_high_end && z_high_end <= p.z_range[1]) {
        return Err(CurriculumError::BadSchedule(format!(
            "z range {:?} with final upper limit {z_high_end} is not a shrinking interval",
            p.z_range
        )));
    }
    let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
    Ok((0..LESSON_COUNT)
        .map(|i| {
            let f = i as f64 / (LESSON_COUNT - 1) as f64;
            Lesson {
                index: i + 1,
                xy_tol: lerp(p.start_xy, p.final_xy, f),
                z_range: [p.z_range[0], lerp(p.z_range[1], z_high_end, f)],
                yaw_tol_deg: lerp(p.start_yaw_deg, p.final_yaw_deg, f),
                advance_threshold: lerp(p.start_threshold, p.final_threshold, f),
            }
        })
        .collect())
}

/// Sliding-window progression through a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    /// 1-based lesson index.
    pub index: usize,
    pub window: VecDeque<f64>,
    pub window_len: usize,
    pub episodes: u64,
}

impl CurriculumState {
    pub const DEFAULT_WINDOW: usize = 100;

    pub fn new(window_len: usize) -> Self {
        Self { index: 1, window: VecDeque::with_capacity(window_len), window_len: window_len.max(1), episodes: 0 }
    }

    pub fn lesson<'a>(&self, schedule: &'a [Lesson]) -> &'a Lesson {
        &schedule[self.index - 1]
    }

    /// Records one episode return; advances at most one lesson once the full
    /// window's mean exceeds the current threshold. Returns whether it advanced.
    pub fn update(&mut self, schedule: &[Lesson], episode_return: f64) -> bool {
        self.episodes += 1;
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back(episode_return);
        if self.index >= schedule.len() || self.window.len() < self.window_len {
            return false;
        }
        let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
        if mean > schedule[self.index - 1].advance_threshold {
            self.index += 1;
            self.window.clear();
            true
        } else {
            false
        }
    }
}
