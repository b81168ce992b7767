//! Browser bindings: render a sampled scene, map the one-step reward over the
//! workspace, and replay the curriculum on a sequence of returns.

use wasm_bindgen::prelude::*;

use grasplab::curriculum::{build_schedule, CurriculumState, Lesson, ScheduleParams};
use grasplab::env::{pose_to_action, EnvConfig, GraspEnv, ObservationMode};
use grasplab::render::{DEPTH_MAX_V, DEPTH_MIN_V};

fn lesson(index: usize) -> Result<Lesson, String> {
    let schedule = build_schedule(&ScheduleParams::default()).map_err(|e| e.to_string())?;
    let n = schedule.len();
    schedule.into_iter().nth(index.wrapping_sub(1)).ok_or_else(|| format!("lesson must lie in 1..={n}"))
}

/// First frame of episode `seed` as RGBA bytes, row-major from the top-left.
/// Depth is shown as grey (near is bright); `color` shows the shaded RGB view.
pub fn frame_rgba(seed: u64, resolution: usize, noise_sigma: f64, color: bool) -> Result<Vec<u8>, String> {
    let cfg = EnvConfig {
        resolution,
        noise_sigma,
        observation: if color { ObservationMode::DepthRgb } else { ObservationMode::Depth },
        ..EnvConfig::default()
    };
    let mut env = GraspEnv::new(cfg).map_err(|e| e.to_string())?;
    env.reset(seed, &lesson(1)?).map_err(|e| e.to_string())?;
    let (depth, rgb) = env.last_frame().ok_or("no frame rendered")?;
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let out = match rgb {
        Some(img) => img.data.iter().flat_map(|c| [byte(c[0]), byte(c[1]), byte(c[2]), 255]).collect(),
        None => depth
            .data
            .iter()
            .flat_map(|&v| {
                let g = byte(1.0 - (v - DEPTH_MIN_V) / (DEPTH_MAX_V - DEPTH_MIN_V));
                [g, g, g, 255]
            })
            .collect(),
    };
    Ok(out)
}

/// Reward of a single step from the home pose to each cell of a `grid` x `grid`
/// lattice over the workspace, at a fixed height above the support and yaw.
/// Row 0 is the far edge (largest y).
pub fn reward_map(seed: u64, grid: usize, z_above_support: f64, yaw_deg: f64, lesson_index: usize) -> Result<Vec<f64>, String> {
    let lesson = lesson(lesson_index)?;
    let cfg = EnvConfig { observation: ObservationMode::GoalOffset, max_steps: 1, ..EnvConfig::default() };
    let b = cfg.bounds;
    let mut env = GraspEnv::new(cfg).map_err(|e| e.to_string())?;
    let frac = |i: usize| if grid > 1 { i as f64 / (grid - 1) as f64 } else { 0.5 };
    let mut out = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        let y = b.y.hi - frac(row) * (b.y.hi - b.y.lo);
        for col in 0..grid {
            let x = b.x.lo + frac(col) * (b.x.hi - b.x.lo);
            env.reset(seed, &lesson).map_err(|e| e.to_string())?;
            let a = pose_to_action(x, y, z_above_support, yaw_deg, &b);
            out.push(env.step(a).map_err(|e| e.to_string())?.reward.total);
        }
    }
    Ok(out)
}

/// Lesson index after each return, starting at lesson 1.
pub fn curriculum_trace(returns: &[f64], window: usize) -> Result<Vec<u32>, String> {
    if window == 0 {
        return Err("window must be positive".into());
    }
    let schedule = build_schedule(&ScheduleParams::default()).map_err(|e| e.to_string())?;
    let mut state = CurriculumState::new(window);
    Ok(returns
        .iter()
        .map(|&r| {
            state.update(&schedule, r);
            state.index as u32
        })
        .collect())
}

/// Tab-separated lesson table: index, xy tolerance, z low, z high, yaw tolerance, threshold.
pub fn schedule_tsv() -> String {
    let schedule = build_schedule(&ScheduleParams::default()).expect("default schedule is valid");
    let mut s = String::from("lesson\txy_tol\tz_lo\tz_hi\tyaw_tol\tthreshold\n");
    for l in schedule {
        s.push_str(&format!(
            "{}\t{:.4}\t{:.3}\t{:.3}\t{:.2}\t{:.4}\n",
            l.index, l.xy_tol, l.z_range[0], l.z_range[1], l.yaw_tol_deg, l.advance_threshold
        ));
    }
    s
}

#[wasm_bindgen(js_name = frameRgba)]
pub fn js_frame_rgba(seed: u64, resolution: usize, noise_sigma: f64, color: bool) -> Result<Vec<u8>, JsError> {
    frame_rgba(seed, resolution, noise_sigma, color).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = rewardMap)]
pub fn js_reward_map(seed: u64, grid: usize, z_above_support: f64, yaw_deg: f64, lesson: usize) -> Result<Vec<f64>, JsError> {
    reward_map(seed, grid, z_above_support, yaw_deg, lesson).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = curriculumTrace)]
pub fn js_curriculum_trace(returns: Vec<f64>, window: usize) -> Result<Vec<u32>, JsError> {
    curriculum_trace(&returns, window).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = scheduleTsv)]
pub fn js_schedule_tsv() -> String {
    schedule_tsv()
}
