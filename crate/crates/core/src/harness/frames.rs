use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::HarnessError;
use crate::env::{GraspEnv, ObservationMode};
use crate::render::{quantize, write_pgm, write_ppm, DEPTH_MAX_V, DEPTH_MIN_V};

/// Sidecar describing how a dumped frame was produced.
#[derive(Debug, Serialize)]
struct FrameInfo {
    seed: u64,
    width: usize,
    height: usize,
    vfov_deg: f64,
    clip_near: f64,
    clip_far: f64,
    /// Depth pixel `p` encodes `min_v + p / 255 * (max_v - min_v)` meters.
    encoding_min_v: f64,
    encoding_max_v: f64,
    noise_sigma: f64,
    camera_position: [f64; 3],
    target_index: usize,
    depth_file: String,
    rgb_file: Option<String>,
}

/// Writes the first frame of the episode seeded with `seed` into `out_dir`:
/// `depth_<seed>.pgm`, `rgb_<seed>.ppm` in depth+rgb mode, and `frame_<seed>.toml`.
pub fn render_frame(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if cfg.env.observation == ObservationMode::GoalOffset {
        return Err(HarnessError::Config("render-frame needs an image observation mode".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::Io(format!("{}: {e}", out_dir.display())))?;
    let mut env = GraspEnv::new(cfg.env.clone())?;
    let (_, episode) = env.reset(seed, &cfg.eval_lesson()?)?;
    let (depth, rgb) = env.last_frame().expect("image modes keep their frame");

    let mut files = Vec::new();
    let depth_name = format!("depth_{seed}.pgm");
    let q = quantize(depth, DEPTH_MIN_V, DEPTH_MAX_V).map_err(|e| HarnessError::Io(e.to_string()))?;
    write_pgm(&q, &out_dir.join(&depth_name)).map_err(|e| HarnessError::Io(e.to_string()))?;
    files.push(out_dir.join(&depth_name));
    let rgb_name = match rgb {
        Some(img) => {
            let name = format!("rgb_{seed}.ppm");
            write_ppm(img, &out_dir.join(&name)).map_err(|e| HarnessError::Io(e.to_string()))?;
            files.push(out_dir.join(&name));
            Some(name)
        }
        None => None,
    };
    let p = episode.camera.pose.position;
    let info = FrameInfo {
        seed,
        width: depth.width,
        height: depth.height,
        vfov_deg: cfg.env.vfov_deg,
        clip_near: episode.camera.near,
        clip_far: episode.camera.far,
        encoding_min_v: DEPTH_MIN_V,
        encoding_max_v: DEPTH_MAX_V,
        noise_sigma: cfg.env.noise_sigma,
        camera_position: [p.x, p.y, p.z],
        target_index: episode.target_index,
        depth_file: depth_name,
        rgb_file: rgb_name,
    };
    let sidecar = out_dir.join(format!("frame_{seed}.toml"));
    let text = toml::to_string(&info).map_err(|e| HarnessError::Io(e.to_string()))?;
    std::fs::write(&sidecar, text).map_err(|e| HarnessError::Io(format!("{}: {e}", sidecar.display())))?;
    files.push(sidecar);
    Ok(files)
}

/// Curriculum table, one row per lesson.
pub fn dump_schedule(cfg: &RunConfig) -> Result<String, HarnessError> {
    if !cfg.curriculum.enabled {
        return Err(HarnessError::Config("dump-schedule needs curriculum.enabled = true".into()));
    }
    let mut s = String::from("lesson  xy_tol_m  z_range_m        yaw_tol_deg  threshold\n");
    for l in cfg.schedule()? {
        let _ = writeln!(
            s,
            "{:>6}  {:>8.4}  [{:.3}, {:.3}]  {:>11.2}  {:>9.4}",
            l.index, l.xy_tol, l.z_range[0], l.z_range[1], l.yaw_tol_deg, l.advance_threshold
        );
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_table_ends() {
        let t = dump_schedule(&RunConfig::default()).unwrap();
        let rows: Vec<&str> = t.lines().skip(1).collect();
        assert_eq!(rows.len(), 19);
        let cells = |r: &str| r.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        let first = cells(rows[0]);
        let last = cells(rows[18]);
        assert_eq!((first[0].as_str(), first[1].as_str(), first[4].as_str()), ("1", "0.1000", "10.00"));
        assert_eq!((last[0].as_str(), last[1].as_str(), last[4].as_str()), ("19", "0.0100", "2.00"));
        let xy: Vec<f64> = rows.iter().map(|r| cells(r)[1].parse().unwrap()).collect();
        assert!(xy.windows(2).all(|w| w[1] < w[0]));
        let mut off = RunConfig::default();
        off.curriculum.enabled = false;
        assert!(dump_schedule(&off).is_err());
    }

    #[test]
    fn depth_rgb_mode_writes_two_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.env.resolution = 32;
        let files = render_frame(&cfg, 3, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        cfg.env.observation = ObservationMode::DepthRgb;
        let files = render_frame(&cfg, 3, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        assert!(files.iter().any(|f| f.extension().unwrap() == "ppm"));
    }
}
