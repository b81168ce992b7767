use std::fs;
use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use grasplab::algos::Algorithm;
use grasplab::curriculum::Lesson;
use grasplab::env::{Action, ObservationMode, WorkspaceBounds};
use grasplab::harness::{evaluate, evaluate_with, render_frame, train, EvalPolicy, HarnessError, RunConfig, COLUMNS};
use grasplab::render::read_pgm;
use grasplab::scene::{GoalRegion, Interval};

fn small(out: &Path, budget: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.env.resolution = 32;
    cfg.train.budget = budget;
    cfg.train.rollout_steps = 100;
    cfg.train.checkpoint_every = 2;
    cfg.out_dir = Some(out.to_path_buf());
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn zero_budget_writes_initial_checkpoint_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let s = train(&small(dir.path(), 0)).unwrap();
    assert_eq!((s.global_step, s.episodes, s.updates), (0, 0, 0));
    assert!(dir.path().join("ckpt_000000.glck").exists());
    let csv = fs::read_to_string(&s.metrics).unwrap();
    assert_eq!(csv, format!("{}\n", COLUMNS.join(",")));
}

#[test]
fn reruns_are_byte_identical() {
    for algo in [Algorithm::Ppo, Algorithm::Trpo, Algorithm::Ddpg] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut ca = small(a.path(), 400);
        ca.algorithm = algo;
        ca.ddpg.warmup = 100;
        let mut cb = ca.clone();
        cb.out_dir = Some(b.path().to_path_buf());
        let sa = train(&ca).unwrap();
        let sb = train(&cb).unwrap();
        assert!(sa.global_step >= 400);
        assert_eq!(read(&sa.metrics), read(&sb.metrics), "{algo:?} metrics");
        assert_eq!(read(&sa.final_checkpoint), read(&sb.final_checkpoint), "{algo:?} checkpoint");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    for algo in [Algorithm::Ppo, Algorithm::Trpo] {
        let full = tempfile::tempdir().unwrap();
        let mut cfg = small(full.path(), 800);
        cfg.algorithm = algo;
        let s = train(&cfg).unwrap();
        assert!(s.updates >= 6);

        // a run killed after update 4: its checkpoint plus the metrics written so far
        let cut = tempfile::tempdir().unwrap();
        fs::copy(full.path().join("ckpt_000004.glck"), cut.path().join("ckpt_000004.glck")).unwrap();
        fs::copy(full.path().join("metrics.csv"), cut.path().join("metrics.csv")).unwrap();
        let mut resumed = cfg.clone();
        resumed.out_dir = Some(cut.path().to_path_buf());
        resumed.train.resume = Some(cut.path().join("ckpt_000004.glck"));
        let r = train(&resumed).unwrap();
        assert_eq!((r.global_step, r.updates), (s.global_step, s.updates));
        assert_eq!(read(&r.metrics), read(&s.metrics), "{algo:?} metrics");
        assert_eq!(read(&r.final_checkpoint), read(&s.final_checkpoint), "{algo:?} parameters");
    }
}

#[test]
fn checkpoint_evaluation_is_reproducible_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 300);
    let s = train(&cfg).unwrap();
    let policy = EvalPolicy::Checkpoint(s.final_checkpoint.clone());
    let r1 = evaluate(&cfg, &policy, 20).unwrap();
    let r2 = evaluate(&cfg, &policy, 20).unwrap();
    assert_eq!(r1, r2);
    assert!((0.0..=1.0).contains(&r1.success_rate));
    assert!(r1.pos_err_mean >= 0.0 && r1.yaw_err_mean >= 0.0 && r1.pos_err_p95 >= 0.0);

    let mut other = cfg.clone();
    other.env.resolution = 80;
    let err = evaluate(&other, &policy, 5).unwrap_err();
    assert!(matches!(err, HarnessError::SpecMismatch(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
    other = cfg.clone();
    other.algorithm = Algorithm::Ddpg;
    assert!(matches!(evaluate(&other, &policy, 5), Err(HarnessError::SpecMismatch(_))));
}

#[test]
fn oracle_solves_every_observation_mode() {
    for (mode, grab) in [(ObservationMode::Depth, true), (ObservationMode::Depth, false), (ObservationMode::DepthRgb, true), (ObservationMode::GoalOffset, true)] {
        let mut cfg = RunConfig::default();
        cfg.env.resolution = 32;
        cfg.env.observation = mode;
        cfg.env.frame_grab = grab;
        let r = evaluate(&cfg, &EvalPolicy::Oracle, 25).unwrap();
        assert_eq!(r.success_rate, 1.0, "{mode:?} grab {grab}");
        assert!(r.pos_err_p95 < 1e-9 && r.yaw_err_p95 < 1e-9, "{r:?}");
    }
}

/// Fraction of `[lo, hi]` covered by `[c - tol, c + tol]`.
fn covered(c: f64, tol: f64, iv: Interval) -> f64 {
    ((c + tol).min(iv.hi) - (c - tol).max(iv.lo)).max(0.0) / (iv.hi - iv.lo)
}

/// Probability that one uniform action lands in the goal region.
fn step_probability(g: &GoalRegion, b: &WorkspaceBounds, support_top: f64) -> f64 {
    let px = covered(g.center.x, g.xy_tol, b.x);
    let py = covered(g.center.y, g.xy_tol, b.y);
    let z_lo = g.center.z - support_top + g.z_range[0];
    let z_hi = g.center.z - support_top + g.z_range[1];
    let pz = (z_hi.min(b.z.hi) - z_lo.max(b.z.lo)).max(0.0) / (b.z.hi - b.z.lo);
    let pyaw = (2.0 * g.yaw_tol_deg / g.yaw_period_deg).min(1.0);
    px * py * pz * pyaw
}

/// Runs uniform random actions and returns `(successes, expected successes, variance)`.
fn random_against_geometry(cfg: &RunConfig, lesson: &Lesson, episodes: usize) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut expected, mut var) = (0.0, 0.0);
    let mut last_seed = None;
    let t = cfg.env.max_steps as i32;
    let r = evaluate_with(cfg, lesson, episodes, 5, |env, _| {
        let ep = env.episode_config().unwrap();
        if last_seed != Some(ep.seed) {
            last_seed = Some(ep.seed);
            let p = step_probability(env.goal().unwrap(), &cfg.env.bounds, ep.support_top_z());
            let q = 1.0 - (1.0 - p).powi(t);
            expected += q;
            var += q * (1.0 - q);
        }
        Ok(Action(std::array::from_fn(|_| rng.random_range(-1.0..=1.0))))
    })
    .unwrap();
    (r.success_rate * episodes as f64, expected, var)
}

#[test]
fn random_policy_matches_goal_volume_ratio() {
    let mut cfg = RunConfig::default();
    cfg.env.observation = ObservationMode::GoalOffset;
    cfg.env.max_steps = 2;
    cfg.env.ranges.shape_weights = [1.0, 0.0, 0.0];
    let coarse = Lesson::fixed(0.1, [0.0, 0.2], 45.0);
    let n = 20_000;
    let (hits, expected, var) = random_against_geometry(&cfg, &coarse, n);
    assert!(expected > 400.0, "expected {expected}");
    assert!((hits - expected).abs() < 4.0 * var.sqrt(), "hits {hits} expected {expected} sd {}", var.sqrt());

    // the last lesson's region is ~1e-7 of the action box: successes stay Poisson-rare
    let cfg = RunConfig { env: grasplab::env::EnvConfig { observation: ObservationMode::GoalOffset, ..Default::default() }, ..RunConfig::default() };
    let last = cfg.eval_lesson().unwrap();
    assert!((last.xy_tol - 0.01).abs() < 1e-12 && (last.yaw_tol_deg - 2.0).abs() < 1e-12);
    let (hits, expected, _) = random_against_geometry(&cfg, &last, 20_000);
    assert!(expected < 0.05, "expected {expected}");
    assert!(hits <= 2.0, "{hits} successes where {expected} were expected");
}

fn pinned() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.env.resolution = 32;
    let r = &mut cfg.env.ranges;
    r.block_count = [1, 1];
    r.shape_weights = [1.0, 0.0, 0.0];
    for iv in [
        &mut r.block_x,
        &mut r.block_y,
        &mut r.block_yaw_deg,
        &mut r.block_scale,
        &mut r.block_length,
        &mut r.block_width,
        &mut r.block_height,
        &mut r.wall_fraction,
        &mut r.light_x,
        &mut r.light_y,
        &mut r.light_z,
        &mut r.light_intensity,
        &mut r.camera_x,
        &mut r.camera_y,
        &mut r.camera_z,
        &mut r.look_x,
        &mut r.look_y,
        &mut r.look_z,
        &mut r.camera_roll_deg,
        &mut r.near,
        &mut r.far,
    ] {
        *iv = Interval::point(iv.mid());
    }
    cfg
}

#[test]
fn pinned_scene_matches_golden_frame() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = pinned();
    cfg.env.noise_sigma = 0.0;
    let files = render_frame(&cfg, 11, dir.path()).unwrap();
    let got = fs::read_to_string(&files[0]).unwrap();
    let golden = include_str!("data/pinned_depth_32.pgm");
    assert_eq!(got, golden);
    // the seed only drives randomization, which is pinned away
    let again = render_frame(&cfg, 12, dir.path()).unwrap();
    assert_eq!(fs::read_to_string(&again[0]).unwrap(), golden);
}

#[test]
fn noise_changes_depth_only_within_its_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = pinned();
    cfg.env.noise_sigma = 0.0;
    let clean = read_pgm(&fs::read_to_string(&render_frame(&cfg, 4, dir.path()).unwrap()[0]).unwrap()).unwrap();
    cfg.env.noise_sigma = 0.005;
    let noisy = read_pgm(&fs::read_to_string(&render_frame(&cfg, 4, dir.path()).unwrap()[0]).unwrap()).unwrap();
    // one level is 1.6 m / 255; 6 sigma is 0.03 m, under five levels
    let diffs: Vec<i32> = clean
        .data
        .iter()
        .zip(&noisy.data)
        .filter(|(&a, _)| (8..248).contains(&a))
        .map(|(&a, &b)| i32::from(a) - i32::from(b))
        .collect();
    assert!(diffs.len() > 200, "{} unclamped pixels", diffs.len());
    assert!(diffs.iter().all(|d| d.abs() <= 5), "max {:?}", diffs.iter().map(|d| d.abs()).max());
    assert!(diffs.iter().any(|&d| d != 0));
    let mean = diffs.iter().sum::<i32>() as f64 / diffs.len() as f64;
    assert!(mean.abs() < 0.25, "bias {mean}");
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_grasplab")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_verbs_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();

    let (code, stdout, _) = cli(&["dump-schedule"]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().count(), 20);

    let (code, _, stderr) = cli(&["train", "--override", "ppo.clip=7", "--out", out]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.starts_with("error[config]"));

    let (code, _, stderr) = cli(&["evaluate", "--checkpoint", "/nonexistent/x.glck"]);
    assert_eq!(code, 3, "{stderr}");

    let (code, stdout, stderr) =
        cli(&["train", "--seed", "3", "--override", "env.resolution=32", "--override", "train.budget=150", "--out", out]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("steps 1"), "{stdout}");
    let ckpt = dir.path().join("final.glck");
    let ckpt = ckpt.to_str().unwrap();
    let (code, stdout, _) = cli(&["evaluate", "--checkpoint", ckpt, "--episodes", "3", "--override", "env.resolution=32"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("success_rate"));
    let (code, _, stderr) = cli(&["evaluate", "--checkpoint", ckpt, "--episodes", "3"]);
    assert_eq!(code, 4, "{stderr}");

    let (code, stdout, _) = cli(&["evaluate", "--policy", "oracle", "--episodes", "4", "--override", "env.resolution=32"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("success_rate = 1.0"), "{stdout}");

    let frames = dir.path().join("frames");
    let (code, stdout, _) = cli(&[
        "render-frame",
        "--seed",
        "8",
        "--override",
        "env.observation=\"depth_rgb\"",
        "--override",
        "env.resolution=32",
        "--out",
        frames.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().count(), 3);
}
