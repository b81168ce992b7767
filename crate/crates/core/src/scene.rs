//! Randomized episode scenes, the tool body, goal regions and contact bookkeeping.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::Lesson;
use crate::geom::{
    compose_shape, normalize, obb_overlap, shape_centroid, wrap_deg_period, GeomError, Obb, Pose, Rotation,
    ShapeKind, ShapeModel, Vec3,
};

pub const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("could not place block {block} without overlap in {attempts} attempts")]
    PlacementFailure { block: usize, attempts: usize },
    #[error("invalid randomization ranges: {0}")]
    BadRanges(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("scene document: {0}")]
    Document(String),
}

/// Closed interval `[lo, hi]`, written as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

impl From<[f64; 2]> for Interval {
    fn from(a: [f64; 2]) -> Self {
        Interval::new(a[0], a[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "index")]
pub enum TargetRule {
    /// The block whose centroid is closest to the camera.
    NearestCamera,
    /// A fixed position in the block list (clamped to the last block).
    Index(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportSpec {
    pub center: Vec3,
    pub dims: Vec3,
}

impl Default for SupportSpec {
    fn default() -> Self {
        // 0.8 x 0.6 x 0.1 m table in front of the robot base, top face at z = 0.1
        Self { center: Vec3::new(0.0, 0.6, 0.05), dims: Vec3::new(0.8, 0.6, 0.1) }
    }
}

impl SupportSpec {
    pub fn obb(&self) -> Obb {
        Obb::axis_aligned(self.center, self.dims * 0.5)
    }

    pub fn top_z(&self) -> f64 {
        self.center.z + self.dims.z * 0.5
    }
}

/// Per-episode sampling ranges. Block and camera coordinates are world-frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomizationRanges {
    pub block_count: [usize; 2],
    /// Relative weights of box, L and U blocks.
    pub shape_weights: [f64; 3],
    pub block_x: Interval,
    pub block_y: Interval,
    pub block_yaw_deg: Interval,
    pub block_scale: Interval,
    pub block_length: Interval,
    pub block_width: Interval,
    pub block_height: Interval,
    /// L/U wall thickness as a fraction of the smaller lateral dimension.
    pub wall_fraction: Interval,
    pub light_x: Interval,
    pub light_y: Interval,
    pub light_z: Interval,
    pub light_intensity: Interval,
    pub camera_x: Interval,
    pub camera_y: Interval,
    pub camera_z: Interval,
    pub look_x: Interval,
    pub look_y: Interval,
    pub look_z: Interval,
    pub camera_roll_deg: Interval,
    pub near: Interval,
    pub far: Interval,
    pub support: SupportSpec,
    pub target: TargetRule,
}

impl Default for RandomizationRanges {
    fn default() -> Self {
        Self {
            block_count: [1, 3],
            shape_weights: [1.0, 1.0, 1.0],
            block_x: Interval::new(-0.25, 0.25),
            block_y: Interval::new(0.45, 0.75),
            block_yaw_deg: Interval::new(-180.0, 180.0),
            block_scale: Interval::new(0.8, 1.2),
            block_length: Interval::new(0.10, 0.16),
            block_width: Interval::new(0.06, 0.12),
            block_height: Interval::new(0.04, 0.07),
            wall_fraction: Interval::new(0.3, 0.45),
            light_x: Interval::new(-0.5, 0.5),
            light_y: Interval::new(0.2, 1.0),
            light_z: Interval::new(1.2, 2.0),
            light_intensity: Interval::new(0.7, 1.3),
            // near the robot base, looking over the support
            camera_x: Interval::new(-0.05, 0.05),
            camera_y: Interval::new(-0.15, -0.05),
            camera_z: Interval::new(0.85, 0.95),
            look_x: Interval::new(-0.03, 0.03),
            look_y: Interval::new(0.57, 0.63),
            look_z: Interval::new(0.08, 0.12),
            camera_roll_deg: Interval::new(-3.0, 3.0),
            near: Interval::new(0.3, 0.5),
            far: Interval::new(1.8, 2.2),
            support: SupportSpec::default(),
            target: TargetRule::NearestCamera,
        }
    }
}

impl RandomizationRanges {
    pub fn validate(&self) -> Result<(), SceneError> {
        let named = [
            ("block_x", self.block_x),
            ("block_y", self.block_y),
            ("block_yaw_deg", self.block_yaw_deg),
            ("block_scale", self.block_scale),
            ("block_length", self.block_length),
            ("block_width", self.block_width),
            ("block_height", self.block_height),
            ("wall_fraction", self.wall_fraction),
            ("light_x", self.light_x),
            ("light_y", self.light_y),
            ("light_z", self.light_z),
            ("light_intensity", self.light_intensity),
            ("camera_x", self.camera_x),
            ("camera_y", self.camera_y),
            ("camera_z", self.camera_z),
            ("look_x", self.look_x),
            ("look_y", self.look_y),
            ("look_z", self.look_z),
            ("camera_roll_deg", self.camera_roll_deg),
            ("near", self.near),
            ("far", self.far),
        ];
        for (name, iv) in named {
            if !iv.is_valid() {
                return Err(SceneError::BadRanges(format!("{name}: [{}, {}]", iv.lo, iv.hi)));
            }
        }
        for (name, iv) in [
            ("block_scale", self.block_scale),
            ("block_length", self.block_length),
            ("block_width", self.block_width),
            ("block_height", self.block_height),
            ("near", self.near),
        ] {
            if iv.lo <= 0.0 {
                return Err(SceneError::BadRanges(format!("{name} must be strictly positive")));
            }
        }
        if !(self.wall_fraction.lo > 0.0 && self.wall_fraction.hi < 0.5) {
            return Err(SceneError::BadRanges("wall_fraction must lie in (0, 0.5)".into()));
        }
        if self.light_intensity.lo < 0.0 {
            return Err(SceneError::BadRanges("light intensity must be non-negative".into()));
        }
        if self.near.hi >= self.far.lo {
            return Err(SceneError::BadRanges("near clip must stay below far clip".into()));
        }
        let [lo, hi] = self.block_count;
        if !(1 <= lo && lo <= hi && hi <= 3) {
            return Err(SceneError::BadRanges(format!("block_count [{lo}, {hi}] outside 1..=3")));
        }
        if self.shape_weights.iter().any(|w| !(*w >= 0.0)) || self.shape_weights.iter().sum::<f64>() <= 0.0 {
            return Err(SceneError::BadRanges("shape weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// Unscaled shape; world geometry is `pose * (scale * part)`.
    pub shape: ShapeModel,
    pub pose: Pose,
    pub scale: f64,
}

impl Block {
    pub fn world_parts(&self) -> Vec<Obb> {
        self.shape
            .parts
            .iter()
            .map(|p| {
                let scaled = Obb::new(p.center * self.scale, p.half_extents * self.scale, p.rotation);
                self.pose.transform_obb(&scaled)
            })
            .collect()
    }

    pub fn centroid(&self) -> Vec3 {
        self.pose.transform_point(shape_centroid(&self.shape) * self.scale)
    }

    pub fn height(&self) -> f64 {
        self.shape.dims.z * self.scale
    }

    pub fn top_z(&self) -> f64 {
        self.pose.position.z + 0.5 * self.height()
    }

    pub fn bottom_z(&self) -> f64 {
        self.pose.position.z - 0.5 * self.height()
    }

    pub fn yaw_deg(&self) -> f64 {
        self.pose.rotation.yaw_deg()
    }

    /// Outward normal of the top face.
    pub fn up(&self) -> Vec3 {
        self.pose.rotation.rotate(Vec3::Z)
    }

    pub fn overlaps(&self, other: &Block) -> bool {
        let a = self.world_parts();
        let b = other.world_parts();
        a.iter().any(|p| b.iter().any(|q| obb_overlap(p, q)))
    }
}

/// Camera extrinsics plus the per-episode clip planes. The camera looks along
/// its local `+z`, with `+x` right and `+y` down in the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPlacement {
    pub pose: Pose,
    pub near: f64,
    pub far: f64,
}

impl CameraPlacement {
    pub fn look_at(eye: Vec3, target: Vec3, roll_deg: f64, near: f64, far: f64) -> Self {
        Self { pose: Pose::new(eye, look_at_rotation(eye, target, roll_deg)), near, far }
    }
}

/// Camera rotation whose optical axis points from `eye` to `target`, image-up
/// towards world `+z` (or `+y` for a straight-down view), then rolled.
pub fn look_at_rotation(eye: Vec3, target: Vec3, roll_deg: f64) -> Rotation {
    let fwd = normalize(target - eye).unwrap_or(-Vec3::Z);
    let mut right = fwd.cross(Vec3::Z);
    if right.norm() < 1e-6 {
        right = fwd.cross(Vec3::Y);
    }
    let right = normalize(right).unwrap_or(Vec3::X);
    let down = fwd.cross(right);
    let base = Rotation::from_basis(right, down, fwd);
    base * Rotation::from_axis_angle(Vec3::Z, roll_deg.to_radians())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub position: Vec3,
    pub intensity: f64,
}

/// One sampled scene. Immutable for the duration of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub seed: u64,
    pub target_index: usize,
    pub blocks: Vec<Block>,
    pub support: Obb,
    pub camera: CameraPlacement,
    pub light: Light,
}

impl EpisodeConfig {
    pub fn target(&self) -> &Block {
        &self.blocks[self.target_index]
    }

    pub fn support_top_z(&self) -> f64 {
        self.support.center.z + self.support.half_extents.z
    }

    /// Every solid in the scene (support first, then block parts in order).
    pub fn solids(&self) -> Vec<Obb> {
        let mut out = vec![self.support];
        for b in &self.blocks {
            out.extend(b.world_parts());
        }
        out
    }

    pub fn to_toml(&self) -> Result<String, SceneError> {
        toml::to_string_pretty(self).map_err(|e| SceneError::Document(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self, SceneError> {
        toml::from_str(s).map_err(|e| SceneError::Document(e.to_string()))
    }
}

fn pick_kind<R: Rng + ?Sized>(rng: &mut R, weights: &[f64; 3]) -> ShapeKind {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in ShapeKind::ALL.iter().zip(weights) {
        if u < *w {
            return *k;
        }
        u -= w;
    }
    // u landed on the upper edge through round-off
    *ShapeKind::ALL.iter().zip(weights).rev().find(|(_, w)| **w > 0.0).unwrap().0
}

/// Draws a scene. The draw order is fixed, so the same rng state and ranges
/// always give the same scene.
pub fn sample_episode<R: Rng + ?Sized>(rng: &mut R, ranges: &RandomizationRanges, seed: u64) -> Result<EpisodeConfig, SceneError> {
    ranges.validate()?;
    let support = ranges.support.obb();
    let support_top = ranges.support.top_z();

    let [cmin, cmax] = ranges.block_count;
    let count = if cmin == cmax { cmin } else { rng.random_range(cmin..=cmax) };
    let mut blocks: Vec<Block> = Vec::with_capacity(count);
    for i in 0..count {
        let kind = pick_kind(rng, &ranges.shape_weights);
        let dims = Vec3::new(
            ranges.block_length.sample(rng),
            ranges.block_width.sample(rng),
            ranges.block_height.sample(rng),
        );
        let wall = ranges.wall_fraction.sample(rng) * dims.x.min(dims.y);
        let shape = compose_shape(kind, dims, wall)?;
        let scale = ranges.block_scale.sample(rng);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let yaw = ranges.block_yaw_deg.sample(rng);
            let x = ranges.block_x.sample(rng);
            let y = ranges.block_y.sample(rng);
            let z = support_top + 0.5 * dims.z * scale;
            let cand = Block { shape: shape.clone(), pose: Pose::from_xyz_yaw(x, y, z, yaw), scale };
            if blocks.iter().all(|b| !b.overlaps(&cand)) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(b) => blocks.push(b),
            None => return Err(SceneError::PlacementFailure { block: i, attempts: PLACEMENT_ATTEMPTS }),
        }
    }

    let light = Light {
        position: Vec3::new(ranges.light_x.sample(rng), ranges.light_y.sample(rng), ranges.light_z.sample(rng)),
        intensity: ranges.light_intensity.sample(rng),
    };
    let eye = Vec3::new(ranges.camera_x.sample(rng), ranges.camera_y.sample(rng), ranges.camera_z.sample(rng));
    let look = Vec3::new(ranges.look_x.sample(rng), ranges.look_y.sample(rng), ranges.look_z.sample(rng));
    let roll = ranges.camera_roll_deg.sample(rng);
    let near = ranges.near.sample(rng);
    let far = ranges.far.sample(rng);
    let camera = CameraPlacement::look_at(eye, look, roll, near, far);

    let target_index = match ranges.target {
        TargetRule::Index(i) => i.min(blocks.len() - 1),
        TargetRule::NearestCamera => {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, b) in blocks.iter().enumerate() {
                let d = (b.centroid() - eye).norm();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        }
    };

    Ok(EpisodeConfig { seed, target_index, blocks, support, camera, light })
}

/// Goal box above the target's top face plus a yaw band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    /// Target centroid lifted by half the block height: the top-face centre.
    pub center: Vec3,
    pub xy_tol: f64,
    /// Allowed tooltip height above `center.z`.
    pub z_range: [f64; 2],
    pub yaw_tol_deg: f64,
    pub target_yaw_deg: f64,
    /// 180 for rectangular blocks, 360 otherwise.
    pub yaw_period_deg: f64,
}

impl GoalRegion {
    /// The point in the middle of the tolerance box.
    pub fn aim_point(&self) -> Vec3 {
        self.center + Vec3::new(0.0, 0.0, 0.5 * (self.z_range[0] + self.z_range[1]))
    }

    /// Yaw error wrapped into (-period/2, period/2].
    pub fn yaw_error_deg(&self, yaw_deg: f64) -> f64 {
        wrap_deg_period(yaw_deg - self.target_yaw_deg, self.yaw_period_deg)
    }
}

pub fn goal_region(config: &EpisodeConfig, lesson: &Lesson) -> GoalRegion {
    let t = config.target();
    GoalRegion {
        center: t.centroid() + Vec3::new(0.0, 0.0, 0.5 * t.height()),
        xy_tol: lesson.xy_tol,
        z_range: lesson.z_range,
        yaw_tol_deg: lesson.yaw_tol_deg,
        target_yaw_deg: t.yaw_deg(),
        yaw_period_deg: t.shape.kind.yaw_period_deg(),
    }
}

/// Collision proxy of the end effector: a suction head plus a vertical segment
/// standing in for the arm above it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolDims {
    pub head_half_width: f64,
    pub head_height: f64,
    pub segment_half_width: f64,
    pub segment_length: f64,
    /// Suction-face centre relative to the pose origin, tool frame.
    pub tip_offset: Vec3,
}

impl Default for ToolDims {
    fn default() -> Self {
        Self {
            head_half_width: 0.015,
            head_height: 0.05,
            segment_half_width: 0.02,
            segment_length: 0.5,
            tip_offset: Vec3::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolState {
    pub pose: Pose,
    pub tooltip: Vec3,
    /// Outward normal of the suction face.
    pub z_ee: Vec3,
    /// `[suction head, approach segment]`.
    pub body: [Obb; 2],
}

impl ToolState {
    pub fn head(&self) -> &Obb {
        &self.body[0]
    }

    pub fn yaw_deg(&self) -> f64 {
        self.pose.rotation.yaw_deg()
    }
}

/// Places the tool rigidly at `p`. The suction face points down at identity.
pub fn tool_from_pose(p: Pose, dims: &ToolDims) -> ToolState {
    let tip_local = dims.tip_offset;
    let head_local = Obb::axis_aligned(
        tip_local + Vec3::new(0.0, 0.0, 0.5 * dims.head_height),
        Vec3::new(dims.head_half_width, dims.head_half_width, 0.5 * dims.head_height),
    );
    let seg_local = Obb::axis_aligned(
        tip_local + Vec3::new(0.0, 0.0, dims.head_height + 0.5 * dims.segment_length),
        Vec3::new(dims.segment_half_width, dims.segment_half_width, 0.5 * dims.segment_length),
    );
    ToolState {
        pose: p,
        tooltip: p.transform_point(tip_local),
        z_ee: p.rotation.rotate(-Vec3::Z),
        body: [p.transform_obb(&head_local), p.transform_obb(&seg_local)],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContactReport {
    pub touched_target: bool,
    /// Obstacles touched by any part of the tool, each counted once; obstacles
    /// are the support and each non-target block.
    pub undesired_collisions: u32,
}

pub fn classify_contacts(tool: &ToolState, config: &EpisodeConfig) -> ContactReport {
    let target_parts = config.target().world_parts();
    let touched_target = target_parts.iter().any(|p| obb_overlap(tool.head(), p));
    let hits = |parts: &[Obb]| tool.body.iter().any(|tb| parts.iter().any(|p| obb_overlap(tb, p)));
    let mut undesired = u32::from(hits(std::slice::from_ref(&config.support)));
    for (i, block) in config.blocks.iter().enumerate() {
        if i != config.target_index && hits(&block.world_parts()) {
            undesired += 1;
        }
    }
    ContactReport { touched_target, undesired_collisions: undesired }
}

/// `(position inside the goal box, yaw inside the band)`.
pub fn in_goal(tool: &ToolState, g: &GoalRegion) -> (bool, bool) {
    let d = tool.tooltip - g.center;
    let pos_ok = d.x.abs() <= g.xy_tol && d.y.abs() <= g.xy_tol && d.z >= g.z_range[0] && d.z <= g.z_range[1];
    let rot_ok = g.yaw_error_deg(tool.yaw_deg()).abs() <= g.yaw_tol_deg;
    (pos_ok, rot_ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pinned_ranges() -> RandomizationRanges {
        let p = Interval::point;
        RandomizationRanges {
            block_count: [1, 1],
            shape_weights: [1.0, 0.0, 0.0],
            block_x: p(0.05),
            block_y: p(0.6),
            block_yaw_deg: p(30.0),
            block_scale: p(1.0),
            block_length: p(0.2),
            block_width: p(0.1),
            block_height: p(0.05),
            wall_fraction: p(0.3),
            light_x: p(0.0),
            light_y: p(0.6),
            light_z: p(1.5),
            light_intensity: p(1.0),
            camera_x: p(0.0),
            camera_y: p(-0.1),
            camera_z: p(0.9),
            look_x: p(0.0),
            look_y: p(0.6),
            look_z: p(0.1),
            camera_roll_deg: p(0.0),
            near: p(0.4),
            far: p(2.0),
            support: SupportSpec::default(),
            target: TargetRule::NearestCamera,
        }
    }

    #[test]
    fn pinned_ranges_give_pinned_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = sample_episode(&mut rng, &pinned_ranges(), 1).unwrap();
        assert_eq!(c.blocks.len(), 1);
        let b = &c.blocks[0];
        assert_eq!(b.shape.kind, ShapeKind::Box);
        assert!((b.pose.position - Vec3::new(0.05, 0.6, 0.125)).norm() < 1e-15);
        assert!((b.yaw_deg() - 30.0).abs() < 1e-12);
        assert_eq!(c.camera.near, 0.4);
        assert_eq!(c.light.intensity, 1.0);
        // any other seed yields the identical scene
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let c2 = sample_episode(&mut rng, &pinned_ranges(), 1).unwrap();
        assert_eq!(c, c2);
    }

    #[test]
    fn same_seed_same_scene() {
        let r = RandomizationRanges::default();
        let a = sample_episode(&mut ChaCha8Rng::seed_from_u64(5), &r, 5).unwrap();
        let b = sample_episode(&mut ChaCha8Rng::seed_from_u64(5), &r, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_toml().unwrap(), b.to_toml().unwrap());
    }

    #[test]
    fn scene_document_round_trip() {
        let a = sample_episode(&mut ChaCha8Rng::seed_from_u64(8), &RandomizationRanges::default(), 8).unwrap();
        let text = a.to_toml().unwrap();
        assert!(text.contains("target_index"));
        assert_eq!(EpisodeConfig::from_toml(&text).unwrap(), a);
    }

    #[test]
    fn sweep_blocks_rest_on_support_without_overlap() {
        let r = RandomizationRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for s in 0..10_000u64 {
            let c = sample_episode(&mut rng, &r, s).unwrap();
            let top = c.support_top_z();
            for (i, b) in c.blocks.iter().enumerate() {
                assert!((b.bottom_z() - top).abs() < 1e-9);
                for p in b.world_parts() {
                    assert!((p.z_extent().0 - top).abs() < 1e-9);
                }
                for q in &c.blocks[i + 1..] {
                    assert!(!b.overlaps(q));
                }
            }
            assert!(c.target_index < c.blocks.len());
        }
    }

    #[test]
    fn impossible_placement_fails() {
        let mut r = pinned_ranges();
        r.block_count = [2, 2];
        let err = sample_episode(&mut ChaCha8Rng::seed_from_u64(0), &r, 0).unwrap_err();
        assert_eq!(err, SceneError::PlacementFailure { block: 1, attempts: PLACEMENT_ATTEMPTS });
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut r = RandomizationRanges::default();
        r.block_scale = Interval::new(0.0, 1.0);
        assert!(matches!(r.validate(), Err(SceneError::BadRanges(_))));
        let mut r = RandomizationRanges::default();
        r.block_x = Interval::new(1.0, 0.0);
        assert!(r.validate().is_err());
    }

    fn box_scene(centroid_z: f64) -> EpisodeConfig {
        let shape = compose_shape(ShapeKind::Box, Vec3::new(0.2, 0.1, 0.05), 0.0).unwrap();
        let block = Block { shape, pose: Pose::from_xyz_yaw(0.0, 0.6, centroid_z, 20.0), scale: 1.0 };
        EpisodeConfig {
            seed: 0,
            target_index: 0,
            blocks: vec![block],
            support: SupportSpec::default().obb(),
            camera: CameraPlacement::look_at(Vec3::new(0.0, -0.1, 0.9), Vec3::new(0.0, 0.6, 0.1), 0.0, 0.4, 2.0),
            light: Light { position: Vec3::new(0.0, 0.6, 1.5), intensity: 1.0 },
        }
    }

    #[test]
    fn goal_center_sits_on_top_face() {
        let c = box_scene(0.125);
        let lesson = Lesson::fixed(0.1, [0.01, 0.02], 10.0);
        let g = goal_region(&c, &lesson);
        assert!((g.center.z - 0.15).abs() < 1e-15);
        assert!((g.center.z - 0.125 - 0.025).abs() < 1e-15);
        assert_eq!(g.xy_tol, 0.1);
        assert_eq!(g.z_range, [0.01, 0.02]);
        assert!((g.target_yaw_deg - 20.0).abs() < 1e-12);
        assert_eq!(g.yaw_period_deg, 180.0);
    }

    #[test]
    fn tool_conventions() {
        let d = ToolDims::default();
        let t = tool_from_pose(Pose::default(), &d);
        assert!((t.z_ee - (-Vec3::Z)).norm() < 1e-15);
        assert_eq!(t.tooltip, Vec3::ZERO);
        assert!((t.head().center.z - 0.025).abs() < 1e-15);

        let d = ToolDims { tip_offset: Vec3::new(0.03, -0.02, 0.0), ..ToolDims::default() };
        let p = Pose::from_xyz_yaw(0.4, 0.5, 0.3, 0.0);
        let a = tool_from_pose(p, &d);
        let b = tool_from_pose(Pose::from_xyz_yaw(0.4, 0.5, 0.3, 180.0), &d);
        assert!((a.tooltip.x - 0.4 + (b.tooltip.x - 0.4)).abs() < 1e-12);
        assert!((a.tooltip.y - 0.5 + (b.tooltip.y - 0.5)).abs() < 1e-12);

        let shift = Vec3::new(0.1, -0.2, 0.05);
        let c = tool_from_pose(Pose::new(p.position + shift, p.rotation), &d);
        assert!((c.tooltip - a.tooltip - shift).norm() < 1e-12);
    }

    #[test]
    fn contacts_far_above_and_on_target() {
        let c = box_scene(0.125);
        let d = ToolDims::default();
        let far = tool_from_pose(Pose::from_xyz_yaw(0.0, 0.6, 1.5, 0.0), &d);
        assert_eq!(classify_contacts(&far, &c), ContactReport { touched_target: false, undesired_collisions: 0 });
        // tooltip 1 cm into the block top
        let touch = tool_from_pose(Pose::from_xyz_yaw(0.0, 0.6, 0.14, 0.0), &d);
        assert_eq!(classify_contacts(&touch, &c), ContactReport { touched_target: true, undesired_collisions: 0 });
    }

    #[test]
    fn head_in_support_and_other_block_counts_two() {
        let mut c = box_scene(0.125);
        // low block so the approach segment clears it
        let shape = compose_shape(ShapeKind::Box, Vec3::new(0.1, 0.1, 0.03), 0.0).unwrap();
        c.blocks.push(Block { shape, pose: Pose::from_xyz_yaw(0.3, 0.6, 0.115, 0.0), scale: 1.0 });
        let d = ToolDims::default();
        // head straddles the edge of the second block and dips into the support
        let t = tool_from_pose(Pose::from_xyz_yaw(0.25, 0.6, 0.09, 0.0), &d);
        let r = classify_contacts(&t, &c);
        assert!(!r.touched_target);
        assert_eq!(r.undesired_collisions, 2);
    }

    #[test]
    fn in_goal_examples() {
        let c = box_scene(0.125);
        let g = goal_region(&c, &Lesson::fixed(0.1, [0.01, 0.02], 10.0));
        let d = ToolDims::default();
        let at = |dx: f64, dz: f64, yaw: f64| {
            tool_from_pose(Pose::from_xyz_yaw(g.center.x + dx, g.center.y, g.center.z + dz, yaw), &d)
        };
        assert_eq!(in_goal(&at(0.0, 0.015, 20.0), &g), (true, true));
        assert!(!in_goal(&at(0.2, 0.015, 20.0), &g).0);
        assert!(!in_goal(&at(0.0, 0.03, 20.0), &g).0);
        // a rectangle matches itself half a turn later
        assert!(in_goal(&at(0.0, 0.015, 200.0), &g).1);
    }

    #[test]
    fn yaw_wrap_for_asymmetric_block() {
        let g = GoalRegion {
            center: Vec3::ZERO,
            xy_tol: 0.1,
            z_range: [0.01, 0.02],
            yaw_tol_deg: 10.0,
            target_yaw_deg: 0.0,
            yaw_period_deg: 360.0,
        };
        let d = ToolDims::default();
        let t = |yaw| tool_from_pose(Pose::from_xyz_yaw(0.0, 0.0, 0.015, yaw), &d);
        assert!(!in_goal(&t(175.0), &g).1);
        assert!(in_goal(&t(359.0), &g).1);
        assert!((g.yaw_error_deg(359.0) + 1.0).abs() < 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn in_goal_translation_invariant(dx in -0.2f64..0.2, dy in -0.2f64..0.2, dz in -0.05f64..0.05, yaw in -180f64..180.0,
                                             sx in -2f64..2.0, sy in -2f64..2.0, sz in -2f64..2.0) {
                let c = box_scene(0.125);
                let g = goal_region(&c, &Lesson::fixed(0.1, [0.01, 0.02], 10.0));
                let d = ToolDims::default();
                let t = tool_from_pose(Pose::from_xyz_yaw(g.center.x + dx, g.center.y + dy, g.center.z + dz, yaw), &d);
                let s = Vec3::new(sx, sy, sz);
                let g2 = GoalRegion { center: g.center + s, ..g };
                let t2 = tool_from_pose(Pose::new(t.pose.position + s, t.pose.rotation), &d);
                // exact float equality can break right at a tolerance boundary
                let margin = |v: f64, tol: f64| (v.abs() - tol).abs() > 1e-9;
                prop_assume!(margin(dx, 0.1) && margin(dy, 0.1) && margin(dz - 0.015, 0.005));
                prop_assert_eq!(in_goal(&t, &g), in_goal(&t2, &g2));
            }

            #[test]
            fn adding_obstacle_never_lowers_collisions(x in -0.4f64..0.4, y in 0.3f64..0.9, z in 0.05f64..0.4,
                                                       bx in -0.35f64..0.35, by in 0.35f64..0.85) {
                let c = box_scene(0.125);
                let d = ToolDims::default();
                let t = tool_from_pose(Pose::from_xyz_yaw(x, y, z, 0.0), &d);
                let before = classify_contacts(&t, &c).undesired_collisions;
                let mut c2 = c.clone();
                let shape = compose_shape(ShapeKind::Box, Vec3::new(0.08, 0.08, 0.05), 0.0).unwrap();
                c2.blocks.push(Block { shape, pose: Pose::from_xyz_yaw(bx, by, 0.125, 0.0), scale: 1.0 });
                prop_assert!(classify_contacts(&t, &c2).undesired_collisions >= before);
            }
        }
    }
}
