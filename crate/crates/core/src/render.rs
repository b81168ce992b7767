//! Pinhole depth / RGB camera over a scene, sensor noise, 8-bit depth encoding
//! and the observation tensors handed to policies.
//!
//! Depth is the z-distance along the optical axis, as reported by structured
//! light sensors, not the Euclidean length of the pixel ray.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{normalize, ray_obb_hit, Obb, Vec3};
use crate::scene::{CameraPlacement, EpisodeConfig, Light};

/// Fixed encoding range of the simulated sensor, meters.
pub const DEPTH_MIN_V: f64 = 0.4;
pub const DEPTH_MAX_V: f64 = 2.0;

pub const SUPPORTED_RESOLUTIONS: [usize; 4] = [32, 80, 128, 256];

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("depth {value} outside encoding range [{min_v}, {max_v}]")]
    Range { value: f64, min_v: f64, max_v: f64 },
    #[error("invalid encoding range [{0}, {1}]")]
    BadRange(f64, f64),
    #[error("image shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid camera: {0}")]
    BadCamera(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub vfov_deg: f64,
    pub near: f64,
    pub far: f64,
}

impl CameraIntrinsics {
    /// Square sensor at one of the supported network resolutions.
    pub fn new(resolution: usize, vfov_deg: f64, near: f64, far: f64) -> Result<Self, RenderError> {
        let c = Self { width: resolution, height: resolution, vfov_deg, near, far };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !SUPPORTED_RESOLUTIONS.contains(&self.width) || !SUPPORTED_RESOLUTIONS.contains(&self.height) {
            return Err(RenderError::BadCamera(format!("unsupported resolution {}x{}", self.width, self.height)));
        }
        self.validate_optics()
    }

    fn validate_optics(&self) -> Result<(), RenderError> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(RenderError::BadCamera(format!("clip planes {} / {}", self.near, self.far)));
        }
        if !(self.vfov_deg > 0.0 && self.vfov_deg < 180.0) {
            return Err(RenderError::BadCamera(format!("vertical fov {}", self.vfov_deg)));
        }
        Ok(())
    }

    pub fn with_clip(self, near: f64, far: f64) -> Self {
        Self { near, far, ..self }
    }

    /// Unit ray through the centre of pixel `(u, v)` in the camera frame.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Vec3 {
        let tan_v = (self.vfov_deg.to_radians() * 0.5).tan();
        let tan_h = tan_v * self.width as f64 / self.height as f64;
        let x = ((u as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * tan_h;
        let y = ((v as f64 + 0.5) / self.height as f64 * 2.0 - 1.0) * tan_v;
        normalize(Vec3::new(x, y, 1.0)).expect("pixel ray is never zero")
    }
}

/// Row-major z-depth in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn filled(width: usize, height: usize, near: f64, far: f64, v: f64) -> Self {
        Self { width, height, near, far, data: vec![v; width * height] }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }
}

/// Row-major RGB with channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

/// 8-bit depth frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthFrame8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

struct Hit {
    t: f64,
    normal: Vec3,
    /// Index into the solid list.
    solid: usize,
}

fn cast(origin: Vec3, dir: Vec3, solids: &[Obb]) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, s) in solids.iter().enumerate() {
        if let Some(h) = ray_obb_hit(origin, dir, s) {
            if best.as_ref().map_or(true, |b| h.t < b.t) {
                best = Some(Hit { t: h.t, normal: h.normal, solid: i });
            }
        }
    }
    best
}

/// Depth of the episode scene (support and blocks).
pub fn render_depth(config: &EpisodeConfig, cam: &CameraIntrinsics) -> DepthImage {
    render_depth_solids(&config.camera, cam, &config.solids())
}

/// Depth of an arbitrary solid list seen from `placement`.
pub fn render_depth_solids(placement: &CameraPlacement, cam: &CameraIntrinsics, solids: &[Obb]) -> DepthImage {
    let origin = placement.pose.position;
    let rot = placement.pose.rotation;
    let mut data = Vec::with_capacity(cam.width * cam.height);
    for v in 0..cam.height {
        for u in 0..cam.width {
            let d_cam = cam.pixel_ray(u, v);
            let z = match cast(origin, rot.rotate(d_cam), solids) {
                Some(h) => h.t * d_cam.z,
                None => cam.far,
            };
            data.push(z.clamp(cam.near, cam.far));
        }
    }
    DepthImage { width: cam.width, height: cam.height, near: cam.near, far: cam.far, data }
}

/// Adds i.i.d. zero-mean Gaussian noise per pixel (row-major rng order) and re-clamps.
pub fn add_noise<R: Rng + ?Sized>(img: &DepthImage, sigma: f64, rng: &mut R) -> DepthImage {
    if sigma == 0.0 {
        return img.clone();
    }
    let data = img
        .data
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            (v + sigma * n).clamp(img.near, img.far)
        })
        .collect();
    DepthImage { data, ..img.clone() }
}

fn check_range(min_v: f64, max_v: f64) -> Result<(), RenderError> {
    if !(min_v < max_v) || !min_v.is_finite() || !max_v.is_finite() {
        return Err(RenderError::BadRange(min_v, max_v));
    }
    Ok(())
}

/// `round((v - min_v) * 255 / (max_v - min_v))` per pixel.
pub fn quantize(img: &DepthImage, min_v: f64, max_v: f64) -> Result<DepthFrame8, RenderError> {
    check_range(min_v, max_v)?;
    let scale = 255.0 / (max_v - min_v);
    let mut data = Vec::with_capacity(img.data.len());
    for &v in &img.data {
        if !(v >= min_v && v <= max_v) {
            return Err(RenderError::Range { value: v, min_v, max_v });
        }
        data.push(((v - min_v) * scale).round() as u8);
    }
    Ok(DepthFrame8 { width: img.width, height: img.height, data })
}

/// `min_v + q * (max_v - min_v) / 255` per pixel.
pub fn dequantize(q: &DepthFrame8, min_v: f64, max_v: f64) -> Result<DepthImage, RenderError> {
    check_range(min_v, max_v)?;
    let data = q.data.iter().map(|&a| dequantize_value(a as f64, min_v, max_v)).collect();
    Ok(DepthImage { width: q.width, height: q.height, near: min_v, far: max_v, data })
}

pub fn dequantize_value(actual_v: f64, min_v: f64, max_v: f64) -> f64 {
    min_v + actual_v * (max_v - min_v) / 255.0
}

/// Fixed albedo per block index (cycled), support gray, tool dark gray.
pub const BLOCK_ALBEDO: [[f64; 3]; 3] = [[1.0, 0.3, 0.3], [0.3, 1.0, 0.3], [0.3, 0.3, 1.0]];
pub const SUPPORT_ALBEDO: [f64; 3] = [0.5, 0.5, 0.5];
pub const TOOL_ALBEDO: [f64; 3] = [0.2, 0.2, 0.2];

/// A solid with the albedo it is shaded with.
#[derive(Debug, Clone, Copy)]
pub struct Painted {
    pub solid: Obb,
    pub albedo: [f64; 3],
}

pub fn painted_scene(config: &EpisodeConfig) -> Vec<Painted> {
    let mut out = vec![Painted { solid: config.support, albedo: SUPPORT_ALBEDO }];
    for (i, b) in config.blocks.iter().enumerate() {
        let albedo = BLOCK_ALBEDO[i % BLOCK_ALBEDO.len()];
        out.extend(b.world_parts().into_iter().map(|solid| Painted { solid, albedo }));
    }
    out
}

/// Lambertian shading `albedo * intensity * max(0, n . l)`, clamped to [0, 1].
/// Background pixels are black.
pub fn render_rgb(config: &EpisodeConfig, cam: &CameraIntrinsics, light: &Light) -> RgbImage {
    render_rgb_painted(&config.camera, cam, light, &painted_scene(config))
}

pub fn render_rgb_painted(placement: &CameraPlacement, cam: &CameraIntrinsics, light: &Light, items: &[Painted]) -> RgbImage {
    let solids: Vec<Obb> = items.iter().map(|p| p.solid).collect();
    let origin = placement.pose.position;
    let rot = placement.pose.rotation;
    let mut data = Vec::with_capacity(cam.width * cam.height);
    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir = rot.rotate(cam.pixel_ray(u, v));
            let px = match cast(origin, dir, &solids) {
                Some(h) => {
                    let p = origin + dir * h.t;
                    let lambert = normalize(light.position - p).map(|l| h.normal.dot(l).max(0.0)).unwrap_or(0.0);
                    let a = items[h.solid].albedo;
                    let s = light.intensity * lambert;
                    [(a[0] * s).clamp(0.0, 1.0), (a[1] * s).clamp(0.0, 1.0), (a[2] * s).clamp(0.0, 1.0)]
                }
                None => [0.0; 3],
            };
            data.push(px);
        }
    }
    RgbImage { width: cam.width, height: cam.height, data }
}

/// Channel-major `(channels, height, width)` float tensor fed to a policy.
///
/// Image layout: channel 0 is depth normalized by `(v - 0.4) / (2.0 - 0.4)`;
/// with an RGB camera, channels 1..=3 are red, green and blue in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Observation {
    pub fn vector(values: Vec<f32>) -> Self {
        Self { channels: values.len(), height: 1, width: 1, data: values }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

pub fn normalize_depth(v: f64) -> f64 {
    ((v - DEPTH_MIN_V) / (DEPTH_MAX_V - DEPTH_MIN_V)).clamp(0.0, 1.0)
}

pub fn to_observation(depth: &DepthImage, rgb: Option<&RgbImage>) -> Result<Observation, RenderError> {
    let n = depth.width * depth.height;
    if depth.data.len() != n {
        return Err(RenderError::ShapeMismatch(format!("depth buffer {} for {}x{}", depth.data.len(), depth.width, depth.height)));
    }
    let channels = if rgb.is_some() { 4 } else { 1 };
    let mut data = Vec::with_capacity(channels * n);
    data.extend(depth.data.iter().map(|&v| normalize_depth(v) as f32));
    if let Some(rgb) = rgb {
        if rgb.width != depth.width || rgb.height != depth.height || rgb.data.len() != n {
            return Err(RenderError::ShapeMismatch(format!(
                "rgb {}x{} vs depth {}x{}",
                rgb.width, rgb.height, depth.width, depth.height
            )));
        }
        for c in 0..3 {
            data.extend(rgb.data.iter().map(|px| px[c] as f32));
        }
    }
    Ok(Observation { channels, height: depth.height, width: depth.width, data })
}

/// Plain-text graymap (`P2`, maxval 255).
pub fn write_pgm(frame: &DepthFrame8, path: &Path) -> Result<(), RenderError> {
    let mut s = format!("P2\n{} {}\n255\n", frame.width, frame.height);
    for row in frame.data.chunks(frame.width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Plain-text pixmap (`P3`, maxval 255).
pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<(), RenderError> {
    let mut s = format!("P3\n{} {}\n255\n", img.width, img.height);
    for row in img.data.chunks(img.width) {
        for (i, px) in row.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let q = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = write!(s, "{} {} {}", q(px[0]), q(px[1]), q(px[2]));
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Parses a `P2` graymap written by [`write_pgm`].
pub fn read_pgm(text: &str) -> Result<DepthFrame8, RenderError> {
    let mut tok = text.split_whitespace();
    let bad = |m: &str| RenderError::ShapeMismatch(format!("pgm: {m}"));
    if tok.next() != Some("P2") {
        return Err(bad("missing P2 magic"));
    }
    let mut num = || tok.next().and_then(|t| t.parse::<usize>().ok()).ok_or_else(|| bad("truncated header"));
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let data: Vec<u8> = tok.map(|t| t.parse::<u8>()).collect::<Result<_, _>>().map_err(|_| bad("bad pixel"))?;
    if data.len() != w * h {
        return Err(bad("pixel count"));
    }
    Ok(DepthFrame8 { width: w, height: h, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{ray_obb_intersect, Pose, Rotation};
    use crate::scene::{look_at_rotation, SupportSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam(res: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(res, 60.0, 0.4, 2.0).unwrap()
    }

    fn facing_placement() -> CameraPlacement {
        // camera at origin looking along +y
        CameraPlacement { pose: Pose::new(Vec3::ZERO, look_at_rotation(Vec3::ZERO, Vec3::Y, 0.0)), near: 0.4, far: 2.0 }
    }

    #[test]
    fn fronto_parallel_wall_has_constant_depth() {
        let wall = Obb::axis_aligned(Vec3::new(0.0, 1.5, 0.0), Vec3::new(10.0, 0.5, 10.0));
        let d = render_depth_solids(&facing_placement(), &cam(32), &[wall]);
        for &v in &d.data {
            assert!((v - 1.0).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn empty_scene_is_far() {
        let d = render_depth_solids(&facing_placement(), &cam(32), &[]);
        assert!(d.data.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn pixel_matches_analytic_slab() {
        let c = cam(32);
        let b = Obb::new(Vec3::new(0.05, 1.2, -0.02), Vec3::new(0.2, 0.1, 0.15), Rotation::from_yaw_deg(25.0));
        let p = facing_placement();
        let d = render_depth_solids(&p, &c, &[b]);
        for (u, v) in [(16, 16), (15, 17), (12, 14)] {
            let ray_cam = c.pixel_ray(u, v);
            let t = ray_obb_intersect(p.pose.position, p.pose.rotation.rotate(ray_cam), &b).unwrap();
            assert!((d.at(u, v) - t * ray_cam.z).abs() < 1e-9);
        }
    }

    #[test]
    fn occluded_box_does_not_change_image() {
        let front = Obb::axis_aligned(Vec3::new(0.0, 1.0, 0.0), Vec3::new(5.0, 0.1, 5.0));
        let behind = Obb::axis_aligned(Vec3::new(0.1, 1.5, 0.0), Vec3::new(0.2, 0.2, 0.2));
        let p = facing_placement();
        let a = render_depth_solids(&p, &cam(32), &[front]);
        let b = render_depth_solids(&p, &cam(32), &[front, behind]);
        assert_eq!(a, b);
    }

    #[test]
    fn moving_wall_back_adds_exact_offset() {
        let p = facing_placement();
        let near_wall = Obb::axis_aligned(Vec3::new(0.0, 1.2, 0.0), Vec3::new(10.0, 0.1, 10.0));
        let far_wall = Obb { center: near_wall.center + Vec3::new(0.0, 0.1, 0.0), ..near_wall };
        let a = render_depth_solids(&p, &cam(32), &[near_wall]);
        let b = render_depth_solids(&p, &cam(32), &[far_wall]);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((y - x - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_zero_is_identity_and_far_stays_clamped() {
        let img = DepthImage::filled(32, 32, 0.4, 2.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(add_noise(&img, 0.0, &mut rng), img);
        let n = add_noise(&img, 0.005, &mut rng);
        assert!(n.data.iter().all(|&v| v <= 2.0));
    }

    #[test]
    fn noise_statistics() {
        let n = 1_000_000;
        let img = DepthImage { width: 1000, height: 1000, near: 0.4, far: 2.0, data: vec![1.0; n] };
        let out = add_noise(&img, 0.005, &mut ChaCha8Rng::seed_from_u64(3));
        let mean = out.data.iter().sum::<f64>() / n as f64;
        let var = out.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 3.0 * 0.005 / (n as f64).sqrt());
        assert!((var.sqrt() / 0.005 - 1.0).abs() < 0.02);
    }

    #[test]
    fn dequantize_endpoints() {
        assert!((dequantize_value(0.0, 0.4, 2.0) - 0.4).abs() < 1e-15);
        assert!((dequantize_value(255.0, 0.4, 2.0) - 2.0).abs() < 1e-15);
        assert!((dequantize_value(127.5, 0.4, 2.0) - 1.2).abs() < 1e-15);
        assert!((dequantize_value(128.0, 0.4, 2.0) - (0.4 + 128.0 * 1.6 / 255.0)).abs() < 1e-15);
        assert!((dequantize_value(128.0, 0.4, 2.0) - 1.203137).abs() < 1e-6);
    }

    #[test]
    fn quantize_rejects_out_of_range() {
        let img = DepthImage::filled(2, 2, 0.3, 2.2, 0.35);
        assert!(matches!(quantize(&img, 0.4, 2.0), Err(RenderError::Range { .. })));
        let ok = DepthImage::filled(2, 2, 0.4, 2.0, 1.0);
        assert!(matches!(quantize(&ok, 2.0, 0.4), Err(RenderError::BadRange(..))));
    }

    #[test]
    fn observation_normalization() {
        let lo = DepthImage::filled(32, 32, 0.4, 2.0, 0.4);
        let hi = DepthImage::filled(32, 32, 0.4, 2.0, 2.0);
        assert!(to_observation(&lo, None).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(to_observation(&hi, None).unwrap().data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quantized_observation_within_half_lsb() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..1024).map(|_| 0.4 + 1.6 * rng.random::<f64>()).collect();
        let img = DepthImage { width: 32, height: 32, near: 0.4, far: 2.0, data };
        let direct = to_observation(&img, None).unwrap();
        let rt = dequantize(&quantize(&img, 0.4, 2.0).unwrap(), 0.4, 2.0).unwrap();
        let via = to_observation(&rt, None).unwrap();
        for (a, b) in direct.data.iter().zip(&via.data) {
            assert!(((a - b).abs() as f64) <= 1.0 / 510.0 + 1e-6);
        }
    }

    #[test]
    fn observation_shape_mismatch() {
        let d = DepthImage::filled(32, 32, 0.4, 2.0, 1.0);
        let rgb = RgbImage { width: 16, height: 16, data: vec![[0.0; 3]; 256] };
        assert!(matches!(to_observation(&d, Some(&rgb)), Err(RenderError::ShapeMismatch(_))));
        let rgb = RgbImage { width: 32, height: 32, data: vec![[0.5, 0.25, 1.0]; 1024] };
        let o = to_observation(&d, Some(&rgb)).unwrap();
        assert_eq!(o.channels, 4);
        assert!(o.channel(2).iter().all(|&v| v == 0.25));
    }

    fn top_down_scene() -> (CameraPlacement, Vec<Painted>) {
        let support = SupportSpec::default().obb();
        let placement = CameraPlacement {
            pose: Pose::new(Vec3::new(0.0, 0.6, 1.0), look_at_rotation(Vec3::new(0.0, 0.6, 1.0), Vec3::new(0.0, 0.6, 0.0), 0.0)),
            near: 0.4,
            far: 2.0,
        };
        let items = vec![Painted { solid: support, albedo: [1.0, 1.0, 1.0] }];
        (placement, items)
    }

    #[test]
    fn lambert_overhead_light() {
        let (p, items) = top_down_scene();
        // point light far overhead: the cosine at the image centre is ~1
        let light = Light { position: Vec3::new(0.0, 0.6, 1e7), intensity: 1.0 };
        let img = render_rgb_painted(&p, &cam(32), &light, &items);
        let c = img.data[16 * 32 + 16];
        assert!((c[0] - 1.0).abs() < 1e-9);
        let dim = Light { intensity: 0.4, ..light };
        let twice = Light { intensity: 0.8, ..light };
        let a = render_rgb_painted(&p, &cam(32), &dim, &items);
        let b = render_rgb_painted(&p, &cam(32), &twice, &items);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((2.0 * x[0] - y[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn grazing_light_is_black() {
        let (p, items) = top_down_scene();
        // light level with and below the support top: faces seen from above get nothing
        let light = Light { position: Vec3::new(100.0, 0.6, 0.1), intensity: 1.0 };
        let img = render_rgb_painted(&p, &cam(32), &light, &items);
        assert!(img.data.iter().all(|px| px[0].abs() < 1e-6));
    }

    #[test]
    fn pgm_round_trip() {
        let f = DepthFrame8 { width: 3, height: 2, data: vec![0, 1, 2, 128, 254, 255] };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&f, &p).unwrap();
        assert_eq!(read_pgm(&std::fs::read_to_string(&p).unwrap()).unwrap(), f);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn eq1_round_trip_half_lsb(v in 0.4f64..=2.0) {
                let img = DepthImage::filled(1, 1, 0.4, 2.0, v);
                let back = dequantize(&quantize(&img, 0.4, 2.0).unwrap(), 0.4, 2.0).unwrap();
                prop_assert!((back.data[0] - v).abs() <= 1.6 / 255.0 / 2.0 + 1e-12);
            }
        }
    }
}
