use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SequenceRecord;
use crate::error::{PoseError, Result};
use crate::numerics::Tensor;
use crate::scan_orders::Skeleton;

/// Depth used to scale the orthographic projection, in millimetres.
pub const ORTHOGRAPHIC_DEPTH_MM: f64 = 5000.0;

/// Pinhole camera on the z axis looking along +z, with y pointing down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    /// Focal length in normalized image units.
    pub focal_length: f64,
    /// Distance from the camera to the root joint in millimetres; `None`
    /// projects orthographically with scale `focal_length / ORTHOGRAPHIC_DEPTH_MM`.
    pub distance_mm: Option<f64>,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            focal_length: 2.0,
            distance_mm: Some(5000.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub sequence_count: usize,
    pub frames: usize,
    pub fps: f64,
    pub skeleton: Skeleton,
    /// Length of the bone ending at each joint; the root entry is ignored.
    pub bone_lengths_mm: Vec<f64>,
    /// Rest-pose bone directions; defaults to the Human3.6M template for
    /// 17-joint skeletons and a fixed fan otherwise.
    pub rest_directions: Option<Vec<[f64; 3]>>,
    /// Joint-angle oscillation frequencies in Hz, sampled per joint.
    pub motion_frequencies: Vec<f64>,
    /// Peak joint-angle amplitude in radians.
    pub amplitude_rad: f64,
    pub camera: Camera,
    /// Standard deviation of the 2D noise in normalized units.
    pub noise_sigma_2d: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sequence_count: 64,
            frames: 27,
            fps: 50.0,
            skeleton: Skeleton::h36m(),
            bone_lengths_mm: h36m_bone_lengths().to_vec(),
            rest_directions: None,
            motion_frequencies: vec![0.5, 0.8, 1.2, 1.7],
            amplitude_rad: 0.4,
            camera: Camera::default(),
            noise_sigma_2d: 0.0,
        }
    }
}

/// Typical Human3.6M bone lengths in millimetres.
pub fn h36m_bone_lengths() -> [f64; 17] {
    [
        0.0, 132.0, 442.0, 454.0, 132.0, 442.0, 454.0, 233.0, 257.0, 121.0, 115.0, 151.0, 278.0, 251.0, 151.0, 278.0,
        251.0,
    ]
}

/// Left-right symmetric T-pose-like rest directions (x right, y down).
pub fn h36m_rest_directions() -> [[f64; 3]; 17] {
    let (up, down, left, right) = ([0.0, -1.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]);
    [
        [0.0; 3], right, down, down, left, down, down, up, up, up, up, left, down, down, right, down, down,
    ]
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        let j = self.skeleton.joint_count();
        if self.bone_lengths_mm.len() != j {
            return Err(PoseError::Config(format!(
                "{} bone lengths for {j} joints",
                self.bone_lengths_mm.len()
            )));
        }
        if self.bone_lengths_mm[1..].iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(PoseError::Config("bone lengths must be positive".into()));
        }
        if let Some(d) = &self.rest_directions {
            if d.len() != j {
                return Err(PoseError::Config(format!("{} rest directions for {j} joints", d.len())));
            }
            if d[1..].iter().any(|v| norm(*v) < 1e-9) {
                return Err(PoseError::Config("rest directions must be non-zero".into()));
            }
        }
        if self.frames == 0 || !(self.fps > 0.0) {
            return Err(PoseError::Config("frames and fps must be positive".into()));
        }
        if self.motion_frequencies.is_empty() || self.motion_frequencies.iter().any(|f| !f.is_finite()) {
            return Err(PoseError::Config(
                "motion_frequencies must be finite and non-empty".into(),
            ));
        }
        if !(self.noise_sigma_2d >= 0.0 && self.amplitude_rad.is_finite()) {
            return Err(PoseError::Config(
                "noise and amplitude must be finite, noise ≥ 0".into(),
            ));
        }
        if !(self.camera.focal_length > 0.0) || self.camera.distance_mm.is_some_and(|d| !(d > 0.0)) {
            return Err(PoseError::Config(
                "camera focal length and distance must be positive".into(),
            ));
        }
        Ok(())
    }

    fn directions(&self) -> Vec<[f64; 3]> {
        let j = self.skeleton.joint_count();
        match &self.rest_directions {
            Some(d) => d.iter().map(|v| unit(*v)).collect(),
            None if j == 17 => h36m_rest_directions().to_vec(),
            None => (0..j)
                .map(|k| unit([(k as f64).sin(), 1.0, (k as f64).cos()]))
                .collect(),
        }
    }
}

type Mat3 = [[f64; 3]; 3];

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut o = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            o[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    o
}

fn apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

/// A sinusoid `amp·sin(2π·freq·t + phase)`.
#[derive(Clone, Copy)]
struct Wave {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Wave {
    fn sample(rng: &mut ChaCha8Rng, amp: f64, freqs: &[f64]) -> Self {
        Self {
            amp: amp * rng.gen_range(0.5..1.0),
            freq: freqs[rng.gen_range(0..freqs.len())],
            phase: rng.gen_range(0.0..TAU),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amp * (TAU * self.freq * t + self.phase).sin()
    }
}

/// Forward-kinematics sequences driven by sinusoidal joint angles and
/// projected through `cfg.camera`. Fully determined by `cfg.seed`.
pub fn synth_generate(cfg: &SyntheticConfig) -> Result<Vec<SequenceRecord>> {
    cfg.validate()?;
    let skel = &cfg.skeleton;
    let j = skel.joint_count();
    let order = skel.kinematic_order()?;
    let dirs = cfg.directions();
    let noise = Normal::new(0.0, cfg.noise_sigma_2d.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.sequence_count);
    for s in 0..cfg.sequence_count {
        let waves: Vec<[Wave; 3]> = (0..j)
            .map(|_| [0; 3].map(|_| Wave::sample(&mut rng, cfg.amplitude_rad, &cfg.motion_frequencies)))
            .collect();
        let yaw = rng.gen_range(-0.8..0.8);
        let sway = [0; 3].map(|_| Wave::sample(&mut rng, 150.0, &cfg.motion_frequencies));
        let mut p3 = Vec::with_capacity(cfg.frames * j * 3);
        let mut p2 = Vec::with_capacity(cfg.frames * j * 2);
        for f in 0..cfg.frames {
            let t = f as f64 / cfg.fps;
            let mut global = vec![[[0.0; 3]; 3]; j];
            let mut pos = vec![[0.0; 3]; j];
            for &k in &order {
                let w = &waves[k];
                let local = mul(&mul(&rot_x(w[0].at(t)), &rot_y(w[1].at(t))), &rot_z(w[2].at(t)));
                if k == 0 {
                    global[0] = mul(
                        &rot_y(yaw + w[1].at(t)),
                        &mul(&rot_x(0.3 * w[0].at(t)), &rot_z(0.3 * w[2].at(t))),
                    );
                    continue;
                }
                let parent = skel.parents[k];
                global[k] = mul(&global[parent], &local);
                let bone = apply(&global[k], dirs[k]).map(|v| v * cfg.bone_lengths_mm[k]);
                pos[k] = [0, 1, 2].map(|c| pos[parent][c] + bone[c]);
            }
            let root = [sway[0].at(t), 0.3 * sway[1].at(t), sway[2].at(t)];
            for p in &pos {
                p3.extend_from_slice(p);
                let world = [0, 1, 2].map(|c| p[c] + root[c]);
                let (u, v) = project(&cfg.camera, world);
                let (nu, nv) = if cfg.noise_sigma_2d > 0.0 {
                    (noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                p2.push(u + nu);
                p2.push(v + nv);
            }
        }
        if let Some(v) = p2.iter().find(|v| v.abs() > 1.0) {
            return Err(PoseError::Config(format!(
                "synthetic keypoint {v} falls outside the image; move the camera back or lower the focal length"
            )));
        }
        out.push(SequenceRecord {
            id: format!("synth_{s:05}"),
            action: Some(format!("motion_{}", s % 4)),
            fps: cfg.fps,
            keypoints_2d: Tensor::new(&[cfg.frames, j, 2], p2)?,
            poses_3d: Some(Tensor::new(&[cfg.frames, j, 3], p3)?),
            confidence: None,
        });
    }
    Ok(out)
}

fn project(cam: &Camera, p: [f64; 3]) -> (f64, f64) {
    match cam.distance_mm {
        Some(d) => {
            let z = d + p[2];
            (cam.focal_length * p[0] / z, cam.focal_length * p[1] / z)
        }
        None => {
            let s = cam.focal_length / ORTHOGRAPHIC_DEPTH_MM;
            (s * p[0], s * p[1])
        }
    }
}
