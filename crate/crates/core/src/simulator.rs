//! Synthetic depth sequences with known poses and known smeared pixels.
//!
//! Scenes are built from analytic primitives and ray-cast exactly. Smearing
//! is injected on the far side of depth discontinuities: a pixel whose depth
//! exceeds some pixel within `edge_band_px` by more than `jump_mm` is, with
//! probability `rate`, replaced by `λ·d_near + (1-λ)·d_own`, where `d_near`
//! is the nearest depth in that neighbourhood.

use std::path::Path;

use nalgebra::{Point3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, quantize_depth};
use crate::error::{Error, Result};
use crate::types::{CameraModel, DepthFrame, Label, LabelMap, Manifest, RigidPose, SceneSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Rectangle in the local xy-plane, normal along local z.
    Plane { pose: RigidPose, half_size: [f64; 2] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned in its local frame.
    Box { pose: RigidPose, half_extents: [f64; 3] },
}

impl Primitive {
    /// Smallest ray parameter `t > 0` at which `origin + t·dir` hits.
    pub fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match self {
            Primitive::Plane { pose, half_size } => {
                let inv = pose.inverse();
                let o = inv.transform_point(origin);
                let d = inv.transform_vector(dir);
                if d.z.abs() < EPS {
                    return None;
                }
                let t = -o.z / d.z;
                if t <= EPS {
                    return None;
                }
                let hit = o + d * t;
                (hit.x.abs() <= half_size[0] && hit.y.abs() <= half_size[1]).then_some(t)
            }
            Primitive::Sphere { center, radius } => {
                let c = Point3::new(center[0], center[1], center[2]);
                let oc = origin - c;
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let disc = b * b - a * (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / a;
                let t1 = (-b + sq) / a;
                if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Primitive::Box { pose, half_extents } => {
                let inv = pose.inverse();
                let o = inv.transform_point(origin);
                let d = inv.transform_vector(dir);
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for k in 0..3 {
                    if d[k].abs() < EPS {
                        if o[k].abs() > half_extents[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half_extents[k] - o[k]) / d[k];
                    let b = (half_extents[k] - o[k]) / d[k];
                    t_near = t_near.max(a.min(b));
                    t_far = t_far.min(a.max(b));
                }
                if t_near > t_far || t_far <= EPS {
                    return None;
                }
                Some(if t_near > EPS { t_near } else { t_far })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmearModel {
    pub edge_band_px: usize,
    /// Probability that a band pixel is smeared.
    pub rate: f64,
    /// λ is drawn uniformly from `[lambda_low, lambda_high)`.
    pub lambda_low: f64,
    pub lambda_high: f64,
    /// Depth jump that counts as a discontinuity.
    pub jump_mm: f64,
}

impl Default for SmearModel {
    fn default() -> Self {
        Self {
            edge_band_px: 2,
            rate: 0.5,
            lambda_low: 0.0,
            lambda_high: 1.0,
            jump_mm: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub trajectory: Vec<RigidPose>,
    pub noise_sigma_mm: f64,
    pub smear: SmearModel,
    pub seed: u64,
}

/// Scene parameters plus the camera, as written to `scene.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub camera: CameraModel,
    pub scene: SyntheticScene,
}

impl SceneConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        Self {
            camera: default_camera(),
            scene: SyntheticScene::default_scene(seed),
        }
    }
}

pub fn default_camera() -> CameraModel {
    CameraModel {
        fx: 150.0,
        fy: 150.0,
        cx: 80.0,
        cy: 60.0,
        width: 160,
        height: 120,
    }
}

/// Poses on a circular arc around `center`, all looking at it. At arc angle
/// zero the camera sits at `center - (0, 0, radius)` with identity rotation;
/// the arc turns about an axis in the image plane tilted `tilt_deg` from
/// vertical, so motion has both horizontal and vertical components.
pub fn arc_trajectory(
    center: Point3<f64>,
    radius: f64,
    tilt_deg: f64,
    step_deg: f64,
    frames: usize,
) -> Vec<RigidPose> {
    let tilt = tilt_deg.to_radians();
    let axis = Unit::new_normalize(Vector3::new(tilt.sin(), tilt.cos(), 0.0));
    let mid = (frames as f64 - 1.0) / 2.0;
    (0..frames)
        .map(|i| {
            let angle = (i as f64 - mid) * step_deg.to_radians();
            let rot = UnitQuaternion::from_axis_angle(&axis, angle).to_rotation_matrix();
            let position = center.coords + rot * Vector3::new(0.0, 0.0, -radius);
            RigidPose::from_rotation(&rot, position)
        })
        .collect()
}

/// Horizontal floor strip at height `y` (image y points down), running in
/// depth from 400 mm to `far_z`.
fn floor(y: f64, far_z: f64) -> Primitive {
    let near_z = 400.0;
    Primitive::Plane {
        pose: placed(
            Vector3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0),
            Vector3::new(0.0, y, (near_z + far_z) / 2.0),
        ),
        half_size: [2500.0, (far_z - near_z) / 2.0],
    }
}

fn placed(rotation: Vector3<f64>, translation: Vector3<f64>) -> RigidPose {
    RigidPose::from_scaled_axis(rotation, translation)
}

impl SyntheticScene {
    /// Background wall at 3 m, a floor strip that stops short of it, a box
    /// centred at 1.1 m and a sphere, seen over 30 frames on a 2 m arc with
    /// 1.4° steps (≈49 mm). The box is turned 0.5 rad about the vertical so
    /// its side faces pin down horizontal translation once the sphere leaves
    /// the view.
    pub fn default_scene(seed: u64) -> Self {
        Self {
            primitives: vec![
                Primitive::Plane {
                    pose: placed(Vector3::zeros(), Vector3::new(0.0, 0.0, 3000.0)),
                    half_size: [4000.0, 4000.0],
                },
                floor(750.0, 2500.0),
                Primitive::Box {
                    pose: placed(Vector3::new(0.0, 0.5, 0.0), Vector3::new(-150.0, 50.0, 1100.0)),
                    half_extents: [250.0, 220.0, 100.0],
                },
                Primitive::Sphere {
                    center: [450.0, -250.0, 1900.0],
                    radius: 250.0,
                },
            ],
            trajectory: arc_trajectory(Point3::new(0.0, 0.0, 2000.0), 2000.0, 30.0, 1.4, 30),
            noise_sigma_mm: 1.0,
            smear: SmearModel::default(),
            seed,
        }
    }

    /// Room-like variation of the default layout: a back wall of random
    /// extent (possibly leaving empty sky), floor, two side walls, three
    /// boxes at random orientation and a sphere, seen from an arc of random
    /// tilt and step. Inter-frame motion stays below 50 mm.
    pub fn random_scene(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce7e);
        let random_box = |rng: &mut ChaCha8Rng, x: (f64, f64), y: (f64, f64), z: (f64, f64)| Primitive::Box {
            pose: placed(
                Vector3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.3..0.3),
                ),
                Vector3::new(
                    rng.random_range(x.0..x.1),
                    rng.random_range(y.0..y.1),
                    rng.random_range(z.0..z.1),
                ),
            ),
            half_extents: [
                rng.random_range(150.0..280.0),
                rng.random_range(120.0..230.0),
                rng.random_range(80.0..150.0),
            ],
        };
        let side_wall = |x: f64| Primitive::Plane {
            pose: placed(
                Vector3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0),
                Vector3::new(x, -400.0, 1500.0),
            ),
            half_size: [1000.0, 1000.0],
        };
        let primitives = vec![
            Primitive::Plane {
                pose: placed(Vector3::zeros(), Vector3::new(0.0, 0.0, 3000.0)),
                half_size: [rng.random_range(1300.0..4000.0), rng.random_range(1000.0..4000.0)],
            },
            floor(rng.random_range(650.0..850.0), rng.random_range(2300.0..2700.0)),
            side_wall(-rng.random_range(1400.0..1800.0)),
            side_wall(rng.random_range(1400.0..1800.0)),
            random_box(&mut rng, (-350.0, 0.0), (-50.0, 150.0), (1000.0, 1300.0)),
            random_box(&mut rng, (-750.0, -450.0), (-450.0, -250.0), (1900.0, 2300.0)),
            random_box(&mut rng, (400.0, 700.0), (150.0, 350.0), (1500.0, 2000.0)),
            Primitive::Sphere {
                center: [
                    rng.random_range(200.0..500.0),
                    rng.random_range(-400.0..-200.0),
                    rng.random_range(1700.0..2200.0),
                ],
                radius: rng.random_range(180.0..260.0),
            },
        ];
        let tilt = rng.random_range(-45.0..45.0);
        let step = rng.random_range(0.8..1.4);
        Self {
            primitives,
            trajectory: arc_trajectory(Point3::new(0.0, 0.0, 2000.0), 2000.0, tilt, step, 30),
            noise_sigma_mm: 1.0,
            smear: SmearModel::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidConfig("scene needs at least one primitive".into()));
        }
        if self.trajectory.len() < 2 {
            return Err(Error::InvalidConfig("trajectory needs at least two poses".into()));
        }
        let s = &self.smear;
        if !(0.0..=1.0).contains(&s.rate) {
            return Err(Error::InvalidConfig(format!("smear rate {} outside [0,1]", s.rate)));
        }
        if !(0.0 <= s.lambda_low && s.lambda_low < s.lambda_high && s.lambda_high <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda range [{}, {}) not inside [0, 1]",
                s.lambda_low, s.lambda_high
            )));
        }
        if !(self.noise_sigma_mm >= 0.0) {
            return Err(Error::InvalidConfig("noise sigma must be >= 0".into()));
        }
        for p in &self.primitives {
            let ok = match p {
                Primitive::Plane { half_size, .. } => half_size.iter().all(|h| *h > 0.0),
                Primitive::Sphere { radius, .. } => *radius > 0.0,
                Primitive::Box { half_extents, .. } => half_extents.iter().all(|h| *h > 0.0),
            };
            if !ok {
                return Err(Error::InvalidConfig(format!("degenerate primitive {p:?}")));
            }
        }
        Ok(())
    }
}

/// Exact z-depth per pixel (0 where the ray hits nothing) for a camera at
/// `pose`. No noise, smear or quantisation.
pub fn ray_cast(primitives: &[Primitive], camera: &CameraModel, pose: &RigidPose) -> Vec<f64> {
    ray_cast_with_ids(primitives, camera, pose).0
}

/// Like [`ray_cast`], also returning the index of the primitive hit per pixel.
pub fn ray_cast_with_ids(
    primitives: &[Primitive],
    camera: &CameraModel,
    pose: &RigidPose,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let origin = pose.center();
    let mut depth = vec![0.0; camera.pixel_count()];
    let mut ids = vec![None; camera.pixel_count()];
    for v in 0..camera.height {
        for u in 0..camera.width {
            // unit z component, so the ray parameter is the z-depth
            let dir_cam = camera.unproject(u as f64, v as f64, 1.0).coords;
            let dir = pose.transform_vector(&dir_cam);
            let mut best = f64::INFINITY;
            for (k, p) in primitives.iter().enumerate() {
                if let Some(t) = p.intersect(&origin, &dir) {
                    if t < best {
                        best = t;
                        ids[v * camera.width + u] = Some(k);
                    }
                }
            }
            if best.is_finite() {
                depth[v * camera.width + u] = best;
            }
        }
    }
    (depth, ids)
}

/// Pixels on the far side of an occlusion boundary within `band` pixels,
/// with the nearest occluding depth found in that neighbourhood. Only
/// neighbours on a different primitive count, so steep but continuous
/// surfaces are not mistaken for boundaries.
pub fn edge_band(
    depth: &[f64],
    ids: &[Option<usize>],
    width: usize,
    height: usize,
    band: usize,
    jump: f64,
) -> Vec<Option<f64>> {
    let mut out = vec![None; depth.len()];
    let b = band as isize;
    for v in 0..height as isize {
        for u in 0..width as isize {
            let i = (v as usize) * width + u as usize;
            let d = depth[i];
            if d <= 0.0 {
                continue;
            }
            let mut near = f64::INFINITY;
            for dv in -b..=b {
                for du in -b..=b {
                    let (x, y) = (u + du, v + dv);
                    if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
                        continue;
                    }
                    let j = y as usize * width + x as usize;
                    let n = depth[j];
                    if n > 0.0 && n < near && ids[j] != ids[i] {
                        near = n;
                    }
                }
            }
            if d - near > jump {
                out[i] = Some(near);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SimulatedSequence {
    /// Frames with ground-truth poses attached.
    pub sequence: SceneSequence,
    /// Per frame: true where smear was injected.
    pub masks: Vec<Vec<bool>>,
    /// Per frame: true for every pixel eligible for smearing.
    pub bands: Vec<Vec<bool>>,
}

impl SimulatedSequence {
    /// Ground-truth ternary labels: smeared where injected, valid elsewhere
    /// with a return, unknown without a return.
    pub fn ground_truth(&self, frame: usize) -> Vec<Label> {
        let f = &self.sequence.frames[frame];
        f.depth
            .iter()
            .zip(&self.masks[frame])
            .map(|(d, m)| {
                if *m {
                    Label::Smeared
                } else if *d > 0.0 {
                    Label::Valid
                } else {
                    Label::Unknown
                }
            })
            .collect()
    }

    pub fn poses(&self) -> Vec<RigidPose> {
        self.sequence
            .frames
            .iter()
            .map(|f| f.pose.expect("simulated frames are posed"))
            .collect()
    }
}

fn render_frame(
    scene: &SyntheticScene,
    camera: &CameraModel,
    index: usize,
    pose: &RigidPose,
) -> Result<(DepthFrame, Vec<bool>, Vec<bool>)> {
    let (exact, ids) = ray_cast_with_ids(&scene.primitives, camera, pose);
    let band = edge_band(
        &exact,
        &ids,
        camera.width,
        camera.height,
        scene.smear.edge_band_px,
        scene.smear.jump_mm,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(index as u64);

    let mut depth = exact;
    let mut mask = vec![false; depth.len()];
    for (i, near) in band.iter().enumerate() {
        let Some(near) = near else { continue };
        if rng.random::<f64>() < scene.smear.rate {
            let lambda = rng.random_range(scene.smear.lambda_low..scene.smear.lambda_high);
            depth[i] = lambda * near + (1.0 - lambda) * depth[i];
            mask[i] = true;
        }
    }
    if scene.noise_sigma_mm > 0.0 {
        let noise = Normal::new(0.0, scene.noise_sigma_mm)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for d in depth.iter_mut().filter(|d| **d > 0.0) {
            *d = (*d + noise.sample(&mut rng)).max(1.0);
        }
    }
    let depth: Vec<f32> = depth.iter().map(|d| f32::from(quantize_depth(*d as f32))).collect();
    // a sample pushed out of range loses its return and its smear label
    for (m, d) in mask.iter_mut().zip(&depth) {
        *m &= *d > 0.0;
    }
    let frame = DepthFrame::new(index as u32, depth, *camera, Some(*pose))?;
    Ok((frame, mask, band.iter().map(Option::is_some).collect()))
}

/// Render every trajectory pose. Deterministic for a given scene (including
/// its seed), independent of thread scheduling.
pub fn render_scene(scene: &SyntheticScene, camera: &CameraModel) -> Result<SimulatedSequence> {
    camera
        .validate()
        .map_err(|e| Error::InvalidConfig(format!("degenerate camera: {e}")))?;
    scene.validate()?;
    let rendered: Vec<_> = scene
        .trajectory
        .par_iter()
        .enumerate()
        .map(|(i, pose)| render_frame(scene, camera, i, pose))
        .collect::<Result<_>>()?;
    let mut frames = Vec::with_capacity(rendered.len());
    let mut masks = Vec::with_capacity(rendered.len());
    let mut bands = Vec::with_capacity(rendered.len());
    for (f, m, b) in rendered {
        frames.push(f);
        masks.push(m);
        bands.push(b);
    }
    let manifest = Manifest {
        sensor: "simulator".into(),
        units: "mm".into(),
        scene: format!("synthetic seed {}", scene.seed),
    };
    Ok(SimulatedSequence {
        sequence: SceneSequence::new(frames, manifest)?,
        masks,
        bands,
    })
}

/// Writes the rendered dataset: intrinsics, depth, poses, ground-truth
/// labels and the scene description.
pub fn write_simulation(root: &Path, config: &SceneConfig, sim: &SimulatedSequence) -> Result<()> {
    dataset::write_sequence(root, &sim.sequence)?;
    for (i, frame) in sim.sequence.frames.iter().enumerate() {
        dataset::save_gt(root, frame.frame_id, frame.width(), frame.height(), &sim.ground_truth(i))?;
    }
    dataset::write_json(&root.join(dataset::SCENE_FILE), config)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassScore {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

impl ClassScore {
    pub fn precision(&self) -> Option<f64> {
        let d = self.true_positive + self.false_positive;
        (d > 0).then(|| self.true_positive as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.true_positive + self.false_negative;
        (d > 0).then(|| self.true_positive as f64 / d as f64)
    }

    fn add(&mut self, other: &ClassScore) {
        self.true_positive += other.true_positive;
        self.false_positive += other.false_positive;
        self.false_negative += other.false_negative;
    }
}

/// Label quality against ground truth. Pixels whose ground truth is unknown
/// are ignored; predicted-unknown pixels count only as misses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TruthReport {
    pub smeared: ClassScore,
    pub valid: ClassScore,
    /// Ground-truth-known pixels the prediction left unknown.
    pub unlabeled: usize,
    pub evaluated: usize,
}

impl TruthReport {
    pub fn merge(&mut self, other: &TruthReport) {
        self.smeared.add(&other.smeared);
        self.valid.add(&other.valid);
        self.unlabeled += other.unlabeled;
        self.evaluated += other.evaluated;
    }
}

pub fn evaluate_against_truth(labels: &LabelMap, truth: &[Label]) -> Result<TruthReport> {
    if labels.labels.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected_w: labels.width,
            expected_h: labels.height,
            got_w: truth.len(),
            got_h: 1,
            context: "ground truth raster".into(),
        });
    }
    let mut r = TruthReport::default();
    for (p, t) in labels.labels.iter().zip(truth) {
        if *t == Label::Unknown {
            continue;
        }
        r.evaluated += 1;
        for (class, score) in [(Label::Smeared, &mut r.smeared), (Label::Valid, &mut r.valid)] {
            match (*p == class, *t == class) {
                (true, true) => score.true_positive += 1,
                (true, false) => score.false_positive += 1,
                (false, true) => score.false_negative += 1,
                _ => {}
            }
        }
        if *p == Label::Unknown {
            r.unlabeled += 1;
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_camera() -> CameraModel {
        CameraModel::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap()
    }

    fn wall(z: f64) -> Primitive {
        Primitive::Plane {
            pose: placed(Vector3::zeros(), Vector3::new(0.0, 0.0, z)),
            half_size: [1e5, 1e5],
        }
    }

    #[test]
    fn plane_without_noise_or_smear_is_constant() {
        let scene = SyntheticScene {
            primitives: vec![wall(2000.0)],
            trajectory: vec![RigidPose::identity(); 3],
            noise_sigma_mm: 0.0,
            smear: SmearModel {
                rate: 0.0,
                ..SmearModel::default()
            },
            seed: 1,
        };
        let sim = render_scene(&scene, &small_camera()).unwrap();
        for (f, m) in sim.sequence.frames.iter().zip(&sim.masks) {
            assert!(f.depth.iter().all(|d| *d == 2000.0));
            assert!(m.iter().all(|x| !x));
        }
    }

    #[test]
    fn half_lambda_smear_lands_midway() {
        let scene = SyntheticScene {
            primitives: vec![
                wall(3000.0),
                Primitive::Box {
                    pose: placed(Vector3::zeros(), Vector3::new(0.0, 0.0, 1100.0)),
                    half_extents: [200.0, 200.0, 100.0],
                },
            ],
            trajectory: vec![RigidPose::identity(); 2],
            noise_sigma_mm: 0.0,
            smear: SmearModel {
                rate: 1.0,
                lambda_low: 0.5,
                lambda_high: 0.5 + 1e-12,
                ..SmearModel::default()
            },
            seed: 3,
        };
        let sim = render_scene(&scene, &small_camera()).unwrap();
        let f = &sim.sequence.frames[0];
        let smeared: Vec<f32> = f
            .depth
            .iter()
            .zip(&sim.masks[0])
            .filter(|(_, m)| **m)
            .map(|(d, _)| *d)
            .collect();
        assert!(!smeared.is_empty());
        assert!(smeared.iter().all(|d| *d == 2000.0), "{smeared:?}");
        assert!(sim.masks[0].iter().zip(&sim.bands[0]).all(|(m, b)| !m || *b));
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = SyntheticScene::default_scene(42);
        let a = render_scene(&scene, &default_camera()).unwrap();
        let b = render_scene(&scene, &default_camera()).unwrap();
        assert_eq!(a.sequence, b.sequence);
        assert_eq!(a.masks, b.masks);
    }

    #[test]
    fn default_trajectory_respects_motion_limits() {
        let scene = SyntheticScene::default_scene(0);
        assert_eq!(scene.trajectory.len(), 30);
        for w in scene.trajectory.windows(2) {
            assert!(w[0].distance_to(&w[1]) <= 50.0);
            assert!(w[0].angle_to(&w[1]).to_degrees() <= 5.0);
        }
        for seed in 0..10 {
            let s = SyntheticScene::random_scene(seed);
            for w in s.trajectory.windows(2) {
                assert!(w[0].distance_to(&w[1]) <= 50.0);
            }
        }
    }

    #[test]
    fn sphere_and_box_intersections() {
        let o = Point3::origin();
        let s = Primitive::Sphere {
            center: [0.0, 0.0, 1000.0],
            radius: 100.0,
        };
        assert!((s.intersect(&o, &Vector3::z()).unwrap() - 900.0).abs() < 1e-9);
        let b = Primitive::Box {
            pose: RigidPose::from_scaled_axis(Vector3::zeros(), Vector3::new(0.0, 0.0, 500.0)),
            half_extents: [10.0, 10.0, 20.0],
        };
        assert!((b.intersect(&o, &Vector3::z()).unwrap() - 480.0).abs() < 1e-9);
        assert!(b.intersect(&o, &Vector3::x()).is_none());
    }

    #[test]
    fn invalid_scenes_are_rejected() {
        let mut s = SyntheticScene::default_scene(0);
        s.smear.rate = 1.5;
        assert!(s.validate().is_err());
        let mut s = SyntheticScene::default_scene(0);
        s.trajectory.truncate(1);
        assert!(s.validate().is_err());
        let mut cam = default_camera();
        cam.fx = 0.0;
        assert!(render_scene(&SyntheticScene::default_scene(0), &cam).is_err());
    }

    #[test]
    fn truth_evaluation_counts() {
        let truth = vec![Label::Smeared, Label::Valid, Label::Valid, Label::Unknown];
        let perfect = LabelMap {
            width: 4,
            height: 1,
            labels: truth.clone(),
            confidence: vec![1.0, 1.0, 1.0, 0.0],
        };
        let r = evaluate_against_truth(&perfect, &truth).unwrap();
        assert_eq!(r.smeared.precision(), Some(1.0));
        assert_eq!(r.smeared.recall(), Some(1.0));
        assert_eq!(r.valid.precision(), Some(1.0));

        let blank = LabelMap::unknown(4, 1);
        let r = evaluate_against_truth(&blank, &truth).unwrap();
        assert_eq!(r.smeared.precision(), None);
        assert_eq!(r.smeared.recall(), Some(0.0));
        assert_eq!(r.unlabeled, 3);

        assert!(evaluate_against_truth(&blank, &truth[..2]).is_err());
    }
}
