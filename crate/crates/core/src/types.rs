//! Domain types shared by every stage of the pipeline.
//!
//! Units are millimetres throughout. Rasters are stored row-major with
//! index `v * width + u`.

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics. Pixel `(u, v)` has its centre at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero-sized raster".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::InvalidCamera(format!(
                "cx={} outside (0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidCamera(format!(
                "cy={} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera-frame point for pixel `(u, v)` at z-depth `depth`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        Point3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Continuous pixel coordinates and z-depth of a camera-frame point.
    /// Returns `None` for points at or behind the image plane.
    #[inline]
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        ))
    }

    /// Nearest pixel to continuous coordinates, if it lies inside the raster.
    #[inline]
    pub fn nearest_pixel(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let ui = u.round();
        let vi = v.round();
        if ui < 0.0 || vi < 0.0 || ui >= self.width as f64 || vi >= self.height as f64 {
            return None;
        }
        Some((ui as usize, vi as usize))
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ROTATION_TOL: f64 = 1e-9;

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !orth.is_finite() || orth > ROTATION_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {orth:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidPose(format!("det(R) = {det}, expected +1")));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_rotation(rotation: &Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    /// Pose from a rotation vector (axis times angle, radians) and translation.
    pub fn from_scaled_axis(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::from_rotation(&Rotation3::new(axis_angle), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }

    #[inline]
    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation vector of the rotation part.
    pub fn scaled_axis(&self) -> Vector3<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation)).scaled_axis()
    }

    /// Rotation angle of `self⁻¹ ∘ other`, radians.
    pub fn angle_to(&self, other: &RigidPose) -> f64 {
        self.inverse().compose(other).scaled_axis().norm()
    }

    /// Distance between camera centres.
    pub fn distance_to(&self, other: &RigidPose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Re-orthonormalise after long chains of compositions.
    pub fn renormalized(&self) -> RigidPose {
        let rot = Rotation3::from_matrix_eps(&self.rotation, 1e-12, 50, Rotation3::identity());
        RigidPose {
            rotation: *rot.matrix(),
            translation: self.translation,
        }
    }

    /// Rotation in row-major order.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    rotation: Vec<f64>,
    translation: Vec<f64>,
}

impl Serialize for RigidPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseRecord {
            rotation: self.rotation_row_major().to_vec(),
            translation: self.translation.iter().copied().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = PoseRecord::deserialize(d)?;
        if rec.rotation.len() != 9 {
            return Err(D::Error::custom(format!(
                "rotation needs 9 values, got {}",
                rec.rotation.len()
            )));
        }
        if rec.translation.len() != 3 {
            return Err(D::Error::custom(format!(
                "translation needs 3 values, got {}",
                rec.translation.len()
            )));
        }
        let rotation = Matrix3::from_row_slice(&rec.rotation);
        let translation = Vector3::from_column_slice(&rec.translation);
        RigidPose::new(rotation, translation).map_err(D::Error::custom)
    }
}

/// One sensor frame. Depth is in millimetres, 0 means no return.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub frame_id: u32,
    pub depth: Vec<f32>,
    pub camera: CameraModel,
    pub pose: Option<RigidPose>,
}

impl DepthFrame {
    pub fn new(
        frame_id: u32,
        depth: Vec<f32>,
        camera: CameraModel,
        pose: Option<RigidPose>,
    ) -> Result<Self> {
        camera.validate()?;
        if depth.len() != camera.pixel_count() {
            return Err(Error::DimensionMismatch {
                expected_w: camera.width,
                expected_h: camera.height,
                got_w: depth.len(),
                got_h: 1,
                context: format!("frame {frame_id} depth raster"),
            });
        }
        if let Some(bad) = depth.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "frame {frame_id} has invalid depth value {bad}"
            )));
        }
        Ok(Self {
            frame_id,
            depth,
            camera,
            pose,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.camera.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.camera.height
    }

    #[inline]
    pub fn depth_at(&self, u: usize, v: usize) -> f32 {
        self.depth[v * self.camera.width + u]
    }

    pub fn require_pose(&self) -> Result<&RigidPose> {
        self.pose.as_ref().ok_or(Error::MissingPose {
            frame_id: self.frame_id,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sensor: String,
    pub units: String,
    pub scene: String,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            sensor: "unknown".into(),
            units: "mm".into(),
            scene: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub frames: Vec<DepthFrame>,
    pub manifest: Manifest,
}

impl SceneSequence {
    pub fn new(frames: Vec<DepthFrame>, manifest: Manifest) -> Result<Self> {
        if let Some(first) = frames.first() {
            for pair in frames.windows(2) {
                if pair[1].frame_id <= pair[0].frame_id {
                    return Err(Error::InvalidInput(format!(
                        "frame ids not strictly increasing ({} then {})",
                        pair[0].frame_id, pair[1].frame_id
                    )));
                }
            }
            if let Some(other) = frames.iter().find(|f| f.camera != first.camera) {
                return Err(Error::InvalidInput(format!(
                    "frame {} uses a different camera model than frame {}",
                    other.frame_id, first.frame_id
                )));
            }
        }
        Ok(Self { frames, manifest })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn camera(&self) -> Option<&CameraModel> {
        self.frames.first().map(|f| &f.camera)
    }

    pub fn is_posed(&self) -> bool {
        self.frames.iter().all(|f| f.pose.is_some())
    }

    pub fn poses(&self) -> Result<Vec<RigidPose>> {
        self.frames.iter().map(|f| f.require_pose().copied()).collect()
    }

    /// Copy of the sequence with poses replaced.
    pub fn with_poses(&self, poses: &[RigidPose]) -> Result<SceneSequence> {
        if poses.len() != self.frames.len() {
            return Err(Error::InvalidInput(format!(
                "{} poses for {} frames",
                poses.len(),
                self.frames.len()
            )));
        }
        let mut out = self.clone();
        for (frame, pose) in out.frames.iter_mut().zip(poses) {
            frame.pose = Some(*pose);
        }
        Ok(out)
    }

    /// Copy of the sequence with all poses dropped.
    pub fn without_poses(&self) -> SceneSequence {
        let mut out = self.clone();
        for frame in &mut out.frames {
            frame.pose = None;
        }
        out
    }
}

/// Ternary per-pixel label. The discriminants are the on-disk encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    #[default]
    Unknown = 0,
    Valid = 1,
    Smeared = 2,
}

impl Label {
    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Unknown),
            1 => Some(Label::Valid),
            2 => Some(Label::Smeared),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<Label>,
    pub confidence: Vec<f32>,
}

impl LabelMap {
    pub fn unknown(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![Label::Unknown; width * height],
            confidence: vec![0.0; width * height],
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// Checks raster sizes, confidence range and that unknown pixels carry
    /// zero confidence.
    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.labels.len() != n || self.confidence.len() != n {
            return Err(Error::DimensionMismatch {
                expected_w: self.width,
                expected_h: self.height,
                got_w: self.labels.len(),
                got_h: self.confidence.len(),
                context: "label map rasters".into(),
            });
        }
        for (l, c) in self.labels.iter().zip(&self.confidence) {
            if !(0.0..=1.0).contains(c) {
                return Err(Error::InvalidInput(format!("confidence {c} outside [0,1]")));
            }
            if *l == Label::Unknown && *c != 0.0 {
                return Err(Error::InvalidInput(
                    "unknown pixel with non-zero confidence".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-pixel evidence gathered from reference frames.
///
/// `parallax` is the largest angle (radians) between viewing rays among the
/// reference frames that validated the pixel. `empty_extent` is the widest
/// odd window that was entirely empty around the projected pixel in some
/// reference frame (0 when the pixel never projected into a hole).
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceMap {
    pub width: usize,
    pub height: usize,
    pub valid: Vec<bool>,
    pub behind: Vec<bool>,
    pub empty: Vec<bool>,
    pub confidence: Vec<f32>,
    pub parallax: Vec<f32>,
    pub empty_extent: Vec<u8>,
}

impl EvidenceMap {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            valid: vec![false; n],
            behind: vec![false; n],
            empty: vec![false; n],
            confidence: vec![0.0; n],
            parallax: vec![0.0; n],
            empty_extent: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|x| **x).count()
    }

    pub fn behind_count(&self) -> usize {
        self.behind.iter().filter(|x| **x).count()
    }

    pub fn empty_count(&self) -> usize {
        self.empty.iter().filter(|x| **x).count()
    }
}

/// Thresholds and weights for the annotator. Distances in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorConfig {
    /// Depth agreement tolerance for multi-view validation.
    pub epsilon_mm: f64,
    /// Margin by which a reference must see past a point to flag it.
    pub delta_mm: f64,
    /// Side of the square all-empty window required for see-through-empty.
    pub window: usize,
    /// Maximum number of reference frames (split evenly before and after).
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Margin, in pixels, added around the four pixel centres enclosing a
    /// projected point. Every return in that block must lie beyond the point
    /// before it is flagged see-through-behind.
    pub behind_support: usize,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            epsilon_mm: 4.0,
            delta_mm: 15.0,
            window: 3,
            m: 4,
            alpha: 0.3,
            beta: 0.7,
            behind_support: 0,
        }
    }
}

impl AnnotatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_mm > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon_mm must be positive, got {}",
                self.epsilon_mm
            )));
        }
        if !(self.delta_mm > self.epsilon_mm) {
            return Err(Error::InvalidConfig(format!(
                "delta_mm ({}) must exceed epsilon_mm ({})",
                self.delta_mm, self.epsilon_mm
            )));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "window must be odd and >= 1, got {}",
                self.window
            )));
        }
        if self.m < 2 || self.m % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "m must be even and >= 2, got {}",
                self.m
            )));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidConfig("alpha and beta must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraModel {
        CameraModel::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap()
    }

    #[test]
    fn camera_invariants() {
        assert!(CameraModel::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraModel::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraModel::new(1.0, 1.0, 2.0, 0.0, 4, 4).is_err());
        assert!(CameraModel::new(1.0, 1.0, 2.0, 2.0, 4, 4).is_ok());
    }

    #[test]
    fn unproject_project_round_trip() {
        let c = cam();
        let p = c.unproject(10.0, 40.0, 1234.5);
        let (u, v, d) = c.project(&p).unwrap();
        assert!((u - 10.0).abs() < 1e-12);
        assert!((v - 40.0).abs() < 1e-12);
        assert_eq!(d, 1234.5);
        assert!(c.project(&Point3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn pose_rejects_non_rotations() {
        let scaled = Matrix3::identity() * 1.01;
        assert!(RigidPose::new(scaled, Vector3::zeros()).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidPose::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn pose_compose_inverse() {
        let a = RigidPose::from_scaled_axis(Vector3::new(0.1, -0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let id = a.compose(&a.inverse());
        assert!((id.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(id.translation().norm() < 1e-12);
        assert!(a.angle_to(&a) < 1e-9);
    }

    #[test]
    fn pose_json_round_trip_is_exact() {
        let a = RigidPose::from_scaled_axis(Vector3::new(0.01, 0.7, -0.02), Vector3::new(-12.5, 0.25, 3.0));
        let s = serde_json::to_string(&a).unwrap();
        let b: RigidPose = serde_json::from_str(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pose_json_rejects_short_arrays() {
        let r: std::result::Result<RigidPose, _> =
            serde_json::from_str(r#"{"rotation":[1,0,0,0,1,0,0,0],"translation":[0,0,0]}"#);
        assert!(r.is_err());
    }

    #[test]
    fn frame_rejects_wrong_raster_size() {
        assert!(DepthFrame::new(0, vec![0.0; 10], cam(), None).is_err());
        assert!(DepthFrame::new(0, vec![0.0; 64 * 48], cam(), None).is_ok());
    }

    #[test]
    fn sequence_requires_increasing_ids() {
        let f0 = DepthFrame::new(3, vec![0.0; 64 * 48], cam(), None).unwrap();
        let f1 = DepthFrame::new(3, vec![0.0; 64 * 48], cam(), None).unwrap();
        assert!(SceneSequence::new(vec![f0, f1], Manifest::default()).is_err());
    }

    #[test]
    fn annotator_defaults_are_valid() {
        let cfg = AnnotatorConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.epsilon_mm, cfg.delta_mm, cfg.window, cfg.m), (4.0, 15.0, 3, 4));
        assert_eq!((cfg.alpha, cfg.beta), (0.3, 0.7));
        let bad = AnnotatorConfig {
            window: 2,
            ..cfg
        };
        assert!(bad.validate().is_err());
        let bad = AnnotatorConfig { m: 3, ..cfg };
        assert!(bad.validate().is_err());
        let bad = AnnotatorConfig {
            delta_mm: 3.0,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }
}
