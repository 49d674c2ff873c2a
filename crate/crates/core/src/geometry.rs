//! Projective geometry on depth frames: backprojection, cross-frame index
//! maps, z-buffered point rendering and normal-view (ω) maps.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use crate::error::Result;
use crate::types::{CameraModel, DepthFrame, RigidPose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SourcePixel {
    pub frame_id: u32,
    pub u: u32,
    pub v: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub source_pixel: Vec<SourcePixel>,
    /// Unit normals oriented towards the observing camera, when known.
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rigidly transform points (and normals).
    pub fn transformed(&self, pose: &RigidPose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            source_pixel: self.source_pixel.clone(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| pose.transform_vector(n)).collect()),
        }
    }

    /// Keep the points for which `keep` returns true.
    pub fn filtered(&self, mut keep: impl FnMut(usize) -> bool) -> PointCloud {
        let idx: Vec<usize> = (0..self.len()).filter(|i| keep(*i)).collect();
        PointCloud {
            points: idx.iter().map(|i| self.points[*i]).collect(),
            source_pixel: idx.iter().map(|i| self.source_pixel[*i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| idx.iter().map(|i| ns[*i]).collect()),
        }
    }

    pub fn extend(&mut self, other: PointCloud) {
        match (&mut self.normals, other.normals) {
            (Some(a), Some(b)) => a.extend(b),
            (None, _) if self.points.is_empty() => {}
            (a, _) => *a = None,
        }
        self.points.extend(other.points);
        self.source_pixel.extend(other.source_pixel);
    }
}

fn backproject_with(frame: &DepthFrame, pose: Option<&RigidPose>) -> PointCloud {
    let cam = &frame.camera;
    let mut points = Vec::with_capacity(frame.depth.len());
    let mut source_pixel = Vec::with_capacity(frame.depth.len());
    for v in 0..cam.height {
        for u in 0..cam.width {
            let d = frame.depth[v * cam.width + u];
            if d <= 0.0 {
                continue;
            }
            let p = cam.unproject(u as f64, v as f64, d as f64);
            points.push(match pose {
                Some(t) => t.transform_point(&p),
                None => p,
            });
            source_pixel.push(SourcePixel {
                frame_id: frame.frame_id,
                u: u as u32,
                v: v as u32,
            });
        }
    }
    PointCloud {
        points,
        source_pixel,
        normals: None,
    }
}

/// World-frame cloud with one point per pixel that has a depth return.
pub fn backproject(frame: &DepthFrame) -> Result<PointCloud> {
    let pose = frame.require_pose()?;
    Ok(backproject_with(frame, Some(pose)))
}

/// Camera-frame cloud; needs no pose.
pub fn backproject_camera(frame: &DepthFrame) -> PointCloud {
    backproject_with(frame, None)
}

/// Second differences along a row or column beyond this (relative to the
/// centre depth, with a floor in mm) mark a depth discontinuity.
const CONTINUITY_REL: f64 = 0.01;
const CONTINUITY_MIN_MM: f64 = 20.0;

fn is_continuous(frame: &DepthFrame, u: usize, v: usize) -> bool {
    let d = |x: usize, y: usize| frame.depth_at(x, y) as f64;
    let c = d(u, v);
    let limit = (CONTINUITY_REL * c).max(CONTINUITY_MIN_MM);
    (d(u - 1, v) + d(u + 1, v) - 2.0 * c).abs() <= limit
        && (d(u, v - 1) + d(u, v + 1) - 2.0 * c).abs() <= limit
}

/// Camera-frame cloud carrying depth-facet normals. Pixels without a usable
/// normal, or whose neighbourhood straddles a depth discontinuity, are
/// dropped.
pub fn backproject_with_normals(frame: &DepthFrame) -> PointCloud {
    let normals = depth_normals(frame);
    let cam = &frame.camera;
    let mut cloud = PointCloud {
        normals: Some(Vec::new()),
        ..PointCloud::default()
    };
    let out_normals = cloud.normals.as_mut().expect("just set");
    for v in 0..cam.height {
        for u in 0..cam.width {
            let i = v * cam.width + u;
            let Some(n) = normals[i] else { continue };
            if !is_continuous(frame, u, v) {
                continue;
            }
            cloud
                .points
                .push(cam.unproject(u as f64, v as f64, frame.depth[i] as f64));
            cloud.source_pixel.push(SourcePixel {
                frame_id: frame.frame_id,
                u: u as u32,
                v: v as u32,
            });
            out_normals.push(n);
        }
    }
    cloud
}

/// Where a source pixel lands in another camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reprojection {
    pub u: f64,
    pub v: f64,
    /// z-depth in the target camera.
    pub depth: f64,
    /// Nearest target pixel, `None` when it falls outside the raster.
    pub pixel: Option<(usize, usize)>,
}

impl Reprojection {
    pub fn in_frame(&self) -> bool {
        self.pixel.is_some()
    }
}

/// Per-pixel mapping from frame `f` into frame `g`, indexed like `f`'s raster.
/// Pixels without depth, or landing behind `g`'s camera, map to `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    pub width: usize,
    pub height: usize,
    pub entries: Vec<Option<Reprojection>>,
}

impl IndexMap {
    pub fn get(&self, u: usize, v: usize) -> Option<&Reprojection> {
        self.entries[v * self.width + u].as_ref()
    }
}

/// Transform taking camera-`f` coordinates to camera-`g` coordinates.
pub fn relative_pose(f: &RigidPose, g: &RigidPose) -> RigidPose {
    g.inverse().compose(f)
}

pub fn reproject_index(frame_f: &DepthFrame, frame_g: &DepthFrame) -> Result<IndexMap> {
    let rel = relative_pose(frame_f.require_pose()?, frame_g.require_pose()?);
    let cam_f = &frame_f.camera;
    let cam_g = &frame_g.camera;
    let mut entries = vec![None; cam_f.pixel_count()];
    for v in 0..cam_f.height {
        for u in 0..cam_f.width {
            let i = v * cam_f.width + u;
            let d = frame_f.depth[i];
            if d <= 0.0 {
                continue;
            }
            let p = rel.transform_point(&cam_f.unproject(u as f64, v as f64, d as f64));
            if let Some((ug, vg, dg)) = cam_g.project(&p) {
                entries[i] = Some(Reprojection {
                    u: ug,
                    v: vg,
                    depth: dg,
                    pixel: cam_g.nearest_pixel(ug, vg),
                });
            }
        }
    }
    Ok(IndexMap {
        width: cam_f.width,
        height: cam_f.height,
        entries,
    })
}

/// Z-buffered rendering of a point cloud. `source` holds the index of the
/// winning cloud point.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedDepth {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub source: Vec<Option<u32>>,
}

impl RenderedDepth {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            source: vec![None; width * height],
        }
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn covered(&self) -> usize {
        self.source.iter().filter(|s| s.is_some()).count()
    }

    /// Splat a single camera-frame depth sample. Returns true if it won.
    #[inline]
    pub fn splat(&mut self, pixel: (usize, usize), depth: f64, index: u32) -> bool {
        let i = pixel.1 * self.width + pixel.0;
        if self.source[i].is_none() || depth < self.depth[i] {
            self.depth[i] = depth;
            self.source[i] = Some(index);
            true
        } else {
            false
        }
    }
}

/// Render a world-frame cloud into the camera at `pose` with one-pixel splats.
/// Equal depths keep the earlier point.
pub fn render_depth(cloud: &PointCloud, camera: &CameraModel, pose: &RigidPose) -> RenderedDepth {
    let world_to_cam = pose.inverse();
    let mut out = RenderedDepth::empty(camera.width, camera.height);
    for (i, p) in cloud.points.iter().enumerate() {
        let pc = world_to_cam.transform_point(p);
        let Some((u, v, z)) = camera.project(&pc) else {
            continue;
        };
        if let Some(px) = camera.nearest_pixel(u, v) {
            out.splat(px, z, i as u32);
        }
    }
    out
}

#[inline]
fn point_at(frame: &DepthFrame, u: usize, v: usize) -> Option<Point3<f64>> {
    let d = frame.depth_at(u, v);
    (d > 0.0).then(|| frame.camera.unproject(u as f64, v as f64, d as f64))
}

/// Camera-frame unit normals from central differences of backprojected
/// neighbours, oriented towards the camera. `None` at the border and wherever
/// the pixel or one of its four neighbours has no depth.
pub fn depth_normals(frame: &DepthFrame) -> Vec<Option<Vector3<f64>>> {
    let (w, h) = (frame.width(), frame.height());
    let mut out = vec![None; w * h];
    if w < 3 || h < 3 {
        return out;
    }
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let (Some(c), Some(l), Some(r), Some(t), Some(b)) = (
                point_at(frame, u, v),
                point_at(frame, u - 1, v),
                point_at(frame, u + 1, v),
                point_at(frame, u, v - 1),
                point_at(frame, u, v + 1),
            ) else {
                continue;
            };
            let n = (r - l).cross(&(b - t));
            let norm = n.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                continue;
            }
            let mut n = n / norm;
            if n.dot(&c.coords) > 0.0 {
                n = -n;
            }
            out[v * w + u] = Some(n);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmegaMap {
    pub width: usize,
    pub height: usize,
    pub omega: Vec<f32>,
}

/// |n · p/‖p‖| per pixel: 1 for surfaces facing the camera, towards 0 at
/// grazing angles, 0 where no normal is available.
pub fn omega_map(frame: &DepthFrame) -> OmegaMap {
    let normals = depth_normals(frame);
    let cam = &frame.camera;
    let mut omega = vec![0.0f32; cam.pixel_count()];
    for v in 0..cam.height {
        for u in 0..cam.width {
            let i = v * cam.width + u;
            if let Some(n) = normals[i] {
                let ray = cam.unproject(u as f64, v as f64, 1.0).coords.normalize();
                omega[i] = n.dot(&ray).abs().min(1.0) as f32;
            }
        }
    }
    OmegaMap {
        width: cam.width,
        height: cam.height,
        omega,
    }
}

/// Keep the first point falling in each `voxel_mm` cube.
pub fn voxel_downsample(cloud: &PointCloud, voxel_mm: f64) -> PointCloud {
    if !(voxel_mm > 0.0) {
        return cloud.clone();
    }
    let mut seen: HashMap<(i64, i64, i64), ()> = HashMap::with_capacity(cloud.len());
    let inv = 1.0 / voxel_mm;
    cloud.filtered(|i| {
        let p = cloud.points[i];
        let key = (
            (p.x * inv).floor() as i64,
            (p.y * inv).floor() as i64,
            (p.z * inv).floor() as i64,
        );
        seen.insert(key, ()).is_none()
    })
}
