//! Pose estimation by chained point-to-plane ICP over neighbouring frames.
//!
//! Every frame is registered against up to `neighbor_span` preceding frames.
//! The per-neighbour estimates are fused by residual-weighted averaging in
//! the tangent space around the estimate from the immediately preceding
//! frame. Frame 0 defines the world frame.

use std::collections::HashSet;

use nalgebra::{Matrix6, Point3, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, PointCloud, SourcePixel};
use crate::spatial::NeighborIndex;
use crate::types::{CameraModel, Label, LabelMap, RigidPose, SceneSequence};

const MIN_CLOUD_POINTS: usize = 100;
const MIN_CORRESPONDENCES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcpMetric {
    PointToPlane,
    PointToPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    /// Per stage of the coarse-to-fine schedule.
    pub max_iterations: usize,
    /// Nearest neighbours farther than this are not paired; also the
    /// truncation level of the first stage.
    pub correspondence_radius_mm: f64,
    /// Truncation level of the last stage. Residuals above the current level
    /// count as the level itself, so outliers such as smeared points and
    /// occlusion boundaries cannot pull the estimate.
    pub inlier_threshold_mm: f64,
    /// Stop a stage once the update (rotation in radians plus translation
    /// relative to the cloud's RMS range) falls below this.
    pub convergence_eps: f64,
    pub neighbor_span: usize,
    pub voxel_mm: f64,
    /// Source points are subsampled to at most this many per pair.
    pub max_source_points: usize,
    pub metric: IcpMetric,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 40,
            correspondence_radius_mm: 150.0,
            inlier_threshold_mm: 5.0,
            convergence_eps: 1e-7,
            neighbor_span: 2,
            voxel_mm: 10.0,
            max_source_points: 4000,
            metric: IcpMetric::PointToPlane,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.correspondence_radius_mm > 0.0) {
            return Err(Error::InvalidConfig(
                "correspondence_radius_mm must be positive".into(),
            ));
        }
        if !(self.inlier_threshold_mm > 0.0 && self.inlier_threshold_mm <= self.correspondence_radius_mm) {
            return Err(Error::InvalidConfig(format!(
                "inlier_threshold_mm must be in (0, {}], got {}",
                self.correspondence_radius_mm, self.inlier_threshold_mm
            )));
        }
        if self.neighbor_span == 0 {
            return Err(Error::InvalidConfig("neighbor_span must be >= 1".into()));
        }
        if self.max_source_points < MIN_CORRESPONDENCES {
            return Err(Error::InvalidConfig("max_source_points too small".into()));
        }
        Ok(())
    }

    /// Truncation levels, each a third of the previous one.
    pub fn schedule(&self) -> Vec<f64> {
        let mut levels = vec![self.correspondence_radius_mm];
        let mut c = self.correspondence_radius_mm;
        while c > self.inlier_threshold_mm {
            c = (c / 3.0).max(self.inlier_threshold_mm);
            levels.push(c);
        }
        levels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcpStage {
    pub threshold_mm: f64,
    /// Truncated RMS cost at the stage's starting pose and after each
    /// accepted update.
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcpResult {
    /// Maps source coordinates into target coordinates.
    pub pose: RigidPose,
    /// RMS residual over inlier correspondences at the final pose.
    pub rms_residual: f64,
    /// Inliers over source samples not matched to a target boundary point.
    pub inlier_fraction: f64,
    /// Accepted updates over all stages.
    pub iterations: usize,
    pub converged: bool,
    pub stages: Vec<IcpStage>,
}

struct Correspondences {
    /// (source sample, target index) with residual below the level.
    pairs: Vec<(usize, usize)>,
    /// Source samples not paired with a boundary point.
    counted: usize,
    /// sqrt(mean(min(r², c²))) over source samples not paired with a
    /// boundary point.
    cost: f64,
    rms: f64,
}

/// How a moved source point finds its target partner.
enum Search {
    Tree(NeighborIndex),
    /// Project into the target camera and scan a small pixel window.
    Projective {
        camera: CameraModel,
        grid: Vec<Option<u32>>,
        window: usize,
    },
}

impl Search {
    fn projective(target: &PointCloud, camera: &CameraModel, window: usize) -> Self {
        let mut grid = vec![None; camera.pixel_count()];
        for (i, px) in target.source_pixel.iter().enumerate() {
            let (u, v) = (px.u as usize, px.v as usize);
            if u < camera.width && v < camera.height {
                grid[v * camera.width + u] = Some(i as u32);
            }
        }
        Search::Projective {
            camera: *camera,
            grid,
            window,
        }
    }

    #[inline]
    fn nearest(&self, q: &Point3<f64>, points: &[Point3<f64>]) -> Option<(usize, f64)> {
        match self {
            Search::Tree(index) => index.nearest(q),
            Search::Projective { camera, grid, window } => {
                let (u, v, _) = camera.project(q)?;
                let (cu, cv) = (u.round(), v.round());
                let r = *window as f64;
                if cu < -r || cv < -r || cu > camera.width as f64 - 1.0 + r || cv > camera.height as f64 - 1.0 + r {
                    return None;
                }
                let (cu, cv) = (cu as i64, cv as i64);
                let w = *window as i64;
                let mut best: Option<(usize, f64)> = None;
                for y in (cv - w).max(0)..=(cv + w).min(camera.height as i64 - 1) {
                    for x in (cu - w).max(0)..=(cu + w).min(camera.width as i64 - 1) {
                        if let Some(t) = grid[y as usize * camera.width + x as usize] {
                            let d2 = (points[t as usize] - q).norm_squared();
                            if best.is_none_or(|(_, b)| d2 < b) {
                                best = Some((t as usize, d2));
                            }
                        }
                    }
                }
                best
            }
        }
    }
}

struct Problem<'a> {
    source: Vec<Point3<f64>>,
    target: &'a PointCloud,
    search: Search,
    normals: Option<&'a [Vector3<f64>]>,
    /// Target points next to a hole or the image border. Pairs landing on
    /// them are ignored, so partial overlap is not penalised.
    boundary: &'a [bool],
    radius: f64,
}

impl Problem<'_> {
    fn residual(&self, moved: &Point3<f64>, t: usize) -> f64 {
        let d = moved - self.target.points[t];
        match self.normals {
            Some(n) => d.dot(&n[t]).abs(),
            None => d.norm(),
        }
    }

    fn correspond(&self, pose: &RigidPose, level: f64) -> Correspondences {
        let r2 = self.radius * self.radius;
        let c2 = level * level;
        let mut pairs = Vec::with_capacity(self.source.len());
        let mut truncated = 0.0;
        let mut inlier_sq = 0.0;
        let mut counted = 0usize;
        for (i, s) in self.source.iter().enumerate() {
            let moved = pose.transform_point(s);
            let r = match self.search.nearest(&moved, &self.target.points) {
                Some((t, _)) if self.boundary[t] => continue,
                Some((t, d2)) if d2 <= r2 => Some((t, self.residual(&moved, t))),
                _ => None,
            };
            counted += 1;
            match r {
                Some((t, r)) if r < level => {
                    truncated += r * r;
                    inlier_sq += r * r;
                    pairs.push((i, t));
                }
                _ => truncated += c2,
            }
        }
        let n = counted.max(1) as f64;
        let rms = if pairs.is_empty() {
            f64::INFINITY
        } else {
            (inlier_sq / pairs.len() as f64).sqrt()
        };
        Correspondences {
            pairs,
            counted,
            cost: (truncated / n).sqrt(),
            rms,
        }
    }

    /// Gauss-Newton step for the increment `(ω, t)` applied on the left.
    fn solve(&self, pose: &RigidPose, corr: &Correspondences) -> Option<Vector6<f64>> {
        let mut a = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        for &(i, t) in &corr.pairs {
            let s = pose.transform_point(&self.source[i]);
            let q = self.target.points[t];
            match self.normals {
                Some(normals) => {
                    let n = normals[t];
                    let r = (s - q).dot(&n);
                    let c = s.coords.cross(&n);
                    let j = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
                    a += j * j.transpose();
                    b -= j * r;
                }
                None => {
                    let d = s - q;
                    // d(s + ω×s + t)/d(ω, t) = [-[s]ₓ | I]
                    let rows = [
                        (Vector6::new(0.0, s.z, -s.y, 1.0, 0.0, 0.0), d.x),
                        (Vector6::new(-s.z, 0.0, s.x, 0.0, 1.0, 0.0), d.y),
                        (Vector6::new(s.y, -s.x, 0.0, 0.0, 0.0, 1.0), d.z),
                    ];
                    for (j, r) in rows {
                        a += j * j.transpose();
                        b -= j * r;
                    }
                }
            }
        }
        // Condition the rotation block by the cloud scale before deciding
        // whether the system is degenerate.
        let scale = self
            .source
            .iter()
            .map(|p| p.coords.norm_squared())
            .sum::<f64>()
            .sqrt()
            / (self.source.len().max(1) as f64).sqrt();
        let scale = scale.max(1.0);
        let mut s = Matrix6::<f64>::identity();
        for k in 0..3 {
            s[(k, k)] = 1.0 / scale;
        }
        let scaled = s * a * s;
        let eig = scaled.symmetric_eigenvalues();
        let (lo, hi) = eig
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), e| (lo.min(*e), hi.max(*e)));
        if !(hi > 0.0) || lo / hi < 1e-9 {
            return None;
        }
        let x = scaled.cholesky()?.solve(&(s * b));
        Some(s * x)
    }
}

/// At most `max` source points, chosen by a hash of their source pixel so
/// that dropping some points leaves the choice among the rest unchanged.
fn subsample(cloud: &PointCloud, max: usize) -> Vec<Point3<f64>> {
    if cloud.len() <= max {
        return cloud.points.clone();
    }
    let mut keyed: Vec<(u64, usize)> = cloud
        .source_pixel
        .iter()
        .enumerate()
        .map(|(i, px)| (pixel_hash(px), i))
        .collect();
    keyed.select_nth_unstable(max);
    let mut picked: Vec<usize> = keyed[..max].iter().map(|(_, i)| *i).collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| cloud.points[i]).collect()
}

/// splitmix64 of the packed pixel identity.
fn pixel_hash(px: &SourcePixel) -> u64 {
    let mut z = (u64::from(px.frame_id) << 40 ^ u64::from(px.v) << 20 ^ u64::from(px.u)).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn increment(delta: &Vector6<f64>) -> RigidPose {
    RigidPose::from_scaled_axis(
        Vector3::new(delta[0], delta[1], delta[2]),
        Vector3::new(delta[3], delta[4], delta[5]),
    )
}

/// Points with a missing 8-neighbour pixel in their own cloud. A cloud
/// without pixel structure (all sources distinct frames or sparse) simply
/// marks most points, so pass full-resolution targets.
fn boundary_flags(cloud: &PointCloud) -> Vec<bool> {
    let present: HashSet<(u32, u32, u32)> = cloud
        .source_pixel
        .iter()
        .map(|p| (p.frame_id, p.u, p.v))
        .collect();
    cloud
        .source_pixel
        .iter()
        .map(|p| {
            (-1i64..=1).any(|dv| {
                (-1i64..=1).any(|du| {
                    let (u, v) = (p.u as i64 + du, p.v as i64 + dv);
                    u < 0 || v < 0 || !present.contains(&(p.frame_id, u as u32, v as u32))
                })
            })
        })
        .collect()
}

/// Step sizes tried before a stage gives up on an update.
const LINE_SEARCH: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

/// Register `source` onto `target` starting from `init`. Point-to-plane needs
/// target normals; without them the point-to-point metric is used. The
/// target should be a full-resolution backprojection: its pixel grid is used
/// to find boundary points, which take no part in the fit.
///
/// Runs Gauss-Newton on a truncated quadratic whose truncation level shrinks
/// stage by stage (see [`IcpConfig::schedule`]). Within a stage the cost
/// never increases: a step that would raise it is halved, and the stage ends
/// when no tried step helps.
pub fn icp_pairwise(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidPose,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    let boundary = boundary_flags(target);
    run_icp(source, target, &boundary, init, cfg, || Search::Tree(NeighborIndex::new(&target.points)))
}

/// Pixel window scanned around the projection in [`icp_projective`].
pub const PROJECTIVE_WINDOW: usize = 2;

/// Like [`icp_pairwise`], but partners are searched in a small pixel window
/// around the source point's projection into the target camera instead of
/// over the whole cloud. `target` must be a camera-frame backprojection
/// from `camera`. Much faster; needs `init` within a few pixels of the
/// answer, which chained frame-to-frame registration provides.
pub fn icp_projective(
    source: &PointCloud,
    target: &PointCloud,
    camera: &CameraModel,
    init: &RigidPose,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    let boundary = boundary_flags(target);
    icp_projective_with_boundary(source, target, &boundary, camera, init, cfg)
}

/// [`icp_projective`] with the target's boundary flags supplied by the caller.
fn icp_projective_with_boundary(
    source: &PointCloud,
    target: &PointCloud,
    boundary: &[bool],
    camera: &CameraModel,
    init: &RigidPose,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    run_icp(source, target, boundary, init, cfg, || {
        Search::projective(target, camera, PROJECTIVE_WINDOW)
    })
}

fn run_icp(
    source: &PointCloud,
    target: &PointCloud,
    boundary: &[bool],
    init: &RigidPose,
    cfg: &IcpConfig,
    search: impl FnOnce() -> Search,
) -> Result<IcpResult> {
    cfg.validate()?;
    if source.len() < MIN_CLOUD_POINTS || target.len() < MIN_CLOUD_POINTS {
        return Err(Error::Degenerate(format!(
            "clouds need at least {MIN_CLOUD_POINTS} points (source {}, target {})",
            source.len(),
            target.len()
        )));
    }
    let normals = match cfg.metric {
        IcpMetric::PointToPlane => target.normals.as_deref(),
        IcpMetric::PointToPoint => None,
    };
    let problem = Problem {
        source: subsample(source, cfg.max_source_points),
        target,
        search: search(),
        normals,
        boundary,
        radius: cfg.correspondence_radius_mm,
    };
    let range_scale = {
        let n = problem.source.len() as f64;
        (problem.source.iter().map(|p| p.coords.norm_squared()).sum::<f64>() / n)
            .sqrt()
            .max(1.0)
    };

    let mut pose = *init;
    let mut stages = Vec::new();
    let mut iterations = 0;
    let mut converged = true;
    let mut corr = problem.correspond(&pose, cfg.correspondence_radius_mm);
    for (k, &level) in cfg.schedule().iter().enumerate() {
        corr = problem.correspond(&pose, level);
        if corr.pairs.len() < MIN_CORRESPONDENCES {
            return Err(Error::Degenerate(format!(
                "only {} correspondences within {level:.1} mm",
                corr.pairs.len()
            )));
        }
        let mut costs = vec![corr.cost];
        let mut stage_converged = false;
        for it in 0..cfg.max_iterations {
            let Some(delta) = problem.solve(&pose, &corr) else {
                if k == 0 && it == 0 {
                    return Err(Error::Degenerate(
                        "correspondences do not constrain all six degrees of freedom".into(),
                    ));
                }
                stage_converged = true;
                break;
            };
            let accepted = LINE_SEARCH.iter().find_map(|&scale| {
                let candidate = increment(&(delta * scale)).compose(&pose).renormalized();
                let next = problem.correspond(&candidate, level);
                (next.pairs.len() >= MIN_CORRESPONDENCES && next.cost <= corr.cost)
                    .then_some((candidate, next, scale))
            });
            let Some((candidate, next, scale)) = accepted else {
                stage_converged = true;
                break;
            };
            pose = candidate;
            corr = next;
            costs.push(corr.cost);
            iterations += 1;
            let step = (Vector3::new(delta[0], delta[1], delta[2]).norm()
                + Vector3::new(delta[3], delta[4], delta[5]).norm() / range_scale)
                * scale;
            if step < cfg.convergence_eps {
                stage_converged = true;
                break;
            }
        }
        converged &= stage_converged;
        stages.push(IcpStage {
            threshold_mm: level,
            costs,
        });
    }

    Ok(IcpResult {
        pose,
        rms_residual: corr.rms,
        inlier_fraction: corr.pairs.len() as f64 / corr.counted.max(1) as f64,
        iterations,
        converged,
        stages,
    })
}

/// Tangent-space coordinates of `pose` relative to `reference`.
fn log_relative(reference: &RigidPose, pose: &RigidPose) -> Vector6<f64> {
    let rel = reference.inverse().compose(pose);
    let w = rel.scaled_axis();
    let t = rel.translation();
    Vector6::new(w.x, w.y, w.z, t.x, t.y, t.z)
}

/// Weighted average of pose estimates, weights `1 / (rms² + 1e-6)`.
fn fuse_estimates(estimates: &[(RigidPose, f64)]) -> RigidPose {
    let (reference, _) = estimates[0];
    if estimates.len() == 1 {
        return reference;
    }
    let mut acc = Vector6::zeros();
    let mut total = 0.0;
    for (pose, rms) in estimates {
        let w = 1.0 / (rms * rms + 1e-6);
        acc += log_relative(&reference, pose) * w;
        total += w;
    }
    let mean = acc / total;
    reference
        .compose(&RigidPose::from_scaled_axis(
            Vector3::new(mean[0], mean[1], mean[2]),
            Vector3::new(mean[3], mean[4], mean[5]),
        ))
        .renormalized()
}

#[derive(Debug, Clone, Serialize)]
pub struct PairReport {
    pub source_id: u32,
    pub target_id: u32,
    pub rms_residual: f64,
    pub inlier_fraction: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub sequence: SceneSequence,
    pub pairs: Vec<PairReport>,
}

/// Per frame: the full cloud with its boundary flags (used as a target) and
/// its voxel-downsampled copy (used as a source).
struct PreparedFrame {
    full: PointCloud,
    boundary: Vec<bool>,
    sampled: PointCloud,
}

/// Boundary flags are taken before label filtering: a hole left by a removed
/// smeared pixel had a return, so it does not mark the edge of the overlap.
fn prepare_clouds(seq: &SceneSequence, labels: Option<&[LabelMap]>, cfg: &IcpConfig) -> Vec<PreparedFrame> {
    seq.frames
        .par_iter()
        .enumerate()
        .map(|(k, frame)| {
            let cloud = geometry::backproject_with_normals(frame);
            let boundary = boundary_flags(&cloud);
            let (full, boundary) = match labels {
                Some(labels) => {
                    let map = &labels[k];
                    let keep: Vec<bool> = cloud
                        .source_pixel
                        .iter()
                        .map(|px| map.labels[px.v as usize * map.width + px.u as usize] != Label::Smeared)
                        .collect();
                    let boundary = boundary.iter().zip(&keep).filter(|(_, k)| **k).map(|(b, _)| *b).collect();
                    (cloud.filtered(|i| keep[i]), boundary)
                }
                None => (cloud, boundary),
            };
            let sampled = geometry::voxel_downsample(&full, cfg.voxel_mm);
            PreparedFrame { full, boundary, sampled }
        })
        .collect()
}

fn chain(seq: &SceneSequence, clouds: &[PreparedFrame], cfg: &IcpConfig) -> Result<Alignment> {
    cfg.validate()?;
    if seq.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "alignment needs at least 2 frames, got {}",
            seq.len()
        )));
    }
    let mut poses = vec![RigidPose::identity()];
    let mut reports = Vec::new();
    for i in 1..seq.len() {
        let velocity = if i >= 2 {
            poses[i - 2].inverse().compose(&poses[i - 1])
        } else {
            RigidPose::identity()
        };
        let predicted = poses[i - 1].compose(&velocity);
        let targets: Vec<usize> = (i.saturating_sub(cfg.neighbor_span)..i).rev().collect();
        let results: Vec<Result<(usize, IcpResult)>> = targets
            .par_iter()
            .map(|&j| {
                let init = poses[j].inverse().compose(&predicted);
                let (source, target) = (&clouds[i].sampled, &clouds[j]);
                icp_projective_with_boundary(source, &target.full, &target.boundary, &seq.frames[j].camera, &init, cfg)
                    .map(|r| (j, r))
                    .map_err(|e| match e {
                        Error::Degenerate(msg) => Error::Degenerate(format!(
                            "frame {} against frame {}: {msg}",
                            seq.frames[i].frame_id, seq.frames[j].frame_id
                        )),
                        other => other,
                    })
            })
            .collect();
        let mut estimates = Vec::with_capacity(results.len());
        for r in results {
            let (j, res) = r?;
            reports.push(PairReport {
                source_id: seq.frames[i].frame_id,
                target_id: seq.frames[j].frame_id,
                rms_residual: res.rms_residual,
                inlier_fraction: res.inlier_fraction,
                iterations: res.iterations,
            });
            estimates.push((poses[j].compose(&res.pose), res.rms_residual));
        }
        poses.push(fuse_estimates(&estimates));
    }
    Ok(Alignment {
        sequence: seq.with_poses(&poses)?,
        pairs: reports,
    })
}

/// Estimate camera-to-world poses for every frame; frame 0 is the identity.
pub fn align_sequence(seq: &SceneSequence, cfg: &IcpConfig) -> Result<Alignment> {
    cfg.validate()?;
    let clouds = prepare_clouds(seq, None, cfg);
    chain(seq, &clouds, cfg)
}

/// Same as [`align_sequence`] with pixels labelled smeared left out of both
/// source and target clouds.
pub fn refine_with_labels(
    seq: &SceneSequence,
    labels: &[LabelMap],
    cfg: &IcpConfig,
) -> Result<Alignment> {
    cfg.validate()?;
    if labels.len() != seq.len() {
        return Err(Error::InvalidInput(format!(
            "{} label maps for {} frames",
            labels.len(),
            seq.len()
        )));
    }
    for (frame, map) in seq.frames.iter().zip(labels) {
        if map.width != frame.width() || map.height != frame.height() {
            return Err(Error::DimensionMismatch {
                expected_w: frame.width(),
                expected_h: frame.height(),
                got_w: map.width,
                got_h: map.height,
                context: format!("labels of frame {}", frame.frame_id),
            });
        }
    }
    let clouds = prepare_clouds(seq, Some(labels), cfg);
    chain(seq, &clouds, cfg)
}

/// Rotation (degrees) and translation (mm) error of each estimated pose
/// against ground truth, both expressed relative to their first frame.
pub fn pose_errors(estimated: &[RigidPose], truth: &[RigidPose]) -> Vec<(f64, f64)> {
    let (Some(e0), Some(t0)) = (estimated.first(), truth.first()) else {
        return Vec::new();
    };
    let e0i = e0.inverse();
    let t0i = t0.inverse();
    estimated
        .iter()
        .zip(truth)
        .map(|(e, t)| {
            let er = e0i.compose(e);
            let tr = t0i.compose(t);
            (tr.angle_to(&er).to_degrees(), tr.distance_to(&er))
        })
        .collect()
}
