//! Per-pixel evidence from reference frames and its fusion into labels.
//!
//! For a frame `f` and each reference `f'` the backprojected cloud of `f` and
//! the cloud of `f'` are rendered into `f'` with the same z-buffer splatter.
//! Where a point of `f` is the visible surface at its projected pixel, its
//! depth is compared with what `f'` measured there:
//!
//! * agreement within ε gives multi-view evidence `v`,
//! * the reference seeing more than δ beyond it gives see-through-behind `b`,
//! * no return at all gives see-through-empty `e`.
//!
//! Flags are ORed over references and fused into valid / smeared / unknown.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FLAG_BEHIND, FLAG_EMPTY, FLAG_VALID};
use crate::error::{Error, Result};
use crate::geometry::{backproject, render_depth, PointCloud, RenderedDepth};
use crate::types::{AnnotatorConfig, DepthFrame, EvidenceMap, Label, LabelMap, SceneSequence};

/// Largest all-empty window recorded for see-through-empty pixels.
pub const MAX_EMPTY_WINDOW: usize = 31;

/// Indices of the reference frames for frame `f`: up to `m/2` on each side,
/// truncated at the sequence ends.
pub fn reference_frames(len: usize, f: usize, m: usize) -> Vec<usize> {
    if f >= len {
        return Vec::new();
    }
    let lo = f.saturating_sub(m / 2);
    let hi = (f + m / 2).min(len - 1);
    (lo..=hi).filter(|&r| r != f).collect()
}

/// Minimum nonzero depth over the pixel centres enclosing the continuous
/// position `(u, v)`, widened by `r` on every side. `None` when that block
/// is clipped by the raster border, where it would miss the nearer rows of
/// a grazing surface.
fn enclosing_min(map: &RenderedDepth, u: f64, v: f64, r: usize) -> Option<f64> {
    let (x0, y0) = (u.floor(), v.floor());
    if x0 < r as f64 || y0 < r as f64 {
        return None;
    }
    let (x0, y0) = (x0 as usize - r, y0 as usize - r);
    let (x1, y1) = (x0 + 2 * r + 1, y0 + 2 * r + 1);
    if x1 >= map.width || y1 >= map.height {
        return None;
    }
    let mut best = f64::INFINITY;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = map.depth[y * map.width + x];
            if d > 0.0 && d < best {
                best = d;
            }
        }
    }
    Some(best)
}

/// Steepest surface, as incidence angle, assumed to connect a point to a
/// neighbouring return when testing whether the reference sees past it.
pub const MAX_INCIDENCE_DEG: f64 = 80.0;

/// Whether some return in the block of pixel centres enclosing `(u, v)`,
/// widened by one pixel, may lie on a surface through depth `z` at
/// `(u, v)`: within `tol` plus `steep · depth` per pixel of distance. Such a
/// surface can be narrower than a pixel (a corner tip) and so miss every
/// enclosing pixel centre.
fn surface_nearby(map: &RenderedDepth, u: f64, v: f64, z: f64, tol: f64, steep: f64) -> bool {
    let (x0, y0) = (u.floor() as isize - 1, v.floor() as isize - 1);
    (y0..=y0 + 3).any(|y| {
        (x0..=x0 + 3).any(|x| {
            if x < 0 || y < 0 || x as usize >= map.width || y as usize >= map.height {
                return false;
            }
            let d = map.depth[y as usize * map.width + x as usize];
            let dist = (u - x as f64).hypot(v - y as f64);
            d > 0.0 && (d - z).abs() <= tol + steep * d.max(z) * dist
        })
    })
}

/// Whether pixel `(u, v)` of `frame` lies on a run of three returns, along
/// the row or the column, whose second difference is within `tol`.
fn continues_linearly(frame: &DepthFrame, u: usize, v: usize, tol: f64) -> bool {
    let (w, h) = (frame.width(), frame.height());
    let d = |x: usize, y: usize| frame.depth[y * w + x] as f64;
    let linear = |a: f64, b: f64, c: f64| a > 0.0 && b > 0.0 && c > 0.0 && (a + c - 2.0 * b).abs() <= tol;
    let along = |i: usize, n: usize, get: &dyn Fn(usize) -> f64| {
        (i >= 1 && i + 1 < n && linear(get(i - 1), get(i), get(i + 1)))
            || (i + 2 < n && linear(get(i), get(i + 1), get(i + 2)))
            || (i >= 2 && linear(get(i - 2), get(i - 1), get(i)))
    };
    along(u, w, &|x| d(x, v)) || along(v, h, &|y| d(u, y))
}

/// Central difference at `i` along an axis of length `n`, one-sided on the
/// border.
fn axis_slope(i: usize, n: usize, get: impl Fn(usize) -> f64) -> f64 {
    let lo = i.saturating_sub(1);
    let hi = (i + 1).min(n - 1);
    (get(hi) - get(lo)) / (hi - lo) as f64
}

/// Whether the depth at `(u, v)` continues smoothly along the row and along
/// the column: both neighbours present and the second difference within
/// `limit`. On the raster border the single inner neighbour must lie within
/// `limit`.
fn smooth_axes(map: &RenderedDepth, u: usize, v: usize, limit: f64) -> (bool, bool) {
    let at = |x: usize, y: usize| map.depth[y * map.width + x];
    let s = at(u, v);
    let axis = |prev: Option<f64>, next: Option<f64>| match (prev, next) {
        (Some(a), Some(b)) => a > 0.0 && b > 0.0 && (a + b - 2.0 * s).abs() <= limit,
        (Some(a), None) | (None, Some(a)) => a > 0.0 && (a - s).abs() <= limit,
        (None, None) => false,
    };
    let row = axis(
        (u > 0).then(|| at(u - 1, v)),
        (u + 1 < map.width).then(|| at(u + 1, v)),
    );
    let col = axis(
        (v > 0).then(|| at(u, v - 1)),
        (v + 1 < map.height).then(|| at(u, v + 1)),
    );
    (row, col)
}

/// Reference depth at the sub-pixel position `(u, v)`, extrapolated to first
/// order from the nearest pixel `(pu, pv)` where the surface is smooth along
/// both axes, together with the depth change across half a pixel there.
/// Elsewhere the nearest pixel's depth and zero slack.
fn surface_depth(map: &RenderedDepth, pu: usize, pv: usize, u: f64, v: f64, limit: f64) -> (f64, f64) {
    let s = map.depth[pv * map.width + pu];
    if smooth_axes(map, pu, pv, limit) != (true, true) {
        return (s, 0.0);
    }
    let at = |x: usize, y: usize| map.depth[y * map.width + x];
    let gx = axis_slope(pu, map.width, |x| at(x, pv));
    let gy = axis_slope(pv, map.height, |y| at(pu, y));
    (s + gx * (u - pu as f64) + gy * (v - pv as f64), 0.5 * (gx.abs() + gy.abs()))
}

/// Side of the largest odd square centred on `(u, v)` that lies inside the
/// raster and holds no return. Pixels outside the raster count as occupied.
fn empty_extent(map: &RenderedDepth, u: usize, v: usize) -> usize {
    if map.depth[v * map.width + u] > 0.0 {
        return 0;
    }
    let mut r = 0;
    while 2 * (r + 1) + 1 <= MAX_EMPTY_WINDOW {
        let next = r + 1;
        if u < next || v < next || u + next >= map.width || v + next >= map.height {
            break;
        }
        let ring_empty = (u - next..=u + next).all(|x| {
            map.depth[(v - next) * map.width + x] == 0.0 && map.depth[(v + next) * map.width + x] == 0.0
        }) && (v - next..=v + next).all(|y| {
            map.depth[y * map.width + u - next] == 0.0 && map.depth[y * map.width + u + next] == 0.0
        });
        if !ring_empty {
            break;
        }
        r = next;
    }
    2 * r + 1
}

/// Angle between two rays; exact zero for parallel ones.
fn ray_angle(a: &nalgebra::Vector3<f64>, b: &nalgebra::Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

fn accumulate(
    evidence: &mut EvidenceMap,
    frame: &DepthFrame,
    cloud: &PointCloud,
    reference: &DepthFrame,
    reference_cloud: &PointCloud,
    cfg: &AnnotatorConfig,
) -> Result<()> {
    let cam = &reference.camera;
    let pose_f = frame.require_pose()?;
    let pose_r = reference.require_pose()?;
    let own = render_depth(reference_cloud, cam, pose_r);
    let mapped = render_depth(cloud, cam, pose_r);
    let world_to_r = pose_r.inverse();
    let (centre_f, centre_r) = (pose_f.center(), pose_r.center());
    let width_f = frame.camera.width;
    let steep_per_px = MAX_INCIDENCE_DEG.to_radians().tan() / cam.fx.min(cam.fy);

    for (p, src) in cloud.points.iter().zip(&cloud.source_pixel) {
        let Some((u, v, z)) = cam.project(&world_to_r.transform_point(p)) else {
            continue;
        };
        let Some((pu, pv)) = cam.nearest_pixel(u, v) else {
            continue;
        };
        let at = pv * cam.width + pu;
        let s = own.depth[at];
        let (surface, slack) = if s > 0.0 {
            surface_depth(&own, pu, pv, u, v, cfg.delta_mm)
        } else {
            (0.0, 0.0)
        };
        // hidden behind another point of the same frame
        if z > mapped.depth[at] + cfg.epsilon_mm + slack {
            continue;
        }
        let i = src.v as usize * width_f + src.u as usize;
        if s > 0.0 {
            // a surface pixel continues along at least one axis; isolated
            // depths (smear in the reference itself) cannot validate
            let (row, col) = smooth_axes(&own, pu, pv, cfg.delta_mm);
            if (row || col) && (z - surface).abs() < cfg.epsilon_mm {
                evidence.valid[i] = true;
                let theta = ray_angle(&(p - centre_f), &(p - centre_r)) as f32;
                evidence.parallax[i] = evidence.parallax[i].max(theta);
            } else if enclosing_min(&own, u, v, cfg.behind_support).is_some_and(|m| z < m - cfg.delta_mm) {
                // a point on a smooth run in its own frame may sit on a steep
                // face the reference samples only beside it
                let steep = if continues_linearly(frame, src.u as usize, src.v as usize, cfg.delta_mm) {
                    steep_per_px
                } else {
                    0.0
                };
                if !surface_nearby(&own, u, v, z, cfg.delta_mm, steep) {
                    evidence.behind[i] = true;
                }
            }
        } else {
            evidence.empty[i] = true;
            let extent = empty_extent(&own, pu, pv) as u8;
            evidence.empty_extent[i] = evidence.empty_extent[i].max(extent);
        }
    }
    Ok(())
}

/// Raw `v`, `b`, `e` flags for frame index `f`, plus the widest validating
/// ray angle per pixel. Confidence is left at zero.
pub fn gather_evidence(seq: &SceneSequence, f: usize, cfg: &AnnotatorConfig) -> Result<EvidenceMap> {
    cfg.validate()?;
    if f >= seq.len() {
        return Err(Error::InvalidInput(format!(
            "frame index {f} out of range for {} frames",
            seq.len()
        )));
    }
    let refs = reference_frames(seq.len(), f, cfg.m);
    if refs.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "frame {} has {} reference frame(s) in its window, need at least 2",
            seq.frames[f].frame_id,
            refs.len()
        )));
    }
    let frame = &seq.frames[f];
    let cloud = backproject(frame)?;
    let mut evidence = EvidenceMap::new(frame.width(), frame.height());
    for r in refs {
        let reference = &seq.frames[r];
        let reference_cloud = backproject(reference)?;
        accumulate(&mut evidence, frame, &cloud, reference, &reference_cloud, cfg)?;
    }
    Ok(evidence)
}

/// `sin²θ` with θ clamped to a right angle.
pub fn confidence_from_angle(theta: f64) -> f32 {
    let t = theta.clamp(0.0, std::f64::consts::FRAC_PI_2);
    let s = t.sin();
    (s * s) as f32
}

/// Fill `confidence` from the stored parallax angles; zero where `v = 0`.
pub fn confidence(mut evidence: EvidenceMap) -> EvidenceMap {
    for i in 0..evidence.len() {
        evidence.confidence[i] = if evidence.valid[i] {
            confidence_from_angle(evidence.parallax[i] as f64)
        } else {
            0.0
        };
    }
    evidence
}

/// Keep `e` only where some reference showed an all-empty `window × window`
/// block around the projected pixel.
pub fn filter_empty_evidence(mut evidence: EvidenceMap, window: usize) -> Result<EvidenceMap> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidConfig(format!("window must be odd and >= 1, got {window}")));
    }
    if window > MAX_EMPTY_WINDOW {
        return Err(Error::InvalidConfig(format!(
            "window {window} exceeds the supported maximum {MAX_EMPTY_WINDOW}"
        )));
    }
    for (e, extent) in evidence.empty.iter_mut().zip(&evidence.empty_extent) {
        *e &= *extent as usize >= window;
    }
    Ok(evidence)
}

/// Label for one flag combination.
pub fn fuse_flags(v: bool, b: bool, e: bool) -> Label {
    match (v, b || e) {
        (true, false) => Label::Valid,
        (false, true) => Label::Smeared,
        _ => Label::Unknown,
    }
}

pub fn fuse_labels(evidence: &EvidenceMap) -> LabelMap {
    let mut out = LabelMap::unknown(evidence.width, evidence.height);
    for i in 0..evidence.len() {
        let label = fuse_flags(evidence.valid[i], evidence.behind[i], evidence.empty[i]);
        out.labels[i] = label;
        out.confidence[i] = match label {
            Label::Valid => evidence.confidence[i],
            Label::Smeared => 1.0,
            Label::Unknown => 0.0,
        };
    }
    out
}

/// Flags that back a hard label: `v` on valid pixels, `b`/`e` on smeared
/// ones, nothing on unknown or conflicting pixels.
pub fn training_flags(evidence: &EvidenceMap, labels: &LabelMap) -> Vec<u8> {
    labels
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            Label::Valid => FLAG_VALID,
            Label::Smeared => {
                (if evidence.behind[i] { FLAG_BEHIND } else { 0 })
                    | (if evidence.empty[i] { FLAG_EMPTY } else { 0 })
            }
            Label::Unknown => 0,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagCounts {
    pub v: u64,
    pub b: u64,
    pub e: u64,
}

impl FlagCounts {
    pub fn from_flags(flags: &[u8]) -> Self {
        let mut c = Self::default();
        for f in flags {
            c.v += u64::from(f & FLAG_VALID != 0);
            c.b += u64::from(f & FLAG_BEHIND != 0);
            c.e += u64::from(f & FLAG_EMPTY != 0);
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.v + self.b + self.e
    }
}

impl std::ops::Add for FlagCounts {
    type Output = FlagCounts;

    fn add(self, o: FlagCounts) -> FlagCounts {
        FlagCounts {
            v: self.v + o.v,
            b: self.b + o.b,
            e: self.e + o.e,
        }
    }
}

impl std::iter::Sum for FlagCounts {
    fn sum<I: Iterator<Item = FlagCounts>>(iter: I) -> Self {
        iter.fold(FlagCounts::default(), |a, b| a + b)
    }
}

/// Per-class loss weights, `w_k = 1 - n_k / (n_v + n_b + n_e)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub w_b: f64,
    pub w_e: f64,
    pub w_v: f64,
}

pub fn class_weights(counts: &FlagCounts) -> Result<WeightSet> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::InvalidInput("no labeled pixels to weight".into()));
    }
    // (t - n) / t in exact integers first, so equal counts give exactly 2/3
    let w = |n: u64| (total - n) as f64 / total as f64;
    Ok(WeightSet {
        w_b: w(counts.b),
        w_e: w(counts.e),
        w_v: w(counts.v),
    })
}

#[derive(Debug, Clone)]
pub struct FrameAnnotation {
    pub frame_id: u32,
    pub evidence: EvidenceMap,
    pub labels: LabelMap,
    /// Bits as written to the flags raster; see [`training_flags`].
    pub flags: Vec<u8>,
    /// True when the window held too few references to annotate.
    pub skipped: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnnotationStats {
    pub frames: usize,
    pub skipped_frames: Vec<u32>,
    pub valid: usize,
    pub smeared: usize,
    pub unknown: usize,
    /// Pixels with a depth return that ended up unknown, over all pixels
    /// with a depth return.
    pub unknown_fraction: f64,
    /// Pixels carrying `v` together with `b` or `e`.
    pub conflicts: usize,
    pub counts: FlagCounts,
    pub weights: Option<WeightSet>,
}

#[derive(Debug, Clone)]
pub struct Annotation {
    pub frames: Vec<FrameAnnotation>,
    pub stats: AnnotationStats,
}

/// Gather, weight by parallax, filter and fuse one frame.
pub fn annotate_frame(seq: &SceneSequence, f: usize, cfg: &AnnotatorConfig) -> Result<FrameAnnotation> {
    let evidence = confidence(gather_evidence(seq, f, cfg)?);
    let evidence = filter_empty_evidence(evidence, cfg.window)?;
    let labels = fuse_labels(&evidence);
    let flags = training_flags(&evidence, &labels);
    Ok(FrameAnnotation {
        frame_id: seq.frames[f].frame_id,
        evidence,
        labels,
        flags,
        skipped: false,
    })
}

/// Annotate every frame in parallel. Frames whose truncated window holds
/// fewer than two references come back all-unknown and are listed in
/// `skipped_frames`; it is an error only if no frame can be annotated.
pub fn annotate_sequence(seq: &SceneSequence, cfg: &AnnotatorConfig) -> Result<Annotation> {
    cfg.validate()?;
    for frame in &seq.frames {
        frame.require_pose()?;
    }
    let frames: Vec<FrameAnnotation> = (0..seq.len())
        .into_par_iter()
        .map(|f| {
            if reference_frames(seq.len(), f, cfg.m).len() < 2 {
                let frame = &seq.frames[f];
                let (w, h) = (frame.width(), frame.height());
                return Ok(FrameAnnotation {
                    frame_id: frame.frame_id,
                    evidence: EvidenceMap::new(w, h),
                    labels: LabelMap::unknown(w, h),
                    flags: vec![0; w * h],
                    skipped: true,
                });
            }
            annotate_frame(seq, f, cfg)
        })
        .collect::<Result<_>>()?;
    let skipped_frames: Vec<u32> = frames.iter().filter(|a| a.skipped).map(|a| a.frame_id).collect();
    if skipped_frames.len() == frames.len() {
        return Err(Error::InvalidInput(format!(
            "no frame has two reference frames within m={} ({} frames)",
            cfg.m,
            seq.len()
        )));
    }
    for id in &skipped_frames {
        log::warn!("frame {id}: fewer than two reference frames, left unknown");
    }

    let (mut valid, mut smeared, mut unknown, mut conflicts, mut returns) = (0, 0, 0, 0, 0);
    for (a, frame) in frames.iter().zip(&seq.frames) {
        valid += a.labels.count(Label::Valid);
        smeared += a.labels.count(Label::Smeared);
        let ev = &a.evidence;
        conflicts += (0..ev.len())
            .filter(|&i| ev.valid[i] && (ev.behind[i] || ev.empty[i]))
            .count();
        for (d, l) in frame.depth.iter().zip(&a.labels.labels) {
            if *d > 0.0 {
                returns += 1;
                unknown += usize::from(*l == Label::Unknown);
            }
        }
    }
    let counts: FlagCounts = frames.iter().map(|a| FlagCounts::from_flags(&a.flags)).sum();
    let weights = class_weights(&counts).ok();
    let stats = AnnotationStats {
        frames: frames.len(),
        skipped_frames,
        valid,
        smeared,
        unknown,
        unknown_fraction: if returns > 0 { unknown as f64 / returns as f64 } else { 1.0 },
        conflicts,
        counts,
        weights,
    };
    Ok(Annotation { frames, stats })
}
