//! Training-set export: per frame the centre square is cropped and
//! resampled by nearest neighbour to a fixed size, and depth, ω, labels,
//! confidence and flag rasters are written next to a JSON manifest holding
//! the class weights and loss hyper-parameters.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.json
//! depth/NNNNNN.png         u16, mm
//! omega/NNNNNN.png         u16, ω · 65535
//! labels/NNNNNN.png        u8, 0 unknown / 1 valid / 2 smeared
//! labels/NNNNNN.conf.png   u16, c · 65535
//! labels/NNNNNN.flags.png  u8, bit 1 = v, 2 = b, 4 = e
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotator::{class_weights, FlagCounts, WeightSet};
use crate::dataset::{
    self, frame_stem, quantize_depth, write_json, write_u16_png, FLAG_BEHIND, FLAG_EMPTY, FLAG_VALID,
    LABELS_DIR,
};
use crate::error::{Error, Result};
use crate::geometry::omega_map;
use crate::types::{DepthFrame, LabelMap};

pub const EXPORT_SIZE: usize = 512;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const OMEGA_DIR: &str = "omega";
/// Scale of the 16-bit ω and confidence rasters.
pub const UNIT_SCALE: f64 = 65535.0;

/// Source index for each destination index when a centred square of side
/// `min(width, height)` is resampled to `size × size` by nearest neighbour.
pub fn resample_indices(width: usize, height: usize, size: usize) -> Vec<usize> {
    let side = width.min(height);
    let (ox, oy) = ((width - side) / 2, (height - side) / 2);
    let map = |d: usize| (((d as f64 + 0.5) * side as f64 / size as f64).floor() as usize).min(side - 1);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = oy + map(y);
        for x in 0..size {
            out.push(sy * width + ox + map(x));
        }
    }
    out
}

pub fn resample<T: Copy>(data: &[T], indices: &[usize]) -> Vec<T> {
    indices.iter().map(|&i| data[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagBits {
    pub valid: u8,
    pub behind: u8,
    pub empty: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedFrame {
    pub frame_id: u32,
    pub depth: PathBuf,
    pub omega: PathBuf,
    pub labels: PathBuf,
    pub confidence: PathBuf,
    pub flags: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub size: usize,
    pub depth_unit: String,
    pub omega_scale: f64,
    pub confidence_scale: f64,
    pub flag_bits: FlagBits,
    pub alpha: f64,
    pub beta: f64,
    pub counts: FlagCounts,
    pub weights: WeightSet,
    pub frames: Vec<ExportedFrame>,
}

/// One annotated frame ready for export.
pub struct ExportInput<'a> {
    pub frame: &'a DepthFrame,
    pub labels: &'a LabelMap,
    pub flags: &'a [u8],
}

fn check_dims(input: &ExportInput) -> Result<()> {
    let (w, h) = (input.frame.width(), input.frame.height());
    let mismatch = |got_w: usize, got_h: usize, what: &str| Error::DimensionMismatch {
        expected_w: w,
        expected_h: h,
        got_w,
        got_h,
        context: format!("frame {} {what}", input.frame.frame_id),
    };
    if (input.labels.width, input.labels.height) != (w, h) {
        return Err(mismatch(input.labels.width, input.labels.height, "labels"));
    }
    if input.flags.len() != w * h {
        return Err(mismatch(input.flags.len(), 1, "flags"));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes the export layout for `inputs` into `out` and returns the manifest.
/// Weights are computed from the exported flag rasters.
pub fn export_frames(out: &Path, inputs: &[ExportInput], alpha: f64, beta: f64) -> Result<ExportManifest> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("nothing to export".into()));
    }
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::InvalidConfig(format!("alpha and beta must be > 0, got {alpha}, {beta}")));
    }
    inputs.iter().try_for_each(check_dims)?;
    for dir in [dataset::DEPTH_DIR, OMEGA_DIR, LABELS_DIR] {
        create_dir(&out.join(dir))?;
    }
    let mut counts = FlagCounts::default();
    let mut frames = Vec::with_capacity(inputs.len());
    for input in inputs {
        let frame = input.frame;
        let id = frame.frame_id;
        let idx = resample_indices(frame.width(), frame.height(), EXPORT_SIZE);
        let stem = frame_stem(id);

        let depth: Vec<u16> = resample(&frame.depth, &idx).into_iter().map(quantize_depth).collect();
        let depth_rel = Path::new(dataset::DEPTH_DIR).join(format!("{stem}.png"));
        write_u16_png(&out.join(&depth_rel), EXPORT_SIZE, EXPORT_SIZE, depth)?;

        let omega = omega_map(frame);
        let omega: Vec<u16> = resample(&omega.omega, &idx)
            .into_iter()
            .map(|w| (f64::from(w).clamp(0.0, 1.0) * UNIT_SCALE).round() as u16)
            .collect();
        let omega_rel = Path::new(OMEGA_DIR).join(format!("{stem}.png"));
        write_u16_png(&out.join(&omega_rel), EXPORT_SIZE, EXPORT_SIZE, omega)?;

        let labels = LabelMap {
            width: EXPORT_SIZE,
            height: EXPORT_SIZE,
            labels: resample(&input.labels.labels, &idx),
            confidence: resample(&input.labels.confidence, &idx),
        };
        dataset::save_labels(&labels, &out.join(LABELS_DIR), id)?;
        let flags = resample(input.flags, &idx);
        counts = counts + FlagCounts::from_flags(&flags);
        dataset::save_flags(&out.join(LABELS_DIR), id, EXPORT_SIZE, EXPORT_SIZE, flags)?;

        let (lp, cp) = dataset::label_paths(Path::new(LABELS_DIR), id);
        frames.push(ExportedFrame {
            frame_id: id,
            depth: depth_rel,
            omega: omega_rel,
            labels: lp,
            confidence: cp,
            flags: dataset::flags_path(Path::new(LABELS_DIR), id),
        });
    }
    let manifest = ExportManifest {
        size: EXPORT_SIZE,
        depth_unit: "mm".into(),
        omega_scale: UNIT_SCALE,
        confidence_scale: UNIT_SCALE,
        flag_bits: FlagBits {
            valid: FLAG_VALID,
            behind: FLAG_BEHIND,
            empty: FLAG_EMPTY,
        },
        alpha,
        beta,
        counts,
        weights: class_weights(&counts)?,
        frames,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Exports an annotated dataset directory (labels and flags present).
pub fn export_dataset(root: &Path, out: &Path, alpha: f64, beta: f64) -> Result<ExportManifest> {
    let seq = dataset::load_sequence(root)?;
    let labels_dir = root.join(LABELS_DIR);
    let mut labels = Vec::with_capacity(seq.len());
    let mut flags = Vec::with_capacity(seq.len());
    for frame in &seq.frames {
        labels.push(dataset::load_labels(&labels_dir, frame.frame_id)?);
        flags.push(dataset::load_flags(&labels_dir, frame.frame_id)?.2);
    }
    let inputs: Vec<ExportInput> = seq
        .frames
        .iter()
        .zip(&labels)
        .zip(&flags)
        .map(|((frame, labels), flags)| ExportInput { frame, labels, flags })
        .collect();
    export_frames(out, &inputs, alpha, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let idx = resample_indices(512, 512, 512);
        assert!(idx.iter().enumerate().all(|(i, j)| i == *j));
    }

    #[test]
    fn crop_is_centred() {
        // 8x4 raster: centre square is columns 2..6
        let idx = resample_indices(8, 4, 4);
        assert_eq!(&idx[..4], &[2, 3, 4, 5]);
        assert_eq!(idx[12], 3 * 8 + 2);
        let up = resample_indices(8, 4, 8);
        assert_eq!(&up[..8], &[2, 2, 3, 3, 4, 4, 5, 5]);
    }

    #[test]
    fn resample_introduces_no_values() {
        let data: Vec<u16> = (0..160 * 120).map(|i| (i * 7 % 1000) as u16).collect();
        let out = resample(&data, &resample_indices(160, 120, EXPORT_SIZE));
        let src: std::collections::HashSet<u16> = data.iter().copied().collect();
        assert_eq!(out.len(), EXPORT_SIZE * EXPORT_SIZE);
        assert!(out.iter().all(|v| src.contains(v)));
    }
}
