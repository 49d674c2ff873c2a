//! On-disk dataset layout.
//!
//! ```text
//! <root>/intrinsics.json        fx, fy, cx, cy, width, height, depth_unit = "mm"
//! <root>/depth/NNNNNN.png       16-bit depth in millimetres, 0 = no return
//! <root>/poses/NNNNNN.json      optional camera-to-world pose
//! <root>/gt/NNNNNN.png          optional ground-truth labels (0/1/2)
//! <root>/labels/NNNNNN.png      annotator labels (0/1/2)
//! <root>/labels/NNNNNN.conf.png label confidence, 16-bit, c * 65535
//! <root>/labels/NNNNNN.flags.png evidence bits kept for training (1=v, 2=b, 4=e)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CameraModel, DepthFrame, Label, LabelMap, Manifest, RigidPose, SceneSequence};

pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const DEPTH_DIR: &str = "depth";
pub const POSES_DIR: &str = "poses";
pub const GT_DIR: &str = "gt";
pub const LABELS_DIR: &str = "labels";
pub const SCENE_FILE: &str = "scene.json";

pub const FLAG_VALID: u8 = 1;
pub const FLAG_BEHIND: u8 = 2;
pub const FLAG_EMPTY: u8 = 4;

const CONF_SCALE: f32 = 65535.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IntrinsicsRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    depth_unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sensor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<String>,
}

pub fn frame_stem(frame_id: u32) -> String {
    format!("{frame_id:06}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Frame ids of every `NNNNNN.png` in `dir`, sorted. Other files are ignored.
pub fn list_frame_ids(dir: &Path) -> Result<Vec<u32>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(stem) = name.strip_suffix(".png") else { continue };
        if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
            ids.push(stem.parse().expect("six ascii digits"));
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

pub fn read_u16_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok((w as usize, h as usize, buf.into_raw()))
        }
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Ok((w as usize, h as usize, buf.into_raw().into_iter().map(u16::from).collect()))
        }
        other => Err(Error::InvalidInput(format!(
            "{} is not a single-channel PNG ({:?})",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_u16_png(path: &Path, width: usize, height: usize, data: Vec<u16>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, data)
            .ok_or_else(|| Error::InvalidInput("raster length does not match size".into()))?;
    buf.save(path).map_err(|e| Error::image(path, e))
}

pub fn read_u8_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Ok((w as usize, h as usize, buf.into_raw()))
        }
        other => Err(Error::InvalidInput(format!(
            "{} is not an 8-bit single-channel PNG ({:?})",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_u8_png(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, data)
            .ok_or_else(|| Error::InvalidInput("raster length does not match size".into()))?;
    buf.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_camera(root: &Path) -> Result<(CameraModel, Manifest)> {
    let path = root.join(INTRINSICS_FILE);
    if !path.is_file() {
        return Err(Error::MissingIntrinsics(path));
    }
    let rec: IntrinsicsRecord = read_json(&path)?;
    if rec.depth_unit != "mm" {
        return Err(Error::InvalidInput(format!(
            "unsupported depth_unit {:?}",
            rec.depth_unit
        )));
    }
    let camera = CameraModel::new(rec.fx, rec.fy, rec.cx, rec.cy, rec.width, rec.height)?;
    let manifest = Manifest {
        sensor: rec.sensor.unwrap_or_else(|| "unknown".into()),
        units: rec.depth_unit,
        scene: rec.scene.unwrap_or_default(),
    };
    Ok((camera, manifest))
}

fn load_depth(path: &Path, frame_id: u32, camera: &CameraModel) -> Result<Vec<f32>> {
    let (w, h, raw) = read_u16_png(path)?;
    if w != camera.width || h != camera.height {
        return Err(Error::DimensionMismatch {
            expected_w: camera.width,
            expected_h: camera.height,
            got_w: w,
            got_h: h,
            context: format!("depth frame {frame_id}"),
        });
    }
    Ok(raw.into_iter().map(f32::from).collect())
}

pub fn pose_path(root: &Path, frame_id: u32) -> PathBuf {
    root.join(POSES_DIR).join(format!("{}.json", frame_stem(frame_id)))
}

pub fn load_pose(path: &Path) -> Result<RigidPose> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedPose {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn save_pose(root: &Path, frame_id: u32, pose: &RigidPose) -> Result<()> {
    write_json(&pose_path(root, frame_id), pose)
}

/// Load a dataset directory. Poses are attached when `poses/` has a file for
/// every frame; a partial pose set is rejected.
pub fn load_sequence(root: &Path) -> Result<SceneSequence> {
    let (camera, manifest) = load_camera(root)?;
    let depth_dir = root.join(DEPTH_DIR);
    let ids = list_frame_ids(&depth_dir)?;
    let poses_dir = root.join(POSES_DIR);
    let have_poses = poses_dir.is_dir();

    let mut frames = Vec::with_capacity(ids.len());
    let mut posed = 0usize;
    for id in ids {
        let depth = load_depth(&depth_dir.join(format!("{}.png", frame_stem(id))), id, &camera)?;
        let pose = if have_poses {
            let p = pose_path(root, id);
            if p.is_file() {
                posed += 1;
                Some(load_pose(&p)?)
            } else {
                None
            }
        } else {
            None
        };
        frames.push(DepthFrame::new(id, depth, camera, pose)?);
    }
    if posed != 0 && posed != frames.len() {
        return Err(Error::InvalidInput(format!(
            "{} of {} frames have poses; expected all or none",
            posed,
            frames.len()
        )));
    }
    SceneSequence::new(frames, manifest)
}

/// Depth as stored on disk: rounded to whole millimetres and clamped to the
/// 16-bit range.
pub fn quantize_depth(d: f32) -> u16 {
    if !(d > 0.0) {
        0
    } else {
        d.round().min(65535.0) as u16
    }
}

/// Write intrinsics, depth and (when present) poses.
pub fn write_sequence(root: &Path, seq: &SceneSequence) -> Result<()> {
    let camera = seq
        .camera()
        .ok_or_else(|| Error::InvalidInput("cannot write an empty sequence".into()))?;
    let rec = IntrinsicsRecord {
        fx: camera.fx,
        fy: camera.fy,
        cx: camera.cx,
        cy: camera.cy,
        width: camera.width,
        height: camera.height,
        depth_unit: "mm".into(),
        sensor: Some(seq.manifest.sensor.clone()),
        scene: Some(seq.manifest.scene.clone()),
    };
    write_json(&root.join(INTRINSICS_FILE), &rec)?;
    for frame in &seq.frames {
        let stem = frame_stem(frame.frame_id);
        let raw = frame.depth.iter().map(|d| quantize_depth(*d)).collect();
        write_u16_png(
            &root.join(DEPTH_DIR).join(format!("{stem}.png")),
            camera.width,
            camera.height,
            raw,
        )?;
        if let Some(pose) = &frame.pose {
            save_pose(root, frame.frame_id, pose)?;
        }
    }
    Ok(())
}

pub fn write_poses(root: &Path, seq: &SceneSequence) -> Result<()> {
    for frame in &seq.frames {
        save_pose(root, frame.frame_id, frame.require_pose()?)?;
    }
    Ok(())
}

pub fn label_paths(dir: &Path, frame_id: u32) -> (PathBuf, PathBuf) {
    let stem = frame_stem(frame_id);
    (
        dir.join(format!("{stem}.png")),
        dir.join(format!("{stem}.conf.png")),
    )
}

pub fn quantize_confidence(c: f32) -> u16 {
    (c.clamp(0.0, 1.0) * CONF_SCALE).round() as u16
}

/// Write the ternary label raster and the 16-bit confidence raster into `dir`.
pub fn save_labels(labels: &LabelMap, dir: &Path, frame_id: u32) -> Result<()> {
    labels.validate()?;
    let (lp, cp) = label_paths(dir, frame_id);
    write_u8_png(
        &lp,
        labels.width,
        labels.height,
        labels.labels.iter().map(|l| l.code()).collect(),
    )?;
    write_u16_png(
        &cp,
        labels.width,
        labels.height,
        labels
            .confidence
            .iter()
            .map(|c| quantize_confidence(*c))
            .collect(),
    )
}

pub fn decode_labels(path: &Path, codes: Vec<u8>) -> Result<Vec<Label>> {
    codes
        .into_iter()
        .map(|c| {
            Label::from_code(c).ok_or_else(|| {
                Error::InvalidInput(format!("{}: invalid label code {c}", path.display()))
            })
        })
        .collect()
}

pub fn load_labels(dir: &Path, frame_id: u32) -> Result<LabelMap> {
    let (lp, cp) = label_paths(dir, frame_id);
    let (w, h, codes) = read_u8_png(&lp)?;
    let labels = decode_labels(&lp, codes)?;
    let confidence = if cp.is_file() {
        let (cw, ch, raw) = read_u16_png(&cp)?;
        if (cw, ch) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected_w: w,
                expected_h: h,
                got_w: cw,
                got_h: ch,
                context: format!("confidence of frame {frame_id}"),
            });
        }
        raw.into_iter().map(|q| f32::from(q) / CONF_SCALE).collect()
    } else {
        vec![0.0; w * h]
    };
    let map = LabelMap {
        width: w,
        height: h,
        labels,
        confidence,
    };
    map.validate()?;
    Ok(map)
}

pub fn flags_path(dir: &Path, frame_id: u32) -> PathBuf {
    dir.join(format!("{}.flags.png", frame_stem(frame_id)))
}

pub fn save_flags(dir: &Path, frame_id: u32, width: usize, height: usize, bits: Vec<u8>) -> Result<()> {
    write_u8_png(&flags_path(dir, frame_id), width, height, bits)
}

pub fn load_flags(dir: &Path, frame_id: u32) -> Result<(usize, usize, Vec<u8>)> {
    read_u8_png(&flags_path(dir, frame_id))
}

pub fn gt_path(root: &Path, frame_id: u32) -> PathBuf {
    root.join(GT_DIR).join(format!("{}.png", frame_stem(frame_id)))
}

pub fn save_gt(root: &Path, frame_id: u32, width: usize, height: usize, gt: &[Label]) -> Result<()> {
    write_u8_png(
        &gt_path(root, frame_id),
        width,
        height,
        gt.iter().map(|l| l.code()).collect(),
    )
}

pub fn load_gt_file(path: &Path) -> Result<(usize, usize, Vec<Label>)> {
    let (w, h, codes) = read_u8_png(path)?;
    Ok((w, h, decode_labels(path, codes)?))
}

pub fn load_gt(root: &Path, frame_id: u32) -> Result<Vec<Label>> {
    load_gt_file(&gt_path(root, frame_id)).map(|(_, _, l)| l)
}

/// Per-pixel scores in `[0, 1]` read from a prediction PNG. 16-bit rasters
/// are probabilities scaled by 65535; 8-bit rasters are ternary labels and
/// map smeared → 1, unknown → 0.5, valid → 0.
pub fn load_scores(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let scores = buf.into_raw().into_iter().map(|q| f64::from(q) / 65535.0).collect();
            Ok((w as usize, h as usize, scores))
        }
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            let labels = decode_labels(path, buf.into_raw())?;
            Ok((w as usize, h as usize, labels.into_iter().map(label_score).collect()))
        }
        other => Err(Error::InvalidInput(format!(
            "{} is not a single-channel PNG ({:?})",
            path.display(),
            other.color()
        ))),
    }
}

/// Score assigned to a hard label when it is ranked against soft detectors.
pub fn label_score(label: Label) -> f64 {
    match label {
        Label::Smeared => 1.0,
        Label::Unknown => 0.5,
        Label::Valid => 0.0,
    }
}

pub fn save_scores(path: &Path, width: usize, height: usize, scores: &[f64]) -> Result<()> {
    let raw = scores
        .iter()
        .map(|s| (s.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    write_u16_png(path, width, height, raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraModel {
        CameraModel::new(50.0, 50.0, 8.0, 6.0, 16, 12).unwrap()
    }

    fn frame(id: u32, fill: f32) -> DepthFrame {
        DepthFrame::new(id, vec![fill; 16 * 12], cam(), None).unwrap()
    }

    #[test]
    fn loads_unposed_sequence_in_id_order() {
        let dir = tempfile::tempdir().unwrap();
        let frames = (0..5).map(|i| frame(i * 2, 1000.0 + i as f32)).collect();
        let seq = SceneSequence::new(frames, Manifest::default()).unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        let loaded = load_sequence(dir.path()).unwrap();
        assert_eq!(loaded.len(), 5);
        assert!(loaded.frames.iter().all(|f| f.pose.is_none()));
        let ids: Vec<u32> = loaded.frames.iter().map(|f| f.frame_id).collect();
        assert_eq!(ids, vec![0, 2, 4, 6, 8]);
        assert_eq!(loaded.frames, seq.frames);
    }

    #[test]
    fn missing_intrinsics_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join(DEPTH_DIR)).unwrap();
        assert!(matches!(
            load_sequence(dir.path()),
            Err(Error::MissingIntrinsics(_))
        ));
    }

    #[test]
    fn mismatched_raster_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let seq = SceneSequence::new(vec![frame(0, 500.0)], Manifest::default()).unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        write_u16_png(&dir.path().join("depth/000001.png"), 8, 8, vec![1; 64]).unwrap();
        let err = load_sequence(dir.path()).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"), "{err}");
    }

    #[test]
    fn malformed_pose_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let seq = SceneSequence::new(vec![frame(0, 500.0)], Manifest::default()).unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        fs::create_dir_all(dir.path().join(POSES_DIR)).unwrap();
        fs::write(pose_path(dir.path(), 0), r#"{"rotation":[2,0,0,0,1,0,0,0,1],"translation":[0,0,0]}"#)
            .unwrap();
        assert!(matches!(
            load_sequence(dir.path()),
            Err(Error::MalformedPose { .. })
        ));
    }

    #[test]
    fn all_unknown_labels_write_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let map = LabelMap::unknown(16, 12);
        save_labels(&map, dir.path(), 7).unwrap();
        let (_, _, codes) = read_u8_png(&dir.path().join("000007.png")).unwrap();
        assert!(codes.iter().all(|c| *c == 0));
        let (_, _, conf) = read_u16_png(&dir.path().join("000007.conf.png")).unwrap();
        assert!(conf.iter().all(|c| *c == 0));
        assert_eq!(load_labels(dir.path(), 7).unwrap(), map);
    }

    #[test]
    fn confidence_quantisation_error_is_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let n = 16 * 12;
        let labels = (0..n)
            .map(|i| match i % 3 {
                0 => Label::Unknown,
                1 => Label::Valid,
                _ => Label::Smeared,
            })
            .collect::<Vec<_>>();
        let confidence = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if *l == Label::Unknown {
                    0.0
                } else {
                    ((i as f32) * 0.618_034).fract()
                }
            })
            .collect();
        let map = LabelMap {
            width: 16,
            height: 12,
            labels,
            confidence,
        };
        save_labels(&map, dir.path(), 1).unwrap();
        let back = load_labels(dir.path(), 1).unwrap();
        assert_eq!(back.labels, map.labels);
        let worst = back
            .confidence
            .iter()
            .zip(&map.confidence)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 65535.0, "worst error {worst}");
    }

    #[test]
    fn ternary_scores_map_hard_labels() {
        assert_eq!(label_score(Label::Smeared), 1.0);
        assert_eq!(label_score(Label::Valid), 0.0);
        assert_eq!(label_score(Label::Unknown), 0.5);
    }
}
