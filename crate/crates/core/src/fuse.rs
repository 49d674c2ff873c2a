//! Multi-frame fusion: every frame's world-space cloud, optionally cleaned
//! by a per-frame filter, merged into one cloud.

use crate::baselines::{median_filter, statistical_scores};
use crate::error::{Error, Result};
use crate::geometry::{backproject, PointCloud};
use crate::types::{Label, LabelMap, SceneSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FuseFilter {
    None,
    /// Drop pixels flagged by the median detector.
    Median { k: usize, tau_mm: f64 },
    /// Drop pixels flagged by the statistical outlier filter.
    Statistical { n_neighbors: usize, std_ratio: f64 },
    /// Keep only pixels labeled valid.
    Labels,
}

/// Merged world-space cloud; `source_pixel` identifies each point's origin.
pub fn fuse_sequence(seq: &SceneSequence, filter: FuseFilter, labels: Option<&[LabelMap]>) -> Result<PointCloud> {
    if filter == FuseFilter::Labels {
        match labels {
            None => return Err(Error::InvalidInput("label filter needs labels".into())),
            Some(l) if l.len() != seq.len() => {
                return Err(Error::InvalidInput(format!("{} label maps for {} frames", l.len(), seq.len())))
            }
            _ => {}
        }
    }
    let mut fused = PointCloud::default();
    for (i, frame) in seq.frames.iter().enumerate() {
        let cloud = backproject(frame)?;
        let w = frame.width();
        let keep: Vec<bool> = match filter {
            FuseFilter::None => vec![true; w * frame.height()],
            FuseFilter::Median { k, tau_mm } => median_filter(frame, k, tau_mm)?.into_iter().map(|s| s == 0.0).collect(),
            FuseFilter::Statistical { n_neighbors, std_ratio } => statistical_scores(frame, n_neighbors, std_ratio)?
                .into_iter()
                .map(|s| s == 0.0)
                .collect(),
            FuseFilter::Labels => {
                let map = &labels.expect("checked above")[i];
                if (map.width, map.height) != (w, frame.height()) {
                    return Err(Error::DimensionMismatch {
                        expected_w: w,
                        expected_h: frame.height(),
                        got_w: map.width,
                        got_h: map.height,
                        context: format!("labels of frame {}", frame.frame_id),
                    });
                }
                map.labels.iter().map(|l| *l == Label::Valid).collect()
            }
        };
        let kept = cloud.filtered(|j| {
            let px = cloud.source_pixel[j];
            keep[px.v as usize * w + px.u as usize]
        });
        fused.extend(kept);
    }
    Ok(fused)
}
