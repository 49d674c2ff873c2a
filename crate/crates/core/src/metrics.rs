//! Average precision with smeared pixels as positives and valid pixels as
//! negatives. Pixels whose ground truth is unknown are left out.
//!
//! AP is the area under the precision-recall staircase: every positive
//! contributes `1/P` times the precision at its score threshold, where all
//! pixels tied at that score are admitted together.

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::Label;

/// Score above which a pixel counts as predicted smeared in confusion counts.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::Add for Confusion {
    type Output = Confusion;
    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameReport {
    pub frame_id: u32,
    /// Absent when the frame holds no smeared pixel.
    pub ap: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    /// Mean AP over frames with at least one positive.
    pub map: Option<f64>,
    pub frames_evaluated: usize,
    pub frames_without_positives: usize,
    pub threshold: f64,
    pub confusion: Confusion,
    pub frames: Vec<FrameReport>,
}

fn check_frame(scores: &[f64], gt: &[Label]) -> Result<()> {
    if scores.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} ground-truth pixels",
            scores.len(),
            gt.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidInput(format!("score {s} outside [0, 1]")));
    }
    Ok(())
}

/// AP of one frame; `None` when the frame has no positive pixel.
pub fn average_precision(scores: &[f64], gt: &[Label]) -> Result<Option<f64>> {
    check_frame(scores, gt)?;
    let mut ranked: Vec<(f64, bool)> = scores
        .iter()
        .zip(gt)
        .filter(|(_, g)| **g != Label::Unknown)
        .map(|(s, g)| (*s, *g == Label::Smeared))
        .collect();
    let positives = ranked.iter().filter(|(_, p)| *p).count();
    if positives == 0 {
        return Ok(None);
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut seen, mut hits, mut area) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < ranked.len() {
        let score = ranked[i].0;
        let mut group_hits = 0;
        while i < ranked.len() && ranked[i].0 == score {
            group_hits += ranked[i].1 as usize;
            i += 1;
        }
        seen = i;
        hits += group_hits;
        area += group_hits as f64 * hits as f64 / seen as f64;
    }
    debug_assert_eq!(seen, ranked.len());
    Ok(Some(area / positives as f64))
}

/// Confusion counts at [`DECISION_THRESHOLD`], gt-unknown excluded.
pub fn confusion(scores: &[f64], gt: &[Label]) -> Result<Confusion> {
    check_frame(scores, gt)?;
    let mut c = Confusion::default();
    for (s, g) in scores.iter().zip(gt) {
        let predicted = *s > DECISION_THRESHOLD;
        match (g, predicted) {
            (Label::Smeared, true) => c.tp += 1,
            (Label::Smeared, false) => c.fn_ += 1,
            (Label::Valid, true) => c.fp += 1,
            (Label::Valid, false) => c.tn += 1,
            (Label::Unknown, _) => {}
        }
    }
    Ok(c)
}

/// Per-frame AP and their unweighted mean. Frames are `(frame_id, scores,
/// ground truth)`; frames without positives are reported but excluded from
/// the mean.
pub fn mean_average_precision<'a>(
    frames: impl IntoIterator<Item = (u32, &'a [f64], &'a [Label])>,
) -> Result<EvaluationReport> {
    let mut reports = Vec::new();
    for (frame_id, scores, gt) in frames {
        let ap = average_precision(scores, gt)?;
        if ap.is_none() {
            warn!("frame {frame_id} has no smeared pixels; AP undefined, excluded from mAP");
        }
        reports.push(FrameReport {
            frame_id,
            ap,
            positives: gt.iter().filter(|g| **g == Label::Smeared).count(),
            negatives: gt.iter().filter(|g| **g == Label::Valid).count(),
            confusion: confusion(scores, gt)?,
        });
    }
    let aps: Vec<f64> = reports.iter().filter_map(|r| r.ap).collect();
    Ok(EvaluationReport {
        map: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
        frames_evaluated: aps.len(),
        frames_without_positives: reports.len() - aps.len(),
        threshold: DECISION_THRESHOLD,
        confusion: reports.iter().map(|r| r.confusion).fold(Confusion::default(), |a, b| a + b),
        frames: reports,
    })
}
