//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line to
//! stderr (bypassing the test harness capture) and then asserts it.

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smear_core::alignment::{align_sequence, pose_errors, IcpConfig};
use smear_core::annotator::{
    annotate_sequence, class_weights, confidence_from_angle, filter_empty_evidence, fuse_flags, gather_evidence,
    FlagCounts,
};
use smear_core::baselines::{
    median_filter, statistical_scores, DEFAULT_MEDIAN_TAU_MM, DEFAULT_MEDIAN_WINDOW, DEFAULT_STAT_NEIGHBORS,
    DEFAULT_STAT_RATIO,
};
use smear_core::dataset::label_score;
use smear_core::fuse::{fuse_sequence, FuseFilter};
use smear_core::geometry::backproject;
use smear_core::metrics::{average_precision, mean_average_precision};
use smear_core::simulator::{default_camera, evaluate_against_truth, render_scene, SyntheticScene, TruthReport};
use smear_core::{AnnotatorConfig, CameraModel, DepthFrame, Label, LabelMap, RigidPose};

/// Criteria run one at a time so runtime budgets are not shared.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{verdict} {name}: {detail}");
    assert!(pass, "{name}: {detail}");
}

fn simulate(scene: &SyntheticScene) -> smear_core::simulator::SimulatedSequence {
    render_scene(scene, &default_camera()).unwrap()
}

#[test]
fn geometry_round_trip() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cam = CameraModel::new(320.0, 318.0, 199.5, 124.5, 400, 250).unwrap();
    let pose = RigidPose::from_scaled_axis(
        Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)),
        Vector3::new(rng.random_range(-900.0..900.0), rng.random_range(-900.0..900.0), rng.random_range(-900.0..900.0)),
    );
    let depth: Vec<f32> = (0..cam.pixel_count()).map(|_| rng.random_range(300.0..8000.0)).collect();
    let frame = DepthFrame::new(0, depth, cam, Some(pose)).unwrap();
    let cloud = backproject(&frame).unwrap();
    let to_cam = pose.inverse();
    let (mut px_err, mut mm_err) = (0.0f64, 0.0f64);
    for (p, src) in cloud.points.iter().zip(&cloud.source_pixel) {
        let (u, v, d) = cam.project(&to_cam.transform_point(p)).unwrap();
        px_err = px_err.max((u - src.u as f64).abs()).max((v - src.v as f64).abs());
        mm_err = mm_err.max((d - frame.depth_at(src.u as usize, src.v as usize) as f64).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "geometry round-trip",
        cloud.len() == 100_000 && px_err <= 1e-6 && mm_err <= 1e-6 && secs < 5.0,
        format!("{} pixels, max {px_err:.2e} px, {mm_err:.2e} mm, {secs:.2} s", cloud.len()),
    );
}

#[test]
fn icp_oracle() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (mut good, mut total) = (0usize, 0usize);
    for seed in 0..20 {
        let sim = simulate(&SyntheticScene::random_scene(seed));
        let a = align_sequence(&sim.sequence.without_poses(), &IcpConfig::default()).unwrap();
        for (rot, trans) in pose_errors(&a.sequence.poses().unwrap(), &sim.poses()) {
            total += 1;
            good += usize::from(rot <= 0.2 && trans <= 2.0);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let fraction = good as f64 / total as f64;
    report(
        "ICP oracle",
        fraction >= 0.95 && secs < 120.0,
        format!("{good}/{total} frames within 0.2 deg / 2 mm ({:.1}%), {secs:.1} s", 100.0 * fraction),
    );
}

fn soundness_scenes() -> Vec<SyntheticScene> {
    let mut scenes = vec![SyntheticScene::default_scene(51)];
    scenes.extend((0..4).map(|s| SyntheticScene::random_scene(60 + s)));
    scenes
}

#[test]
fn annotator_soundness() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = AnnotatorConfig::default();
    let mut clean_smeared = 0;
    let (mut false_smeared, mut labeled) = (0usize, 0usize);
    for scene in soundness_scenes() {
        let mut clean = scene.clone();
        clean.smear.rate = 0.0;
        clean.noise_sigma_mm = 0.0;
        let ann = annotate_sequence(&simulate(&clean).sequence, &cfg).unwrap();
        clean_smeared += ann.stats.smeared;

        let mut noisy = scene;
        noisy.smear.rate = 0.0;
        noisy.noise_sigma_mm = 2.0;
        let ann = annotate_sequence(&simulate(&noisy).sequence, &cfg).unwrap();
        false_smeared += ann.stats.smeared;
        labeled += ann.stats.smeared + ann.stats.valid;
    }
    let rate = false_smeared as f64 / labeled as f64;
    report(
        "annotator soundness",
        clean_smeared == 0 && rate < 1e-3,
        format!(
            "sigma 0: {clean_smeared} smeared; sigma 2 mm: {false_smeared}/{labeled} false smeared ({:.4}%)",
            100.0 * rate
        ),
    );
}

#[test]
fn annotator_power() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let scene = SyntheticScene::default_scene(7);
    let sim = simulate(&scene);
    let ann = annotate_sequence(&sim.sequence, &AnnotatorConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut truth = TruthReport::default();
    for (i, f) in ann.frames.iter().enumerate() {
        truth.merge(&evaluate_against_truth(&f.labels, &sim.ground_truth(i)).unwrap());
    }
    let precision = truth.smeared.precision().unwrap_or(0.0);
    let recall = truth.smeared.recall().unwrap_or(0.0);
    report(
        "annotator power",
        precision >= 0.95 && recall >= 0.5 && secs < 180.0,
        format!(
            "precision {precision:.4}, recall {recall:.4}, unknown fraction {:.3}, {} frames in {secs:.1} s",
            ann.stats.unknown_fraction,
            sim.sequence.len()
        ),
    );
}

#[test]
fn fusion_truth_table() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    use Label::*;
    let table = [
        (false, false, false, Unknown),
        (false, false, true, Smeared),
        (false, true, false, Smeared),
        (false, true, true, Smeared),
        (true, false, false, Valid),
        (true, false, true, Unknown),
        (true, true, false, Unknown),
        (true, true, true, Unknown),
    ];
    let wrong: Vec<String> = table
        .iter()
        .filter(|(v, b, e, l)| fuse_flags(*v, *b, *e) != *l)
        .map(|(v, b, e, _)| format!("v={v} b={b} e={e}"))
        .collect();
    report("fusion truth table", wrong.is_empty(), format!("8 cases, mismatches {wrong:?}"));
}

#[test]
fn confidence_spot_values() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let got = [90.0f64, 30.0, 0.0].map(|deg| confidence_from_angle(deg.to_radians()));
    report(
        "confidence spot values",
        got == [1.0, 0.25, 0.0],
        format!("sin^2 at 90/30/0 deg = {got:?}"),
    );
}

#[test]
fn class_weight_counts() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..5000);
        let flags: Vec<u8> = (0..n).map(|_| rng.random_range(0..8u8)).collect();
        let (mut v, mut b, mut e) = (0u64, 0u64, 0u64);
        for f in &flags {
            v += u64::from(f & 1);
            b += u64::from((f >> 1) & 1);
            e += u64::from((f >> 2) & 1);
        }
        let t = v + b + e;
        let Ok(w) = class_weights(&FlagCounts::from_flags(&flags)) else {
            mismatches += usize::from(t != 0);
            continue;
        };
        let expect = |k: u64| (t - k) as f64 / t as f64;
        mismatches += usize::from(w.w_v != expect(v) || w.w_b != expect(b) || w.w_e != expect(e));
    }
    let w = class_weights(&FlagCounts { v: 1000, b: 1000, e: 1000 }).unwrap();
    let equal = [w.w_v, w.w_b, w.w_e] == [2.0 / 3.0; 3];
    report(
        "class weights",
        mismatches == 0 && equal,
        format!("200 random corpora, {mismatches} mismatches; equal counts give {:?}", [w.w_v, w.w_b, w.w_e]),
    );
}

#[test]
fn empty_window_monotonicity() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = AnnotatorConfig::default();
    let mut scenes = vec![SyntheticScene::default_scene(8)];
    scenes.extend((0..5).map(SyntheticScene::random_scene));
    let mut violations = 0usize;
    let mut totals = [0usize; 4];
    for scene in &scenes {
        let sim = simulate(scene);
        for f in 0..sim.sequence.len() {
            let ev = gather_evidence(&sim.sequence, f, &cfg).unwrap();
            let flags: Vec<Vec<bool>> = [1, 3, 5, 7]
                .iter()
                .map(|w| filter_empty_evidence(ev.clone(), *w).unwrap().empty)
                .collect();
            for k in 0..4 {
                totals[k] += flags[k].iter().filter(|x| **x).count();
            }
            for pair in flags.windows(2) {
                violations += pair[1].iter().zip(&pair[0]).filter(|(now, before)| **now && !**before).count();
            }
        }
    }
    report(
        "empty-window monotonicity",
        violations == 0,
        format!("{} scenes, e counts for windows 1/3/5/7 = {totals:?}, {violations} inclusion violations", scenes.len()),
    );
}

/// Precision and recall at every distinct threshold, area as the sum of
/// precision times recall increments.
fn brute_force_ap(scores: &[f64], gt: &[Label]) -> Option<f64> {
    let known: Vec<(f64, bool)> = scores
        .iter()
        .zip(gt)
        .filter(|(_, g)| **g != Label::Unknown)
        .map(|(s, g)| (*s, *g == Label::Smeared))
        .collect();
    let positives = known.iter().filter(|(_, p)| *p).count();
    if positives == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = known.iter().map(|(s, _)| *s).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut last_recall) = (0.0, 0.0);
    for t in thresholds {
        let tp = known.iter().filter(|(s, p)| *p && *s >= t).count();
        let fp = known.iter().filter(|(s, p)| !*p && *s >= t).count();
        let recall = tp as f64 / positives as f64;
        ap += (recall - last_recall) * tp as f64 / (tp + fp) as f64;
        last_recall = recall;
    }
    Some(ap)
}

#[test]
fn map_matches_brute_force() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for k in 0..40 {
        let n = rng.random_range(1..=10_000);
        let gt: Vec<Label> = (0..n)
            .map(|_| match rng.random_range(0..10) {
                0 => Label::Unknown,
                1 | 2 => Label::Smeared,
                _ => Label::Valid,
            })
            .collect();
        // half the frames use coarse scores so that ties are common
        let scores: Vec<f64> = (0..n)
            .map(|_| if k % 2 == 0 { rng.random_range(0..=20) as f64 / 20.0 } else { rng.random_range(0.0..=1.0) })
            .collect();
        let got = average_precision(&scores, &gt).unwrap();
        let want = brute_force_ap(&scores, &gt);
        match (got, want) {
            (Some(a), Some(b)) => {
                worst = worst.max((a - b).abs());
                compared += 1;
            }
            (None, None) => {}
            _ => worst = f64::INFINITY,
        }
    }
    let gt: Vec<Label> = (0..5000).map(|i| if i % 7 == 0 { Label::Smeared } else { Label::Valid }).collect();
    let ideal: Vec<f64> = gt.iter().map(|g| if *g == Label::Smeared { 1.0 } else { 0.0 }).collect();
    let perfect = mean_average_precision([(0u32, &ideal[..], &gt[..])]).unwrap().map;
    report(
        "mAP evaluator",
        worst <= 1e-9 && perfect == Some(1.0),
        format!("{compared} frames, max deviation {worst:.2e}; perfect predictions give {perfect:?}"),
    );
}

#[test]
fn baseline_ordering() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = AnnotatorConfig::default();
    let (mut labels, mut median, mut statistical, mut gts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in 100..103 {
        let sim = simulate(&SyntheticScene::random_scene(seed));
        let ann = annotate_sequence(&sim.sequence, &cfg).unwrap();
        for (i, frame) in sim.sequence.frames.iter().enumerate() {
            labels.push(ann.frames[i].labels.labels.iter().map(|l| label_score(*l)).collect::<Vec<f64>>());
            median.push(median_filter(frame, DEFAULT_MEDIAN_WINDOW, DEFAULT_MEDIAN_TAU_MM).unwrap());
            statistical.push(statistical_scores(frame, DEFAULT_STAT_NEIGHBORS, DEFAULT_STAT_RATIO).unwrap());
            gts.push(sim.ground_truth(i));
        }
    }
    let map = |scores: &[Vec<f64>]| {
        mean_average_precision(scores.iter().zip(&gts).enumerate().map(|(i, (s, g))| (i as u32, &s[..], &g[..])))
            .unwrap()
            .map
            .unwrap()
    };
    let (l, m, s) = (map(&labels), map(&median), map(&statistical));
    report(
        "baseline ordering",
        l > m && l > s,
        format!("mAP: annotator labels {l:.4}, 5x5 median {m:.4}, statistical {s:.4}"),
    );
}

#[test]
fn fusion_with_labels() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = AnnotatorConfig::default();
    let mut scenes = vec![SyntheticScene::default_scene(9)];
    scenes.extend((0..3).map(|s| SyntheticScene::random_scene(70 + s)));
    let (mut smeared_none, mut smeared_kept, mut valid_none, mut valid_kept) = (0usize, 0usize, 0usize, 0usize);
    for scene in &scenes {
        let sim = simulate(scene);
        let ann = annotate_sequence(&sim.sequence, &cfg).unwrap();
        let maps: Vec<LabelMap> = ann.frames.into_iter().map(|f| f.labels).collect();
        let count = |filter: FuseFilter, labels: Option<&[LabelMap]>| {
            let cloud = fuse_sequence(&sim.sequence, filter, labels).unwrap();
            let (mut smeared, mut valid) = (0, 0);
            for px in &cloud.source_pixel {
                let w = sim.sequence.frames[px.frame_id as usize].width();
                if sim.masks[px.frame_id as usize][px.v as usize * w + px.u as usize] {
                    smeared += 1;
                } else {
                    valid += 1;
                }
            }
            (smeared, valid)
        };
        let (s0, v0) = count(FuseFilter::None, None);
        let (s1, v1) = count(FuseFilter::Labels, Some(&maps));
        smeared_none += s0;
        valid_none += v0;
        smeared_kept += s1;
        valid_kept += v1;
    }
    let removed = 1.0 - smeared_kept as f64 / smeared_none as f64;
    let retained = valid_kept as f64 / valid_none as f64;
    report(
        "fusion with labels",
        removed >= 0.99 && retained >= 0.95,
        format!(
            "{} scenes: removed {:.2}% of {smeared_none} smeared points, retained {:.2}% of {valid_none} valid points",
            scenes.len(),
            100.0 * removed,
            100.0 * retained
        ),
    );
}
