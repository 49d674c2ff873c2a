use nalgebra::Vector3;
use proptest::prelude::*;
use smear_core::annotator::{
    annotate_sequence, class_weights, filter_empty_evidence, gather_evidence, FlagCounts,
};
use smear_core::simulator::{default_camera, ray_cast, render_scene, Primitive, SyntheticScene};
use smear_core::{AnnotatorConfig, DepthFrame, Label, Manifest, RigidPose, SceneSequence};

/// Foreground plane at 1000 mm covering x < -3 mm, optionally a wall at
/// 3000 mm, three cameras 40 mm apart along x. In the middle frame the first
/// background column is replaced by a smear at 2000 mm.
fn edge_sequence(wall: bool) -> (SceneSequence, usize) {
    let cam = default_camera();
    let mut prims = vec![Primitive::Plane {
        pose: RigidPose::from_scaled_axis(Vector3::zeros(), Vector3::new(-1003.0, 0.0, 1000.0)),
        half_size: [1000.0, 3000.0],
    }];
    if wall {
        prims.push(Primitive::Plane {
            pose: RigidPose::from_scaled_axis(Vector3::zeros(), Vector3::new(0.0, 0.0, 3000.0)),
            half_size: [5000.0, 5000.0],
        });
    }
    let frames: Vec<DepthFrame> = (0..3)
        .map(|i| {
            let pose = RigidPose::from_scaled_axis(Vector3::zeros(), Vector3::new(40.0 * (i as f64 - 1.0), 0.0, 0.0));
            let depth = ray_cast(&prims, &cam, &pose).into_iter().map(|d| d as f32).collect();
            DepthFrame::new(i, depth, cam, Some(pose)).unwrap()
        })
        .collect();
    let mut seq = SceneSequence::new(frames, Manifest::default()).unwrap();
    let row = 60 * cam.width;
    let first_bg = (0..cam.width).find(|&u| seq.frames[1].depth[row + u] != 1000.0).unwrap();
    assert_eq!(first_bg, 80);
    let pixel = row + first_bg;
    seq.frames[1].depth[pixel] = 2000.0;
    (seq, pixel)
}

#[test]
fn smear_in_front_of_visible_background_is_seen_behind() {
    let (seq, pixel) = edge_sequence(true);
    let ev = gather_evidence(&seq, 1, &AnnotatorConfig::default()).unwrap();
    assert!(ev.behind[pixel]);
    assert!(!ev.valid[pixel]);
    // foreground and background away from the edge are real surfaces
    assert!(ev.valid[60 * 160 + 40] && !ev.behind[60 * 160 + 40]);
    assert!(ev.valid[60 * 160 + 120] && !ev.behind[60 * 160 + 120]);
}

#[test]
fn smear_over_a_hole_is_seen_empty() {
    let (seq, pixel) = edge_sequence(false);
    let ev = gather_evidence(&seq, 1, &AnnotatorConfig::default()).unwrap();
    assert!(ev.empty[pixel]);
    assert!(!ev.valid[pixel]);
    let filtered = filter_empty_evidence(ev, 3).unwrap();
    assert!(filtered.empty[pixel]);
}

#[test]
fn larger_windows_keep_a_subset_of_empty_flags() {
    let cfg = AnnotatorConfig::default();
    let mut seen_empty = 0;
    for (seed, f) in [(0u64, 3usize), (1, 10), (2, 15), (3, 20), (4, 27)] {
        let sim = render_scene(&SyntheticScene::random_scene(seed), &default_camera()).unwrap();
        let ev = gather_evidence(&sim.sequence, f, &cfg).unwrap();
        let mut previous: Option<Vec<bool>> = None;
        for window in [1, 3, 5, 7] {
            let e = filter_empty_evidence(ev.clone(), window).unwrap().empty;
            if let Some(prev) = &previous {
                assert!(e.iter().zip(prev).all(|(now, before)| !now || *before), "scene {seed} frame {f} window {window}");
            } else {
                seen_empty += e.iter().filter(|x| **x).count();
            }
            previous = Some(e);
        }
    }
    assert!(seen_empty > 0);
}

#[test]
fn weights_match_enumerated_counts_on_a_simulated_corpus() {
    let mut scene = SyntheticScene::random_scene(5);
    scene.trajectory.truncate(8);
    let sim = render_scene(&scene, &default_camera()).unwrap();
    let ann = annotate_sequence(&sim.sequence, &AnnotatorConfig::default()).unwrap();
    let (mut v, mut b, mut e) = (0u64, 0u64, 0u64);
    for a in &ann.frames {
        for i in 0..a.labels.labels.len() {
            match a.labels.labels[i] {
                Label::Valid => v += 1,
                Label::Smeared => {
                    b += u64::from(a.evidence.behind[i]);
                    e += u64::from(a.evidence.empty[i]);
                }
                Label::Unknown => {}
            }
        }
    }
    assert!(v > 0 && b + e > 0);
    let t = v + b + e;
    let w = ann.stats.weights.unwrap();
    assert_eq!(w.w_v, (t - v) as f64 / t as f64);
    assert_eq!(w.w_b, (t - b) as f64 / t as f64);
    assert_eq!(w.w_e, (t - e) as f64 / t as f64);
}

#[test]
fn equal_counts_weigh_two_thirds() {
    let w = class_weights(&FlagCounts { v: 7, b: 7, e: 7 }).unwrap();
    assert_eq!((w.w_b, w.w_e, w.w_v), (2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0));
}

proptest! {
    #[test]
    fn weights_match_brute_force(flags in prop::collection::vec(0u8..8, 1..2000)) {
        let (mut v, mut b, mut e) = (0u64, 0u64, 0u64);
        for f in &flags {
            if f & 1 != 0 { v += 1; }
            if f & 2 != 0 { b += 1; }
            if f & 4 != 0 { e += 1; }
        }
        let result = class_weights(&FlagCounts::from_flags(&flags));
        if v + b + e == 0 {
            prop_assert!(result.is_err());
        } else {
            let t = v + b + e;
            let w = result.unwrap();
            prop_assert_eq!(w.w_v, (t - v) as f64 / t as f64);
            prop_assert_eq!(w.w_b, (t - b) as f64 / t as f64);
            prop_assert_eq!(w.w_e, (t - e) as f64 / t as f64);
        }
    }
}
