use proptest::prelude::*;

use p2d_core::detection::DetectionBox;
use p2d_core::scene::SceneObject;
use p2d_runner::metrics::{evaluate_records, moving_subset, records_from_jsonl, records_to_jsonl, EvalSettings, FrameRecord, Subset};

fn object() -> impl Strategy<Value = SceneObject> {
    (0usize..3, -20.0f64..20.0, -20.0f64..20.0, 0.5f64..4.0, 0.5f64..2.0, -3.1f64..3.1, -3.0f64..3.0, -3.0f64..3.0).prop_map(
        |(class_id, x, y, l, w, yaw, vx, vy)| SceneObject {
            object_id: 0,
            class_id,
            center: [x, y],
            size: [l, w],
            yaw,
            velocity: [vx, vy],
        },
    )
}

fn detection() -> impl Strategy<Value = DetectionBox> {
    (object(), 0.0f64..=1.0).prop_map(|(o, score)| DetectionBox {
        class_id: o.class_id,
        score,
        center: o.center,
        size: o.size,
        yaw: o.yaw,
        velocity: o.velocity,
    })
}

fn frames() -> impl Strategy<Value = Vec<FrameRecord>> {
    prop::collection::vec(
        (prop::collection::vec(detection(), 0..6), prop::collection::vec(object(), 0..6))
            .prop_map(|(detections, ground_truth)| FrameRecord { detections, ground_truth }),
        1..5,
    )
}

fn settings() -> EvalSettings {
    EvalSettings {
        thresholds: vec![0.5, 1.0, 2.0, 4.0],
        num_classes: 3,
    }
}

fn perfect(frames: &[FrameRecord]) -> Vec<FrameRecord> {
    frames
        .iter()
        .map(|f| FrameRecord {
            detections: f
                .ground_truth
                .iter()
                .enumerate()
                .map(|(n, g)| DetectionBox {
                    class_id: g.class_id,
                    score: 1.0 / (n + 2) as f64,
                    center: g.center,
                    size: g.size,
                    yaw: g.yaw,
                    velocity: g.velocity,
                })
                .collect(),
            ground_truth: f.ground_truth.clone(),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn scores_stay_in_range(frames in frames()) {
        let r = evaluate_records(&frames, &settings(), Subset::All).unwrap();
        prop_assert!(r.map.is_nan() || (0.0..=1.0).contains(&r.map));
        for c in &r.per_class {
            prop_assert!(c.ap.iter().all(|ap| (0.0..=1.0).contains(ap)));
            prop_assert!(c.num_tp <= c.num_gt);
            prop_assert!(c.ate >= 0.0 && c.ave >= 0.0 && c.aoe >= 0.0);
        }
        let with_gt: Vec<_> = r.per_class.iter().filter(|c| c.num_gt > 0).collect();
        if !with_gt.is_empty() {
            let mean = with_gt.iter().map(|c| c.ap.iter().sum::<f64>() / c.ap.len() as f64).sum::<f64>() / with_gt.len() as f64;
            prop_assert!((mean - r.map).abs() < 1e-12);
        }
    }

    #[test]
    fn a_perfect_detector_scores_one(frames in frames()) {
        let r = evaluate_records(&perfect(&frames), &settings(), Subset::All).unwrap();
        let any_gt = frames.iter().any(|f| !f.ground_truth.is_empty());
        if any_gt {
            prop_assert_eq!(r.map, 1.0);
            prop_assert!(r.mate.abs() < 1e-12 && r.mave.abs() < 1e-12 && r.maoe.abs() < 1e-12);
        }
    }

    #[test]
    fn frame_order_does_not_matter(frames in frames()) {
        // Distinct scores remove the only order-dependent tie rule.
        let mut frames = frames;
        let mut n = 0;
        for f in &mut frames {
            for d in &mut f.detections {
                n += 1;
                d.score = 1.0 / (n + 1) as f64;
            }
        }
        let a = evaluate_records(&frames, &settings(), Subset::All).unwrap();
        frames.reverse();
        let b = evaluate_records(&frames, &settings(), Subset::All).unwrap();
        prop_assert!(a.map == b.map || (a.map.is_nan() && b.map.is_nan()));
    }

    #[test]
    fn moving_subset_keeps_only_fast_objects(frames in frames(), cutoff in 0.0f64..3.0) {
        let moving = moving_subset(&frames, cutoff);
        prop_assert_eq!(moving.len(), frames.len());
        for (m, f) in moving.iter().zip(&frames) {
            prop_assert!(m.ground_truth.iter().all(|g| g.speed() > cutoff));
            prop_assert!(m.detections.iter().all(|d| d.speed() > cutoff));
            prop_assert_eq!(m.ground_truth.len(), f.ground_truth.iter().filter(|g| g.speed() > cutoff).count());
        }
    }

    #[test]
    fn records_round_trip_through_jsonl(frames in frames()) {
        let text = records_to_jsonl(&frames).unwrap();
        prop_assert_eq!(text.lines().count(), frames.len());
        prop_assert_eq!(records_from_jsonl(&text).unwrap(), frames);
    }
}

#[test]
fn malformed_records_name_their_line() {
    let good = records_to_jsonl(&[FrameRecord { detections: vec![], ground_truth: vec![] }]).unwrap();
    let text = format!("{good}\n{{\"detections\": 3}}\n");
    let err = records_from_jsonl(&text).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
    let bad_score = r#"{"detections":[{"class_id":0,"score":1.5,"center":[0,0],"size":[1,1],"yaw":0,"velocity":[0,0]}],"ground_truth":[]}"#;
    assert!(records_from_jsonl(bad_score).is_err());
    assert!(evaluate_records(&[], &settings(), Subset::All).is_err());
}
