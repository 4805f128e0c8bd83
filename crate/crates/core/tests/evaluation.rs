use cellpoint::evaluation::{compute_metrics, greedy_match, hungarian_match, Prediction};
use cellpoint::types::{GroundTruthPoint, GroundTruthSet};
use proptest::prelude::*;

fn pred(x: f64, y: f64, score: f64, class_id: usize) -> Prediction {
    Prediction { x, y, score, class_id }
}

fn one_point() -> GroundTruthSet {
    GroundTruthSet::new(vec![GroundTruthPoint { x: 20.0, y: 20.0, class_id: 0 }])
}

#[test]
fn distance_thirteen_is_a_miss_and_twelve_a_hit() {
    let far = greedy_match(&[pred(33.0, 20.0, 0.9, 0)], &one_point(), 12.0).unwrap();
    let r = compute_metrics(&far, &[pred(33.0, 20.0, 0.9, 0)], &one_point(), 2).unwrap();
    assert_eq!((r.detection.tp, r.detection.fp, r.detection.fn_), (0, 1, 1));
    let p = [pred(20.0, 32.0, 0.9, 0)];
    let hit = greedy_match(&p, &one_point(), 12.0).unwrap();
    let r = compute_metrics(&hit, &p, &one_point(), 2).unwrap();
    assert_eq!((r.detection.tp, r.detection.fp, r.detection.fn_), (1, 0, 0));
}

#[test]
fn duplicate_prediction_is_one_hit_one_false_alarm() {
    let p = [pred(21.0, 20.0, 0.9, 0), pred(19.0, 20.0, 0.8, 0)];
    let m = greedy_match(&p, &one_point(), 12.0).unwrap();
    let r = compute_metrics(&m, &p, &one_point(), 2).unwrap();
    assert_eq!((r.detection.tp, r.detection.fp, r.detection.fn_), (1, 1, 0));
}

#[test]
fn wrong_class_within_radius_counts_for_detection_only() {
    let p = [pred(20.0, 21.0, 0.9, 1)];
    let m = greedy_match(&p, &one_point(), 12.0).unwrap();
    let r = compute_metrics(&m, &p, &one_point(), 2).unwrap();
    assert_eq!(r.detection.tp, 1);
    assert_eq!((r.per_class[0].tp, r.per_class[0].fn_), (0, 1));
    assert_eq!((r.per_class[1].tp, r.per_class[1].fp), (0, 1));
}

#[derive(Debug, Clone)]
struct Scene {
    preds: Vec<Prediction>,
    gt: GroundTruthSet,
}

fn scene() -> impl Strategy<Value = Scene> {
    let p = (0.0f64..64.0, 0.0f64..64.0, 0.0f64..1.0, 0usize..3).prop_map(|(x, y, s, c)| pred(x, y, s, c));
    let g = (0.0f64..64.0, 0.0f64..64.0, 0usize..3).prop_map(|(x, y, c)| GroundTruthPoint { x, y, class_id: c });
    (prop::collection::vec(p, 0..12), prop::collection::vec(g, 0..12)).prop_map(|(preds, gt)| Scene {
        preds,
        gt: GroundTruthSet::new(gt),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn counts_are_conserved(s in scene(), radius in 1.0f64..30.0) {
        for m in [greedy_match(&s.preds, &s.gt, radius).unwrap(), hungarian_match(&s.preds, &s.gt, radius).unwrap()] {
            let r = compute_metrics(&m, &s.preds, &s.gt, 3).unwrap();
            prop_assert_eq!(r.detection.tp + r.detection.fn_, s.gt.len());
            prop_assert_eq!(r.detection.tp + r.detection.fp, s.preds.len());
            let tp: usize = r.per_class.iter().map(|c| c.tp).sum();
            let fn_: usize = r.per_class.iter().map(|c| c.fn_).sum();
            prop_assert_eq!(tp + fn_, s.gt.len());
            for pair in &m.pairs {
                prop_assert!(pair.distance <= radius);
            }
        }
    }

    #[test]
    fn optimal_matching_never_has_fewer_pairs(s in scene(), radius in 1.0f64..30.0) {
        let greedy = greedy_match(&s.preds, &s.gt, radius).unwrap();
        let optimal = hungarian_match(&s.preds, &s.gt, radius).unwrap();
        prop_assert!(optimal.pairs.len() >= greedy.pairs.len());
    }

    #[test]
    fn rates_stay_in_the_unit_interval(s in scene()) {
        let m = greedy_match(&s.preds, &s.gt, 12.0).unwrap();
        let r = compute_metrics(&m, &s.preds, &s.gt, 3).unwrap();
        for v in [r.detection.precision, r.detection.recall, r.detection.f1, r.classification_macro.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
