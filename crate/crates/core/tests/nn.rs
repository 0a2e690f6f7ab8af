use proptest::prelude::*;

use ssc_core::bench::{run_bench, BenchConfig};
use ssc_core::kitti::{SceneLabelGrid, EMPTY, INVALID};
use ssc_core::loss::segmentation_targets;
use ssc_core::metrics::{evaluate, ConfusionMatrix};

#[test]
fn sparse_conv_cost_is_linear_in_active_voxels() {
    let report = run_bench(&BenchConfig {
        channels: 4,
        lattice: [16, 16, 8],
        repeats: 1,
        sweep: vec![50, 100, 200, 400, 800],
        conv2d_size: [2, 8, 8],
        points: 200,
        ..BenchConfig::default()
    })
    .unwrap();
    assert!(report.sweep.r2 > 0.99, "{:?}", report.sweep);
    assert!(report.sweep.slope > 0.0);
    assert!(report.sweep.macs.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(report.asymmetric.kernel_params * 3, report.full.kernel_params * 2);
}

fn label() -> impl Strategy<Value = u8> {
    prop_oneof![6 => 0u8..5, 1 => Just(INVALID)]
}

proptest! {
    #[test]
    fn modal_labels_match_a_direct_count(
        pts in prop::collection::vec((label(), 0i32..3, 0i32..3), 0..60),
    ) {
        let labels: Vec<u8> = pts.iter().map(|p| p.0).collect();
        let voxels: Vec<[i32; 3]> = pts.iter().map(|p| [p.1, p.2, 0]).collect();
        let (coords, targets) = segmentation_targets(&labels, &voxels);
        let mut expected: Vec<[i32; 3]> = voxels.clone();
        expected.sort_unstable();
        expected.dedup();
        prop_assert_eq!(&coords, &expected);
        for (c, &t) in coords.iter().zip(&targets) {
            let votes = |l: u8| labels.iter().zip(&voxels).filter(|(&x, v)| x == l && *v == c).count();
            let best = (1u8..5).map(|l| (votes(l), std::cmp::Reverse(l))).max().unwrap();
            if best.0 == 0 {
                prop_assert_eq!(t, INVALID);
            } else {
                prop_assert_eq!(t, best.1 .0);
            }
        }
    }

    #[test]
    fn confusion_merge_equals_one_pass(
        a in prop::collection::vec((0u8..4, 0u8..4), 48),
        b in prop::collection::vec((0u8..4, 0u8..4), 48),
    ) {
        let grid = |v: &[(u8, u8)], pick: fn(&(u8, u8)) -> u8| {
            SceneLabelGrid::new([4, 4, 3], v.iter().map(pick).collect(), 3).unwrap()
        };
        let (pa, ta) = (grid(&a, |p| p.0), grid(&a, |p| p.1));
        let (pb, tb) = (grid(&b, |p| p.0), grid(&b, |p| p.1));
        let mut left = ConfusionMatrix::new(3);
        left.accumulate(&pa, &ta, None).unwrap();
        let mut right = ConfusionMatrix::new(3);
        right.accumulate(&pb, &tb, None).unwrap();
        left.merge(&right).unwrap();

        let joined = |x: &SceneLabelGrid, y: &SceneLabelGrid| {
            SceneLabelGrid::new([4, 4, 6], x.labels().iter().chain(y.labels()).copied().collect(), 3).unwrap()
        };
        let whole = evaluate(&joined(&pa, &pb), &joined(&ta, &tb), None).unwrap();
        prop_assert_eq!(left.metrics(), whole.clone());
        for v in [whole.iou, whole.precision, whole.recall, whole.miou, whole.miou_present] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn invalid_prediction_counts_as_empty() {
    let truth = SceneLabelGrid::new([2, 1, 1], vec![EMPTY, 2], 2).unwrap();
    let pred = SceneLabelGrid::new([2, 1, 1], vec![INVALID, INVALID], 2).unwrap();
    let m = evaluate(&pred, &truth, None).unwrap();
    assert_eq!((m.iou, m.recall, m.valid_voxels), (0.0, 0.0, 2));
}
