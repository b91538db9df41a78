use proptest::prelude::*;
use tseg::metrics::{downsample_majority, ConfusionMatrix, GateStats};
use tseg::synth::{CLASS_NAMES, STUFF_CLASSES};
use tseg::{Error, Tensor};
use tseg_testkit::suites;

#[test]
fn documented_hand_examples() {
    suites::metric_hand_examples().unwrap();
}

#[test]
fn merge_matches_one_pass_on_100_shardings() {
    suites::merge_associativity(100).unwrap();
}

#[test]
fn accumulate_errors_leave_the_matrix_alone() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&[0, 1], &[0, 1], 255).unwrap();
    let before = cm.clone();
    assert!(cm.accumulate(&[0, 1, 2], &[0, 1], 255).is_err());
    assert!(cm.accumulate(&[0, 3], &[0, 1], 255).is_err());
    assert!(cm.accumulate(&[0, 255], &[0, 1], 255).is_err());
    assert!(cm.accumulate(&[0, 1], &[0, 7], 255).is_err());
    assert_eq!(cm, before);
    assert!(cm.merge(&ConfusionMatrix::new(4)).is_err());
}

#[test]
fn stuff_and_thing_means() {
    let mut cm = ConfusionMatrix::new(6);
    // road perfect, sidewalk half confused with road, car perfect, person absent
    cm.accumulate(&[0, 0, 0, 1, 4, 4], &[0, 0, 1, 1, 4, 4], 255).unwrap();
    let iou = cm.per_class_iou();
    assert_eq!(iou[0], Some(2.0 / 3.0));
    assert_eq!(iou[1], Some(0.5));
    assert_eq!(iou[4], Some(1.0));
    assert_eq!(iou[5], None);
    let (stuff, thing) = cm.stuff_thing_report(&STUFF_CLASSES);
    assert_eq!(stuff, Some((2.0 / 3.0 + 0.5) / 2.0));
    assert_eq!(thing, Some(1.0));
    let report = cm.report(&CLASS_NAMES, &STUFF_CLASSES).unwrap();
    let kv = report.to_kv();
    assert!(kv.contains("iou_road=0.666667\n"));
    assert!(kv.contains("iou_person=undefined\n"));
    assert!(kv.contains("mean_iou=0.722222\n"));
    assert!(kv.contains("thing_iou=1.000000\n"));
    assert!(report.to_table().contains("person"));
}

#[test]
fn downsampling_a_constant_mask_is_constant() {
    for v in [0u8, 3, 5, 255] {
        assert_eq!(downsample_majority(&[v; 64 * 48], 64, 48, 4).unwrap(), vec![v; 16 * 12]);
    }
    // 2x2 cell with a tie goes to the smaller label
    assert_eq!(downsample_majority(&[3, 1, 1, 3], 2, 2, 2).unwrap(), vec![1]);
    assert!(downsample_majority(&[0; 6], 2, 3, 2).is_err());
}

fn gate_map(v: &[f32], h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_vec(&[1, 1, h, w], v.to_vec()).unwrap()
}

#[test]
fn gate_stats_examples() {
    let mut g = GateStats::new(6, 4, 255);
    g.accumulate(&gate_map(&[0.3; 4], 2, 2), &gate_map(&[0.5; 4], 2, 2), &[2; 64]).unwrap();
    for (c, s) in g.classes.iter().enumerate() {
        if c == 2 {
            assert_eq!((s.cells, s.mean_mem()), (4, Some(0.5)));
        } else {
            assert_eq!(s.cells, 0);
        }
    }

    // left column of cells is road, right column is car; one ignored cell
    let mut gt = vec![0u8; 64];
    for y in 0..8 {
        for x in 4..8 {
            gt[y * 8 + x] = 4;
        }
    }
    for y in 4..8 {
        for x in 0..4 {
            gt[y * 8 + x] = 255;
        }
    }
    let mut g = GateStats::new(6, 4, 255);
    g.accumulate(&gate_map(&[0.1, 0.9, 0.4, 0.7], 2, 2), &gate_map(&[0.8, 0.2, 0.6, 0.2], 2, 2), &gt).unwrap();
    assert_eq!(g.classes[0].mean_mem(), Some(0.800000011920929));
    assert_eq!(g.classes[4].mean_mem(), Some(0.20000000298023224));
    assert_eq!(g.classes[4].cells, 2);
    assert_eq!(g.classes[0].cells, 1);
    let total: u64 = g.classes.iter().map(|c| c.cells).sum();
    assert_eq!(total, 3);
    assert!(matches!(
        g.accumulate(&gate_map(&[0.5; 4], 2, 2), &gate_map(&[0.5; 4], 2, 2), &[0; 60]),
        Err(Error::Precondition(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn iou_bounds_and_merge_order(
        pairs in prop::collection::vec((0u8..5, prop_oneof![4 => 0u8..5, 1 => Just(255u8)]), 1..400),
        cut in 0usize..400,
    ) {
        let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let cut = cut.min(pred.len());
        let mut whole = ConfusionMatrix::new(5);
        whole.accumulate(&pred, &gt, 255).unwrap();
        let mut a = ConfusionMatrix::new(5);
        a.accumulate(&pred[..cut], &gt[..cut], 255).unwrap();
        let mut b = ConfusionMatrix::new(5);
        b.accumulate(&pred[cut..], &gt[cut..], 255).unwrap();
        let mut ab = a.clone();
        ab.merge(&b).unwrap();
        b.merge(&a).unwrap();
        prop_assert_eq!(&ab, &whole);
        prop_assert_eq!(&b, &whole);
        prop_assert_eq!(whole.total(), gt.iter().filter(|&&g| g != 255).count() as u64);
        for v in whole.per_class_iou().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let Ok(m) = whole.mean_iou() {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}
