mod common;

use mots_refine::mask::{iom, iou, runs_to_string, string_to_runs, warp_mask};
use mots_refine::{decode_rle, encode_rle, BinaryMask, Error, FlowField, RleMask};
use proptest::prelude::*;

#[test]
fn matches_reference_encoder() {
    let cases = common::coco_fixture();
    assert_eq!(cases.len(), 20);
    for (h, w, mask, counts) in cases {
        let rle = encode_rle(&mask);
        assert_eq!(rle.counts, counts, "{h}x{w}");
        assert_eq!(decode_rle(&RleMask::new(h, w, counts)).unwrap(), mask);
    }
}

#[test]
fn thousand_random_round_trips() {
    let mut rng = common::rng(1);
    for i in 0..1000 {
        let h = 1 + i % 37;
        let w = 1 + (i * 7) % 41;
        let density = [0.02, 0.3, 0.5, 0.9][i % 4];
        let m = common::random_mask(&mut rng, h, w, density);
        assert_eq!(decode_rle(&encode_rle(&m)).unwrap(), m);
    }
}

#[test]
fn tiny_cases() {
    assert_eq!(BinaryMask::empty(4, 3).runs(), vec![12]);
    assert_eq!(BinaryMask::full(4, 3).runs(), vec![0, 12]);
    assert_eq!(BinaryMask::empty(2, 2).runs(), vec![4]);
    assert_eq!(BinaryMask::full(2, 2).runs(), vec![0, 4]);
    assert_eq!(decode_rle(&encode_rle(&BinaryMask::full(4, 3))).unwrap().area(), 12);
}

#[test]
fn malformed_strings_name_the_offset() {
    match string_to_runs("0P~") {
        Err(Error::RleDecode { offset, .. }) => assert_eq!(offset, 2),
        other => panic!("{other:?}"),
    }
    // trailing continuation bit with nothing after it
    assert!(matches!(string_to_runs("0P`"), Err(Error::RleDecode { .. })));
    // runs sum to 12 but the mask has 16 pixels
    let rle = RleMask::new(4, 4, runs_to_string(&[5, 7]));
    assert!(decode_rle(&rle).is_err());
}

#[test]
fn square_examples() {
    let a = BinaryMask::rect(20, 20, 0, 0, 10, 10);
    let b = BinaryMask::rect(20, 20, 5, 0, 10, 10);
    assert!((iou(&a, &b).unwrap() - 50.0 / 150.0).abs() < 1e-15);
    assert_eq!(iom(&a, &b).unwrap(), 0.5);
    let small = BinaryMask::rect(20, 20, 2, 2, 3, 3);
    assert_eq!(iom(&small, &a).unwrap(), 1.0);
    assert!(matches!(
        iom(&BinaryMask::empty(3, 3), &BinaryMask::empty(3, 3)),
        Err(Error::EmptyMasks)
    ));
    assert!(matches!(
        iou(&BinaryMask::empty(3, 3), &BinaryMask::empty(3, 4)),
        Err(Error::DimensionMismatch { .. })
    ));
    assert_eq!(iou(&BinaryMask::empty(3, 3), &BinaryMask::empty(3, 3)).unwrap(), 0.0);
}

#[test]
fn geometry_matches_pixel_counts() {
    let mut rng = common::rng(2);
    for _ in 0..200 {
        let a = common::random_blob(&mut rng, 24, 30);
        let b = common::random_blob(&mut rng, 24, 30);
        assert_eq!(iou(&a, &b).unwrap(), common::pixel_iou(&a, &b));
        assert_eq!(iom(&a, &b).unwrap(), common::pixel_iom(&a, &b));
    }
}

#[test]
fn warp_examples() {
    let sq = BinaryMask::rect(10, 10, 2, 2, 4, 4);
    assert_eq!(warp_mask(&sq, &FlowField::zeros(10, 10)).unwrap(), sq);
    let moved = warp_mask(&sq, &FlowField::uniform(10, 10, 5.0, 0.0)).unwrap();
    // columns 7..=9 survive, column 10 falls off
    assert_eq!(moved, BinaryMask::rect(10, 10, 2, 7, 4, 3));
    let gone = warp_mask(&sq, &FlowField::uniform(10, 10, 0.0, -20.0)).unwrap();
    assert!(gone.is_empty());
    assert!(warp_mask(&sq, &FlowField::zeros(9, 10)).is_err());
    // half-pixel motion rounds away from zero: 2.5 -> 3 and 1.5 -> 2
    let half = warp_mask(&sq, &FlowField::uniform(10, 10, 0.5, -0.5)).unwrap();
    assert_eq!(half, BinaryMask::rect(10, 10, 2, 3, 4, 4));
}

fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
    (1usize..24, 1usize..24).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<bool>(), h * w)
            .prop_map(move |bits| BinaryMask::from_column_major(h, w, bits).unwrap())
    })
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..16, 1usize..16).prop_flat_map(|(h, w)| {
        let m = move || proptest::collection::vec(any::<bool>(), h * w);
        (m(), m()).prop_map(move |(a, b)| {
            (
                BinaryMask::from_column_major(h, w, a).unwrap(),
                BinaryMask::from_column_major(h, w, b).unwrap(),
            )
        })
    })
}

proptest! {
    #[test]
    fn rle_round_trip(m in mask_strategy()) {
        let rle = encode_rle(&m);
        prop_assert_eq!(decode_rle(&rle).unwrap(), m.clone());
        let runs = string_to_runs(&rle.counts).unwrap();
        prop_assert_eq!(runs.iter().map(|&r| r as usize).sum::<usize>(), m.height() * m.width());
        prop_assert_eq!(runs.iter().skip(1).step_by(2).map(|&r| r as usize).sum::<usize>(), m.area());
        prop_assert!(runs.iter().skip(1).all(|&r| r > 0), "runs must be minimal");
    }

    #[test]
    fn iou_bounded_by_iom_and_symmetric((a, b) in mask_pair()) {
        prop_assume!(!a.is_empty() && !b.is_empty());
        let (u, m) = (iou(&a, &b).unwrap(), iom(&a, &b).unwrap());
        prop_assert!(u <= m);
        prop_assert_eq!(u, iou(&b, &a).unwrap());
        prop_assert_eq!(m, iom(&b, &a).unwrap());
        let mut both = a.clone();
        both.union_with(&b).unwrap();
        prop_assert_eq!(iom(&a, &both).unwrap(), 1.0);
    }

    #[test]
    fn warp_never_grows(m in mask_strategy(), dx in -3.0f32..3.0, dy in -3.0f32..3.0) {
        let f = FlowField::uniform(m.height(), m.width(), dx, dy);
        prop_assert!(warp_mask(&m, &f).unwrap().area() <= m.area());
        prop_assert_eq!(warp_mask(&m, &FlowField::zeros(m.height(), m.width())).unwrap(), m);
    }
}
