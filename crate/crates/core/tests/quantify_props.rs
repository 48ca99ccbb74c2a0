use lvtq_core::quantify::{compute_vt, diagnose, slice_areas, SliceAreas, DEFAULT_THRESHOLD};
use lvtq_core::{Class, LabelMask, PixelSpacing};
use proptest::prelude::*;

fn areas(pairs: &[(f64, f64)]) -> Vec<SliceAreas> {
    pairs.iter().map(|&(tz, cel)| SliceAreas::from_areas(tz, cel)).collect()
}

#[test]
fn single_slice_hand_case() {
    let q = compute_vt(&areas(&[(30.0, 70.0)]), 8.0, 2.0, DEFAULT_THRESHOLD).unwrap();
    assert!((q.vt_percent - 30.0).abs() < 1e-9);
    assert!(q.diagnosis);
}

#[test]
fn multi_slice_hand_case() {
    let q = compute_vt(&areas(&[(10.0, 30.0), (20.0, 20.0), (0.0, 10.0)]), 8.0, 2.0, DEFAULT_THRESHOLD).unwrap();
    assert!((q.vt_percent - 100.0 * 30.0 / 90.0).abs() < 1e-9);
    assert!((q.trabecular_volume_mm3 - 300.0).abs() < 1e-9);
    assert!((q.compacted_volume_mm3 - 600.0).abs() < 1e-9);
}

#[test]
fn no_trabeculae_is_zero() {
    let q = compute_vt(&areas(&[(0.0, 12.0), (0.0, 3.0)]), 5.0, 0.0, DEFAULT_THRESHOLD).unwrap();
    assert_eq!(q.vt_percent, 0.0);
    assert!(!q.diagnosis);
}

#[test]
fn empty_tissue_is_undefined() {
    let err = compute_vt(&areas(&[(0.0, 0.0)]), 8.0, 2.0, DEFAULT_THRESHOLD).unwrap_err();
    assert!(matches!(err, lvtq_core::Error::UndefinedVt(_)));
}

#[test]
fn threshold_is_inclusive() {
    assert!(diagnose(27.4, 27.4));
    assert!(!diagnose(27.399_999, 27.4));
}

#[test]
fn network_grid_areas_scale_back() {
    let mut mask = LabelMask::background(4, 4);
    mask.set(0, 0, Class::Tz);
    mask.set(1, 0, Class::Cel);
    mask.set(2, 0, Class::Cel);
    let a = slice_areas(&mask, PixelSpacing(0.5, 2.0), (8, 8)).unwrap();
    // every network pixel covers 4 acquisition pixels of 1 mm²
    assert_eq!(a.area_tz, 4.0);
    assert_eq!(a.area_cel, 8.0);
}

fn area_set() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0f64..500.0, 0.0f64..500.0), 1..15)
        .prop_filter("needs tissue", |v| v.iter().any(|&(t, c)| t + c > 1e-3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn vt_is_scale_and_geometry_invariant(
        set in area_set(),
        k in 1e-3f64..1e3,
        thickness in 0.5f64..20.0,
        gap in 0.0f64..10.0,
    ) {
        let base = compute_vt(&areas(&set), 8.0, 2.0, DEFAULT_THRESHOLD).unwrap().vt_percent;
        let scaled: Vec<(f64, f64)> = set.iter().map(|&(t, c)| (t * k, c * k)).collect();
        let other = compute_vt(&areas(&scaled), thickness, gap, DEFAULT_THRESHOLD).unwrap().vt_percent;
        prop_assert!((base - other).abs() < 1e-9, "{base} vs {other}");
        prop_assert!((0.0..=100.0).contains(&base));
    }
}

proptest! {
    #[test]
    fn pixel_spacing_cancels(
        labels in prop::collection::vec(0u8..4, 64),
        sx in 0.1f64..3.0,
        sy in 0.1f64..3.0,
    ) {
        prop_assume!(labels.iter().any(|&l| l == 1 || l == 3));
        let mask = LabelMask::from_vec(8, 8, labels).unwrap();
        let vt = |spacing| {
            let a = slice_areas(&mask, spacing, (8, 8)).unwrap();
            compute_vt(&[a], 8.0, 2.0, DEFAULT_THRESHOLD).unwrap()
        };
        let unit = vt(PixelSpacing(1.0, 1.0));
        let spaced = vt(PixelSpacing(sx, sy));
        prop_assert!((unit.vt_percent - spaced.vt_percent).abs() < 1e-9);
    }
}
