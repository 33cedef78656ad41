mod common;

use common::oracle::bl_vertex_enumeration;
use proptest::prelude::*;
use wps_core::{bl_distance, AtomicMeasure};

fn measure(max_atoms: usize) -> impl Strategy<Value = AtomicMeasure> {
    prop::collection::vec((0.0f64..6.0, 0.01f64..2.0), 0..=max_atoms)
        .prop_map(|p| AtomicMeasure::from_pairs(&p).unwrap())
}

#[test]
fn oracle_agrees_on_hand_cases() {
    let d = |a: &[(f64, f64)], b: &[(f64, f64)]| {
        let (a, b) = (
            AtomicMeasure::from_pairs(a).unwrap(),
            AtomicMeasure::from_pairs(b).unwrap(),
        );
        (bl_distance(&a, &b), bl_vertex_enumeration(&a, &b))
    };
    let (x, y) = d(&[(1.0, 1.0)], &[(1.5, 1.0)]);
    assert!((x - 0.5).abs() < 1e-12 && (y - 0.5).abs() < 1e-12);
    let (x, y) = d(&[(1.0, 1.0)], &[(5.0, 1.0)]);
    assert!((x - 2.0).abs() < 1e-12 && (y - 2.0).abs() < 1e-12);
    let (x, y) = d(&[(1.0, 2.0)], &[]);
    assert!((x - 2.0).abs() < 1e-12 && (y - 2.0).abs() < 1e-12);
    // dipole pairs: -1 at 0, +1 at 0.5, -1 at 1
    let (x, y) = d(&[(0.5, 1.0)], &[(0.0, 0.5), (1.0, 0.5)]);
    assert!((x - 0.5).abs() < 1e-12 && (y - 0.5).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_vertex_enumeration(mu in measure(4), nu in measure(4)) {
        let fast = bl_distance(&mu, &nu);
        let slow = bl_vertex_enumeration(&mu, &nu);
        prop_assert!((fast - slow).abs() <= 1e-9, "fast {fast} slow {slow}");
    }

    #[test]
    fn metric_axioms(a in measure(5), b in measure(5), c in measure(5)) {
        let ab = bl_distance(&a, &b);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(bl_distance(&a, &a), 0.0);
        prop_assert!((ab - bl_distance(&b, &a)).abs() <= 1e-12);
        prop_assert!(ab <= bl_distance(&a, &c) + bl_distance(&c, &b) + 1e-9);
    }

    #[test]
    fn two_diracs_closed_form(x in 0.0f64..10.0, y in 0.0f64..10.0, m in 0.01f64..3.0) {
        let d = bl_distance(
            &AtomicMeasure::dirac(x, m).unwrap(),
            &AtomicMeasure::dirac(y, m).unwrap(),
        );
        prop_assert!((d - m * (x - y).abs().min(2.0)).abs() <= 1e-12 * (1.0 + m));
    }

    #[test]
    fn positively_homogeneous(a in measure(5), b in measure(5), s in 0.1f64..5.0) {
        let scaled = bl_distance(&a.scale_mass(s).unwrap(), &b.scale_mass(s).unwrap());
        prop_assert!((scaled - s * bl_distance(&a, &b)).abs() <= 1e-9 * (1.0 + scaled));
    }

    #[test]
    fn translation_invariant_under_common_mass(a in measure(4), b in measure(4), c in measure(3)) {
        let d = bl_distance(&a.add(&c), &b.add(&c));
        prop_assert!((d - bl_distance(&a, &b)).abs() <= 1e-9);
    }

    #[test]
    fn bounded_by_total_variation_and_mass(a in measure(5), b in measure(5)) {
        let d = bl_distance(&a, &b);
        prop_assert!(d <= a.total_mass() + b.total_mass() + 1e-12);
        prop_assert!(d >= (a.total_mass() - b.total_mass()).abs() - 1e-12);
    }
}
