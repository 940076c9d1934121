use mcevae::lie::{exp_map, log_map, sample_transform, to_theta, AlgebraCoefficients, GroupElement, GroupKind, TransformSupport};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn coefficients() -> impl Strategy<Value = AlgebraCoefficients<f64>> {
    (-3.1f64..3.1, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(w, u, v)| AlgebraCoefficients::new(w, u, v))
}

fn element() -> impl Strategy<Value = GroupElement<f64>> {
    coefficients().prop_map(|t| exp_map(&t, GroupKind::Se2).unwrap())
}

fn max_diff(a: &GroupElement<f64>, b: &GroupElement<f64>) -> f64 {
    a.matrix()
        .iter()
        .flatten()
        .zip(b.matrix().iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// The matrix written out directly from angle and translation.
fn direct(omega: f64, tx: f64, ty: f64) -> [[f64; 3]; 3] {
    [[omega.cos(), -omega.sin(), tx], [omega.sin(), omega.cos(), ty], [0.0, 0.0, 1.0]]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn composition_stays_in_the_group(a in element(), b in element()) {
        let c = a.compose(&b);
        prop_assert!(c.is_valid(1e-9));
        prop_assert_eq!(c.matrix()[2], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn inverse_composes_to_identity(a in element()) {
        prop_assert!(max_diff(&a.compose(&a.invert()), &GroupElement::identity()) < 1e-9);
        prop_assert!(max_diff(&a.invert().compose(&a), &GroupElement::identity()) < 1e-9);
    }

    #[test]
    fn log_inverts_exp(tau in coefficients()) {
        let back = log_map(&exp_map(&tau, GroupKind::Se2).unwrap(), GroupKind::Se2).unwrap();
        prop_assert!((back.omega - tau.omega).abs() < 1e-9);
        prop_assert!((back.u - tau.u).abs() < 1e-9);
        prop_assert!((back.v - tau.v).abs() < 1e-9);
    }

    #[test]
    fn exp_matches_direct_construction(tau in coefficients()) {
        let m = exp_map(&tau, GroupKind::Se2).unwrap();
        let (tx, ty) = m.translation();
        let d = direct(tau.omega, tx, ty);
        prop_assert!(max_diff(&m, &GroupElement::from_matrix(d)) < 1e-15);
        let theta = to_theta(&m);
        prop_assert_eq!(theta, [d[0][0], d[0][1], d[0][2], d[1][0], d[1][1], d[1][2]]);
    }

    #[test]
    fn pure_translations_commute(a in (-1.0f64..1.0, -1.0f64..1.0), b in (-1.0f64..1.0, -1.0f64..1.0)) {
        let ta = AlgebraCoefficients::new(0.0, a.0, a.1);
        let tb = AlgebraCoefficients::new(0.0, b.0, b.1);
        let sum = AlgebraCoefficients::new(0.0, a.0 + b.0, a.1 + b.1);
        let composed = exp_map(&ta, GroupKind::Se2).unwrap().compose(&exp_map(&tb, GroupKind::Se2).unwrap());
        prop_assert!(max_diff(&composed, &exp_map(&sum, GroupKind::Se2).unwrap()) < 1e-15);
    }

    #[test]
    fn samples_lie_in_the_support(seed in any::<u64>(), w in 0.1f64..3.14, t in 0.0f64..0.99) {
        let support = TransformSupport { omega_max: w, t_max: t };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in [GroupKind::So2, GroupKind::Se2] {
            let tau = sample_transform::<f64, _>(&support, kind, &mut rng);
            prop_assert!(support.contains(&tau));
            prop_assert_eq!(tau.to_vec(kind).len(), kind.dim());
        }
    }
}

#[test]
fn rotation_inverse_is_opposite_rotation() {
    for omega in [0.3, -1.2, 2.9] {
        let r = exp_map(&AlgebraCoefficients::rotation(omega), GroupKind::So2).unwrap();
        let back = exp_map(&AlgebraCoefficients::rotation(-omega), GroupKind::So2).unwrap();
        assert!(max_diff(&r.invert(), &back) < 1e-15);
    }
}
