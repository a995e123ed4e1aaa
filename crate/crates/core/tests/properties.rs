use approx::assert_relative_eq;
use nalgebra::{DVector, Vector3};
use proptest::prelude::*;

use strainsim::liegroup::{adjoint_big, adjoint_inv, exp_se3, Twist};
use strainsim::scenarios::compute_metrics;

fn twist() -> impl Strategy<Value = Twist> {
    prop::array::uniform6(-3.0..3.0f64)
        .prop_map(|v| Twist::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5])))
}

proptest! {
    #[test]
    fn exponential_is_a_rigid_motion(v in twist(), h in 0.0..2.0f64) {
        prop_assert!(exp_se3(&v, h).orthonormality_error() < 1e-10);
    }

    #[test]
    fn adjoint_is_a_homomorphism(a in twist(), b in twist()) {
        let (g1, g2) = (exp_se3(&a, 0.7), exp_se3(&b, 0.4));
        let lhs = adjoint_big(&(g1 * g2));
        let rhs = adjoint_big(&g1) * adjoint_big(&g2);
        assert_relative_eq!(lhs, rhs, epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn adjoint_inverse_matches_inverse_pose(a in twist()) {
        let g = exp_se3(&a, 1.0);
        assert_relative_eq!(adjoint_inv(&g), adjoint_big(&g.inverse()), epsilon = 1e-12);
    }

    #[test]
    fn flow_composes(v in twist(), s in 0.0..1.0f64, t in 0.0..1.0f64) {
        let lhs = exp_se3(&v, s + t);
        let rhs = exp_se3(&v, s) * exp_se3(&v, t);
        assert_relative_eq!(lhs.to_homogeneous(), rhs.to_homogeneous(), epsilon = 1e-10);
    }

    #[test]
    fn smaller_bands_are_entered_no_earlier(errs in prop::collection::vec(0.0..0.05f64, 2..200)) {
        let times: Vec<f64> = (0..errs.len()).map(|i| i as f64 * 0.01).collect();
        let xs: Vec<DVector<f64>> = errs.iter().map(|&e| DVector::from_vec(vec![e, 0.0])).collect();
        let m = compute_metrics(&times, &xs, &DVector::zeros(2), &[0.03, 0.01, 0.005]);
        for w in m.bands.windows(2) {
            if let Some(t_small) = w[1].time_to_band {
                prop_assert!(w[0].time_to_band.is_some_and(|t_big| t_big <= t_small));
            }
        }
    }
}
