use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use splatgeo::eval::{ate, pose_error, psnr, Trajectory};
use splatgeo::gaussian::{rotate_sh, sh_linear_basis, transform_gaussians, Gaussian, GaussianSet};
use splatgeo::geometry::{se3_exp, so3_exp, RigidTransform, Twist};
use splatgeo::plane::ImagePlane;

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    [-range..range, -range..range, -range..range].prop_map(|[x, y, z]| Vector3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = Matrix3<f64>> {
    vec3(1.8).prop_map(|w| so3_exp(&w))
}

fn transform() -> impl Strategy<Value = RigidTransform> {
    (rotation(), vec3(5.0)).prop_map(|(r, t)| RigidTransform::new(r, t).unwrap())
}

fn unit() -> impl Strategy<Value = Vector3<f64>> {
    vec3(1.0).prop_filter("non-degenerate direction", |v| v.norm() > 0.1).prop_map(|v| v.normalize())
}

fn gaussian() -> impl Strategy<Value = Gaussian> {
    (vec3(3.0), 0.05..0.95, [0.01..2.0, 0.01..2.0, 0.01..2.0], unit(), -3.0f64..3.0, prop::array::uniform4(prop::array::uniform3(-1.0..1.0)))
        .prop_map(|(center, opacity, s, axis, angle, sh)| {
            let half = 0.5 * angle;
            let (sin, cos) = half.sin_cos();
            Gaussian {
                center,
                opacity,
                scale: Vector3::new(s[0], s[1], s[2]),
                orientation: [cos, sin * axis.x, sin * axis.y, sin * axis.z],
                sh,
            }
        })
}

fn max_abs_diff(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (a - b).abs().max()
}

fn assert_sets_close(a: &GaussianSet, b: &GaussianSet, tol: f64) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b.iter()) {
        prop_assert!((x.center - y.center).abs().max() <= tol);
        prop_assert!((x.scale - y.scale).abs().max() <= tol);
        prop_assert!((x.opacity - y.opacity).abs() <= tol);
        // q and -q are the same rotation.
        prop_assert!(max_abs_diff(&x.rotation_matrix(), &y.rotation_matrix()) <= tol);
        for c in 0..4 {
            for ch in 0..3 {
                prop_assert!((x.sh[c][ch] - y.sh[c][ch]).abs() <= tol);
            }
        }
    }
    Ok(())
}

/// Matrix logarithm computed from the rotation's trace and skew part and a
/// linear solve for the translation.
fn log_oracle(t: &RigidTransform) -> [f64; 6] {
    let r = t.rotation();
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let theta = (0.5 * vee.norm()).atan2(0.5 * (r.trace() - 1.0));
    let omega = vee * (theta / (2.0 * theta.sin()));
    let w = Matrix3::new(0.0, -omega.z, omega.y, omega.z, 0.0, -omega.x, -omega.y, omega.x, 0.0);
    let v_mat = Matrix3::identity()
        + w * ((1.0 - theta.cos()) / (theta * theta))
        + w * w * ((theta - theta.sin()) / (theta * theta * theta));
    let v = v_mat.lu().solve(t.translation()).unwrap();
    [omega.x, omega.y, omega.z, v.x, v.y, v.z]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn compose_is_associative(a in transform(), b in transform(), c in transform()) {
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        prop_assert!(max_abs_diff(left.rotation(), right.rotation()) <= 1e-12);
        prop_assert!((left.translation() - right.translation()).abs().max() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn exp_then_matrix_log_recovers_twist(axis in unit(), angle in 1e-3..3.0, v in vec3(4.0)) {
        let omega = axis * angle;
        let twist = Twist::new(omega, v);
        let recovered = log_oracle(&se3_exp(&twist));
        for (a, b) in recovered.iter().zip(twist.to_array()) {
            prop_assert!((a - b).abs() <= 1e-9, "{recovered:?} vs {:?}", twist.to_array());
        }
    }

    #[test]
    fn inverse_is_an_involution(t in transform()) {
        let back = t.inverse().inverse();
        prop_assert!(max_abs_diff(back.rotation(), t.rotation()) <= 1e-12);
        prop_assert!((back.translation() - t.translation()).abs().max() <= 1e-12);
    }

    #[test]
    fn transform_then_inverse_restores_gaussians(gs in prop::collection::vec(gaussian(), 1..8), t in transform()) {
        let set = GaussianSet::new(gs);
        let back = transform_gaussians(&transform_gaussians(&set, &t), &t.inverse());
        assert_sets_close(&back, &set, 1e-9)?;
    }

    #[test]
    fn transform_respects_composition(gs in prop::collection::vec(gaussian(), 1..8), t1 in transform(), t2 in transform()) {
        let set = GaussianSet::new(gs);
        let once = transform_gaussians(&set, &t2.compose(&t1));
        let twice = transform_gaussians(&transform_gaussians(&set, &t1), &t2);
        assert_sets_close(&once, &twice, 1e-9)?;
    }

    #[test]
    fn sh_rotation_preserves_directional_color(sh in prop::array::uniform4(prop::array::uniform3(-2.0..2.0)), r in rotation(), d in unit()) {
        let rotated = rotate_sh(&sh, &r);
        let (y_new, y_old) = (sh_linear_basis(&d), sh_linear_basis(&(r.transpose() * d)));
        for ch in 0..3 {
            let lhs: f64 = (0..3).map(|j| rotated[j + 1][ch] * y_new[j]).sum();
            let rhs: f64 = (0..3).map(|j| sh[j + 1][ch] * y_old[j]).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-9);
        }
    }

    #[test]
    fn covariance_is_symmetric_positive_definite(g in gaussian()) {
        let cov = g.covariance();
        prop_assert!(max_abs_diff(&cov, &cov.transpose()) <= 1e-12);
        prop_assert!(cov.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn pose_error_is_invariant_to_a_common_left_transform(a in transform(), b in transform(), q in transform()) {
        let before = pose_error(&a, &b);
        let after = pose_error(&q.compose(&a), &q.compose(&b));
        prop_assert!((before.rotation_deg - after.rotation_deg).abs() <= 1e-9);
        // Translation directions are compared raw, so only the rotation part
        // of a common transform leaves them invariant.
        let r = RigidTransform::new(*q.rotation(), Vector3::zeros()).unwrap();
        let rotated = pose_error(&r.compose(&a), &r.compose(&b));
        prop_assert!((before.translation_deg - rotated.translation_deg).abs() <= 1e-9);
    }

    #[test]
    fn ate_vanishes_under_similarity(
        pts in prop::collection::vec(vec3(3.0), 3..10),
        r in rotation(),
        t in vec3(5.0),
        scale in 0.2..5.0,
    ) {
        let spread = pts.iter().map(|p| (p - pts[0]).norm()).fold(0.0, f64::max);
        prop_assume!(spread > 0.5);
        let moved: Vec<Vector3<f64>> = pts.iter().map(|p| scale * (r * p) + t).collect();
        let e = ate(&Trajectory::new(moved), &Trajectory::new(pts)).unwrap();
        prop_assert!(e <= 1e-9, "ate {e}");
    }

    #[test]
    fn ate_is_invariant_to_a_common_rigid_motion(
        gt in prop::collection::vec(vec3(3.0), 4..10),
        noise in prop::collection::vec(vec3(0.2), 10),
        q in transform(),
    ) {
        let est: Vec<Vector3<f64>> = gt.iter().zip(&noise).map(|(p, n)| p + n).collect();
        let moved = |pts: &[Vector3<f64>]| Trajectory::new(pts.iter().map(|p| q.transform_point(p)).collect());
        let before = ate(&Trajectory::new(est.clone()), &Trajectory::new(gt.clone())).unwrap();
        let after = ate(&moved(&est), &moved(&gt)).unwrap();
        prop_assert!((before - after).abs() <= 1e-9, "{before} vs {after}");
    }

    #[test]
    fn psnr_decreases_along_a_noise_sweep(
        base in prop::collection::vec(0.2f64..0.8, 48),
        noise in prop::collection::vec(-1.0f64..1.0, 48),
        small in 0.001..0.02,
    ) {
        prop_assume!(noise.iter().any(|n| n.abs() > 1e-3));
        let a = ImagePlane::from_vec(4, 4, base.clone()).unwrap();
        let noisy = |eps: f64| {
            let data = base.iter().zip(&noise).map(|(b, n)| b + eps * n).collect();
            ImagePlane::from_vec(4, 4, data).unwrap()
        };
        let sweep: Vec<f64> = (1..=5).map(|i| psnr(&a, &noisy(small * i as f64)).unwrap()).collect();
        prop_assert!(sweep.windows(2).all(|w| w[1] < w[0]), "{sweep:?}");
    }
}
