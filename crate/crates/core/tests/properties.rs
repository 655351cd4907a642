use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use livo_core::esikf::{gain_covariance_form, gain_information_form, iterated_update, EsikfConfig, NormalEquations};
use livo_core::eval::{relative_pose_errors, RpeOptions, StampedPose, Trajectory};
use livo_core::manifold::{so3, tangent_projection, tangent_projection_inverse, StateMatrix};
use livo_core::map::{fuse_color, MapConfig, VoxelMap};
use livo_core::vio::{pnp_jacobians, TrackInput};
use livo_core::{ErrorState, FullState, Intrinsics, Rotation3, StateWithCov, STATE_DIM};

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-r..r).prop_map(Vector3::from)
}

/// Rotation vectors strictly inside the ball where `log ∘ exp` is the identity.
fn rotvec() -> impl Strategy<Value = Vector3<f64>> {
    vec3(2.0).prop_filter("inside the injectivity ball", |w| w.norm() < 3.0)
}

fn error_state(r: f64) -> impl Strategy<Value = ErrorState> {
    prop::collection::vec(-r..r, STATE_DIM).prop_map(ErrorState::from_vec)
}

fn state() -> impl Strategy<Value = FullState> {
    (rotvec(), vec3(10.0), rotvec(), error_state(0.5)).prop_map(|(r, p, ric, d)| {
        let mut x = FullState::with_calibration(
            Rotation3::exp(&ric),
            Vector3::new(0.1, 0.0, 0.05),
            0.0,
            Intrinsics::new(200.0, 200.0, 160.0, 120.0),
        );
        x.rot = Rotation3::exp(&r);
        x.pos = p;
        x.boxplus(&d)
    })
}

proptest! {
    #[test]
    fn exp_log_roundtrip(w in rotvec()) {
        prop_assert!((so3::log(&so3::exp(&w)) - w).norm() < 1e-9);
    }

    #[test]
    fn exp_is_orthonormal(w in vec3(10.0)) {
        let r = so3::exp(&w);
        prop_assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn right_jacobian_inverse(w in rotvec()) {
        let p = so3::right_jacobian(&w) * so3::right_jacobian_inv(&w);
        prop_assert!((p - Matrix3::identity()).norm() < 1e-9);
    }

    #[test]
    fn boxplus_boxminus_roundtrip(x in state(), d in error_state(0.8)) {
        prop_assert!((x.boxplus(&d).boxminus(&x) - d).amax() < 1e-9);
    }

    #[test]
    fn boxminus_boxplus_roundtrip(x in state(), y in state()) {
        prop_assert!(x.boxplus(&y.boxminus(&x)).boxminus(&y).amax() < 1e-9);
    }

    #[test]
    fn tangent_projection_has_closed_form_inverse(x in state(), d in error_state(0.8)) {
        let y = x.boxplus(&d);
        let p = tangent_projection(&y, &x) * tangent_projection_inverse(&y, &x);
        prop_assert!((p - StateMatrix::identity()).norm() < 1e-9);
    }

    #[test]
    fn gain_forms_agree(seed in any::<u64>(), m in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spd = |n: usize| {
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            &a * a.transpose() + DMatrix::identity(n, n) * 0.1
        };
        let p = spd(STATE_DIM);
        let r = spd(m);
        let h = DMatrix::from_fn(m, STATE_DIM, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let ki = gain_information_form(&p, &h, &r).unwrap();
        let kc = gain_covariance_form(&p, &h, &r).unwrap();
        prop_assert!((&ki - &kc).norm() <= 1e-9 * kc.norm().max(1.0));
    }

    #[test]
    fn fusion_never_loses_information(
        c1 in vec3(1.0), c2 in vec3(1.0), s1 in 1e-4..1.0f64, s2 in 1e-4..1.0f64, q in 0.0..0.1f64,
    ) {
        let (a, b) = (Matrix3::identity() * s1, Matrix3::identity() * s2);
        let (c, cov) = fuse_color(&c1, &a, &c2, &b, q).unwrap();
        prop_assert!(cov[(0, 0)] <= s2 + 1e-15);
        prop_assert!(cov[(0, 0)] <= s1 + q + 1e-15);
        // The fused color lies between the two inputs channel by channel.
        for i in 0..3 {
            prop_assert!(c[i] >= c1[i].min(c2[i]) - 1e-12 && c[i] <= c1[i].max(c2[i]) + 1e-12);
        }
    }

    #[test]
    fn map_respects_min_spacing(pts in prop::collection::vec(vec3(0.5), 1..300), spacing in 0.01..0.2f64) {
        let mut map = VoxelMap::new(MapConfig { min_spacing: spacing, ..MapConfig::default() }).unwrap();
        let batch: Vec<_> = pts.iter().map(|p| (*p, Matrix3::identity() * 1e-4)).collect();
        let rep = map.insert_scan(&batch, 0.0);
        prop_assert_eq!(rep.inserted + rep.rejected_spacing, pts.len());
        let stored = map.points();
        for i in 0..stored.len() {
            for j in 0..i {
                prop_assert!((stored[i].p - stored[j].p).norm() >= spacing);
            }
        }
    }

    #[test]
    fn knn_is_sorted_and_bounded(pts in prop::collection::vec(vec3(0.5), 1..300), q in vec3(0.6), k in 1usize..12) {
        let mut map = VoxelMap::new(MapConfig { min_spacing: 0.0, ..MapConfig::default() }).unwrap();
        let batch: Vec<_> = pts.iter().map(|p| (*p, Matrix3::identity() * 1e-4)).collect();
        map.insert_scan(&batch, 0.0);
        let nn = map.knn(&q, k);
        prop_assert!(nn.len() <= k);
        prop_assert!(nn.windows(2).all(|w| w[0].1 <= w[1].1));
        for (id, d) in &nn {
            prop_assert!(*d <= map.search_radius());
            prop_assert!(((map.point(*id).p - q).norm() - d).abs() < 1e-15);
        }
    }

    #[test]
    fn rpe_ignores_a_global_rigid_transform(seed in any::<u64>(), w in rotvec(), t in vec3(50.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut poses = vec![];
        let mut pos = Vector3::zeros();
        for i in 0..60 {
            pos += Vector3::new(1.0, rng.random_range(-0.1..0.1), 0.0);
            let rot = Rotation3::exp(&Vector3::new(0.0, 0.0, rng.random_range(-0.2..0.2)));
            poses.push(StampedPose { t: i as f64, rot, pos });
        }
        let gt = Trajectory::new(poses.clone()).unwrap();
        let est = Trajectory::new(
            poses.iter().map(|p| StampedPose { pos: p.pos * 1.01, ..*p }).collect(),
        ).unwrap();
        let moved = est.transformed(&Rotation3::exp(&w), &t);
        let opts = RpeOptions::default();
        let a = relative_pose_errors(&est, &gt, &[10.0, 20.0], &opts);
        let b = relative_pose_errors(&moved, &gt, &[10.0, 20.0], &opts);
        prop_assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            prop_assert!((ra.rre_deg - rb.rre_deg).abs() < 1e-6);
            prop_assert!((ra.rte_pct - rb.rte_pct).abs() < 1e-6);
        }
    }
}

/// Random PnP update problem around a forward-looking camera.
fn pnp_problem(seed: u64) -> (StateWithCov, Vec<TrackInput>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let truth = FullState::with_calibration(
        Rotation3::from_matrix(cam).unwrap(),
        Vector3::new(0.1, 0.0, 0.05),
        0.0,
        Intrinsics::new(200.0, 200.0, 160.0, 120.0),
    );
    let inputs = (0..30)
        .map(|i| {
            let z = rng.random_range(3.0..8.0);
            let (u, v) = (rng.random_range(20.0..300.0), rng.random_range(20.0..220.0));
            let pc = Vector3::new((u - 160.0) / 200.0 * z, (v - 120.0) / 200.0 * z, z);
            let rho = Vector2::new(u, v) + Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            TrackInput {
                id: i,
                p_g: truth.camera_rotation() * pc + truth.camera_center(),
                cov_p: Matrix3::identity() * 1e-4,
                color: Vector3::zeros(),
                cov_c: Matrix3::identity(),
                dt_color: 0.0,
                rho_prev: rho,
                rho_curr: rho,
            }
        })
        .collect();
    let mut d = ErrorState::zeros();
    for i in 0..6 {
        d[i] = rng.random_range(-0.05..0.05);
    }
    let mut cov = StateMatrix::identity() * 1e-4;
    for i in 0..6 {
        cov[(i, i)] = 1e-2;
    }
    (StateWithCov::new(truth.boxplus(&d), cov, 0.0), inputs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn esikf_never_increases_the_map_cost(seed in any::<u64>()) {
        let (prior, inputs) = pnp_problem(seed);
        let linearize = |x: &FullState| {
            let mut ne = NormalEquations::default();
            for t in &inputs {
                if let Ok(term) = pnp_jacobians(x, t, 0.05, &Matrix2::identity(), 0.01) {
                    ne.add_block(&term.h, &term.residual, &term.cov);
                }
            }
            ne
        };
        let (post, rep) = iterated_update(&prior, &prior.x, &EsikfConfig::default(), linearize).unwrap();
        prop_assert!(rep.final_cost <= rep.initial_cost * (1.0 + 1e-12) + 1e-12);
        prop_assert!(post.cov.trace() <= prior.cov.trace());
    }
}
