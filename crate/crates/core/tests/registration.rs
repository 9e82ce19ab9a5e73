use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ribscan::cloud::{CloudKind, PointCloud};
use ribscan::geometry::{Point2, Point3, RigidTransform};
use ribscan::registration::*;

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| Point3::new(rng.random_range(-40.0..40.0), rng.random_range(-25.0..25.0), 0.0))
        .collect();
    PointCloud::new(pts, CloudKind::TactileDense, "t").unwrap()
}

fn rib_like_cloud() -> PointCloud {
    // an asymmetric comb of stripes
    let mut pts = Vec::new();
    for k in 0..4 {
        let len = 30.0 + 8.0 * k as f64;
        let mut x = 0.0;
        while x <= len {
            for dy in [0.0, 2.0, 4.0] {
                pts.push(Point3::new(x, k as f64 * 15.0 + dy, 0.0));
            }
            x += 2.0;
        }
    }
    for y in 0..25 {
        pts.push(Point3::new(-4.0, y as f64 * 2.0, 0.0));
    }
    PointCloud::new(pts, CloudKind::TemplateUs, "t").unwrap()
}

#[test]
fn recovers_known_motion() {
    let src = rib_like_cloud();
    let gt = RigidTransform::new(10.0, 5.0, 3.0);
    let tgt = apply_transform(&src, &gt).unwrap();
    let r = cpd_rigid(&src, &tgt, &CpdConfig::default()).unwrap();
    assert!((r.transform.angle_deg() - 10.0).abs() < 1e-3, "{:?}", r.transform);
    assert!((r.transform.tx - 5.0).abs() < 1e-3);
    assert!((r.transform.ty - 3.0).abs() < 1e-3);
    assert!(is_monotone(&r.log_likelihood, 1e-9));
}

#[test]
fn exact_recovery_without_outlier_term() {
    let src = random_cloud(150, 3);
    let gt = RigidTransform::new(-8.0, -4.0, 6.5);
    let tgt = apply_transform(&src, &gt).unwrap();
    let cfg = CpdConfig {
        outlier_weight: 0.0,
        ..CpdConfig::default()
    };
    let r = cpd_rigid(&src, &tgt, &cfg).unwrap();
    let e = registration_error(&r.transform, &gt, pivot_of(&src));
    assert!(e.dist < 1e-3 && e.ang < 1e-3, "{e:?}");
    assert!(is_monotone(&r.log_likelihood, 1e-9));
}

#[test]
fn point_order_does_not_matter() {
    let src = rib_like_cloud();
    let gt = RigidTransform::new(6.0, -2.0, 1.0);
    let tgt = apply_transform(&src, &gt).unwrap();
    let mut shuffled: Vec<Point3> = tgt.points().to_vec();
    shuffled.reverse();
    shuffled.rotate_left(17);
    let tgt2 = tgt.with_points(shuffled).unwrap();
    let a = cpd_rigid(&src, &tgt, &CpdConfig::default()).unwrap();
    let b = cpd_rigid(&src, &tgt2, &CpdConfig::default()).unwrap();
    assert!((a.transform.angle_deg() - b.transform.angle_deg()).abs() < 1e-9);
    assert!((a.transform.tx - b.transform.tx).abs() < 1e-9);
    assert!((a.transform.ty - b.transform.ty).abs() < 1e-9);
}

#[test]
fn pre_rotated_source_composes() {
    let src = rib_like_cloud();
    let gt = RigidTransform::new(7.0, 3.0, -2.0);
    let tgt = apply_transform(&src, &gt).unwrap();
    let base = cpd_rigid(&src, &tgt, &CpdConfig::default()).unwrap().transform;
    let pre = RigidTransform::rotation_about(4.0, pivot_of(&src));
    let moved = apply_transform(&src, &pre).unwrap();
    let r = cpd_rigid(&moved, &tgt, &CpdConfig::default()).unwrap().transform;
    let composed = r.compose(&pre);
    let e = registration_error(&composed, &base, pivot_of(&src));
    assert!(e.dist < 1e-6 && e.ang < 1e-6, "{e:?}");
}

#[test]
fn sigma2_collapses_on_exact_match() {
    let src = random_cloud(40, 9);
    let cfg = CpdConfig {
        outlier_weight: 0.0,
        tolerance: 1e-300,
        max_iterations: 500,
        ..CpdConfig::default()
    };
    let r = cpd_rigid(&src, &src, &cfg).unwrap();
    assert!(r.sigma2_collapsed);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn likelihood_never_decreases(seed in any::<u64>(), ang in -20.0f64..20.0, tx in -10.0f64..10.0, w in 0.0f64..0.5) {
        let src = random_cloud(60, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let gt = RigidTransform::new(ang, tx, -tx * 0.5);
        let noisy: Vec<Point3> = apply_transform(&src, &gt).unwrap().points().iter()
            .map(|p| Point3::new(p.x + rng.random_range(-0.5..0.5), p.y + rng.random_range(-0.5..0.5), 0.0))
            .collect();
        let tgt = src.with_points(noisy).unwrap();
        let cfg = CpdConfig { outlier_weight: w, ..CpdConfig::default() };
        let r = cpd_rigid(&src, &tgt, &cfg).unwrap();
        prop_assert!(is_monotone(&r.log_likelihood, 1e-9));
    }

    #[test]
    fn transform_preserves_distances(ang in -180.0f64..180.0, tx in -50.0f64..50.0, ty in -50.0f64..50.0, seed in any::<u64>()) {
        let c = random_cloud(20, seed);
        let t = RigidTransform::new(ang, tx, ty);
        let m = apply_transform(&c, &t).unwrap();
        for i in 0..c.len() {
            for j in 0..i {
                let a = (c.points()[i] - c.points()[j]).norm();
                let b = (m.points()[i] - m.points()[j]).norm();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
        let back = apply_transform(&m, &t.inverse()).unwrap();
        for (p, q) in c.points().iter().zip(back.points()) {
            prop_assert!((p - q).norm() < 1e-9);
        }
    }

    #[test]
    fn group_laws(a in -180.0f64..180.0, b in -180.0f64..180.0, x in -9.0f64..9.0, y in -9.0f64..9.0) {
        let s = RigidTransform::new(a, x, y);
        let t = RigidTransform::new(b, y, -x);
        let st = s.compose(&t);
        let p = Point2::new(1.5, -2.5);
        prop_assert!((st.apply2(p) - s.apply2(t.apply2(p))).norm() < 1e-12);
        let id = s.compose(&s.inverse());
        prop_assert!((id.apply2(p) - p).norm() < 1e-12);
        prop_assert!(st.angle_deg() > -180.0 && st.angle_deg() <= 180.0);
    }
}
