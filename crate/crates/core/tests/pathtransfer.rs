use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ribscan::eval::coverage;
use ribscan::pathtransfer::*;
use ribscan::phantom::{PhantomModel, RibCageSpec};
use ribscan::scanplan::{PathKind, ScanPath3D};
use ribscan::{Point3, RigidTransform};

/// Between-class variance of the split `bins < k | bins >= k`, from scratch.
fn split_variance(hist: &[u64; 256], k: usize) -> f64 {
    let n: f64 = hist.iter().map(|&c| c as f64).sum();
    let (mut n0, mut m0, mut n1, mut m1) = (0.0, 0.0, 0.0, 0.0);
    for (i, &c) in hist.iter().enumerate() {
        let c = c as f64;
        if i < k {
            n0 += c;
            m0 += c * i as f64;
        } else {
            n1 += c;
            m1 += c * i as f64;
        }
    }
    if n0 == 0.0 || n1 == 0.0 {
        return 0.0;
    }
    let d = m0 / n0 - m1 / n1;
    (n0 / n) * (n1 / n) * d * d
}

fn flat_model(extent: [f64; 3]) -> PhantomModel {
    PhantomModel::new(RibCageSpec {
        undulation_amplitude: 0.0,
        target_extent: extent,
        ..RibCageSpec::default()
    })
    .unwrap()
}

fn centroid_errors(model: &PhantomModel, noise: f64) -> (usize, f64) {
    let t = *model.target().unwrap();
    let mut params = CentroidParams::default();
    params.imaging.noise_sigma = noise;
    params.seed = 31;
    let set = extract_centroids(model, &params).unwrap();
    let axis = default_sweep_axis(&t);
    let lat = Vector3::z().cross(&axis);
    let worst = set
        .points
        .iter()
        .map(|p| {
            let d = p - t.center;
            // analytic slice centroid sits on the sweep axis through the centre
            (d.dot(&lat).abs()).max(d.z.abs())
        })
        .fold(0.0, f64::max);
    (set.points.len(), worst)
}

#[test]
fn fan_tilt_of_reference_values() {
    let p = FanAdjustParams {
        l_adj: 10.0,
        c_h: 298.507,
        s_h: 0.067,
    };
    assert!((fan_tilt(&p).unwrap() - 26.565).abs() < 1e-3);
    let q = FanAdjustParams { l_adj: -10.0, ..p };
    assert!((fan_tilt(&q).unwrap() + 26.565).abs() < 1e-3);
    let z = FanAdjustParams { l_adj: 0.0, ..p };
    assert_eq!(fan_tilt(&z).unwrap(), 0.0);
    assert!(fan_tilt(&FanAdjustParams { c_h: 0.0, ..p }).is_err());
}

#[test]
fn otsu_attains_exhaustive_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let mut hist = [0u64; 256];
        let filled = rng.random_range(2..60);
        for _ in 0..filled {
            hist[rng.random_range(0..256)] += rng.random_range(1..500);
        }
        if hist.iter().filter(|&&c| c > 0).count() < 2 {
            continue;
        }
        let k = otsu_threshold(&hist).unwrap();
        let best = (1..256).map(|j| split_variance(&hist, j)).fold(0.0, f64::max);
        let got = split_variance(&hist, k);
        assert!((got - best).abs() <= 1e-12 * best.max(1.0), "{got} vs {best}");
        // lowest index among maximisers
        for j in 1..k {
            assert!(split_variance(&hist, j) < got - 1e-12 * best.max(1.0));
        }
    }
}

#[test]
fn otsu_separates_two_spikes() {
    let mut hist = [0u64; 256];
    hist[50] = 700;
    hist[200] = 300;
    let k = otsu_threshold(&hist).unwrap();
    assert!(k > 50 && k <= 200);
}

#[test]
fn noiseless_centroids_follow_the_ellipsoid() {
    let (n, worst) = centroid_errors(&flat_model([20.0, 38.0, 10.0]), 0.0);
    assert!(n > 50);
    assert!(worst <= 0.5, "{worst}");
}

#[test]
fn noisy_centroids_stay_within_a_millimetre() {
    let p = ImagingParams::default();
    let (_, worst) = centroid_errors(&flat_model([20.0, 38.0, 10.0]), 0.1 * (p.target - p.background));
    assert!(worst <= 1.0, "{worst}");
}

#[test]
fn centroids_lie_in_the_target_box() {
    let model = flat_model([20.0, 38.0, 10.0]);
    let t = *model.target().unwrap();
    let set = extract_centroids(&model, &CentroidParams::default()).unwrap();
    for p in &set.points {
        for a in 0..3 {
            assert!((p[a] - t.center[a]).abs() <= t.semi_axes[a] + 0.5);
        }
    }
}

#[test]
fn x_elongated_target_gives_x_path() {
    let model = flat_model([38.0, 20.0, 10.0]);
    let set = extract_centroids(&model, &CentroidParams::default()).unwrap();
    let path = plan_path(&set, 300).unwrap();
    assert_eq!(path.kind, PathKind::Target);
    let w = &path.waypoints;
    let d = (w[w.len() - 1] - w[0]).normalize();
    let ang = d.x.abs().clamp(-1.0, 1.0).acos().to_degrees();
    assert!(ang < 2.0, "{ang}");
}

#[test]
fn plan_path_length_is_projection_span() {
    let pts: Vec<Point3> = (0..30).map(|i| Point3::new(3.0 + 0.4 * i as f64, 1.0 - 0.2 * i as f64, -12.0)).collect();
    let path = plan_path(&TargetCentroidSet { points: pts.clone() }, 0).unwrap();
    let span = (pts[29] - pts[0]).norm();
    assert!((path.length() - span).abs() < 1e-9);
}

#[test]
fn coincident_centroids_are_rejected() {
    let set = TargetCentroidSet {
        points: vec![Point3::new(1.0, 2.0, 3.0); 5],
    };
    assert!(plan_path(&set, 0).is_err());
}

#[test]
fn fan_triggers_form_runs_next_to_ribs() {
    let model = flat_model([20.0, 38.0, 10.0]);
    let set = extract_centroids(&model, &CentroidParams::default()).unwrap();
    let path = plan_path(&set, 300).unwrap();
    let with_fan = sweep_path(&model, &path, &SweepParams::default()).unwrap();
    assert!(with_fan.trigger_count() > 0);
    for d in with_fan.decisions.iter().filter(|d| d.trigger) {
        assert!(with_fan.slices[d.slice].observation.occluded);
    }
    // every trigger run ends next to an unoccluded slice
    let trig: Vec<bool> = with_fan.decisions.iter().map(|d| d.trigger).collect();
    let mut i = 0;
    while i < trig.len() {
        if !trig[i] {
            i += 1;
            continue;
        }
        let a = i;
        while i < trig.len() && trig[i] {
            i += 1;
        }
        let before = a.checked_sub(1).is_some_and(|j| !with_fan.slices[j].observation.occluded);
        let after = i < trig.len() && !with_fan.slices[i].observation.occluded;
        assert!(before || after, "run {a}..{i}");
    }
    let gt = model.target_gt_cloud(0.5).unwrap();
    let no_fan = SweepParams {
        fan: false,
        ..SweepParams::default()
    };
    let without = sweep_path(&model, &path, &no_fan).unwrap();
    let c_fan = coverage(&gt, &reconstruct_target(&with_fan, true).unwrap(), 1.0).unwrap();
    let c_plain = coverage(&gt, &reconstruct_target(&without, false).unwrap(), 1.0).unwrap();
    assert!(c_fan > c_plain, "{c_fan} vs {c_plain}");
}

#[test]
fn unoccluded_sweep_has_no_triggers() {
    let obs = vec![
        SliceObservation {
            occluded: false,
            truncated: false,
            target_visible: true,
        };
        12
    ];
    assert!(coverage_check(&obs).iter().all(|d| !d.trigger));
}

fn random_path(rng: &mut impl Rng) -> ScanPath3D {
    let pts: Vec<Point3> = (0..20)
        .map(|i| {
            Point3::new(
                i as f64 * 1.3 + rng.random_range(0.0..0.5),
                rng.random_range(-5.0..5.0),
                rng.random_range(-2.0..2.0),
            )
        })
        .collect();
    ScanPath3D::new(7, PathKind::Target, pts, Vector3::z()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn fan_tilt_is_odd_and_monotone(
        l in 1e-3f64..40.0,
        dl in 1e-3f64..10.0,
        c_h in 10.0f64..600.0,
        dc in 1.0f64..100.0,
        s_h in 0.01f64..0.2,
    ) {
        let tilt = |l_adj: f64, c_h: f64| fan_tilt(&FanAdjustParams { l_adj, c_h, s_h }).unwrap();
        prop_assert_eq!(tilt(-l, c_h), -tilt(l, c_h));
        prop_assert!(tilt(l + dl, c_h).abs() > tilt(l, c_h).abs());
        prop_assert!(tilt(l, c_h + dc).abs() < tilt(l, c_h).abs());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reversed_centroids_give_same_endpoints(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.1).normalize();
        let pts: Vec<Point3> = (0..40)
            .map(|i| Point3::origin() + dir * (i as f64 - 20.0) + Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0))
            .collect();
        let a = plan_path(&TargetCentroidSet { points: pts.clone() }, 0).unwrap();
        let mut rev = pts;
        rev.reverse();
        let b = plan_path(&TargetCentroidSet { points: rev }, 0).unwrap();
        let ends = |p: &ScanPath3D| [p.waypoints[0], p.waypoints[p.waypoints.len() - 1]];
        let (ea, eb) = (ends(&a), ends(&b));
        let direct = (ea[0] - eb[0]).norm() + (ea[1] - eb[1]).norm();
        let swapped = (ea[0] - eb[1]).norm() + (ea[1] - eb[0]).norm();
        prop_assert!(direct.min(swapped) < 1e-9);
    }

    #[test]
    fn transfer_preserves_pairwise_distances(
        seed in any::<u64>(),
        ang in -180.0f64..180.0,
        tx in -60.0f64..60.0,
        ty in -60.0f64..60.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path = random_path(&mut rng);
        let t = RigidTransform::new(ang, tx, ty);
        let moved = transfer_path(&path, &t);
        prop_assert!((moved.length() - path.length()).abs() < 1e-9);
        prop_assert!((moved.approach_normal.norm() - 1.0).abs() < 1e-12);
        for i in 0..path.waypoints.len() {
            for j in (i + 1)..path.waypoints.len() {
                let d0 = (path.waypoints[i] - path.waypoints[j]).norm();
                let d1 = (moved.waypoints[i] - moved.waypoints[j]).norm();
                prop_assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }
}
