use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ribscan::phantom::{PhantomModel, RibCageSpec, Surface};
use ribscan::scanplan::*;
use ribscan::tactile_pc::ClassifiedLine;
use ribscan::{Point2, Point3};

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn sum_sq(points: &[Point3], n: &Vector3<f64>, d: f64) -> f64 {
    points.iter().map(|p| (n.dot(&p.coords) + d).powi(2)).sum()
}

fn default_mapping(model: &PhantomModel) -> (ScanPathTemplate, SurfaceMapping) {
    let template = ScanPathTemplate::for_phantom(model).unwrap();
    let d = model.domain();
    let h = model.height(0.0, 0.0);
    let corners3d: Vec<Point3> = [(d.x0, d.y0), (d.x1, d.y0), (d.x1, d.y1), (d.x0, d.y1)]
        .iter()
        .map(|&(x, y)| Point3::new(x, y, h))
        .collect();
    let mapping = SurfaceMapping::from_corners(&template.corner_pixels, &corners3d).unwrap();
    (template, mapping)
}

#[test]
fn horizontal_plane_at_five() {
    let pts = [
        Point3::new(0.0, 0.0, 5.0),
        Point3::new(10.0, 0.0, 5.0),
        Point3::new(10.0, 7.0, 5.0),
        Point3::new(0.0, 7.0, 5.0),
    ];
    let f = fit_plane(&pts).unwrap();
    assert!((f.plane.normal() - Vector3::z()).norm() < 1e-12);
    assert!((f.plane.offset() + 5.0).abs() < 1e-12);
    assert!(f.residual < 1e-12);
}

#[test]
fn slanted_plane_recovers_normal() {
    let pts = [
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
        Point3::new(0.0, 0.0, 1.0),
        Point3::new(2.0, -2.0, 1.0),
    ];
    let f = fit_plane(&pts).unwrap();
    let expected = Vector3::new(1.0, 1.0, 1.0) / 3f64.sqrt();
    assert!((f.plane.normal() - expected).norm() < 1e-9);
    assert!(f.residual < 1e-9);
}

#[test]
fn distance_formula_matches_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = random_unit(&mut rng);
        let plane = Plane::new(n, rng.random_range(-20.0..20.0)).unwrap();
        let p = Point3::new(
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
        );
        let q = project_to_plane(&p, &plane);
        let expected = (n.dot(&p.coords) + plane.offset()).abs();
        assert!(((p - q).norm() - expected).abs() < 1e-9);
        assert!(plane.signed_distance(&q).abs() < 1e-9);
        assert!((p - q).cross(&n).norm() < 1e-9);
    }
}

#[test]
fn random_affine_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let m = Matrix3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let px: Vec<Point2> = (0..4)
            .map(|_| Point2::new(rng.random_range(0.0..400.0), rng.random_range(0.0..300.0)))
            .collect();
        let p3: Vec<Point3> = px
            .iter()
            .map(|p| Point3::from(m * Vector3::new(p.x, p.y, 1.0)))
            .collect();
        let fit = solve_affine(&px, &p3).unwrap();
        assert!(fit.residuals.iter().all(|&r| r < 1e-8));
        let err = (fit.map.matrix - m).abs().max();
        assert!(err < 1e-8, "{err}");
    }
}

#[test]
fn template_maps_to_eleven_paths() {
    let model = PhantomModel::new(RibCageSpec::default()).unwrap();
    let (template, mapping) = default_mapping(&model);
    let mapped = map_template(&template, &mapping, &model).unwrap();
    assert_eq!(mapped.paths.len(), 11);
    let parallel = mapped.paths.iter().filter(|p| p.kind == PathKind::Parallel).count();
    assert_eq!(parallel, 8);
    for path in &mapped.paths {
        assert!((path.approach_normal.norm() - 1.0).abs() < 1e-12);
        for w in path.waypoints.windows(2) {
            assert!((w[1] - w[0]).norm() > 0.0);
        }
    }
}

#[test]
fn mapped_straight_lines_stay_collinear() {
    let model = PhantomModel::new(RibCageSpec::default()).unwrap();
    let template = ScanPathTemplate::for_phantom(&model).unwrap();
    let corners3d = [
        Point3::new(2.0, 1.0, 7.0),
        Point3::new(180.0, 15.0, 9.0),
        Point3::new(170.0, 200.0, 12.0),
        Point3::new(-8.0, 186.0, 10.0),
    ];
    let mapping = SurfaceMapping::from_corners(&template.corner_pixels, &corners3d).unwrap();
    for line in &template.lines {
        let pts: Vec<Point3> = line.pixels.iter().map(|p| mapping.map(p)).collect();
        let a = pts[0];
        let dir = (pts[pts.len() - 1] - a).normalize();
        for p in &pts {
            assert!((p - a).cross(&dir).norm() < 1e-9);
        }
        let mid = Point2::from((line.pixels[0].coords + line.pixels[line.pixels.len() - 1].coords) / 2.0);
        assert!((mapping.map(&mid) - a).cross(&dir).norm() < 1e-9);
    }
}

fn oracle_line(model: &PhantomModel, id: usize, x: f64, step: f64) -> ClassifiedLine {
    let d = model.domain();
    let n = ((d.y1 - d.y0) / step) as usize;
    let points: Vec<Point3> = (0..n)
        .map(|i| Point3::new(x, d.y0 + (i as f64 + 0.5) * step, 0.0))
        .collect();
    let bone = points.iter().map(|p| model.is_bone(p.x, p.y)).collect();
    ClassifiedLine::new(id, points, bone).unwrap()
}

#[test]
fn gap_minima_land_on_gap_midlines() {
    let model = PhantomModel::new(RibCageSpec::default()).unwrap();
    let step = 0.5;
    let (a, b) = model.rib_reach();
    let lines: Vec<ClassifiedLine> = (0..4)
        .map(|k| oracle_line(&model, k, model.sternum_x() + a + (b - a) * (0.2 + 0.2 * k as f64), step))
        .collect();
    let mids = model.inter_rib_gap_midlines();
    for line in &lines {
        let minima = line_gap_minima(line);
        assert_eq!(minima.len(), mids.len());
        for (i, m) in minima.iter().zip(&mids) {
            assert!((line.points[*i].y - m).abs() <= step, "{} vs {m}", line.points[*i].y);
        }
    }
    let paths = derive_sternum_paths(&lines, 15.0, Vector3::z(), 100).unwrap();
    assert_eq!(paths.len(), 3);
    for (p, m) in paths.iter().zip(&mids) {
        for w in &p.waypoints {
            assert!((w.y - m).abs() <= step);
        }
    }
}

#[test]
fn single_rib_is_rejected() {
    let model = PhantomModel::new(RibCageSpec {
        rib_count: 1,
        target_extent: [0.0; 3],
        ..RibCageSpec::default()
    })
    .unwrap();
    let (a, b) = model.rib_reach();
    let lines: Vec<ClassifiedLine> = (0..3)
        .map(|k| oracle_line(&model, k, model.sternum_x() + a + (b - a) * (0.3 + 0.2 * k as f64), 0.5))
        .collect();
    assert!(derive_sternum_paths(&lines, 15.0, Vector3::z(), 100).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fitted_plane_beats_random_candidates(seed in any::<u64>(), noise in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = fit_plane(&[
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.3),
            Point3::new(0.0, 1.0, -0.2),
        ]).unwrap().plane;
        let corners: Vec<Point3> = [(0.0, 0.0), (120.0, 0.0), (120.0, 90.0), (0.0, 90.0)]
            .iter()
            .map(|&(x, y)| {
                let p = Point3::new(x, y, 0.0);
                let q = project_to_plane(&p, &base);
                q + base.normal() * rng.random_range(-noise..=noise)
            })
            .collect();
        let fit = fit_plane(&corners).unwrap();
        let best = sum_sq(&corners, &fit.plane.normal(), fit.plane.offset());
        let centroid = corners.iter().map(|p| p.coords).sum::<Vector3<f64>>() / 4.0;
        for _ in 0..1000 {
            let n = random_unit(&mut rng);
            // best offset for this normal goes through the centroid
            let d = -n.dot(&centroid) + rng.random_range(-1.0..1.0);
            prop_assert!(best <= sum_sq(&corners, &n, d) + 1e-9);
        }
    }

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), offset in -30.0f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane = Plane::new(random_unit(&mut rng), offset).unwrap();
        let p = Point3::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0));
        let once = project_to_plane(&p, &plane);
        let twice = project_to_plane(&once, &plane);
        prop_assert!((once - twice).norm() < 1e-9);
    }

    #[test]
    fn exact_affine_correspondence_has_no_residual(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fit = fit_plane(&[
            Point3::new(0.0, 0.0, rng.random_range(-5.0..5.0)),
            Point3::new(1.0, 0.0, rng.random_range(-5.0..5.0)),
            Point3::new(0.0, 1.0, rng.random_range(-5.0..5.0)),
        ]).unwrap();
        let origin = project_to_plane(&Point3::origin(), &fit.plane);
        let n = fit.plane.normal();
        let e1 = n.cross(&Vector3::z()).try_normalize(1e-9).unwrap_or(Vector3::x());
        let e2 = n.cross(&e1);
        let s = rng.random_range(0.2..2.0);
        let px: Vec<Point2> = [(0.0, 0.0), (300.0, 0.0), (300.0, 200.0), (0.0, 200.0)]
            .iter().map(|&(u, v)| Point2::new(u, v)).collect();
        let p3: Vec<Point3> = px.iter().map(|p| origin + e1 * (s * p.x) + e2 * (0.7 * s * p.y)).collect();
        let m = SurfaceMapping::from_corners(&px, &p3).unwrap();
        prop_assert!(m.plane.residual < 1e-8);
        for (a, b) in px.iter().zip(&p3) {
            prop_assert!((m.map(a) - b).norm() < 1e-8);
        }
    }
}
