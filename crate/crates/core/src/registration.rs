//! Rigid 2D Coherent Point Drift and registration error metrics.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};

use crate::cloud::PointCloud;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::geometry::{wrap_degrees, Point2, Point3, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialSigma2 {
    /// Mean squared distance over all source/target pairs.
    MeanSquaredDistance,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpdConfig {
    pub outlier_weight: f64,
    pub max_iterations: usize,
    /// Relative change of the log-likelihood that stops the iteration.
    pub tolerance: f64,
    pub initial_sigma2: InitialSigma2,
}

impl Default for CpdConfig {
    fn default() -> Self {
        Self {
            outlier_weight: 0.1,
            max_iterations: 200,
            tolerance: 1e-8,
            initial_sigma2: InitialSigma2::MeanSquaredDistance,
        }
    }
}

impl CpdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_weight) {
            return Err(Error::validation("outlier_weight", "must be in [0, 1)"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::validation("tolerance", "must be > 0"));
        }
        if self.max_iterations == 0 {
            return Err(Error::validation("max_iterations", "must be >= 1"));
        }
        if let InitialSigma2::Fixed(s) = self.initial_sigma2 {
            if !(s > 0.0) {
                return Err(Error::validation("initial_sigma2", "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpdResult {
    /// Maps source points onto the target.
    pub transform: RigidTransform,
    pub sigma2: f64,
    pub iterations: usize,
    /// Log-likelihood of the target under the mixture, one entry per E-step.
    pub log_likelihood: Vec<f64>,
    /// The variance collapsed below 1e-12.
    pub sigma2_collapsed: bool,
}

impl CpdResult {
    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::new();
        kv.set("angle_deg", self.transform.angle_deg());
        kv.set("tx_mm", self.transform.tx);
        kv.set("ty_mm", self.transform.ty);
        kv.set("sigma2", self.sigma2);
        kv.set("iterations", self.iterations);
        kv.to_text()
    }
}

/// Reads the transform keys of a saved registration result.
pub fn load_transform(path: impl AsRef<Path>) -> Result<RigidTransform> {
    transform_from_config(&KeyValues::load(path)?)
}

pub fn transform_from_config(kv: &KeyValues) -> Result<RigidTransform> {
    Ok(RigidTransform::new(
        kv.require("angle_deg")?,
        kv.require("tx_mm")?,
        kv.require("ty_mm")?,
    ))
}

fn xy(pc: &PointCloud) -> Vec<Vector2<f64>> {
    pc.points().iter().map(|p| Vector2::new(p.x, p.y)).collect()
}

const SIGMA2_FLOOR: f64 = 1e-12;

/// Rigid CPD: source points are the moving mixture centroids, target points
/// are the data. Scale is fixed at 1.
pub fn cpd_rigid(source: &PointCloud, target: &PointCloud, cfg: &CpdConfig) -> Result<CpdResult> {
    cfg.validate()?;
    if source.len() < 3 || target.len() < 3 {
        return Err(Error::Insufficient("CPD needs at least 3 points per cloud".into()));
    }
    let y = xy(source);
    let x = xy(target);
    for (name, pts) in [("source", &y), ("target", &x)] {
        let spread = pts.iter().map(|p| (p - pts[0]).norm_squared()).fold(0.0, f64::max);
        if spread == 0.0 {
            return Err(Error::Degenerate(format!("{name} points are all coincident")));
        }
    }
    let (m, n) = (y.len(), x.len());
    let d = 2.0;
    let w = cfg.outlier_weight;

    let mut rot = Matrix2::identity();
    let mut t = Vector2::zeros();
    let mut sigma2 = match cfg.initial_sigma2 {
        InitialSigma2::Fixed(s) => s,
        InitialSigma2::MeanSquaredDistance => {
            let mut s = 0.0;
            for yi in &y {
                for xj in &x {
                    s += (xj - yi).norm_squared();
                }
            }
            s / (d * (m * n) as f64)
        }
    };

    let mut ll_trace = Vec::new();
    let mut iterations = 0;
    let mut collapsed = false;
    let mut ty = vec![Vector2::zeros(); m];
    let mut p = vec![0.0; m];
    loop {
        for (o, yi) in ty.iter_mut().zip(&y) {
            *o = rot * yi + t;
        }
        // E-step, one data point at a time
        let c = (2.0 * PI * sigma2).powf(d / 2.0) * w / (1.0 - w) * m as f64 / n as f64;
        let inv = 1.0 / (2.0 * sigma2);
        let mut p1 = vec![0.0; m];
        let mut pt1 = vec![0.0; n];
        let mut px = vec![Vector2::zeros(); m];
        let mut ll = 0.0;
        for (j, xj) in x.iter().enumerate() {
            let mut s = c;
            for (pi, tyi) in p.iter_mut().zip(&ty) {
                *pi = (-(xj - tyi).norm_squared() * inv).exp();
                s += *pi;
            }
            let s = s.max(f64::MIN_POSITIVE);
            ll += s.ln();
            let mut col = 0.0;
            for i in 0..m {
                let v = p[i] / s;
                p1[i] += v;
                px[i] += xj * v;
                col += v;
            }
            pt1[j] = col;
        }
        ll += n as f64 * (((1.0 - w) / m as f64).ln() - d / 2.0 * (2.0 * PI * sigma2).ln());
        let prev = ll_trace.last().copied();
        ll_trace.push(ll);
        if let Some(prev) = prev {
            if (ll - prev).abs() <= cfg.tolerance * ll.abs().max(1.0) {
                break;
            }
        }
        if iterations >= cfg.max_iterations {
            break;
        }

        // M-step
        let np: f64 = p1.iter().sum();
        if !(np > 0.0) {
            return Err(Error::Degenerate("no soft correspondences left".into()));
        }
        let mu_x = x.iter().zip(&pt1).fold(Vector2::zeros(), |a, (xj, &v)| a + xj * v) / np;
        let mu_y = y.iter().zip(&p1).fold(Vector2::zeros(), |a, (yi, &v)| a + yi * v) / np;
        // A = sum_ij P_ij (x_j - mu_x)(y_i - mu_y)^T
        let mut a = Matrix2::zeros();
        for i in 0..m {
            a += (px[i] - mu_x * p1[i]) * (y[i] - mu_y).transpose();
        }
        let svd = a.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let corr = Matrix2::new(1.0, 0.0, 0.0, (u * vt).determinant().signum());
        rot = u * corr * vt;
        t = mu_x - rot * mu_y;
        let sxx: f64 = x
            .iter()
            .zip(&pt1)
            .map(|(xj, &v)| v * (xj - mu_x).norm_squared())
            .sum();
        let syy: f64 = y
            .iter()
            .zip(&p1)
            .map(|(yi, &v)| v * (yi - mu_y).norm_squared())
            .sum();
        // unit scale: the residual keeps the full source spread term
        let tr = (a.transpose() * rot).trace();
        sigma2 = ((sxx - 2.0 * tr + syy) / (np * d)).max(0.0);
        iterations += 1;
        if sigma2 < SIGMA2_FLOOR {
            sigma2 = SIGMA2_FLOOR;
            collapsed = true;
            break;
        }
    }
    Ok(CpdResult {
        transform: RigidTransform::from_cos_sin(rot[(0, 0)], rot[(1, 0)], t.x, t.y),
        sigma2,
        iterations,
        log_likelihood: ll_trace,
        sigma2_collapsed: collapsed,
    })
}

/// Whether the trace never drops by more than `tol` relative to its scale.
pub fn is_monotone(trace: &[f64], tol: f64) -> bool {
    trace
        .windows(2)
        .all(|w| w[1] >= w[0] - tol * w[0].abs().max(w[1].abs()).max(1.0))
}

pub fn apply_transform(pc: &PointCloud, t: &RigidTransform) -> Result<PointCloud> {
    pc.with_points(pc.points().iter().map(|p| t.apply(p)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationError {
    pub dist: f64,
    pub ang: f64,
}

/// Residual motion `est ∘ gt⁻¹`: displacement of `pivot` (mm) and absolute
/// rotation (deg).
pub fn registration_error(est: &RigidTransform, gt: &RigidTransform, pivot: Point2) -> RegistrationError {
    let e = est.compose(&gt.inverse());
    RegistrationError {
        dist: (e.apply2(pivot) - pivot).norm(),
        ang: wrap_degrees(e.angle_deg()).abs(),
    }
}

pub fn pivot_of(pc: &PointCloud) -> Point2 {
    let c = pc.centroid().unwrap_or(Point3::origin());
    Point2::new(c.x, c.y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationRow {
    pub trial: usize,
    pub dist_mm: f64,
    pub ang_deg: f64,
    pub iters: usize,
}

pub fn report_csv(rows: &[RegistrationRow]) -> String {
    let mut s = String::from("trial,dist_mm,ang_deg,iters\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{}", r.trial, r.dist_mm, r.ang_deg, r.iters);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::CloudKind;

    fn cloud(pts: &[(f64, f64)]) -> PointCloud {
        PointCloud::new(
            pts.iter().map(|&(x, y)| Point3::new(x, y, 0.0)).collect(),
            CloudKind::TactileDense,
            "t",
        )
        .unwrap()
    }

    fn blob() -> Vec<(f64, f64)> {
        (0..60)
            .map(|i| {
                let a = i as f64 * 0.37;
                (a.cos() * (10.0 + i as f64 * 0.3), a.sin() * (6.0 + (i % 7) as f64))
            })
            .collect()
    }

    #[test]
    fn identity_registration() {
        let c = cloud(&blob());
        let r = cpd_rigid(&c, &c, &CpdConfig::default()).unwrap();
        assert!(r.transform.angle_deg().abs() < 1e-6);
        assert!(r.transform.translation_vec().norm() < 1e-6);
    }

    #[test]
    fn error_of_extra_motion() {
        let gt = RigidTransform::new(12.0, 4.0, -3.0);
        let c = Point2::new(10.0, 20.0);
        let e = registration_error(&gt, &gt, c);
        assert!(e.dist < 1e-12 && e.ang < 1e-12);
        let est = RigidTransform::translation(3.38, 0.0).compose(&gt);
        let e = registration_error(&est, &gt, c);
        assert!((e.dist - 3.38).abs() < 1e-12 && e.ang < 1e-12);
        let est = RigidTransform::rotation_about(0.58, c).compose(&gt);
        let e = registration_error(&est, &gt, c);
        assert!((e.ang - 0.58).abs() < 1e-12 && e.dist < 1e-9);
    }

    #[test]
    fn quarter_turn() {
        let c = cloud(&[(1.0, 0.0)]);
        let r = apply_transform(&c, &RigidTransform::new(90.0, 0.0, 0.0)).unwrap();
        assert!((r.points()[0] - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn coincident_cloud_rejected() {
        let a = cloud(&[(1.0, 1.0); 5]);
        let b = cloud(&blob());
        assert!(matches!(cpd_rigid(&a, &b, &CpdConfig::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn transform_text_round_trip() {
        let r = CpdResult {
            transform: RigidTransform::new(-7.25, 1.5, 2.0),
            sigma2: 0.3,
            iterations: 17,
            log_likelihood: vec![],
            sigma2_collapsed: false,
        };
        let kv = KeyValues::parse(&r.to_text()).unwrap();
        assert_eq!(transform_from_config(&kv).unwrap(), r.transform);
        assert_eq!(kv.require::<usize>("iterations").unwrap(), 17);
    }
}
