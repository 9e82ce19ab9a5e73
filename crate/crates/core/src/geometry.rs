//! Small geometric building blocks shared across the pipeline: planar rigid
//! motions and principal-component helpers.

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};

pub type Point3 = nalgebra::Point3<f64>;
pub type Point2 = nalgebra::Point2<f64>;

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_degrees(angle: f64) -> f64 {
    let mut a = angle % 360.0;
    if a <= -180.0 {
        a += 360.0;
    } else if a > 180.0 {
        a -= 360.0;
    }
    a
}

/// Planar rotation about the origin followed by a translation, acting on the
/// x/y coordinates of a point (z is carried through untouched).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    angle_deg: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(angle_deg: f64, tx: f64, ty: f64) -> Self {
        Self {
            angle_deg: wrap_degrees(angle_deg),
            tx,
            ty,
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new(0.0, tx, ty)
    }

    /// Rotation by `angle_deg` about `pivot`.
    pub fn rotation_about(angle_deg: f64, pivot: Point2) -> Self {
        let r = Self::new(angle_deg, 0.0, 0.0);
        let moved = r.apply2(pivot);
        Self::new(angle_deg, pivot.x - moved.x, pivot.y - moved.y)
    }

    /// Builds a transform from a 2x2 rotation given as (cos, sin) and a translation.
    pub fn from_cos_sin(cos: f64, sin: f64, tx: f64, ty: f64) -> Self {
        Self::new(sin.atan2(cos).to_degrees(), tx, ty)
    }

    pub fn angle_deg(&self) -> f64 {
        self.angle_deg
    }

    pub fn angle_rad(&self) -> f64 {
        self.angle_deg.to_radians()
    }

    pub fn translation_vec(&self) -> Vector2<f64> {
        Vector2::new(self.tx, self.ty)
    }

    fn cos_sin(&self) -> (f64, f64) {
        let a = self.angle_rad();
        (a.cos(), a.sin())
    }

    pub fn apply2(&self, p: Point2) -> Point2 {
        let (c, s) = self.cos_sin();
        Point2::new(c * p.x - s * p.y + self.tx, s * p.x + c * p.y + self.ty)
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let q = self.apply2(Point2::new(p.x, p.y));
        Point3::new(q.x, q.y, p.z)
    }

    /// Rotates a direction vector (no translation).
    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (c, s) = self.cos_sin();
        Vector3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let t = self.apply2(Point2::new(other.tx, other.ty));
        RigidTransform::new(self.angle_deg + other.angle_deg, t.x, t.y)
    }

    pub fn inverse(&self) -> RigidTransform {
        let (c, s) = self.cos_sin();
        // R^T (-t)
        let tx = -(c * self.tx + s * self.ty);
        let ty = -(-s * self.tx + c * self.ty);
        RigidTransform::new(-self.angle_deg, tx, ty)
    }
}

/// Principal component decomposition of a point set.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Point3,
    /// Unit axes ordered by decreasing variance.
    pub axes: [Vector3<f64>; 3],
    pub variances: [f64; 3],
}

impl Pca {
    /// Returns `None` for an empty set.
    pub fn fit(points: &[Point3]) -> Option<Pca> {
        if points.is_empty() {
            return None;
        }
        let n = points.len() as f64;
        let mean = points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords)
            / n;
        let mut cov = Matrix3::zeros();
        for p in points {
            let d = p.coords - mean;
            cov += d * d.transpose();
        }
        cov /= n;
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let axes = order.map(|i| eig.eigenvectors.column(i).into_owned());
        let variances = order.map(|i| eig.eigenvalues[i].max(0.0));
        Some(Pca {
            mean: Point3::from(mean),
            axes,
            variances,
        })
    }

    pub fn major_axis(&self) -> Vector3<f64> {
        self.axes[0]
    }

    pub fn minor_axis(&self) -> Vector3<f64> {
        self.axes[2]
    }
}

/// Flips `v` so that its largest-magnitude component is positive.
pub fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let mut k = 0;
    for i in 1..3 {
        if v[i].abs() > v[k].abs() {
            k = i;
        }
    }
    if v[k] < 0.0 {
        -v
    } else {
        v
    }
}
