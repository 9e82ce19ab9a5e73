//! Parametric rib-cage phantoms.
//!
//! The phantom frame puts the bone surface in the plane `z = 0` with the skin
//! above it. The sternum runs along +y through the domain centre; ribs are
//! capsule-shaped stripes leaving the sternum on both sides at
//! `rib_axis_angle` to the sternum axis. An optional axis-aligned ellipsoid
//! below the bone plane stands in for the imaging target.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{CloudKind, PointCloud};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::geometry::{Point2, Point3, RigidTransform};

#[derive(Debug, Clone, PartialEq)]
pub struct RibCageSpec {
    pub rib_count: usize,
    pub rib_width: f64,
    pub gap_width: f64,
    /// Length of each rib from the sternum edge to the centre of its rounded end.
    pub rib_length: f64,
    pub sternum_width: f64,
    pub skin_thickness: f64,
    /// N/mm
    pub bone_stiffness: f64,
    /// N/mm
    pub tissue_stiffness: f64,
    /// Rib direction relative to the sternum centreline, degrees.
    pub rib_axis_angle: f64,
    /// Depth of the target centre below the skin surface.
    pub target_depth: f64,
    /// Bounding box of the target ellipsoid (x, y, z extents); all zero means no target.
    pub target_extent: [f64; 3],
    /// Lateral offset of the target centre from the sternum centreline.
    pub target_offset_x: f64,
    pub undulation_amplitude: f64,
    pub undulation_wavelength: f64,
    pub margin: f64,
    pub rng_seed: u64,
}

impl Default for RibCageSpec {
    fn default() -> Self {
        Self {
            rib_count: 4,
            rib_width: 15.0,
            gap_width: 30.0,
            rib_length: 80.0,
            sternum_width: 25.0,
            skin_thickness: 7.0,
            bone_stiffness: 10.0,
            tissue_stiffness: 1.0,
            rib_axis_angle: 90.0,
            target_depth: 20.0,
            target_extent: [20.0, 38.0, 10.0],
            target_offset_x: 45.0,
            undulation_amplitude: 1.0,
            undulation_wavelength: 120.0,
            margin: 10.0,
            rng_seed: 7,
        }
    }
}

impl RibCageSpec {
    pub fn pitch(&self) -> f64 {
        self.rib_width + self.gap_width
    }

    pub fn has_target(&self) -> bool {
        self.target_extent.iter().all(|&e| e > 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(field: &'static str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::validation(field, format!("must be > 0, got {v}")))
            }
        }
        fn non_negative(field: &'static str, v: f64) -> Result<()> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::validation(field, format!("must be >= 0, got {v}")))
            }
        }
        positive("rib_width", self.rib_width)?;
        positive("gap_width", self.gap_width)?;
        positive("rib_length", self.rib_length)?;
        non_negative("sternum_width", self.sternum_width)?;
        non_negative("skin_thickness", self.skin_thickness)?;
        positive("tissue_stiffness", self.tissue_stiffness)?;
        positive("bone_stiffness", self.bone_stiffness)?;
        if self.bone_stiffness <= self.tissue_stiffness {
            return Err(Error::validation(
                "bone_stiffness",
                "must exceed tissue_stiffness",
            ));
        }
        if !(self.rib_axis_angle > 0.0 && self.rib_axis_angle < 180.0) {
            return Err(Error::validation("rib_axis_angle", "must lie in (0, 180) degrees"));
        }
        non_negative("undulation_amplitude", self.undulation_amplitude)?;
        positive("undulation_wavelength", self.undulation_wavelength)?;
        non_negative("margin", self.margin)?;
        for &e in &self.target_extent {
            non_negative("target_extent", e)?;
        }
        if self.has_target() {
            if self.target_depth <= self.skin_thickness {
                return Err(Error::validation(
                    "target_depth",
                    "must exceed skin_thickness",
                ));
            }
            let top = self.skin_thickness - self.target_depth + self.target_extent[2] / 2.0;
            if top >= 0.0 {
                return Err(Error::validation(
                    "target_depth",
                    "target must lie strictly below the bone plane",
                ));
            }
        }
        Ok(())
    }

    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        let mut s = Self::default();
        kv.apply("rib_count", &mut s.rib_count)?;
        kv.apply("rib_width", &mut s.rib_width)?;
        kv.apply("gap_width", &mut s.gap_width)?;
        kv.apply("rib_length", &mut s.rib_length)?;
        kv.apply("sternum_width", &mut s.sternum_width)?;
        kv.apply("skin_thickness", &mut s.skin_thickness)?;
        kv.apply("bone_stiffness", &mut s.bone_stiffness)?;
        kv.apply("tissue_stiffness", &mut s.tissue_stiffness)?;
        kv.apply("rib_axis_angle", &mut s.rib_axis_angle)?;
        kv.apply("target_depth", &mut s.target_depth)?;
        kv.apply("target_extent_x", &mut s.target_extent[0])?;
        kv.apply("target_extent_y", &mut s.target_extent[1])?;
        kv.apply("target_extent_z", &mut s.target_extent[2])?;
        kv.apply("target_offset_x", &mut s.target_offset_x)?;
        kv.apply("undulation_amplitude", &mut s.undulation_amplitude)?;
        kv.apply("undulation_wavelength", &mut s.undulation_wavelength)?;
        kv.apply("margin", &mut s.margin)?;
        kv.apply("rng_seed", &mut s.rng_seed)?;
        Ok(s)
    }

    pub fn to_config(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("rib_count", self.rib_count);
        kv.set("rib_width", self.rib_width);
        kv.set("gap_width", self.gap_width);
        kv.set("rib_length", self.rib_length);
        kv.set("sternum_width", self.sternum_width);
        kv.set("skin_thickness", self.skin_thickness);
        kv.set("bone_stiffness", self.bone_stiffness);
        kv.set("tissue_stiffness", self.tissue_stiffness);
        kv.set("rib_axis_angle", self.rib_axis_angle);
        kv.set("target_depth", self.target_depth);
        kv.set("target_extent_x", self.target_extent[0]);
        kv.set("target_extent_y", self.target_extent[1]);
        kv.set("target_extent_z", self.target_extent[2]);
        kv.set("target_offset_x", self.target_offset_x);
        kv.set("undulation_amplitude", self.undulation_amplitude);
        kv.set("undulation_wavelength", self.undulation_wavelength);
        kv.set("margin", self.margin);
        kv.set("rng_seed", self.rng_seed);
        kv
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn corners(&self) -> [Point2; 4] {
        [
            Point2::new(self.x0, self.y0),
            Point2::new(self.x1, self.y0),
            Point2::new(self.x1, self.y1),
            Point2::new(self.x0, self.y1),
        ]
    }
}

/// Axis-aligned ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: Point3,
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: &Point3) -> bool {
        self.level(p) <= 1.0
    }

    /// `Σ (d_i / a_i)²`; 1 on the surface.
    pub fn level(&self, p: &Point3) -> f64 {
        let d = p - self.center;
        (0..3).map(|i| (d[i] / self.semi_axes[i]).powi(2)).sum()
    }

    /// Surface samples with roughly `spacing` between neighbours.
    pub fn surface_points(&self, spacing: f64) -> Vec<Point3> {
        let [a, b, c] = self.semi_axes;
        let rmax = a.max(b).max(c);
        // latitude measured along z
        let n_lat = ((PI * rmax / spacing).ceil() as usize).max(4);
        let mut pts = Vec::new();
        for i in 0..=n_lat {
            let phi = PI * i as f64 / n_lat as f64;
            let (sp, cp) = phi.sin_cos();
            let ring = 2.0 * PI * a.max(b) * sp;
            let n_lon = ((ring / spacing).ceil() as usize).max(1);
            for j in 0..n_lon {
                let th = 2.0 * PI * j as f64 / n_lon as f64;
                pts.push(Point3::new(
                    self.center.x + a * sp * th.cos(),
                    self.center.y + b * sp * th.sin(),
                    self.center.z + c * cp,
                ));
                if n_lon == 1 {
                    break;
                }
            }
        }
        pts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TissueLabel {
    Bone,
    Gap,
}

/// Synthetic chest; immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomModel {
    spec: RibCageSpec,
    domain: Rect,
    sternum_x: f64,
    rib_centers_y: Vec<f64>,
    sternum_y: (f64, f64),
    phases: [f64; 2],
    target: Option<Ellipsoid>,
}

pub fn build_phantom(spec: &RibCageSpec) -> Result<PhantomModel> {
    PhantomModel::new(spec.clone())
}

impl PhantomModel {
    pub fn new(spec: RibCageSpec) -> Result<Self> {
        spec.validate()?;
        let theta = spec.rib_axis_angle.to_radians();
        let m = spec.margin;
        let half_rib_span = spec.rib_length * theta.sin() + spec.rib_width / 2.0;
        let width = if spec.rib_count > 0 {
            2.0 * m + spec.sternum_width + 2.0 * half_rib_span
        } else {
            2.0 * m + spec.sternum_width.max(spec.gap_width)
        };
        let p = spec.pitch();
        let height = 2.0 * m + spec.gap_width + spec.rib_count as f64 * p;
        let domain = Rect {
            x0: 0.0,
            y0: 0.0,
            x1: width,
            y1: height,
        };
        let sternum_x = width / 2.0;
        let y_first = m + spec.gap_width + spec.rib_width / 2.0;
        let rib_centers_y = (0..spec.rib_count).map(|k| y_first + k as f64 * p).collect();
        let sternum_y = (m + spec.gap_width / 2.0, height - m - spec.gap_width / 2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let phases = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];

        let target = spec.has_target().then(|| Ellipsoid {
            center: Point3::new(
                sternum_x + spec.target_offset_x,
                height / 2.0,
                spec.skin_thickness - spec.target_depth,
            ),
            semi_axes: spec.target_extent.map(|e| e / 2.0),
        });
        if let Some(t) = &target {
            let inside = domain.contains(t.center.x - t.semi_axes[0], t.center.y - t.semi_axes[1])
                && domain.contains(t.center.x + t.semi_axes[0], t.center.y + t.semi_axes[1]);
            if !inside {
                return Err(Error::validation("target_offset_x", "target leaves the phantom domain"));
            }
        }

        Ok(Self {
            spec,
            domain,
            sternum_x,
            rib_centers_y,
            sternum_y,
            phases,
            target,
        })
    }

    pub fn spec(&self) -> &RibCageSpec {
        &self.spec
    }

    pub fn domain(&self) -> Rect {
        self.domain
    }

    pub fn sternum_x(&self) -> f64 {
        self.sternum_x
    }

    /// Rib centroids along the sternum axis, in increasing y.
    pub fn rib_centers_y(&self) -> &[f64] {
        &self.rib_centers_y
    }

    /// Midlines of the gaps bounded by two ribs.
    pub fn inter_rib_gap_midlines(&self) -> Vec<f64> {
        self.rib_centers_y
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]))
            .collect()
    }

    pub fn target(&self) -> Option<&Ellipsoid> {
        self.target.as_ref()
    }

    /// Lateral extent of the rib region on one side, measured from the sternum centreline.
    pub fn rib_reach(&self) -> (f64, f64) {
        let s = self.spec.rib_axis_angle.to_radians().sin();
        (
            self.spec.sternum_width / 2.0,
            self.spec.sternum_width / 2.0 + self.spec.rib_length * s,
        )
    }

    fn in_sternum(&self, x: f64, y: f64) -> bool {
        self.spec.sternum_width > 0.0
            && (x - self.sternum_x).abs() <= self.spec.sternum_width / 2.0
            && y >= self.sternum_y.0
            && y <= self.sternum_y.1
    }

    fn in_rib(&self, x: f64, y: f64) -> bool {
        if self.rib_centers_y.is_empty() {
            return false;
        }
        let theta = self.spec.rib_axis_angle.to_radians();
        let r = self.spec.rib_width / 2.0;
        let dx = x - self.sternum_x;
        // left side mirrored onto the right
        let dir = (theta.sin(), theta.cos());
        let ax = self.spec.sternum_width / 2.0;
        let lx = dx.abs() - ax;
        let len = self.spec.rib_length;
        self.rib_centers_y.iter().any(|&yc| {
            let ly = y - yc;
            let t = (lx * dir.0 + ly * dir.1).clamp(0.0, len);
            let ex = lx - t * dir.0;
            let ey = ly - t * dir.1;
            ex * ex + ey * ey <= r * r
        })
    }

    pub fn bone_mask(&self, x: f64, y: f64) -> bool {
        self.domain.contains(x, y) && (self.in_sternum(x, y) || self.in_rib(x, y))
    }

    pub fn has_bone(&self) -> bool {
        let sternum = self.spec.sternum_width > 0.0 && self.sternum_y.1 > self.sternum_y.0;
        sternum || !self.rib_centers_y.is_empty()
    }

    pub fn stiffness(&self, x: f64, y: f64) -> f64 {
        if self.bone_mask(x, y) {
            self.spec.bone_stiffness
        } else {
            self.spec.tissue_stiffness
        }
    }

    /// Skin surface height above the bone plane.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let k = 2.0 * PI / self.spec.undulation_wavelength;
        let a = self.spec.undulation_amplitude;
        self.spec.skin_thickness
            + a * (0.6 * (k * x + self.phases[0]).sin() + 0.4 * (0.77 * k * y + self.phases[1]).sin())
    }

    pub fn label_point(&self, x: f64, y: f64) -> Result<TissueLabel> {
        if !self.domain.contains(x, y) {
            return Err(Error::OutOfDomain { x, y });
        }
        Ok(if self.bone_mask(x, y) {
            TissueLabel::Bone
        } else {
            TissueLabel::Gap
        })
    }

    /// Places the phantom in a world frame.
    pub fn placed(&self, placement: Placement) -> PlacedPhantom<'_> {
        PlacedPhantom {
            model: self,
            placement,
            inverse: placement.pose.inverse(),
        }
    }

    pub fn target_gt_cloud(&self, spacing: f64) -> Result<PointCloud> {
        self.placed(Placement::default()).target_gt_cloud(spacing)
    }
}

/// Result of template sampling.
#[derive(Debug, Clone)]
pub struct TemplateSample {
    pub cloud: PointCloud,
    /// Set when the bone mask is empty and the cloud therefore has no points.
    pub empty_mask: bool,
}

/// Samples the bone surface on a uniform grid with `density` points per mm².
pub fn sample_template_pc(phantom: &PhantomModel, density: f64) -> Result<TemplateSample> {
    if !(density.is_finite() && density > 0.0) {
        return Err(Error::validation("density", "must be > 0"));
    }
    if !phantom.has_bone() {
        log::warn!("bone mask is empty; template cloud has no points");
        return Ok(TemplateSample {
            cloud: PointCloud::empty(CloudKind::TemplateUs, "template"),
            empty_mask: true,
        });
    }
    let step = 1.0 / density.sqrt();
    let d = phantom.domain();
    let nx = (d.width() / step).floor() as usize;
    let ny = (d.height() / step).floor() as usize;
    let mut pts = Vec::new();
    for j in 0..=ny {
        let y = d.y0 + (j as f64 + 0.5) * step;
        if y > d.y1 {
            break;
        }
        for i in 0..=nx {
            let x = d.x0 + (i as f64 + 0.5) * step;
            if x > d.x1 {
                break;
            }
            if phantom.bone_mask(x, y) {
                pts.push(Point3::new(x, y, 0.0));
            }
        }
    }
    if pts.len() < 10 {
        return Err(Error::Insufficient(format!(
            "insufficient density: {density} points/mm² yields {} template points",
            pts.len()
        )));
    }
    Ok(TemplateSample {
        cloud: PointCloud::new(pts, CloudKind::TemplateUs, "template")?,
        empty_mask: false,
    })
}

/// Rigid placement of a phantom in the world: rotation/translation in the
/// horizontal plane plus a vertical lift.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Placement {
    pub pose: RigidTransform,
    pub lift: f64,
}

/// Queries a scanning or imaging simulation needs from a scene, in world
/// coordinates.
pub trait Surface {
    fn contains(&self, x: f64, y: f64) -> bool;
    fn height(&self, x: f64, y: f64) -> f64;
    fn stiffness(&self, x: f64, y: f64) -> f64;
    fn is_bone(&self, x: f64, y: f64) -> bool;
    /// z of the bone plane.
    fn bone_plane_z(&self) -> f64;
    fn in_target(&self, p: &Point3) -> bool;
}

impl Surface for PhantomModel {
    fn contains(&self, x: f64, y: f64) -> bool {
        self.domain.contains(x, y)
    }
    fn height(&self, x: f64, y: f64) -> f64 {
        PhantomModel::height(self, x, y)
    }
    fn stiffness(&self, x: f64, y: f64) -> f64 {
        PhantomModel::stiffness(self, x, y)
    }
    fn is_bone(&self, x: f64, y: f64) -> bool {
        self.bone_mask(x, y)
    }
    fn bone_plane_z(&self) -> f64 {
        0.0
    }
    fn in_target(&self, p: &Point3) -> bool {
        self.target.as_ref().is_some_and(|t| t.contains(p))
    }
}

/// A phantom seen through a [`Placement`].
#[derive(Debug, Clone, Copy)]
pub struct PlacedPhantom<'a> {
    model: &'a PhantomModel,
    placement: Placement,
    inverse: RigidTransform,
}

impl<'a> PlacedPhantom<'a> {
    pub fn model(&self) -> &'a PhantomModel {
        self.model
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    pub fn to_local(&self, p: &Point3) -> Point3 {
        let q = self.inverse.apply(p);
        Point3::new(q.x, q.y, q.z - self.placement.lift)
    }

    pub fn to_world(&self, p: &Point3) -> Point3 {
        let q = self.placement.pose.apply(p);
        Point3::new(q.x, q.y, q.z + self.placement.lift)
    }

    fn local_xy(&self, x: f64, y: f64) -> Point2 {
        self.inverse.apply2(Point2::new(x, y))
    }

    pub fn target_gt_cloud(&self, spacing: f64) -> Result<PointCloud> {
        let t = self
            .model
            .target()
            .ok_or_else(|| Error::Insufficient("phantom has no target".into()))?;
        let pts = t
            .surface_points(spacing)
            .iter()
            .map(|p| self.to_world(p))
            .collect();
        PointCloud::new(pts, CloudKind::TargetGt, "world")
    }
}

impl Surface for PlacedPhantom<'_> {
    fn contains(&self, x: f64, y: f64) -> bool {
        let l = self.local_xy(x, y);
        self.model.domain.contains(l.x, l.y)
    }
    fn height(&self, x: f64, y: f64) -> f64 {
        let l = self.local_xy(x, y);
        self.model.height(l.x, l.y) + self.placement.lift
    }
    fn stiffness(&self, x: f64, y: f64) -> f64 {
        let l = self.local_xy(x, y);
        self.model.stiffness(l.x, l.y)
    }
    fn is_bone(&self, x: f64, y: f64) -> bool {
        let l = self.local_xy(x, y);
        self.model.bone_mask(l.x, l.y)
    }
    fn bone_plane_z(&self) -> f64 {
        self.placement.lift
    }
    fn in_target(&self, p: &Point3) -> bool {
        self.model.in_target(&self.to_local(p))
    }
}
