//! Scan-path planning on the phantom surface: corner plane fit, 2D template
//! to 3D affine map, template mapping and sternum paths from inter-rib minima.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{canonical_sign, Pca, Point2, Point3};
use crate::phantom::{PhantomModel, Surface};
use crate::tactile_pc::{dbscan_1d, mean_direction, runs, ClassifiedLine};

pub const DEFAULT_SPEED: f64 = 4.86;
pub const DEFAULT_FORCE: f64 = 3.0;
/// Template pixels per mm.
pub const TEMPLATE_PX_PER_MM: f64 = 2.0;

/// Plane `n·p + d = 0` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    normal: Vector3<f64>,
    offset: f64,
}

impl Plane {
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self> {
        let n = normal.norm();
        if !(n > 1e-12) || !offset.is_finite() {
            return Err(Error::Degenerate("plane normal must be non-zero".into()));
        }
        Ok(Self {
            normal: normal / n,
            offset: offset / n,
        })
    }

    pub fn horizontal(z: f64) -> Self {
        Self {
            normal: Vector3::z(),
            offset: -z,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal.dot(&p.coords) + self.offset
    }

    /// Sum of squared point-to-plane distances.
    pub fn residual(&self, points: &[Point3]) -> f64 {
        points.iter().map(|p| self.signed_distance(p).powi(2)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub plane: Plane,
    pub residual: f64,
}

/// Least-squares plane through the corners (smallest principal axis of the
/// centred points). The normal is oriented towards +z.
pub fn fit_plane(corners: &[Point3]) -> Result<PlaneFit> {
    if corners.len() < 3 {
        return Err(Error::Degenerate("plane fit needs at least 3 points".into()));
    }
    let pca = Pca::fit(corners).ok_or_else(|| Error::Degenerate("non-finite corners".into()))?;
    let scale = pca.variances[0].max(1e-300);
    if pca.variances[1] <= 1e-12 * scale || pca.variances[0] <= 1e-24 {
        return Err(Error::Degenerate("corners are collinear or coincident".into()));
    }
    let mut n = pca.minor_axis();
    if n.z < 0.0 || (n.z == 0.0 && canonical_sign(n) != n) {
        n = -n;
    }
    let plane = Plane {
        normal: n,
        offset: -n.dot(&pca.mean.coords),
    };
    Ok(PlaneFit {
        residual: plane.residual(corners),
        plane,
    })
}

pub fn project_to_plane(p: &Point3, plane: &Plane) -> Point3 {
    p - plane.normal * plane.signed_distance(p)
}

/// Homogeneous template pixel `[u, v, 1]` to 3D mm point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap2D3D {
    pub matrix: Matrix3<f64>,
}

impl AffineMap2D3D {
    pub fn map(&self, px: &Point2) -> Point3 {
        Point3::from(self.matrix * Vector3::new(px.x, px.y, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineFit {
    pub map: AffineMap2D3D,
    /// Distance between each mapped corner and its 3D counterpart.
    pub residuals: Vec<f64>,
}

/// Least-squares affine map from pixel correspondences, one linear solve per
/// output coordinate.
pub fn solve_affine(corners2d: &[Point2], corners3d: &[Point3]) -> Result<AffineFit> {
    if corners2d.len() != corners3d.len() {
        return Err(Error::validation("corners3d", "count differs from corners2d"));
    }
    let n = corners2d.len();
    if n < 3 {
        return Err(Error::Degenerate("affine solve needs at least 3 corners".into()));
    }
    let a = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => corners2d[i].x,
        1 => corners2d[i].y,
        _ => 1.0,
    });
    let b = DMatrix::from_fn(n, 3, |i, j| corners3d[i][j]);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax.max(1.0)) {
        return Err(Error::Degenerate("template corners are affinely dependent".into()));
    }
    let x = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::Degenerate(format!("affine solve failed: {e}")))?;
    // x is 3x3 with rows (u, v, 1) and columns (x, y, z)
    let matrix = Matrix3::from_fn(|r, c| x[(c, r)]);
    let map = AffineMap2D3D { matrix };
    let residuals = corners2d
        .iter()
        .zip(corners3d)
        .map(|(p, q)| (map.map(p) - q).norm())
        .collect();
    Ok(AffineFit { map, residuals })
}

/// Plane fit plus affine map: everything needed to place template pixels on
/// the surface.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMapping {
    pub plane: PlaneFit,
    pub affine: AffineFit,
}

impl SurfaceMapping {
    /// Fits the plane to the measured corners, projects them onto it and
    /// solves the affine map against the projected corners.
    pub fn from_corners(corners2d: &[Point2], corners3d: &[Point3]) -> Result<Self> {
        let plane = fit_plane(corners3d)?;
        let projected: Vec<Point3> = corners3d
            .iter()
            .map(|p| project_to_plane(p, &plane.plane))
            .collect();
        let affine = solve_affine(corners2d, &projected)?;
        Ok(Self { plane, affine })
    }

    pub fn map(&self, px: &Point2) -> Point3 {
        self.affine.map.map(px)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LineKind {
    /// Parallel to the sternum centreline, crossing the ribs.
    Parallel,
    /// Orthogonal to the sternum, along an intercostal gap.
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateLine {
    pub id: usize,
    pub kind: LineKind,
    pub pixels: Vec<Point2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPathTemplate {
    pub corner_pixels: [Point2; 4],
    pub lines: Vec<TemplateLine>,
}

/// Lateral offsets of the parallel lines from the sternum edge, as fractions
/// of the rib length.
const PARALLEL_OFFSETS: [f64; 4] = [0.0625, 0.35, 0.6375, 0.925];

fn cross2(o: &Point2, a: &Point2, b: &Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

impl ScanPathTemplate {
    pub fn new(corner_pixels: [Point2; 4], lines: Vec<TemplateLine>) -> Result<Self> {
        let t = Self {
            corner_pixels,
            lines,
        };
        t.validate()?;
        Ok(t)
    }

    /// Eight lines parallel to the sternum (four per side) and three lines
    /// orthogonal to it along the inter-rib gaps of the model. Pixel frame:
    /// origin at the domain's lower-left corner, u along x, v along y.
    pub fn for_phantom(phantom: &PhantomModel) -> Result<Self> {
        let spec = phantom.spec();
        let dom = phantom.domain();
        let k = TEMPLATE_PX_PER_MM;
        let px = |x: f64, y: f64| Point2::new((x - dom.x0) * k, (y - dom.y0) * k);
        let corners = dom.corners().map(|c| px(c.x, c.y));
        let xc = phantom.sternum_x();
        let edge = spec.sternum_width / 2.0;
        let reach = spec.rib_length * spec.rib_axis_angle.to_radians().sin();
        let inset = 2.0;
        let mut lines = Vec::new();
        let mut xs = Vec::new();
        for side in [-1.0, 1.0] {
            for f in PARALLEL_OFFSETS {
                xs.push(xc + side * (edge + f * reach));
            }
        }
        xs.sort_by(f64::total_cmp);
        for &x in &xs {
            lines.push(TemplateLine {
                id: lines.len(),
                kind: LineKind::Parallel,
                pixels: vec![px(x, dom.y0 + inset), px(x, dom.y1 - inset)],
            });
        }
        let (x_lo, x_hi) = (xs[0], xs[xs.len() - 1]);
        let mut gaps = phantom.inter_rib_gap_midlines();
        if gaps.len() > 3 {
            let start = (gaps.len() - 3) / 2;
            gaps = gaps[start..start + 3].to_vec();
        }
        for y in gaps {
            lines.push(TemplateLine {
                id: lines.len(),
                kind: LineKind::Orthogonal,
                pixels: vec![px(x_lo, y), px(x_hi, y)],
            });
        }
        Self::new(corners, lines)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corner_pixels;
        let mut sign = 0.0;
        for i in 0..4 {
            let s = cross2(&c[i], &c[(i + 1) % 4], &c[(i + 2) % 4]);
            if s.abs() < 1e-12 {
                return Err(Error::validation("corner_pixels", "corners are collinear"));
            }
            if sign * s < 0.0 {
                return Err(Error::validation("corner_pixels", "corners are not convex"));
            }
            sign = s;
        }
        for line in &self.lines {
            if line.pixels.len() < 2 {
                return Err(Error::validation("lines", "a line needs at least 2 pixels"));
            }
            for p in &line.pixels {
                let inside = (0..4).all(|i| cross2(&c[i], &c[(i + 1) % 4], p) * sign >= -1e-9);
                if !inside {
                    return Err(Error::validation("lines", "line leaves the corner hull"));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("line_id,u_px,v_px\n");
        for c in &self.corner_pixels {
            let _ = writeln!(s, "corner,{:.6},{:.6}", c.x, c.y);
        }
        for l in &self.lines {
            let tag = match l.kind {
                LineKind::Parallel => "p",
                LineKind::Orthogonal => "o",
            };
            for p in &l.pixels {
                let _ = writeln!(s, "{tag}{},{:.6},{:.6}", l.id, p.x, p.y);
            }
        }
        s
    }

    /// Parses the template CSV. Line ids are `p<n>` (parallel) or `o<n>`
    /// (orthogonal); a bare number is read as parallel.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut corners = Vec::new();
        let mut lines: Vec<TemplateLine> = Vec::new();
        for (i, row) in text.lines().enumerate() {
            let row = row.trim();
            if row.is_empty() || (i == 0 && row.starts_with("line_id")) {
                continue;
            }
            let f: Vec<&str> = row.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(Error::format("template", format!("row {}: expected 3 fields", i + 1)));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::format("template", format!("row {}: bad number {s:?}", i + 1)))
            };
            let p = Point2::new(num(f[1])?, num(f[2])?);
            if f[0] == "corner" {
                corners.push(p);
                continue;
            }
            let (kind, id) = match f[0].strip_prefix('o') {
                Some(rest) => (LineKind::Orthogonal, rest),
                None => (LineKind::Parallel, f[0].strip_prefix('p').unwrap_or(f[0])),
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::format("template", format!("row {}: bad line id", i + 1)))?;
            match lines.iter_mut().find(|l| l.id == id) {
                Some(l) => l.pixels.push(p),
                None => lines.push(TemplateLine {
                    id,
                    kind,
                    pixels: vec![p],
                }),
            }
        }
        let corners: [Point2; 4] = corners
            .try_into()
            .map_err(|_| Error::format("template", "expected exactly 4 corner rows"))?;
        Self::new(corners, lines)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathKind {
    Parallel,
    Orthogonal,
    Sternum,
    Target,
}

impl PathKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PathKind::Parallel => "parallel",
            PathKind::Orthogonal => "orthogonal",
            PathKind::Sternum => "sternum",
            PathKind::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPath3D {
    pub id: usize,
    pub kind: PathKind,
    pub waypoints: Vec<Point3>,
    pub approach_normal: Vector3<f64>,
    pub speed: f64,
    pub desired_force: f64,
}

impl ScanPath3D {
    pub fn new(id: usize, kind: PathKind, waypoints: Vec<Point3>, normal: Vector3<f64>) -> Result<Self> {
        if waypoints.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("waypoints", "consecutive waypoints coincide"));
        }
        let n = normal.norm();
        if !(n > 1e-12) {
            return Err(Error::validation("approach_normal", "must be non-zero"));
        }
        Ok(Self {
            id,
            kind,
            waypoints,
            approach_normal: normal / n,
            speed: DEFAULT_SPEED,
            desired_force: DEFAULT_FORCE,
        })
    }

    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }
}

/// Samples a polyline every `step` mm; the final vertex is always kept.
pub fn sample_polyline(vertices: &[Point3], step: f64) -> Vec<Point3> {
    let mut out = Vec::new();
    if vertices.is_empty() {
        return out;
    }
    out.push(vertices[0]);
    let mut carry = 0.0;
    for w in vertices.windows(2) {
        let d = w[1] - w[0];
        let len = d.norm();
        if len == 0.0 {
            continue;
        }
        let mut s = step - carry;
        while s < len - 1e-9 {
            out.push(w[0] + d * (s / len));
            s += step;
        }
        carry = len - (s - step);
    }
    let last = vertices[vertices.len() - 1];
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

pub fn paths_to_csv(paths: &[ScanPath3D]) -> String {
    let mut s = String::from("path_id,seq,x_mm,y_mm,z_mm\n");
    for p in paths {
        for (i, w) in p.waypoints.iter().enumerate() {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", p.id, i, w.x, w.y, w.z);
        }
    }
    s
}

/// Reads waypoints grouped by path id, in file order. Kind, normal,
/// speed and force take their defaults.
pub fn paths_from_csv(text: &str) -> Result<Vec<ScanPath3D>> {
    let mut groups: Vec<(usize, Vec<Point3>)> = Vec::new();
    for (i, row) in text.lines().enumerate() {
        let row = row.trim();
        if row.is_empty() || (i == 0 && row.starts_with("path_id")) {
            continue;
        }
        let f: Vec<&str> = row.split(',').map(str::trim).collect();
        if f.len() < 5 {
            return Err(Error::format("path", format!("row {}: expected 5 fields", i + 1)));
        }
        let bad = || Error::format("path", format!("row {}: bad value", i + 1));
        let id: usize = f[0].parse().map_err(|_| bad())?;
        let xyz: Vec<f64> = f[2..5]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let p = Point3::new(xyz[0], xyz[1], xyz[2]);
        match groups.last_mut() {
            Some((gid, pts)) if *gid == id => pts.push(p),
            _ => groups.push((id, vec![p])),
        }
    }
    groups
        .into_iter()
        .map(|(id, pts)| ScanPath3D::new(id, PathKind::Parallel, pts, Vector3::z()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct MappedPaths {
    pub paths: Vec<ScanPath3D>,
    /// Largest distance a mapped point moved when projected onto the plane.
    pub max_plane_correction: f64,
    pub warnings: Vec<String>,
}

/// Maps every template line onto the surface: pixels through the affine
/// map, onto the fitted plane, then sampled every 1 mm. Samples outside the
/// surface domain are cut and the longest remaining run is kept.
pub fn map_template(
    template: &ScanPathTemplate,
    mapping: &SurfaceMapping,
    surface: &impl Surface,
) -> Result<MappedPaths> {
    let plane = mapping.plane.plane;
    let mut paths = Vec::new();
    let mut warnings = Vec::new();
    let mut max_corr: f64 = 0.0;
    for line in &template.lines {
        let verts: Vec<Point3> = line
            .pixels
            .iter()
            .map(|px| {
                let p = mapping.map(px);
                let q = project_to_plane(&p, &plane);
                max_corr = max_corr.max((p - q).norm());
                q
            })
            .collect();
        let samples = sample_polyline(&verts, 1.0);
        let inside: Vec<bool> = samples.iter().map(|p| surface.contains(p.x, p.y)).collect();
        let kept = match runs(&inside).into_iter().max_by_key(|&(a, b)| (b - a, usize::MAX - a)) {
            Some((a, b)) => samples[a..=b].to_vec(),
            None => Vec::new(),
        };
        if kept.len() < samples.len() {
            let msg = format!(
                "line {}: {} of {} samples outside the domain; truncated",
                line.id,
                samples.len() - kept.len(),
                samples.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        if kept.len() < 2 {
            let msg = format!("line {}: nothing left inside the domain; dropped", line.id);
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let kind = match line.kind {
            LineKind::Parallel => PathKind::Parallel,
            LineKind::Orthogonal => PathKind::Orthogonal,
        };
        paths.push(ScanPath3D::new(line.id, kind, kept, plane.normal())?);
    }
    Ok(MappedPaths {
        paths,
        max_plane_correction: max_corr,
        warnings,
    })
}

/// Index of a local minimum of `profile` inside the gap `[a, b]`: a sample
/// no larger than any other within two samples. Among candidates the one
/// closest to the gap midpoint wins.
pub fn gap_minimum(profile: &[f64], a: usize, b: usize) -> usize {
    let mid = 0.5 * (a + b) as f64;
    let n = profile.len();
    let mut best: Option<(f64, usize)> = None;
    for i in a..=b {
        let lo = i.saturating_sub(2);
        let hi = (i + 2).min(n - 1);
        if (lo..=hi).all(|j| profile[i] <= profile[j]) {
            let d = (i as f64 - mid).abs();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
    }
    best.map_or(((a + b) / 2).min(n - 1), |(_, i)| i)
}

/// Inter-rib gap minima of one line as waypoint indices.
pub fn line_gap_minima(line: &ClassifiedLine) -> Vec<usize> {
    let profile: Vec<f64> = match &line.profile {
        Some(p) => p.clone(),
        None => line.bone.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    };
    runs(&line.bone)
        .windows(2)
        .map(|w| gap_minimum(&profile, w[0].1 + 1, w[1].0 - 1))
        .collect()
}

/// Connects matching inter-rib minima of the parallel lines into up to three
/// paths orthogonal to the sternum (the middle ones when more gaps exist).
pub fn derive_sternum_paths(
    lines: &[ClassifiedLine],
    eps: f64,
    normal: Vector3<f64>,
    first_id: usize,
) -> Result<Vec<ScanPath3D>> {
    let with_gaps = lines.iter().filter(|l| runs(&l.bone).len() >= 2).count();
    if with_gaps < 2 {
        return Err(Error::Insufficient(
            "insufficient rib structure: need two rib intervals on two lines".into(),
        ));
    }
    let dirs: Vec<&[Point3]> = lines.iter().map(|l| l.points.as_slice()).collect();
    let v = mean_direction(&dirs)?.v_mean;
    let mut pts = Vec::new();
    let mut owner = Vec::new();
    for (li, line) in lines.iter().enumerate() {
        for i in line_gap_minima(line) {
            pts.push(line.points[i]);
            owner.push(li);
        }
    }
    let values: Vec<f64> = pts.iter().map(|p| p.coords.dot(&v)).collect();
    let clustering = dbscan_1d(&values, eps, 2);
    let mut groups: Vec<Vec<Point3>> = vec![Vec::new(); clustering.n_clusters];
    let mut group_lines: Vec<Vec<usize>> = vec![Vec::new(); clustering.n_clusters];
    for (k, &l) in clustering.labels.iter().enumerate() {
        if l >= 0 {
            groups[l as usize].push(pts[k]);
            group_lines[l as usize].push(owner[k]);
        }
    }
    let mut gaps: Vec<(f64, Vec<Point3>)> = groups
        .into_iter()
        .zip(group_lines)
        .filter(|(_, ls)| {
            let mut ls = ls.clone();
            ls.sort_unstable();
            ls.dedup();
            ls.len() >= 2
        })
        .map(|(g, _)| {
            let m = g.iter().map(|p| p.coords.dot(&v)).sum::<f64>() / g.len() as f64;
            (m, g)
        })
        .collect();
    if gaps.len() < 2 {
        return Err(Error::Insufficient(
            "insufficient rib structure: fewer than two gaps found".into(),
        ));
    }
    gaps.sort_by(|a, b| a.0.total_cmp(&b.0));
    if gaps.len() > 3 {
        let start = (gaps.len() - 3) / 2;
        gaps = gaps[start..start + 3].to_vec();
    }
    let mut out = Vec::new();
    for (k, (_, g)) in gaps.into_iter().enumerate() {
        let pca = Pca::fit(&g).ok_or_else(|| Error::Degenerate("gap points".into()))?;
        let d = canonical_sign(pca.major_axis());
        let ts: Vec<f64> = g.iter().map(|p| (p - pca.mean).dot(&d)).collect();
        let t0 = ts.iter().copied().fold(f64::INFINITY, f64::min);
        let t1 = ts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ends = [pca.mean + d * t0, pca.mean + d * t1];
        let wps = sample_polyline(&ends, 1.0);
        out.push(ScanPath3D::new(first_id + k, PathKind::Sternum, wps, normal)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p3(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    #[test]
    fn horizontal_corners() {
        let c = [p3(0.0, 0.0, 5.0), p3(10.0, 0.0, 5.0), p3(10.0, 8.0, 5.0), p3(0.0, 8.0, 5.0)];
        let f = fit_plane(&c).unwrap();
        assert!((f.plane.normal() - Vector3::z()).norm() < 1e-12);
        assert!((f.plane.offset() + 5.0).abs() < 1e-12);
        assert!(f.residual < 1e-20);
    }

    #[test]
    fn slanted_plane_normal() {
        // points on x + y + z = 1, scaled out
        let c = [
            p3(1.0, 0.0, 0.0) * 10.0,
            p3(0.0, 1.0, 0.0) * 10.0,
            p3(0.0, 0.0, 1.0) * 10.0,
            p3(0.5, 0.5, 0.0) * 10.0,
        ];
        let f = fit_plane(&c).unwrap();
        let expect = Vector3::new(1.0, 1.0, 1.0) / 3f64.sqrt();
        assert!((f.plane.normal() - expect).norm() < 1e-9);
        assert!(f.residual < 1e-9);
    }

    #[test]
    fn collinear_corners_rejected() {
        let c = [p3(0.0, 0.0, 0.0), p3(1.0, 1.0, 1.0), p3(2.0, 2.0, 2.0), p3(3.0, 3.0, 3.0)];
        assert!(matches!(fit_plane(&c), Err(Error::Degenerate(_))));
        let d = [p3(1.0, 1.0, 1.0); 4];
        assert!(matches!(fit_plane(&d), Err(Error::Degenerate(_))));
    }

    #[test]
    fn projection_basics() {
        let z0 = Plane::horizontal(0.0);
        assert_eq!(project_to_plane(&p3(0.0, 0.0, 10.0), &z0), p3(0.0, 0.0, 0.0));
        let on = p3(3.0, -2.0, 0.0);
        assert_eq!(project_to_plane(&on, &z0), on);
    }

    #[test]
    fn identity_affine() {
        let c2 = [
            Point2::new(0.0, 0.0),
            Point2::new(10.0, 0.0),
            Point2::new(10.0, 5.0),
            Point2::new(0.0, 5.0),
        ];
        let c3: Vec<Point3> = c2.iter().map(|p| p3(p.x, p.y, 0.0)).collect();
        let f = solve_affine(&c2, &c3).unwrap();
        let mut expect = Matrix3::zeros();
        expect[(0, 0)] = 1.0;
        expect[(1, 1)] = 1.0;
        assert!((f.map.matrix - expect).norm() < 1e-12);
        assert!(f.residuals.iter().all(|&r| r < 1e-12));
    }

    #[test]
    fn translated_affine() {
        let c2 = [
            Point2::new(0.0, 0.0),
            Point2::new(4.0, 0.0),
            Point2::new(4.0, 3.0),
            Point2::new(0.0, 3.0),
        ];
        let c3: Vec<Point3> = c2.iter().map(|p| p3(p.x + 7.0, p.y - 2.0, 11.0)).collect();
        let f = solve_affine(&c2, &c3).unwrap();
        let m = f.map.matrix;
        assert!((m[(0, 2)] - 7.0).abs() < 1e-12);
        assert!((m[(1, 2)] + 2.0).abs() < 1e-12);
        assert!((m[(2, 2)] - 11.0).abs() < 1e-12);
    }

    #[test]
    fn dependent_pixels_rejected() {
        let c2 = [
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(2.0, 2.0),
            Point2::new(3.0, 3.0),
        ];
        let c3 = [p3(0.0, 0.0, 0.0); 4];
        assert!(matches!(solve_affine(&c2, &c3), Err(Error::Degenerate(_))));
    }

    #[test]
    fn polyline_sampling_step() {
        let s = sample_polyline(&[p3(0.0, 0.0, 0.0), p3(3.5, 0.0, 0.0)], 1.0);
        let xs: Vec<f64> = s.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0, 3.5]);
    }

    #[test]
    fn gap_minimum_prefers_midpoint() {
        // flat gap: every sample is a minimum, the middle one wins
        let prof = vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(gap_minimum(&prof, 2, 6), 4);
        let dip = vec![1.0, 0.8, 0.5, 0.1, 0.4, 0.6, 0.9, 1.0];
        assert_eq!(gap_minimum(&dip, 1, 6), 3);
    }

    #[test]
    fn single_rib_is_insufficient() {
        let lines: Vec<ClassifiedLine> = (0..3)
            .map(|k| {
                let pts: Vec<Point3> = (0..50).map(|i| p3(k as f64 * 10.0, i as f64, 0.0)).collect();
                let bone = (0..50).map(|i| (20..30).contains(&i)).collect();
                ClassifiedLine::new(k, pts, bone).unwrap()
            })
            .collect();
        assert!(matches!(
            derive_sternum_paths(&lines, 15.0, Vector3::z(), 100),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn template_csv_round_trip() {
        let model = PhantomModel::new(Default::default()).unwrap();
        let t = ScanPathTemplate::for_phantom(&model).unwrap();
        assert_eq!(t.lines.len(), 11);
        let back = ScanPathTemplate::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back.lines.len(), 11);
        for (a, b) in t.lines.iter().zip(&back.lines) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn template_line_outside_hull_rejected() {
        let corners = [
            Point2::new(0.0, 0.0),
            Point2::new(10.0, 0.0),
            Point2::new(10.0, 10.0),
            Point2::new(0.0, 10.0),
        ];
        let line = TemplateLine {
            id: 0,
            kind: LineKind::Parallel,
            pixels: vec![Point2::new(1.0, 1.0), Point2::new(11.0, 1.0)],
        };
        assert!(ScanPathTemplate::new(corners, vec![line]).is_err());
    }

    #[test]
    fn path_csv_round_trip() {
        let p = ScanPath3D::new(
            3,
            PathKind::Parallel,
            vec![p3(0.0, 0.0, 1.0), p3(1.0, 0.5, 1.0), p3(2.0, 1.0, 1.25)],
            Vector3::z(),
        )
        .unwrap();
        let back = paths_from_csv(&paths_to_csv(&[p.clone()])).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].id, 3);
        assert_eq!(back[0].waypoints, p.waypoints);
    }
}
