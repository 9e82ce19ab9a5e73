//! Intercostal target path: centroid extraction from synthetic slices, PCA
//! path planning, rigid transfer, fan-motion tilt and target reconstruction.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{CloudKind, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{canonical_sign, Pca, Point3, RigidTransform};
use crate::phantom::{Ellipsoid, PhantomModel, Surface};
use crate::scanplan::{sample_polyline, PathKind, ScanPath3D};
use crate::tactsim::path_rng;

pub const PIXEL_MM: f64 = 0.067;
pub const DEFAULT_L_ADJ: f64 = 10.0;
const BONE_LEVEL: f64 = 0.8;

/// Threshold bin of a 256-bin histogram: bins `>= k` are foreground.
/// Maximizes the between-class variance; ties go to the lower index.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<usize> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Insufficient("no bimodal structure in the histogram".into()));
    }
    let total: f64 = hist.iter().map(|&c| c as f64).sum();
    let sum: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut best = (f64::NEG_INFINITY, 1);
    let (mut w0, mut s0) = (0.0, 0.0);
    for k in 1..256 {
        w0 += hist[k - 1] as f64;
        s0 += (k - 1) as f64 * hist[k - 1] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let var = between_class_variance(w0, s0, total, sum);
        if var > best.0 {
            best = (var, k);
        }
    }
    Ok(best.1)
}

/// Between-class variance for class 0 of weight `w0` and intensity sum `s0`.
pub fn between_class_variance(w0: f64, s0: f64, total: f64, sum: f64) -> f64 {
    let w1 = total - w0;
    let d = s0 / w0 - (sum - s0) / w1;
    w0 * w1 * d * d / (total * total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagingParams {
    /// mm per pixel, both axes.
    pub pixel_mm: f64,
    pub depth_mm: f64,
    pub width_mm: f64,
    pub noise_sigma: f64,
    pub bone_band_mm: f64,
    pub background: f64,
    pub target: f64,
    pub bone: f64,
    pub shadow: f64,
}

impl Default for ImagingParams {
    fn default() -> Self {
        Self {
            pixel_mm: PIXEL_MM,
            depth_mm: 40.0,
            width_mm: 32.0,
            noise_sigma: 0.02,
            bone_band_mm: 1.5,
            background: 0.2,
            target: 0.6,
            bone: 1.0,
            shadow: 0.05,
        }
    }
}

/// Probe pose of one image: contact point, lateral image axis and beam axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicePose {
    pub contact: Point3,
    pub lateral: Vector3<f64>,
    pub axis: Vector3<f64>,
}

impl SlicePose {
    fn point(&self, u: f64, r: f64) -> Point3 {
        self.contact + self.lateral * u + self.axis * r
    }
}

#[derive(Debug, Clone)]
pub struct SliceImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Columns whose beam hits bone.
    pub bone_cols: Vec<bool>,
    pub pose: SlicePose,
    pub pixel_mm: f64,
}

impl SliceImage {
    fn lateral_offset(&self, col: usize) -> f64 {
        (col as f64 - 0.5 * (self.cols as f64 - 1.0)) * self.pixel_mm
    }

    pub fn pixel_point(&self, row: usize, col: usize) -> Point3 {
        self.pose
            .point(self.lateral_offset(col), (row as f64 + 0.5) * self.pixel_mm)
    }
}

/// Orthographic intensity image: bright bone band with a dark shadow below
/// along each beam, mid-bright target, dark background, additive noise.
pub fn render_slice(
    surface: &impl Surface,
    pose: &SlicePose,
    params: &ImagingParams,
    with_bone: bool,
    rng: &mut ChaCha8Rng,
) -> SliceImage {
    let px = params.pixel_mm;
    let rows = (params.depth_mm / px).round() as usize;
    let cols = (params.width_mm / px).round() as usize;
    let mut img = SliceImage {
        rows,
        cols,
        data: vec![0.0; rows * cols],
        bone_cols: vec![false; cols],
        pose: *pose,
        pixel_mm: px,
    };
    let noise = (params.noise_sigma > 0.0).then(|| Normal::new(0.0, params.noise_sigma).unwrap());
    let zb = surface.bone_plane_z();
    for c in 0..cols {
        let u = img.lateral_offset(c);
        let origin = pose.point(u, 0.0);
        let mut r_bone = f64::INFINITY;
        if with_bone && pose.axis.z < 0.0 {
            let r = (zb - origin.z) / pose.axis.z;
            let hit = pose.point(u, r);
            if r >= 0.0 && surface.is_bone(hit.x, hit.y) {
                r_bone = r;
                img.bone_cols[c] = true;
            }
        }
        for row in 0..rows {
            let r = (row as f64 + 0.5) * px;
            let v = if r >= r_bone + params.bone_band_mm {
                params.shadow
            } else if r >= r_bone {
                params.bone
            } else if surface.in_target(&pose.point(u, r)) {
                params.target
            } else {
                params.background
            };
            img.data[row * cols + c] = v;
        }
    }
    if let Some(n) = noise {
        for v in &mut img.data {
            *v += n.sample(rng);
        }
    }
    img
}

#[derive(Debug, Clone)]
pub struct SliceSegmentation {
    pub mask: Vec<bool>,
    pub pixels: usize,
    /// (row, col) mean of the mask.
    pub centroid_px: Option<(f64, f64)>,
    /// The mask touches a shadowed column.
    pub truncated: bool,
    pub bone_in_view: bool,
}

fn to_bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * 256.0) as usize).min(255)
}

/// Otsu on the acoustically visible pixels, largest 4-connected component,
/// holes filled.
pub fn segment_slice(img: &SliceImage, min_contrast: f64) -> SliceSegmentation {
    let (rows, cols) = (img.rows, img.cols);
    let visible = |i: usize| !img.bone_cols[i % cols] && img.data[i] <= BONE_LEVEL;
    let mut hist = [0u64; 256];
    for i in 0..rows * cols {
        if visible(i) {
            hist[to_bin(img.data[i])] += 1;
        }
    }
    let bone_in_view = img.bone_cols.iter().any(|&b| b);
    let empty = SliceSegmentation {
        mask: vec![false; rows * cols],
        pixels: 0,
        centroid_px: None,
        truncated: false,
        bone_in_view,
    };
    let Ok(k) = otsu_threshold(&hist) else {
        return empty;
    };
    // class means in intensity units
    let (mut w0, mut s0, mut w1, mut s1) = (0.0, 0.0, 0.0, 0.0);
    for (b, &c) in hist.iter().enumerate() {
        let v = (b as f64 + 0.5) / 256.0;
        if b < k {
            w0 += c as f64;
            s0 += v * c as f64;
        } else {
            w1 += c as f64;
            s1 += v * c as f64;
        }
    }
    if w0 == 0.0 || w1 == 0.0 || s1 / w1 - s0 / w0 < min_contrast {
        return empty;
    }
    let cand: Vec<bool> = (0..rows * cols)
        .map(|i| visible(i) && to_bin(img.data[i]) >= k)
        .collect();

    // largest component
    let mut comp = vec![usize::MAX; rows * cols];
    let mut best = (0usize, usize::MAX);
    let mut queue = VecDeque::new();
    let mut id = 0;
    for start in 0..rows * cols {
        if !cand[start] || comp[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        comp[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours(i, rows, cols) {
                if cand[j] && comp[j] == usize::MAX {
                    comp[j] = id;
                    queue.push_back(j);
                }
            }
        }
        if size > best.0 {
            best = (size, id);
        }
        id += 1;
    }
    if best.0 == 0 {
        return empty;
    }
    let mut mask: Vec<bool> = comp.iter().map(|&c| c == best.1).collect();

    // fill holes: background not reachable from the border
    let mut outside = vec![false; rows * cols];
    for i in 0..rows * cols {
        let (r, c) = (i / cols, i % cols);
        if (r == 0 || c == 0 || r + 1 == rows || c + 1 == cols) && !mask[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours(i, rows, cols) {
            if !mask[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    for i in 0..rows * cols {
        if !mask[i] && !outside[i] {
            mask[i] = true;
        }
    }

    let mut pixels = 0;
    let (mut sr, mut sc) = (0.0, 0.0);
    let mut truncated = false;
    for i in 0..rows * cols {
        if !mask[i] {
            continue;
        }
        pixels += 1;
        let (r, c) = (i / cols, i % cols);
        sr += r as f64;
        sc += c as f64;
        if (c > 0 && img.bone_cols[c - 1]) || (c + 1 < cols && img.bone_cols[c + 1]) {
            truncated = true;
        }
    }
    SliceSegmentation {
        mask,
        pixels,
        centroid_px: Some((sr / pixels as f64, sc / pixels as f64)),
        truncated,
        bone_in_view,
    }
}

fn neighbours(i: usize, rows: usize, cols: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (i / cols, i % cols);
    [
        (r > 0).then(|| i - cols),
        (r + 1 < rows).then(|| i + cols),
        (c > 0).then(|| i - 1),
        (c + 1 < cols).then(|| i + 1),
    ]
    .into_iter()
    .flatten()
}

/// Mask pixels on the target outline, skipping edges that face the image
/// border or a shadowed column.
pub fn boundary_points(img: &SliceImage, seg: &SliceSegmentation) -> Vec<Point3> {
    let (rows, cols) = (img.rows, img.cols);
    let mut out = Vec::new();
    for i in 0..rows * cols {
        if !seg.mask[i] {
            continue;
        }
        let (r, c) = (i / cols, i % cols);
        let mut real_edge = false;
        let mut cut = false;
        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                cut = true;
                continue;
            }
            let j = nr as usize * cols + nc as usize;
            if !seg.mask[j] {
                if img.bone_cols[nc as usize] {
                    cut = true;
                } else {
                    real_edge = true;
                }
            }
        }
        if real_edge && !cut {
            out.push(img.pixel_point(r, c));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetCentroidSet {
    pub points: Vec<Point3>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidParams {
    pub slice_spacing: f64,
    /// Horizontal sweep direction; defaults to the target's longer
    /// horizontal axis.
    pub sweep_axis: Option<Vector3<f64>>,
    pub imaging: ImagingParams,
    pub seed: u64,
}

impl Default for CentroidParams {
    fn default() -> Self {
        Self {
            slice_spacing: 0.5,
            sweep_axis: None,
            imaging: ImagingParams::default(),
            seed: 0,
        }
    }
}

pub fn default_sweep_axis(target: &Ellipsoid) -> Vector3<f64> {
    if target.semi_axes[0] > target.semi_axes[1] {
        Vector3::x()
    } else {
        Vector3::y()
    }
}

/// Horizontal unit vector orthogonal to `d`, on its left.
fn lateral_of(d: &Vector3<f64>) -> Vector3<f64> {
    Vector3::z().cross(d).normalize()
}

/// Slices the template target orthogonally to the sweep axis and returns
/// one segmented centroid per slice that shows the target.
pub fn extract_centroids(model: &PhantomModel, params: &CentroidParams) -> Result<TargetCentroidSet> {
    let target = model
        .target()
        .ok_or_else(|| Error::Insufficient("phantom has no target".into()))?;
    if !(params.slice_spacing > 0.0) {
        return Err(Error::validation("slice_spacing", "must be > 0"));
    }
    let mut axis = params.sweep_axis.unwrap_or_else(|| default_sweep_axis(target));
    axis.z = 0.0;
    let d = axis
        .try_normalize(1e-12)
        .ok_or_else(|| Error::validation("sweep_axis", "must have a horizontal component"))?;
    let lat = lateral_of(&d);
    let c = target.center;
    let half = |v: &Vector3<f64>| {
        (v.x * target.semi_axes[0]).abs() + (v.y * target.semi_axes[1]).abs()
    };
    let reach = half(&d) + 2.0;
    let mut imaging = params.imaging;
    imaging.width_mm = imaging.width_mm.max(2.0 * half(&lat) + 8.0);
    let n = (2.0 * reach / params.slice_spacing).floor() as usize + 1;
    let mut points = Vec::new();
    for k in 0..n {
        let s = -reach + k as f64 * params.slice_spacing;
        let p = c + d * s;
        let pose = SlicePose {
            contact: Point3::new(p.x, p.y, model.height(p.x, p.y)),
            lateral: lat,
            axis: -Vector3::z(),
        };
        let mut rng = path_rng(params.seed, k);
        let img = render_slice(model, &pose, &imaging, false, &mut rng);
        let seg = segment_slice(&img, 0.5 * (imaging.target - imaging.background));
        if let Some((r, col)) = seg.centroid_px {
            let u = (col - 0.5 * (img.cols as f64 - 1.0)) * img.pixel_mm;
            points.push(pose.point(u, (r + 0.5) * img.pixel_mm));
        }
    }
    if points.is_empty() {
        return Err(Error::Insufficient("no slice contains the target".into()));
    }
    Ok(TargetCentroidSet { points })
}

/// Straight path along the first principal axis of the centroids, from the
/// smallest to the largest projection, sampled every 1 mm.
pub fn plan_path(centroids: &TargetCentroidSet, id: usize) -> Result<ScanPath3D> {
    if centroids.points.len() < 2 {
        return Err(Error::Insufficient("path planning needs at least 2 centroids".into()));
    }
    let pca = Pca::fit(&centroids.points).ok_or_else(|| Error::Degenerate("centroids".into()))?;
    if pca.variances[0] <= 1e-18 {
        return Err(Error::Degenerate("all centroids coincide".into()));
    }
    let d = canonical_sign(pca.major_axis());
    let ts: Vec<f64> = centroids
        .points
        .iter()
        .map(|p| (p - pca.mean).dot(&d))
        .collect();
    let t0 = ts.iter().copied().fold(f64::INFINITY, f64::min);
    let t1 = ts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let wps = sample_polyline(&[pca.mean + d * t0, pca.mean + d * t1], 1.0);
    ScanPath3D::new(id, PathKind::Target, wps, Vector3::z())
}

/// Rigid transfer of the waypoints; the approach normal rotates with them.
pub fn transfer_path(path: &ScanPath3D, t: &RigidTransform) -> ScanPath3D {
    ScanPath3D {
        waypoints: path.waypoints.iter().map(|p| t.apply(p)).collect(),
        approach_normal: t.rotate_vector(&path.approach_normal),
        ..path.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FanAdjustParams {
    /// Signed probe shift, mm; positive along the scanning direction.
    pub l_adj: f64,
    /// Target centroid height from the image top, pixels.
    pub c_h: f64,
    /// mm per pixel.
    pub s_h: f64,
}

/// Tilt from the probe centreline, degrees:
/// `sgn(L) * atan(|L| / (c_h * s_h))`.
pub fn fan_tilt(params: &FanAdjustParams) -> Result<f64> {
    if !(params.c_h > 0.0) {
        return Err(Error::validation("c_h", "must be > 0"));
    }
    if !(params.s_h > 0.0) {
        return Err(Error::validation("s_h", "must be > 0"));
    }
    let depth = params.c_h * params.s_h;
    if depth == 0.0 {
        return Err(Error::validation("c_h", "centroid depth is zero"));
    }
    let l = params.l_adj;
    if l == 0.0 {
        return Ok(0.0);
    }
    Ok(l.signum() * (l.abs() / depth).atan().to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceObservation {
    /// Bone shadow somewhere in the image.
    pub occluded: bool,
    /// The target mask ends at a shadow boundary inside the image.
    pub truncated: bool,
    pub target_visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoverageDecision {
    pub slice: usize,
    pub trigger: bool,
    /// +1: move along the scanning direction, -1: against it.
    pub side: i8,
}

/// Fan motion triggers on occluded slices that either truncate the target
/// in-image or belong to an occluded run bordering a slice with visible
/// target. The side points to the nearest unoccluded slice (forward for
/// ties and for runs at the path start).
pub fn coverage_check(obs: &[SliceObservation]) -> Vec<CoverageDecision> {
    let n = obs.len();
    let occl: Vec<bool> = obs.iter().map(|o| o.occluded).collect();
    let mut out: Vec<CoverageDecision> = (0..n)
        .map(|i| CoverageDecision {
            slice: i,
            trigger: false,
            side: 1,
        })
        .collect();
    for (a, b) in crate::tactile_pc::runs(&occl) {
        let before = a.checked_sub(1);
        let after = (b + 1 < n).then_some(b + 1);
        let borders_target = before.is_some_and(|i| obs[i].target_visible)
            || after.is_some_and(|i| obs[i].target_visible);
        for i in a..=b {
            let side = match (before, after) {
                (Some(p), Some(q)) => {
                    if q - i <= i - p {
                        1
                    } else {
                        -1
                    }
                }
                (Some(_), None) => -1,
                _ => 1,
            };
            out[i] = CoverageDecision {
                slice: i,
                trigger: obs[i].truncated || borders_target,
                side,
            };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepParams {
    pub slice_spacing: f64,
    pub imaging: ImagingParams,
    /// Magnitude of the fan-motion probe shift, mm.
    pub l_adj: f64,
    pub fan: bool,
    pub seed: u64,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            slice_spacing: 0.25,
            imaging: ImagingParams::default(),
            l_adj: DEFAULT_L_ADJ,
            fan: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SliceRecord {
    pub arc_s: f64,
    pub pose: SlicePose,
    pub observation: SliceObservation,
    pub centroid_px: Option<(f64, f64)>,
    pub points: Vec<Point3>,
}

#[derive(Debug, Clone)]
pub struct FanSlice {
    pub slice: usize,
    pub tilt_deg: f64,
    pub pose: SlicePose,
    pub points: Vec<Point3>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub slices: Vec<SliceRecord>,
    pub decisions: Vec<CoverageDecision>,
    pub fans: Vec<FanSlice>,
}

impl SweepResult {
    pub fn trigger_count(&self) -> usize {
        self.decisions.iter().filter(|d| d.trigger).count()
    }

    /// Path CSV with the tilt applied at each slice.
    pub fn to_csv(&self, path_id: usize) -> String {
        let mut s = String::from("path_id,seq,x_mm,y_mm,z_mm,tilt_deg,trigger\n");
        for (i, sl) in self.slices.iter().enumerate() {
            let tilt = self.fans.iter().find(|f| f.slice == i).map_or(0.0, |f| f.tilt_deg);
            let c = sl.pose.contact;
            let trig = self.decisions[i].trigger as u8;
            let _ = writeln!(s, "{path_id},{i},{:.6},{:.6},{:.6},{tilt:.6},{trig}", c.x, c.y, c.z);
        }
        s
    }
}

fn slice_points(img: &SliceImage, min_contrast: f64) -> (SliceSegmentation, Vec<Point3>) {
    let seg = segment_slice(img, min_contrast);
    let pts = if seg.pixels > 0 { boundary_points(img, &seg) } else { Vec::new() };
    (seg, pts)
}

/// Images the target along the path with the probe normal to the surface;
/// triggered slices are re-imaged with the fan-motion pose.
pub fn sweep_path(surface: &impl Surface, path: &ScanPath3D, params: &SweepParams) -> Result<SweepResult> {
    if path.waypoints.len() < 2 {
        return Err(Error::validation("waypoints", "path needs at least 2 waypoints"));
    }
    let flat: Vec<Point3> = path
        .waypoints
        .iter()
        .map(|p| Point3::new(p.x, p.y, 0.0))
        .collect();
    let samples = sample_polyline(&flat, params.slice_spacing);
    let min_contrast = 0.5 * (params.imaging.target - params.imaging.background);
    let mut slices = Vec::with_capacity(samples.len());
    let mut arc = 0.0;
    for (k, p) in samples.iter().enumerate() {
        if k > 0 {
            arc += (p - samples[k - 1]).norm();
        }
        let nxt = samples[(k + 1).min(samples.len() - 1)];
        let prv = samples[k.saturating_sub(1)];
        let d = (nxt - prv).normalize();
        if !surface.contains(p.x, p.y) {
            return Err(Error::OutOfDomain { x: p.x, y: p.y });
        }
        let pose = SlicePose {
            contact: Point3::new(p.x, p.y, surface.height(p.x, p.y)),
            lateral: lateral_of(&d),
            axis: -Vector3::z(),
        };
        let mut rng = path_rng(params.seed, k);
        let img = render_slice(surface, &pose, &params.imaging, true, &mut rng);
        let (seg, points) = slice_points(&img, min_contrast);
        slices.push(SliceRecord {
            arc_s: arc,
            pose,
            observation: SliceObservation {
                occluded: seg.bone_in_view,
                truncated: seg.truncated,
                target_visible: seg.pixels > 0,
            },
            centroid_px: seg.centroid_px,
            points,
        });
    }
    let obs: Vec<SliceObservation> = slices.iter().map(|s| s.observation).collect();
    let decisions = coverage_check(&obs);
    let mut fans = Vec::new();
    if params.fan {
        for dec in decisions.iter().filter(|d| d.trigger) {
            let i = dec.slice;
            // centroid depth at the nearest visible slice on the chosen side
            let mut j = i as i64;
            let step = dec.side as i64;
            let c_h = loop {
                j += step;
                if j < 0 || j >= slices.len() as i64 {
                    break None;
                }
                if let Some((r, _)) = slices[j as usize].centroid_px {
                    break Some(r + 0.5);
                }
            };
            let Some(c_h) = c_h else {
                continue;
            };
            let l = dec.side as f64 * params.l_adj;
            let tilt = fan_tilt(&FanAdjustParams {
                l_adj: l,
                c_h,
                s_h: params.imaging.pixel_mm,
            })?;
            let base = slices[i].pose;
            let d = base.lateral.cross(&Vector3::z());
            let moved = base.contact + d * l;
            if !surface.contains(moved.x, moved.y) {
                continue;
            }
            let t = tilt.to_radians();
            let pose = SlicePose {
                contact: Point3::new(moved.x, moved.y, surface.height(moved.x, moved.y)),
                lateral: base.lateral,
                axis: -Vector3::z() * t.cos() - d * t.sin(),
            };
            let mut rng = path_rng(params.seed, (1 << 20) + i);
            let img = render_slice(surface, &pose, &params.imaging, true, &mut rng);
            let (_, points) = slice_points(&img, min_contrast);
            fans.push(FanSlice {
                slice: i,
                tilt_deg: tilt,
                pose,
                points,
            });
        }
    }
    Ok(SweepResult {
        slices,
        decisions,
        fans,
    })
}

/// Stacks the boundary points of the unoccluded slices and, when asked, of
/// the fan-motion slices.
pub fn reconstruct_target(sweep: &SweepResult, include_fan: bool) -> Result<PointCloud> {
    let mut pts: Vec<Point3> = sweep
        .slices
        .iter()
        .filter(|s| !s.observation.occluded)
        .flat_map(|s| s.points.iter().copied())
        .collect();
    if include_fan {
        pts.extend(sweep.fans.iter().flat_map(|f| f.points.iter().copied()));
    }
    if pts.is_empty() {
        return Err(Error::Insufficient("no slice covers the target".into()));
    }
    PointCloud::new(pts, CloudKind::TargetRecon, "world")
}
