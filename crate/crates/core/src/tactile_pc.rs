//! From classified scan lines to a dense tactile bone point cloud: mean scan
//! direction, 1D DBSCAN of the projected bone waypoints, boundary chains per
//! rib, two-step interpolation, flattening and voxel downsampling.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::cloud::{CloudKind, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{Pca, Point3};

/// Waypoints of one scan line with their bone/gap classification.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedLine {
    pub path_id: usize,
    pub points: Vec<Point3>,
    pub bone: Vec<bool>,
    /// Per-waypoint profile that dips over gaps (bone probability or
    /// filtered displacement), when available.
    pub profile: Option<Vec<f64>>,
}

impl ClassifiedLine {
    pub fn new(path_id: usize, points: Vec<Point3>, bone: Vec<bool>) -> Result<Self> {
        if points.len() != bone.len() {
            return Err(Error::validation("bone", "length differs from waypoint count"));
        }
        Ok(Self {
            path_id,
            points,
            bone,
            profile: None,
        })
    }

    /// Inclusive index ranges of contiguous bone runs.
    pub fn bone_runs(&self) -> Vec<(usize, usize)> {
        runs(&self.bone)
    }

    /// Point halfway between the last gap sample and the first bone sample
    /// (or the run end itself at the trace boundary).
    pub fn run_boundaries(&self, run: (usize, usize)) -> (Point3, Point3) {
        let (s, e) = run;
        let start = if s > 0 {
            nalgebra::center(&self.points[s - 1], &self.points[s])
        } else {
            self.points[s]
        };
        let end = if e + 1 < self.points.len() {
            nalgebra::center(&self.points[e], &self.points[e + 1])
        } else {
            self.points[e]
        };
        (start, end)
    }
}

pub(crate) fn runs(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, flags.len() - 1));
    }
    out
}

#[derive(Debug, Clone)]
pub struct MeanDirection {
    pub v_mean: Vector3<f64>,
    /// Indices of paths skipped as degenerate.
    pub skipped: Vec<usize>,
}

/// Averages the first principal direction of every path. Each direction is
/// oriented along its path's traversal and then sign-aligned to the first
/// usable path before averaging.
pub fn mean_direction<P: AsRef<[Point3]>>(paths: &[P]) -> Result<MeanDirection> {
    let mut skipped = Vec::new();
    let mut reference: Option<Vector3<f64>> = None;
    let mut sum = Vector3::zeros();
    for (i, path) in paths.iter().enumerate() {
        let pts = path.as_ref();
        let pca = match Pca::fit(pts) {
            Some(p) if pts.len() >= 2 && p.variances[0] > 1e-18 => p,
            _ => {
                log::warn!("path {i} is degenerate; skipped for the mean direction");
                skipped.push(i);
                continue;
            }
        };
        let mut v = pca.major_axis();
        match reference {
            None => {
                let travel = pts[pts.len() - 1] - pts[0];
                if v.dot(&travel) < 0.0 {
                    v = -v;
                }
                reference = Some(v);
            }
            Some(r) => {
                if v.dot(&r) < 0.0 {
                    v = -v;
                }
            }
        }
        sum += v;
    }
    if reference.is_none() {
        return Err(Error::Insufficient(
            "no path with two distinct points for the mean direction".into(),
        ));
    }
    let norm = sum.norm();
    if norm < 1e-12 {
        return Err(Error::Degenerate("path directions cancel out".into()));
    }
    Ok(MeanDirection {
        v_mean: sum / norm,
        skipped,
    })
}

/// Projections of waypoints onto the mean scan direction.
#[derive(Debug, Clone)]
pub struct ProjectionProfile {
    pub v_mean: Vector3<f64>,
    /// (point index, projected value in mm)
    pub values: Vec<(usize, f64)>,
}

impl ProjectionProfile {
    pub fn project(points: &[Point3], v_mean: Vector3<f64>) -> Self {
        Self {
            v_mean,
            values: points
                .iter()
                .enumerate()
                .map(|(i, p)| (i, p.coords.dot(&v_mean)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    /// One label per profile entry; -1 marks noise.
    pub labels: Vec<i64>,
    pub n_clusters: usize,
}

/// DBSCAN over the 1D profile values.
pub fn cluster_ribs(profile: &ProjectionProfile, eps: f64, min_pts: usize) -> Result<Clustering> {
    if !(eps > 0.0) {
        return Err(Error::validation("eps", "must be > 0"));
    }
    if min_pts == 0 {
        return Err(Error::validation("min_pts", "must be >= 1"));
    }
    let values: Vec<f64> = profile.values.iter().map(|&(_, v)| v).collect();
    Ok(dbscan_1d(&values, eps, min_pts))
}

/// 1D DBSCAN. Seeds are visited in input order, so border points shared by
/// two clusters go to the cluster created first.
pub fn dbscan_1d(values: &[f64], eps: f64, min_pts: usize) -> Clustering {
    const UNSEEN: i64 = -2;
    const NOISE: i64 = -1;
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    // widen the search window, then filter with the exact predicate
    let slack = eps * (1.0 + 1e-9) + 1e-12;
    let neighbors = |i: usize| -> Vec<usize> {
        let v = values[i];
        let lo = sorted.partition_point(|&s| s < v - slack);
        let hi = sorted.partition_point(|&s| s <= v + slack);
        order[lo..hi]
            .iter()
            .copied()
            .filter(|&j| (values[j] - v).abs() <= eps)
            .collect()
    };

    let mut labels = vec![UNSEEN; n];
    let mut cluster = 0i64;
    for i in 0..n {
        if labels[i] != UNSEEN {
            continue;
        }
        let nb = neighbors(i);
        if nb.len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = cluster;
        let mut queue: Vec<usize> = nb;
        let mut head = 0;
        while head < queue.len() {
            let j = queue[head];
            head += 1;
            if labels[j] == NOISE {
                labels[j] = cluster;
            }
            if labels[j] != UNSEEN {
                continue;
            }
            labels[j] = cluster;
            let nbj = neighbors(j);
            if nbj.len() >= min_pts {
                queue.extend(nbj);
            }
        }
        cluster += 1;
    }
    Clustering {
        labels,
        n_clusters: cluster as usize,
    }
}

/// One bone run of one scan line assigned to a cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMember {
    pub path_id: usize,
    /// Inclusive waypoint index interval.
    pub interval: (usize, usize),
    /// Boundary with the lower projection onto the mean direction.
    pub entrance: Point3,
    /// Boundary with the higher projection.
    pub exit: Point3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RibCluster {
    pub cluster_id: usize,
    /// Ordered across the lines (lateral order).
    pub members: Vec<ClusterMember>,
}

impl RibCluster {
    pub fn entrance_chain(&self) -> Vec<Point3> {
        self.members.iter().map(|m| m.entrance).collect()
    }

    pub fn exit_chain(&self) -> Vec<Point3> {
        self.members.iter().map(|m| m.exit).collect()
    }

    pub fn line_count(&self) -> usize {
        let mut ids: Vec<usize> = self.members.iter().map(|m| m.path_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Mean projection of the member midpoints.
    pub fn mean_value(&self, v_mean: &Vector3<f64>) -> f64 {
        let s: f64 = self
            .members
            .iter()
            .map(|m| nalgebra::center(&m.entrance, &m.exit).coords.dot(v_mean))
            .sum();
        s / self.members.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        // eps = half the default 30 mm intercostal gap
        Self {
            eps: 15.0,
            min_pts: 2,
        }
    }
}

fn lateral_axis(v_mean: &Vector3<f64>) -> Vector3<f64> {
    let l = Vector3::z().cross(v_mean);
    if l.norm() > 1e-9 {
        l.normalize()
    } else {
        Vector3::x()
    }
}

/// Groups the bone runs of all lines into rib clusters.
pub fn build_clusters(
    lines: &[ClassifiedLine],
    v_mean: Vector3<f64>,
    params: ClusterParams,
) -> Result<Vec<RibCluster>> {
    // every bone waypoint of every line, jointly
    let mut owners = Vec::new();
    let mut pts = Vec::new();
    for (li, line) in lines.iter().enumerate() {
        for (wi, (&p, &b)) in line.points.iter().zip(&line.bone).enumerate() {
            if b {
                owners.push((li, wi));
                pts.push(p);
            }
        }
    }
    let profile = ProjectionProfile::project(&pts, v_mean);
    let clustering = cluster_ribs(&profile, params.eps, params.min_pts)?;
    let mut label_of: BTreeMap<(usize, usize), i64> = BTreeMap::new();
    for (k, &(li, wi)) in owners.iter().enumerate() {
        label_of.insert((li, wi), clustering.labels[k]);
    }

    let mut by_cluster: BTreeMap<i64, Vec<ClusterMember>> = BTreeMap::new();
    for (li, line) in lines.iter().enumerate() {
        let mut per_line: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
        for run in line.bone_runs() {
            let mut votes: BTreeMap<i64, usize> = BTreeMap::new();
            for wi in run.0..=run.1 {
                let l = label_of[&(li, wi)];
                if l >= 0 {
                    *votes.entry(l).or_default() += 1;
                }
            }
            let Some((&label, _)) = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            else {
                continue;
            };
            per_line
                .entry(label)
                .and_modify(|r| {
                    r.0 = r.0.min(run.0);
                    r.1 = r.1.max(run.1);
                })
                .or_insert(run);
        }
        for (label, run) in per_line {
            let (a, b) = line.run_boundaries(run);
            let (entrance, exit) = if a.coords.dot(&v_mean) <= b.coords.dot(&v_mean) {
                (a, b)
            } else {
                (b, a)
            };
            by_cluster.entry(label).or_default().push(ClusterMember {
                path_id: line.path_id,
                interval: run,
                entrance,
                exit,
            });
        }
    }

    let lat = lateral_axis(&v_mean);
    let mut clusters: Vec<RibCluster> = by_cluster
        .into_values()
        .map(|mut members| {
            members.sort_by(|a, b| {
                let ka = nalgebra::center(&a.entrance, &a.exit).coords.dot(&lat);
                let kb = nalgebra::center(&b.entrance, &b.exit).coords.dot(&lat);
                ka.total_cmp(&kb)
            });
            RibCluster {
                cluster_id: 0,
                members,
            }
        })
        .collect();
    clusters.sort_by(|a, b| a.mean_value(&v_mean).total_cmp(&b.mean_value(&v_mean)));
    for (i, c) in clusters.iter_mut().enumerate() {
        c.cluster_id = i;
    }
    Ok(clusters)
}

/// Resamples a polyline at `n` points of equal normalized arc length.
pub(crate) fn resample_polyline(chain: &[Point3], n: usize) -> Vec<Point3> {
    let mut cum = vec![0.0];
    for w in chain.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    if n == 1 || total == 0.0 {
        return vec![chain[0]; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let s = total * i as f64 / (n - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(chain[seg] + (chain[seg + 1] - chain[seg]) * t);
    }
    out
}

pub(crate) fn polyline_length(chain: &[Point3]) -> f64 {
    chain.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

#[derive(Debug, Clone)]
pub struct DensePc {
    pub cloud: PointCloud,
    /// Cluster ids skipped because they touch fewer than two scan lines.
    pub skipped: Vec<usize>,
}

/// Two-step interpolation: each boundary chain becomes a piecewise-linear
/// polyline sampled every `step` mm, then corresponding points of the
/// entrance and exit chains (equal normalized arc length) are joined by
/// straight segments sampled every `step` mm.
pub fn build_dense_pc(clusters: &[RibCluster], step: f64) -> Result<DensePc> {
    if !(step > 0.0) {
        return Err(Error::validation("step", "must be > 0"));
    }
    let mut pts = Vec::new();
    let mut skipped = Vec::new();
    for c in clusters {
        if c.members.len() < 2 || c.line_count() < 2 {
            log::warn!("cluster {} touches fewer than two scan lines; skipped", c.cluster_id);
            skipped.push(c.cluster_id);
            continue;
        }
        let entrance = c.entrance_chain();
        let exit = c.exit_chain();
        let n_e = (polyline_length(&entrance) / step).ceil() as usize + 1;
        let n_x = (polyline_length(&exit) / step).ceil() as usize + 1;
        let n = n_e.max(n_x).max(2);
        let e = resample_polyline(&entrance, n);
        let x = resample_polyline(&exit, n);
        for (a, b) in e.iter().zip(&x) {
            let len = (b - a).norm();
            let m = (len / step).ceil() as usize;
            if m == 0 {
                pts.push(*a);
                continue;
            }
            for k in 0..=m {
                let t = k as f64 / m as f64;
                pts.push(a + (b - a) * t);
            }
        }
    }
    Ok(DensePc {
        cloud: PointCloud::new(pts, CloudKind::TactileDense, "world")?,
        skipped,
    })
}

/// Projects a cloud into 2D along its best-fit plane normal.
///
/// The in-plane basis is `e1 = normalize(x - (x·n) n)`, `e2 = n × e1` with
/// `n` oriented to positive z, so a horizontal cloud keeps its (x, y).
pub fn flatten_2d(pc: &PointCloud) -> Result<PointCloud> {
    if pc.is_empty() {
        return Err(Error::Insufficient("cannot flatten an empty cloud".into()));
    }
    let normal = match Pca::fit(pc.points()) {
        Some(p) if pc.len() >= 3 && p.variances[1] > 1e-12 => p.minor_axis(),
        _ => Vector3::z(),
    };
    Ok(flatten_with_normal(pc, normal)?)
}

pub fn flatten_with_normal(pc: &PointCloud, normal: Vector3<f64>) -> Result<PointCloud> {
    let mut n = normal.normalize();
    if n.z < 0.0 {
        n = -n;
    }
    let mut e1 = Vector3::x() - n * n.x;
    if e1.norm() < 1e-9 {
        e1 = Vector3::y() - n * n.y;
    }
    let e1 = e1.normalize();
    let e2 = n.cross(&e1);
    let pts = pc
        .points()
        .iter()
        .map(|p| Point3::new(p.coords.dot(&e1), p.coords.dot(&e2), 0.0))
        .collect();
    pc.with_points(pts)
}

/// Voxel-grid downsampling: one centroid per occupied `cell`-sized voxel.
pub fn downsample(pc: &PointCloud, cell: f64) -> Result<PointCloud> {
    if !(cell > 0.0) {
        return Err(Error::validation("cell", "must be > 0"));
    }
    let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, usize)> = BTreeMap::new();
    for p in pc.points() {
        let key = (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        );
        let e = cells.entry(key).or_insert((Vector3::zeros(), 0));
        e.0 += p.coords;
        e.1 += 1;
    }
    let pts = cells
        .into_values()
        .map(|(s, c)| Point3::from(s / c as f64))
        .collect();
    pc.with_points(pts)
}
