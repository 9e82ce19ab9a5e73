//! Point-cloud metrics, end-to-end trials on displaced phantoms and report
//! generation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::classifier::{detection_metrics, forward, segment, NetworkParams};
use crate::cloud::PointCloud;
use crate::config::KeyValues;
use crate::error::{Error, Result, StageExt};
use crate::geometry::{Point2, Point3, RigidTransform};
use crate::pathtransfer::{
    extract_centroids, plan_path, reconstruct_target, sweep_path, CentroidParams, SweepParams,
};
use crate::phantom::{sample_template_pc, PhantomModel, PlacedPhantom, Placement, RibCageSpec, Surface};
use crate::registration::{cpd_rigid, pivot_of, registration_error, CpdConfig, CpdResult};
use crate::scanplan::{
    derive_sternum_paths, map_template, sample_polyline, PathKind, ScanPath3D, ScanPathTemplate,
    SurfaceMapping,
};
use crate::tactile_pc::{
    build_clusters, build_dense_pc, downsample, flatten_2d, mean_direction, ClassifiedLine, ClusterParams,
};
use crate::tactsim::{
    make_windows, path_rng, preprocess, simulate_scan, ControllerParams, PreprocessParams, SignalWindow,
    TactileTrace, TraceLabel, DEFAULT_NOISE_SIGMA, WINDOW_LEN,
};

/// Exact nearest-neighbour distances into a fixed point set.
pub struct NearestIndex {
    points: Vec<Point3>,
    tree: ImmutableKdTree<f64, 3>,
}

impl NearestIndex {
    pub fn new(points: &[Point3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Insufficient("nearest-neighbour index over an empty cloud".into()));
        }
        let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Ok(Self {
            points: points.to_vec(),
            tree: ImmutableKdTree::new_from_slice(&coords),
        })
    }

    pub fn distance(&self, p: &Point3) -> f64 {
        let nn = self.tree.nearest_one::<SquaredEuclidean>(&[p.x, p.y, p.z]);
        (p - self.points[nn.item as usize]).norm()
    }
}

fn non_empty(pc: &PointCloud, name: &str) -> Result<()> {
    if pc.is_empty() {
        return Err(Error::Insufficient(format!("{name} cloud is empty")));
    }
    Ok(())
}

/// Mean distance from each point of `a` to its nearest point of `b`.
pub fn mnnd(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    non_empty(a, "first")?;
    let idx = NearestIndex::new(b.points())?;
    Ok(a.points().iter().map(|p| idx.distance(p)).sum::<f64>() / a.len() as f64)
}

/// Largest distance from a point of `a` to the nearest point of `b`.
pub fn directed_hausdorff(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    non_empty(a, "first")?;
    let idx = NearestIndex::new(b.points())?;
    Ok(a.points().iter().map(|p| idx.distance(p)).fold(0.0, f64::max))
}

/// Symmetric Hausdorff distance.
pub fn hausdorff(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

/// Fraction of `reference` points with a point of `cloud` within `radius`.
pub fn coverage(reference: &PointCloud, cloud: &PointCloud, radius: f64) -> Result<f64> {
    non_empty(reference, "reference")?;
    if cloud.is_empty() {
        return Ok(0.0);
    }
    let idx = NearestIndex::new(cloud.points())?;
    let hit = reference.points().iter().filter(|p| idx.distance(p) <= radius).count();
    Ok(hit as f64 / reference.len() as f64)
}

/// Trace simulation and preprocessing settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanSettings {
    pub controller: ControllerParams,
    pub noise_sigma: f64,
    pub preprocess: PreprocessParams,
}

impl Default for ScanSettings {
    fn default() -> Self {
        Self {
            controller: ControllerParams::default(),
            noise_sigma: DEFAULT_NOISE_SIGMA,
            preprocess: PreprocessParams::default(),
        }
    }
}

/// A simulated, preprocessed scan line and its network input.
#[derive(Debug, Clone)]
pub struct LineScan {
    pub path: ScanPath3D,
    pub trace: TactileTrace,
    pub window: SignalWindow,
}

pub fn scan_line(surface: &impl Surface, path: &ScanPath3D, scan: &ScanSettings, seed: u64) -> Result<LineScan> {
    let raw = simulate_scan(surface, path, &scan.controller, scan.noise_sigma, seed).stage("simulate")?;
    let trace = preprocess(&raw.trace, &scan.preprocess).stage("preprocess")?;
    let window = make_windows(&trace).stage("window")?.remove(0);
    Ok(LineScan {
        path: path.clone(),
        trace,
        window,
    })
}

/// Per-frame prediction on the window and per-sample prediction on the
/// preprocessed trace.
#[derive(Debug, Clone)]
pub struct ClassifiedScan {
    pub line: ClassifiedLine,
    pub window_labels: Vec<TraceLabel>,
}

fn frame_of(s: f64, w: &SignalWindow) -> usize {
    let span = w.end_s - w.start_s;
    if span <= 0.0 {
        return 0;
    }
    (((s - w.start_s) / span) * (WINDOW_LEN - 1) as f64)
        .round()
        .clamp(0.0, (WINDOW_LEN - 1) as f64) as usize
}

pub fn classify_scan(scan: &LineScan, params: &NetworkParams) -> Result<ClassifiedScan> {
    let probs = forward(&scan.window, params).stage("classify")?;
    let window_labels = segment(&probs);
    let bone = scan
        .trace
        .samples
        .iter()
        .map(|s| window_labels[frame_of(s.arc_s, &scan.window)].is_bone())
        .collect();
    let mut line = ClassifiedLine::new(scan.path.id, scan.trace.positions(), bone)?;
    line.profile = Some(scan.trace.dz());
    Ok(ClassifiedScan { line, window_labels })
}

/// Same line with the simulator's labels in place of predictions.
pub fn oracle_line(scan: &LineScan) -> Result<ClassifiedLine> {
    let mut line = ClassifiedLine::new(scan.path.id, scan.trace.positions(), scan.trace.bone_flags())?;
    line.profile = Some(scan.trace.dz());
    Ok(line)
}

fn window_truth(w: &SignalWindow) -> Result<Vec<TraceLabel>> {
    w.labels.iter().map(|&c| TraceLabel::from_class_id(c)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineMetrics {
    pub path_id: usize,
    /// Percent; zero when nothing was predicted as bone.
    pub accuracy: f64,
    /// mm; NaN when no section could be paired.
    pub centroid_shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierReport {
    pub lines: Vec<LineMetrics>,
}

impl ClassifierReport {
    pub fn mean_accuracy(&self) -> f64 {
        mean(self.lines.iter().map(|l| l.accuracy))
    }

    pub fn sd_accuracy(&self) -> f64 {
        sd(self.lines.iter().map(|l| l.accuracy))
    }

    /// Mean over lines with a defined shift.
    pub fn mean_shift(&self) -> f64 {
        mean(self.lines.iter().map(|l| l.centroid_shift).filter(|v| v.is_finite()))
    }

    pub fn undefined_shifts(&self) -> usize {
        self.lines.iter().filter(|l| !l.centroid_shift.is_finite()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("path_id,accuracy_pct,centroid_shift_mm\n");
        for l in &self.lines {
            let _ = writeln!(s, "{},{:.4},{:.4}", l.path_id, l.accuracy, l.centroid_shift);
        }
        s
    }
}

/// Accuracy and centroid shift per line, aggregated over lines.
pub fn evaluate_classifier(params: &NetworkParams, scans: &[LineScan]) -> Result<ClassifierReport> {
    let mut lines = Vec::with_capacity(scans.len());
    for scan in scans {
        let c = classify_scan(scan, params)?;
        let m = detection_metrics(&c.window_labels, &window_truth(&scan.window)?, scan.window.spacing())?;
        lines.push(LineMetrics {
            path_id: scan.path.id,
            accuracy: m.accuracy.unwrap_or(0.0),
            centroid_shift: m.centroid_shift,
        });
    }
    Ok(ClassifierReport { lines })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn sd(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = mean(v.clone());
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + (x - m).powi(2), n + 1));
    if n < 2 {
        0.0
    } else {
        (s / (n - 1) as f64).sqrt()
    }
}

/// Random rigid placement around the phantom centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementRange {
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub max_lift: f64,
}

impl Default for DisplacementRange {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            max_translation: 30.0,
            max_lift: 5.0,
        }
    }
}

impl DisplacementRange {
    pub fn none() -> Self {
        Self {
            max_rotation_deg: 0.0,
            max_translation: 0.0,
            max_lift: 0.0,
        }
    }

    pub fn sample(&self, center: Point2, rng: &mut impl Rng) -> Placement {
        let sym = |rng: &mut _, r: f64| if r > 0.0 { Rng::random_range(rng, -r..=r) } else { 0.0 };
        let angle = sym(rng, self.max_rotation_deg);
        let tx = sym(rng, self.max_translation);
        let ty = sym(rng, self.max_translation);
        let lift = if self.max_lift > 0.0 { rng.random_range(0.0..=self.max_lift) } else { 0.0 };
        Placement {
            pose: RigidTransform::translation(tx, ty).compose(&RigidTransform::rotation_about(angle, center)),
            lift,
        }
    }
}

/// Surface corners as measured by the robot, with isotropic noise.
pub fn measured_corners(placed: &PlacedPhantom, sigma: f64, rng: &mut impl Rng) -> Result<[Point3; 4]> {
    let model = placed.model();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::validation("corner_noise", e.to_string()))?;
    Ok(model.domain().corners().map(|c| {
        let p = placed.to_world(&Point3::new(c.x, c.y, model.height(c.x, c.y)));
        p + Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng))
    }))
}

/// All template lines mapped onto a placed phantom.
pub fn scan_template_lines(
    placed: &PlacedPhantom,
    template: &ScanPathTemplate,
    corners: &[Point3; 4],
    scan: &ScanSettings,
    seed: u64,
) -> Result<Vec<LineScan>> {
    let mapping = SurfaceMapping::from_corners(&template.corner_pixels, corners).stage("map")?;
    let mapped = map_template(template, &mapping, placed).stage("map")?;
    mapped.paths.iter().map(|p| scan_line(placed, p, scan, seed)).collect()
}

/// Settings for a set of labelled lines from several placements.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSetParams {
    pub spec: RibCageSpec,
    pub placements: usize,
    pub seed: u64,
    pub displacement: DisplacementRange,
    pub corner_noise: f64,
    pub scan: ScanSettings,
}

impl Default for LineSetParams {
    fn default() -> Self {
        Self {
            spec: RibCageSpec::default(),
            placements: 6,
            seed: 1,
            displacement: DisplacementRange::default(),
            corner_noise: 0.5,
            scan: ScanSettings::default(),
        }
    }
}

/// Template lines scanned on `placements` random placements of one phantom.
pub fn simulate_line_set(p: &LineSetParams) -> Result<Vec<LineScan>> {
    let model = PhantomModel::new(p.spec.clone()).stage("phantom")?;
    let template = ScanPathTemplate::for_phantom(&model).stage("template")?;
    let mut out = Vec::new();
    for k in 0..p.placements {
        let mut rng = path_rng(p.seed, k);
        let placement = p.displacement.sample(model.domain().center(), &mut rng);
        let placed = model.placed(placement);
        let corners = measured_corners(&placed, p.corner_noise, &mut rng)?;
        out.extend(scan_template_lines(&placed, &template, &corners, &p.scan, rng.next_u64())?);
    }
    Ok(out)
}

/// Straight intercostal paths along the middle gaps, from the sternum edge
/// to the rib ends on the target side, on the template surface.
pub fn intercostal_paths(model: &PhantomModel, first_id: usize) -> Result<Vec<ScanPath3D>> {
    let spec = model.spec();
    let side = if spec.target_offset_x < 0.0 { -1.0 } else { 1.0 };
    let theta = spec.rib_axis_angle.to_radians();
    let dir = (side * theta.sin(), theta.cos());
    let (x0, _) = model.rib_reach();
    let mut gaps = model.inter_rib_gap_midlines();
    if gaps.len() > 3 {
        let start = (gaps.len() - 3) / 2;
        gaps = gaps[start..start + 3].to_vec();
    }
    let dom = model.domain();
    gaps.iter()
        .enumerate()
        .map(|(k, &y)| {
            let a = (model.sternum_x() + side * x0, y);
            let b = (a.0 + spec.rib_length * dir.0, a.1 + spec.rib_length * dir.1);
            let verts = [Point3::new(a.0, a.1, 0.0), Point3::new(b.0, b.1, 0.0)];
            let wps: Vec<Point3> = sample_polyline(&verts, 1.0)
                .into_iter()
                .filter(|p| dom.contains(p.x, p.y))
                .map(|p| Point3::new(p.x, p.y, model.height(p.x, p.y)))
                .collect();
            ScanPath3D::new(first_id + k, PathKind::Target, wps, Vector3::z())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    Classifier,
    Simulator,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Classifier => "classifier",
            Self::Simulator => "simulator",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(Self::Classifier),
            "simulator" => Ok(Self::Simulator),
            _ => Err(Error::validation("labels", format!("unknown label source `{s}`"))),
        }
    }
}

/// Parallel line left out of the tactile cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropLine {
    None,
    /// Index among the parallel lines.
    Index(usize),
    /// A different seeded choice per trial.
    Random,
}

impl DropLine {
    pub fn as_string(self) -> String {
        match self {
            Self::None => "none".into(),
            Self::Index(i) => i.to_string(),
            Self::Random => "random".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "random" => Ok(Self::Random),
            _ => s
                .parse()
                .map(Self::Index)
                .map_err(|_| Error::validation("drop_line", format!("expected none, random or an index, got `{s}`"))),
        }
    }
}

/// Everything a trial needs; the key=value snapshot reproduces it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub id: String,
    pub trials: usize,
    pub seed: u64,
    pub phantom: RibCageSpec,
    pub displacement: DisplacementRange,
    pub corner_noise: f64,
    pub scan: ScanSettings,
    pub labels: LabelSource,
    pub cluster: ClusterParams,
    pub dense_step: f64,
    pub downsample_cell: f64,
    /// Template bone samples per mm² before downsampling.
    pub template_density: f64,
    pub cpd: CpdConfig,
    pub drop_line: DropLine,
    pub reconstruct: bool,
    pub sweep: SweepParams,
    pub centroid_spacing: f64,
    pub gt_spacing: f64,
    pub coverage_radius: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            id: "default".into(),
            trials: 10,
            seed: 2024,
            phantom: RibCageSpec::default(),
            displacement: DisplacementRange::default(),
            corner_noise: 0.5,
            scan: ScanSettings::default(),
            labels: LabelSource::Classifier,
            cluster: ClusterParams::default(),
            dense_step: 1.0,
            downsample_cell: 3.0,
            template_density: 1.0,
            cpd: CpdConfig::default(),
            drop_line: DropLine::None,
            reconstruct: true,
            sweep: SweepParams::default(),
            centroid_spacing: 0.5,
            gt_spacing: 0.5,
            coverage_radius: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn to_config(&self) -> KeyValues {
        let mut kv = self.phantom.to_config().with_prefix("phantom");
        let s = |kv: &mut KeyValues, k: &str, v: &dyn ToString| kv.set(format!("scenario.{k}"), v.to_string());
        s(&mut kv, "id", &self.id);
        s(&mut kv, "trials", &self.trials);
        s(&mut kv, "seed", &self.seed);
        s(&mut kv, "max_rotation_deg", &self.displacement.max_rotation_deg);
        s(&mut kv, "max_translation", &self.displacement.max_translation);
        s(&mut kv, "max_lift", &self.displacement.max_lift);
        s(&mut kv, "corner_noise", &self.corner_noise);
        s(&mut kv, "noise_sigma", &self.scan.noise_sigma);
        s(&mut kv, "speed", &self.scan.controller.speed);
        s(&mut kv, "desired_force", &self.scan.controller.desired_force);
        s(&mut kv, "sample_rate_hz", &self.scan.controller.sample_rate_hz);
        s(&mut kv, "resample_spacing", &self.scan.preprocess.spacing);
        s(&mut kv, "cutoff_wavelength", &self.scan.preprocess.cutoff_wavelength);
        s(&mut kv, "labels", &self.labels.as_str());
        s(&mut kv, "dbscan_eps", &self.cluster.eps);
        s(&mut kv, "dbscan_min_pts", &self.cluster.min_pts);
        s(&mut kv, "dense_step", &self.dense_step);
        s(&mut kv, "downsample_cell", &self.downsample_cell);
        s(&mut kv, "template_density", &self.template_density);
        s(&mut kv, "cpd_outlier_weight", &self.cpd.outlier_weight);
        s(&mut kv, "cpd_max_iterations", &self.cpd.max_iterations);
        s(&mut kv, "cpd_tolerance", &self.cpd.tolerance);
        s(&mut kv, "drop_line", &self.drop_line.as_string());
        s(&mut kv, "reconstruct", &self.reconstruct);
        s(&mut kv, "slice_spacing", &self.sweep.slice_spacing);
        s(&mut kv, "l_adj", &self.sweep.l_adj);
        s(&mut kv, "fan", &self.sweep.fan);
        s(&mut kv, "image_noise", &self.sweep.imaging.noise_sigma);
        s(&mut kv, "pixel_mm", &self.sweep.imaging.pixel_mm);
        s(&mut kv, "centroid_spacing", &self.centroid_spacing);
        s(&mut kv, "gt_spacing", &self.gt_spacing);
        s(&mut kv, "coverage_radius", &self.coverage_radius);
        kv
    }

    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        let mut c = Self {
            phantom: RibCageSpec::from_config(&kv.section("phantom"))?,
            ..Self::default()
        };
        let s = kv.section("scenario");
        if let Some(id) = s.get_str("id") {
            c.id = id.to_string();
        }
        s.apply("trials", &mut c.trials)?;
        s.apply("seed", &mut c.seed)?;
        s.apply("max_rotation_deg", &mut c.displacement.max_rotation_deg)?;
        s.apply("max_translation", &mut c.displacement.max_translation)?;
        s.apply("max_lift", &mut c.displacement.max_lift)?;
        s.apply("corner_noise", &mut c.corner_noise)?;
        s.apply("noise_sigma", &mut c.scan.noise_sigma)?;
        s.apply("speed", &mut c.scan.controller.speed)?;
        s.apply("desired_force", &mut c.scan.controller.desired_force)?;
        s.apply("sample_rate_hz", &mut c.scan.controller.sample_rate_hz)?;
        s.apply("resample_spacing", &mut c.scan.preprocess.spacing)?;
        s.apply("cutoff_wavelength", &mut c.scan.preprocess.cutoff_wavelength)?;
        if let Some(l) = s.get_str("labels") {
            c.labels = LabelSource::parse(l)?;
        }
        s.apply("dbscan_eps", &mut c.cluster.eps)?;
        s.apply("dbscan_min_pts", &mut c.cluster.min_pts)?;
        s.apply("dense_step", &mut c.dense_step)?;
        s.apply("downsample_cell", &mut c.downsample_cell)?;
        s.apply("template_density", &mut c.template_density)?;
        s.apply("cpd_outlier_weight", &mut c.cpd.outlier_weight)?;
        s.apply("cpd_max_iterations", &mut c.cpd.max_iterations)?;
        s.apply("cpd_tolerance", &mut c.cpd.tolerance)?;
        if let Some(d) = s.get_str("drop_line") {
            c.drop_line = DropLine::parse(d)?;
        }
        s.apply("reconstruct", &mut c.reconstruct)?;
        s.apply("slice_spacing", &mut c.sweep.slice_spacing)?;
        s.apply("l_adj", &mut c.sweep.l_adj)?;
        s.apply("fan", &mut c.sweep.fan)?;
        s.apply("image_noise", &mut c.sweep.imaging.noise_sigma)?;
        s.apply("pixel_mm", &mut c.sweep.imaging.pixel_mm)?;
        s.apply("centroid_spacing", &mut c.centroid_spacing)?;
        s.apply("gt_spacing", &mut c.gt_spacing)?;
        s.apply("coverage_radius", &mut c.coverage_radius)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.scan.controller.validate()?;
        self.cpd.validate()?;
        for (name, v) in [
            ("dense_step", self.dense_step),
            ("downsample_cell", self.downsample_cell),
            ("template_density", self.template_density),
            ("gt_spacing", self.gt_spacing),
            ("centroid_spacing", self.centroid_spacing),
        ] {
            if !(v > 0.0) {
                return Err(Error::validation(name, "must be > 0"));
            }
        }
        if self.trials == 0 {
            return Err(Error::validation("trials", "must be >= 1"));
        }
        Ok(())
    }
}

/// Template-side products shared by all trials.
#[derive(Debug, Clone)]
pub struct TemplateContext {
    pub model: PhantomModel,
    pub template: ScanPathTemplate,
    /// Full-resolution bone samples.
    pub bone: PointCloud,
    /// Downsampled bone samples.
    pub cloud: PointCloud,
    pub intercostal: Vec<ScanPath3D>,
    pub target_path: Option<ScanPath3D>,
}

impl TemplateContext {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let model = PhantomModel::new(cfg.phantom.clone()).stage("phantom")?;
        let template = ScanPathTemplate::for_phantom(&model).stage("template")?;
        let sample = sample_template_pc(&model, cfg.template_density).stage("template")?;
        let bone = sample.cloud;
        let cloud = downsample(&bone, cfg.downsample_cell).stage("template")?;
        let intercostal = intercostal_paths(&model, 200).stage("template")?;
        let target_path = if cfg.reconstruct && model.target().is_some() {
            let cp = CentroidParams {
                slice_spacing: cfg.centroid_spacing,
                imaging: cfg.sweep.imaging,
                seed: cfg.seed,
                ..CentroidParams::default()
            };
            let centroids = extract_centroids(&model, &cp).stage("centroids")?;
            Some(plan_path(&centroids, 300).stage("plan")?)
        } else {
            None
        };
        Ok(Self {
            model,
            template,
            bone,
            cloud,
            intercostal,
            target_path,
        })
    }

    /// Template bone restricted to the lateral band spanned by the given
    /// parallel lines, downsampled.
    pub fn scanned_cloud(&self, parallel_ids: &[usize], cell: f64) -> Result<PointCloud> {
        let dom = self.model.domain();
        let xs: Vec<f64> = self
            .template
            .lines
            .iter()
            .filter(|l| parallel_ids.contains(&l.id))
            .flat_map(|l| l.pixels.iter().map(|p| dom.x0 + p.x / crate::scanplan::TEMPLATE_PX_PER_MM))
            .collect();
        if xs.is_empty() {
            return Err(Error::Insufficient("no parallel line to bound the template".into()));
        }
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pts = self
            .bone
            .points()
            .iter()
            .filter(|p| p.x >= lo && p.x <= hi)
            .copied()
            .collect();
        downsample(&self.bone.with_points(pts)?, cell)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    pub rot_deg: f64,
    pub tx: f64,
    pub ty: f64,
    pub accuracy: f64,
    pub centroid_shift: f64,
    pub reg_dist: f64,
    pub reg_ang: f64,
    pub cpd_iterations: usize,
    pub path_mnnd: f64,
    pub path_hd: f64,
    pub recon_mnnd: Option<f64>,
    pub recon_hd: Option<f64>,
    pub coverage_fan: Option<f64>,
    pub coverage_no_fan: Option<f64>,
    pub fan_triggers: usize,
    pub runtime_s: f64,
}

/// Intermediate products of one trial.
#[derive(Debug, Clone)]
pub struct TrialArtifacts {
    pub placement: Placement,
    pub scans: Vec<LineScan>,
    pub lines: Vec<ClassifiedLine>,
    pub sternum_paths: Vec<ScanPath3D>,
    pub dense: PointCloud,
    pub tactile: PointCloud,
    /// Template-to-tactile fit.
    pub cpd: CpdResult,
    /// Tactile-to-template estimate.
    pub estimate: RigidTransform,
    pub transferred: Vec<ScanPath3D>,
    pub ground_truth: Vec<ScanPath3D>,
    pub target_path: Option<ScanPath3D>,
    pub recon: Option<PointCloud>,
    pub recon_no_fan: Option<PointCloud>,
}

fn path_cloud(p: &ScanPath3D) -> Result<PointCloud> {
    PointCloud::new(p.waypoints.clone(), crate::cloud::CloudKind::TactileSparse, "world")
}

/// Template path placed in the world through a template-from-world map:
/// xy through its inverse, z on the surface.
fn to_world_path(path: &ScanPath3D, world_to_template: &RigidTransform, surface: &impl Surface) -> Result<ScanPath3D> {
    let inv = world_to_template.inverse();
    let wps = path
        .waypoints
        .iter()
        .map(|p| {
            let q = inv.apply2(Point2::new(p.x, p.y));
            Point3::new(q.x, q.y, surface.height(q.x, q.y))
        })
        .collect();
    ScanPath3D::new(path.id, path.kind, wps, inv.rotate_vector(&path.approach_normal))
}

fn classify_all(scans: &[LineScan], labels: LabelSource, params: Option<&NetworkParams>) -> Result<Vec<ClassifiedLine>> {
    scans
        .iter()
        .map(|s| match (labels, params) {
            (LabelSource::Classifier, Some(p)) => Ok(classify_scan(s, p)?.line),
            (LabelSource::Classifier, None) => Err(Error::validation("labels", "classifier labels need a model")),
            (LabelSource::Simulator, _) => oracle_line(s),
        })
        .collect()
}

/// One displaced-phantom trial: scan, classify, cluster, register, transfer
/// and reconstruct.
pub fn run_trial(
    cfg: &ScenarioConfig,
    ctx: &TemplateContext,
    params: Option<&NetworkParams>,
    trial: usize,
) -> Result<(TrialRow, TrialArtifacts)> {
    let clock = Instant::now();
    let mut rng = path_rng(cfg.seed, trial);
    let placement = cfg.displacement.sample(ctx.model.domain().center(), &mut rng);
    let placed = ctx.model.placed(placement);
    let corners = measured_corners(&placed, cfg.corner_noise, &mut rng)?;
    let scan_seed = rng.next_u64();
    let drop_draw = rng.next_u64();

    let scans = scan_template_lines(&placed, &ctx.template, &corners, &cfg.scan, scan_seed)?;
    let mut parallel_scans: Vec<LineScan> = scans.iter().filter(|s| s.path.kind == PathKind::Parallel).cloned().collect();
    let drop = match cfg.drop_line {
        DropLine::None => None,
        DropLine::Index(d) => Some(d),
        DropLine::Random => Some((drop_draw % parallel_scans.len().max(1) as u64) as usize),
    };
    if let Some(d) = drop {
        if d >= parallel_scans.len() {
            return Err(Error::validation("drop_line", "index beyond the parallel lines"));
        }
        parallel_scans.remove(d);
    }
    let ortho_scans: Vec<&LineScan> = scans.iter().filter(|s| s.path.kind == PathKind::Orthogonal).collect();

    let parallel = classify_all(&parallel_scans, cfg.labels, params)?;
    let normal = SurfaceMapping::from_corners(&ctx.template.corner_pixels, &corners)?.plane.plane.normal();
    let sternum_paths = derive_sternum_paths(&parallel, cfg.cluster.eps, normal, 100).stage("sternum")?;
    let mut sternum_scans: Vec<LineScan> = ortho_scans.into_iter().cloned().collect();
    for p in &sternum_paths {
        sternum_scans.push(scan_line(&placed, p, &cfg.scan, scan_seed)?);
    }
    let sternum = classify_all(&sternum_scans, cfg.labels, params)?;

    let mut accs = Vec::new();
    let mut shifts = Vec::new();
    if let (LabelSource::Classifier, Some(p)) = (cfg.labels, params) {
        let all: Vec<LineScan> = parallel_scans.iter().chain(&sternum_scans).cloned().collect();
        let rep = evaluate_classifier(p, &all)?;
        accs.push(rep.mean_accuracy());
        shifts.push(rep.mean_shift());
    }

    let dir = |ls: &[ClassifiedLine]| -> Result<Vector3<f64>> {
        let pts: Vec<&[Point3]> = ls.iter().map(|l| l.points.as_slice()).collect();
        Ok(mean_direction(&pts)?.v_mean)
    };
    let mut clusters = build_clusters(&parallel, dir(&parallel).stage("cluster")?, cfg.cluster).stage("cluster")?;
    clusters.extend(build_clusters(&sternum, dir(&sternum).stage("cluster")?, cfg.cluster).stage("cluster")?);
    let dense = build_dense_pc(&clusters, cfg.dense_step).stage("dense")?.cloud;
    let tactile = downsample(&flatten_2d(&dense).stage("flatten")?, cfg.downsample_cell).stage("downsample")?;

    // the template, cut to the scanned band, moves onto the tactile data
    let ids: Vec<usize> = parallel_scans.iter().map(|s| s.path.id).collect();
    let model_cloud = ctx.scanned_cloud(&ids, cfg.downsample_cell).stage("register")?;
    let cpd = cpd_rigid(&model_cloud, &tactile, &cfg.cpd).stage("register")?;
    let est = cpd.transform.inverse();
    let gt = placement.pose.inverse();
    let err = registration_error(&est, &gt, pivot_of(&ctx.cloud));

    let mut transferred = Vec::new();
    let mut ground_truth = Vec::new();
    let (mut mn, mut hd) = (Vec::new(), Vec::new());
    for p in &ctx.intercostal {
        let t = to_world_path(p, &est, &placed).stage("transfer")?;
        let g = to_world_path(p, &gt, &placed).stage("transfer")?;
        let (tc, gc) = (path_cloud(&t)?, path_cloud(&g)?);
        mn.push(mnnd(&tc, &gc)?);
        hd.push(hausdorff(&tc, &gc)?);
        transferred.push(t);
        ground_truth.push(g);
    }

    let mut row = TrialRow {
        trial,
        rot_deg: placement.pose.angle_deg(),
        tx: placement.pose.translation_vec().x,
        ty: placement.pose.translation_vec().y,
        accuracy: accs.first().copied().unwrap_or(f64::NAN),
        centroid_shift: shifts.first().copied().unwrap_or(f64::NAN),
        reg_dist: err.dist,
        reg_ang: err.ang,
        cpd_iterations: cpd.iterations,
        path_mnnd: mean(mn.into_iter()),
        path_hd: mean(hd.into_iter()),
        recon_mnnd: None,
        recon_hd: None,
        coverage_fan: None,
        coverage_no_fan: None,
        fan_triggers: 0,
        runtime_s: 0.0,
    };

    let mut target_path = None;
    let (mut recon, mut recon_no_fan) = (None, None);
    if let Some(tp) = &ctx.target_path {
        let path = to_world_path(tp, &est, &placed).stage("transfer")?;
        let sweep_cfg = SweepParams {
            seed: scan_seed,
            fan: true,
            ..cfg.sweep
        };
        let sweep = sweep_path(&placed, &path, &sweep_cfg).stage("sweep")?;
        let target_gt = placed.target_gt_cloud(cfg.gt_spacing)?;
        let with_fan = reconstruct_target(&sweep, cfg.sweep.fan).stage("reconstruct")?;
        row.recon_mnnd = Some(mnnd(&with_fan, &target_gt)?);
        row.recon_hd = Some(hausdorff(&with_fan, &target_gt)?);
        row.coverage_fan = Some(coverage(&target_gt, &with_fan, cfg.coverage_radius)?);
        row.fan_triggers = sweep.trigger_count();
        let without = reconstruct_target(&sweep, false).ok();
        row.coverage_no_fan = Some(match &without {
            Some(w) => coverage(&target_gt, w, cfg.coverage_radius)?,
            None => 0.0,
        });
        target_path = Some(path);
        recon = Some(with_fan);
        recon_no_fan = without;
    }
    row.runtime_s = clock.elapsed().as_secs_f64();
    let mut lines = parallel;
    lines.extend(sternum);
    Ok((
        row,
        TrialArtifacts {
            placement,
            scans,
            lines,
            sternum_paths,
            dense,
            tactile,
            cpd,
            estimate: est,
            transferred,
            ground_truth,
            target_path,
            recon,
            recon_no_fan,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scenario: String,
    pub seed: u64,
    pub config: KeyValues,
    pub rows: Vec<TrialRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("na".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// Per-trial CSV; `with_runtime` adds the wall-clock column.
    pub fn to_csv(&self, with_runtime: bool) -> String {
        let mut s = String::from(
            "scenario,trial,rot_deg,tx_mm,ty_mm,accuracy_pct,centroid_shift_mm,reg_dist_mm,reg_ang_deg,\
             cpd_iters,path_mnnd_mm,path_hd_mm,recon_mnnd_mm,recon_hd_mm,coverage_fan,coverage_no_fan,fan_triggers",
        );
        s.push_str(if with_runtime { ",runtime_s\n" } else { "\n" });
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{},{},{},{},{}",
                self.scenario,
                r.trial,
                r.rot_deg,
                r.tx,
                r.ty,
                r.accuracy,
                r.centroid_shift,
                r.reg_dist,
                r.reg_ang,
                r.cpd_iterations,
                r.path_mnnd,
                r.path_hd,
                fmt_opt(r.recon_mnnd),
                fmt_opt(r.recon_hd),
                fmt_opt(r.coverage_fan),
                fmt_opt(r.coverage_no_fan),
                r.fan_triggers
            );
            if with_runtime {
                let _ = write!(s, ",{:.3}", r.runtime_s);
            }
            s.push('\n');
        }
        s
    }

    pub fn mean_of(&self, f: impl Fn(&TrialRow) -> f64) -> f64 {
        mean(self.rows.iter().map(f))
    }

    fn mean_opt(&self, f: impl Fn(&TrialRow) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| mean(v.into_iter()))
    }

    pub fn summary(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("scenario", &self.scenario);
        kv.set("seed", self.seed);
        kv.set("trials", self.rows.len());
        let put = |kv: &mut KeyValues, k: &str, f: &dyn Fn(&TrialRow) -> f64| {
            kv.set(format!("mean_{k}"), format!("{:.6}", mean(self.rows.iter().map(f))));
            kv.set(format!("sd_{k}"), format!("{:.6}", sd(self.rows.iter().map(f))));
        };
        put(&mut kv, "accuracy_pct", &|r| r.accuracy);
        put(&mut kv, "centroid_shift_mm", &|r| r.centroid_shift);
        put(&mut kv, "reg_dist_mm", &|r| r.reg_dist);
        put(&mut kv, "reg_ang_deg", &|r| r.reg_ang);
        put(&mut kv, "path_mnnd_mm", &|r| r.path_mnnd);
        put(&mut kv, "path_hd_mm", &|r| r.path_hd);
        kv.set("mean_recon_mnnd_mm", fmt_opt(self.mean_opt(|r| r.recon_mnnd)));
        kv.set("mean_recon_hd_mm", fmt_opt(self.mean_opt(|r| r.recon_hd)));
        kv.set("mean_coverage_fan", fmt_opt(self.mean_opt(|r| r.coverage_fan)));
        kv.set("mean_coverage_no_fan", fmt_opt(self.mean_opt(|r| r.coverage_no_fan)));
        kv.set("path_mnnd_direction", "transferred_to_ground_truth");
        kv.set("recon_mnnd_direction", "recon_to_ground_truth");
        kv.set("runtime_s", format!("{:.3}", self.rows.iter().map(|r| r.runtime_s).sum::<f64>()));
        kv
    }

    /// Writes `report.csv`, `summary.txt` and `config.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv(true))?;
        self.summary().save(dir.join("summary.txt"))?;
        self.config.save(dir.join("config.txt"))
    }
}

/// Runs all trials of a scenario.
pub fn run_experiment(cfg: &ScenarioConfig, params: Option<&NetworkParams>) -> Result<EvalReport> {
    cfg.validate()?;
    let ctx = TemplateContext::new(cfg)?;
    let mut rows = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let (row, _) = run_trial(cfg, &ctx, params, t)?;
        log::info!(
            "trial {t}: reg {:.3} mm / {:.3} deg, path mnnd {:.3} mm",
            row.reg_dist,
            row.reg_ang,
            row.path_mnnd
        );
        rows.push(row);
    }
    Ok(EvalReport {
        scenario: cfg.id.clone(),
        seed: cfg.seed,
        config: cfg.to_config(),
        rows,
    })
}
