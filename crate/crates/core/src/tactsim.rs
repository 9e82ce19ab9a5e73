//! Quasi-static indenter sweep simulation and displacement preprocessing.

use std::fmt::Write as _;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::phantom::Surface;
use crate::scanplan::ScanPath3D;

pub const WINDOW_LEN: usize = 400;
pub const DEFAULT_CUTOFF_WAVELENGTH: f64 = 25.0;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerParams {
    /// N/m along the probe axis.
    pub stiffness_axial: f64,
    /// N/m orthogonal to the probe axis.
    pub stiffness_lateral: f64,
    /// N.
    pub desired_force: f64,
    /// mm/s.
    pub speed: f64,
    /// Tracking samples per second.
    pub sample_rate_hz: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            stiffness_axial: 1.0,
            stiffness_lateral: 500.0,
            desired_force: 3.0,
            speed: 4.86,
            sample_rate_hz: 20.0,
        }
    }
}

impl ControllerParams {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("stiffness_axial", self.stiffness_axial),
            ("stiffness_lateral", self.stiffness_lateral),
            ("desired_force", self.desired_force),
            ("speed", self.speed),
            ("sample_rate_hz", self.sample_rate_hz),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        Ok(())
    }

    /// Arc length between tracking samples.
    pub fn sample_spacing(&self) -> f64 {
        self.speed / self.sample_rate_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TraceLabel {
    Bone,
    Gap,
    Entrance,
    Exit,
    Unknown,
}

impl TraceLabel {
    pub fn class_id(self) -> Option<u8> {
        match self {
            TraceLabel::Bone => Some(0),
            TraceLabel::Gap => Some(1),
            TraceLabel::Entrance => Some(2),
            TraceLabel::Exit => Some(3),
            TraceLabel::Unknown => None,
        }
    }

    pub fn from_class_id(id: u8) -> Result<Self> {
        Ok(match id {
            0 => TraceLabel::Bone,
            1 => TraceLabel::Gap,
            2 => TraceLabel::Entrance,
            3 => TraceLabel::Exit,
            _ => return Err(Error::format("label", format!("class id {id} out of range"))),
        })
    }

    /// Entrance and exit frames sit on bone.
    pub fn is_bone(self) -> bool {
        matches!(self, TraceLabel::Bone | TraceLabel::Entrance | TraceLabel::Exit)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TraceLabel::Bone => "bone",
            TraceLabel::Gap => "gap",
            TraceLabel::Entrance => "entrance",
            TraceLabel::Exit => "exit",
            TraceLabel::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "bone" => TraceLabel::Bone,
            "gap" => TraceLabel::Gap,
            "entrance" => TraceLabel::Entrance,
            "exit" => TraceLabel::Exit,
            "unknown" => TraceLabel::Unknown,
            _ => return Err(Error::format("trace", format!("unknown label {s:?}"))),
        })
    }
}

/// Bone/gap flags to labels with entrance (first bone sample after gap) and
/// exit (last bone sample before gap) marked.
pub fn label_transitions(bone: &[bool]) -> Vec<TraceLabel> {
    let n = bone.len();
    (0..n)
        .map(|i| {
            if !bone[i] {
                TraceLabel::Gap
            } else if i > 0 && !bone[i - 1] {
                TraceLabel::Entrance
            } else if i + 1 < n && !bone[i + 1] {
                TraceLabel::Exit
            } else {
                TraceLabel::Bone
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub arc_s: f64,
    pub pos: Point3,
    pub z_raw: f64,
    /// Tip displacement from the commanded path; filtered in place by
    /// [`preprocess`].
    pub dz: f64,
    pub force: f64,
    pub label: TraceLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TactileTrace {
    pub path_id: usize,
    pub noise_seed: u64,
    pub samples: Vec<TraceSample>,
}

impl TactileTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn extent(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.arc_s - a.arc_s,
            _ => 0.0,
        }
    }

    pub fn dz(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.dz).collect()
    }

    pub fn bone_flags(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.label.is_bone()).collect()
    }

    pub fn labels(&self) -> Vec<TraceLabel> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.samples.iter().map(|s| s.pos).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedScan {
    pub trace: TactileTrace,
    pub warnings: Vec<String>,
}

/// RNG stream dedicated to one scan line.
pub fn path_rng(seed: u64, path_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_id as u64);
    rng
}

/// Sweeps the indenter along the path. At each tracking sample the tip
/// settles where the tissue spring balances the desired force:
/// `z = height - F / k + noise`.
pub fn simulate_scan(
    surface: &impl Surface,
    path: &ScanPath3D,
    ctrl: &ControllerParams,
    noise_sigma: f64,
    seed: u64,
) -> Result<SimulatedScan> {
    ctrl.validate()?;
    if !(noise_sigma >= 0.0) {
        return Err(Error::validation("noise_sigma", "must be >= 0"));
    }
    if path.waypoints.len() < 2 {
        return Err(Error::validation("waypoints", "path needs at least 2 waypoints"));
    }
    let step = ctrl.sample_spacing();
    let mut rng = path_rng(seed, path.id);
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::validation("noise_sigma", e.to_string()))?;
    let mut warnings = Vec::new();

    let mut cum = vec![0.0];
    for w in path.waypoints.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    let count = (total / step).floor() as usize + 1;
    let mut samples = Vec::with_capacity(count);
    let mut bone = Vec::with_capacity(count);
    let mut outside = 0usize;
    let mut seg = 0;
    for i in 0..count {
        let s = i as f64 * step;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let a = path.waypoints[seg];
        let cmd = a + (path.waypoints[seg + 1] - a) * t;
        if !surface.contains(cmd.x, cmd.y) {
            outside += 1;
            if !samples.is_empty() {
                break;
            }
            continue;
        }
        let k = surface.stiffness(cmd.x, cmd.y);
        if !(k > 0.0) {
            return Err(Error::Contact(format!(
                "non-positive stiffness {k} at ({:.3}, {:.3})",
                cmd.x, cmd.y
            )));
        }
        let eps = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let z = surface.height(cmd.x, cmd.y) - ctrl.desired_force / k + eps;
        bone.push(surface.is_bone(cmd.x, cmd.y));
        samples.push(TraceSample {
            arc_s: s,
            pos: Point3::new(cmd.x, cmd.y, z),
            z_raw: z,
            dz: z - cmd.z,
            force: ctrl.desired_force,
            label: TraceLabel::Unknown,
        });
    }
    if outside > 0 {
        let msg = format!("path {}: scan truncated at the domain boundary", path.id);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    if samples.len() < 2 {
        return Err(Error::Insufficient(format!(
            "path {} has fewer than 2 samples inside the domain",
            path.id
        )));
    }
    for (s, l) in samples.iter_mut().zip(label_transitions(&bone)) {
        s.label = l;
    }
    Ok(SimulatedScan {
        trace: TactileTrace {
            path_id: path.id,
            noise_seed: seed,
            samples,
        },
        warnings,
    })
}

/// Linear interpolation of `values` given at increasing `xs` onto `x`,
/// with the index of the nearest source sample.
fn interp_at(xs: &[f64], values: &[f64], x: f64, hint: &mut usize) -> (f64, usize) {
    let n = xs.len();
    while *hint + 2 < n && xs[*hint + 1] < x {
        *hint += 1;
    }
    let i = *hint;
    let (x0, x1) = (xs[i], xs[i + 1]);
    let t = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
    let nearest = if t <= 0.5 { i } else { i + 1 };
    (values[i] + (values[i + 1] - values[i]) * t, nearest)
}

/// Linear resampling of every numeric field onto the arc positions `grid`;
/// labels from the nearest source sample with transitions re-derived.
fn resample_grid(trace: &TactileTrace, grid: &[f64]) -> TactileTrace {
    let xs: Vec<f64> = trace.samples.iter().map(|s| s.arc_s).collect();
    let cols: [Vec<f64>; 6] = [
        trace.samples.iter().map(|s| s.pos.x).collect(),
        trace.samples.iter().map(|s| s.pos.y).collect(),
        trace.samples.iter().map(|s| s.pos.z).collect(),
        trace.samples.iter().map(|s| s.z_raw).collect(),
        trace.samples.iter().map(|s| s.dz).collect(),
        trace.samples.iter().map(|s| s.force).collect(),
    ];
    let mut out = Vec::with_capacity(grid.len());
    let mut bone = Vec::with_capacity(grid.len());
    let mut hint = 0;
    for &s in grid {
        let h0 = hint;
        let mut v = [0.0; 6];
        let mut near = 0;
        for (c, col) in cols.iter().enumerate() {
            let mut h = h0;
            (v[c], near) = interp_at(&xs, col, s, &mut h);
            hint = h;
        }
        let label = trace.samples[near].label;
        bone.push(label.is_bone());
        out.push(TraceSample {
            arc_s: s,
            pos: Point3::new(v[0], v[1], v[2]),
            z_raw: v[3],
            dz: v[4],
            force: v[5],
            label,
        });
    }
    for (s, l) in out.iter_mut().zip(label_transitions(&bone)) {
        if s.label != TraceLabel::Unknown {
            s.label = l;
        }
    }
    TactileTrace {
        path_id: trace.path_id,
        noise_seed: trace.noise_seed,
        samples: out,
    }
}

/// Resamples onto `count` uniformly spaced arc positions between the first
/// and last sample.
fn resample_to(trace: &TactileTrace, count: usize) -> TactileTrace {
    let s0 = trace.samples[0].arc_s;
    let extent = trace.extent();
    let grid: Vec<f64> = (0..count)
        .map(|i| {
            if count == 1 {
                s0
            } else {
                s0 + extent * i as f64 / (count - 1) as f64
            }
        })
        .collect();
    resample_grid(trace, &grid)
}

/// Uniform resampling along arc length; `floor(extent / spacing) + 1`
/// samples starting at the first original sample.
pub fn resample_trace(trace: &TactileTrace, spacing: f64) -> Result<TactileTrace> {
    if !(spacing > 0.0) {
        return Err(Error::validation("spacing", "must be > 0"));
    }
    if trace.len() < 2 {
        return Err(Error::Insufficient("trace needs at least 2 samples".into()));
    }
    if trace.samples.windows(2).any(|w| !(w[1].arc_s > w[0].arc_s)) {
        return Err(Error::validation("arc_s", "must be strictly increasing"));
    }
    let extent = trace.extent();
    if spacing > extent {
        return Err(Error::validation("spacing", "larger than the trace extent"));
    }
    let count = (extent / spacing + 1e-9).floor() as usize + 1;
    let s0 = trace.samples[0].arc_s;
    let grid: Vec<f64> = (0..count).map(|i| s0 + i as f64 * spacing).collect();
    Ok(resample_grid(trace, &grid))
}

/// Second-order section in transposed direct form II.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    /// `a[0]` is 1.
    pub a: [f64; 3],
}

impl Biquad {
    /// Butterworth high-pass by bilinear transform with pre-warping.
    pub fn butterworth_highpass(cutoff: f64, sample_rate: f64) -> Self {
        let k = (PI * cutoff / sample_rate).tan();
        let q = std::f64::consts::SQRT_2;
        let norm = 1.0 + q * k + k * k;
        let b0 = 1.0 / norm;
        Self {
            b: [b0, -2.0 * b0, b0],
            a: [1.0, 2.0 * (k * k - 1.0) / norm, (1.0 - q * k + k * k) / norm],
        }
    }

    /// Filter states that make a constant input of 1 a steady state.
    fn steady_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let y = (b0 + b1 + b2) / (1.0 + a1 + a2);
        let z2 = b2 - a2 * y;
        let z1 = y - b0;
        debug_assert!((z1 - (b1 - a1 * y + z2)).abs() < 1e-9);
        [z1, z2]
    }

    fn run(&self, x: &[f64], mut z: [f64; 2]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        x.iter()
            .map(|&xi| {
                let y = b0 * xi + z[0];
                z[0] = b1 * xi - a1 * y + z[1];
                z[1] = b2 * xi - a2 * y;
                y
            })
            .collect()
    }

    /// Forward-backward filtering with odd extension at both ends.
    pub fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        let pad = pad.min(n.saturating_sub(1));
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let zi = self.steady_state();
        let f = self.run(&ext, [zi[0] * ext[0], zi[1] * ext[0]]);
        let mut r: Vec<f64> = f.into_iter().rev().collect();
        let r0 = r[0];
        r = self.run(&r, [zi[0] * r0, zi[1] * r0]);
        r.reverse();
        r[pad..pad + n].to_vec()
    }
}

/// Single-pass cutoff factor giving -3 dB at the nominal cutoff after the
/// forward-backward pass of a 2nd-order Butterworth section.
pub fn filtfilt_cutoff_factor() -> f64 {
    (std::f64::consts::SQRT_2 - 1.0).powf(0.25)
}

/// Zero-phase high-pass removing wavelengths longer than `cutoff_wavelength`.
pub fn highpass(z: &[f64], sample_spacing: f64, cutoff_wavelength: f64) -> Result<Vec<f64>> {
    if !(sample_spacing > 0.0) {
        return Err(Error::validation("sample_spacing", "must be > 0"));
    }
    if !(cutoff_wavelength > 2.0 * sample_spacing) {
        return Err(Error::validation(
            "cutoff_wavelength",
            "must exceed twice the sample spacing",
        ));
    }
    let cycle = cutoff_wavelength / sample_spacing;
    let need = (3.0 * cycle).ceil() as usize;
    if z.len() < need {
        return Err(Error::Insufficient(format!(
            "signal has {} samples; high-pass needs at least {need}",
            z.len()
        )));
    }
    let fc = filtfilt_cutoff_factor() / cutoff_wavelength;
    let biquad = Biquad::butterworth_highpass(fc, 1.0 / sample_spacing);
    Ok(biquad.filtfilt(z, need))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessParams {
    /// mm between resampled points.
    pub spacing: f64,
    pub cutoff_wavelength: f64,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            spacing: 0.5,
            cutoff_wavelength: DEFAULT_CUTOFF_WAVELENGTH,
        }
    }
}

/// Uniform resampling followed by high-pass filtering of `dz`.
pub fn preprocess(trace: &TactileTrace, params: &PreprocessParams) -> Result<TactileTrace> {
    let mut r = resample_trace(trace, params.spacing)?;
    let f = highpass(&r.dz(), params.spacing, params.cutoff_wavelength)?;
    for (s, v) in r.samples.iter_mut().zip(f) {
        s.dz = v;
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalWindow {
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
    pub path_id: usize,
    pub start_s: f64,
    pub end_s: f64,
}

impl SignalWindow {
    pub fn new(values: Vec<f64>, labels: Vec<u8>, path_id: usize, start_s: f64, end_s: f64) -> Result<Self> {
        if values.len() != WINDOW_LEN || labels.len() != WINDOW_LEN {
            return Err(Error::validation("values", "window length must be 400"));
        }
        if labels.iter().any(|&l| l > 3) {
            return Err(Error::validation("labels", "class ids must be in 0..=3"));
        }
        Ok(Self {
            values,
            labels,
            path_id,
            start_s,
            end_s,
        })
    }

    /// Arc length between frames.
    pub fn spacing(&self) -> f64 {
        (self.end_s - self.start_s) / (WINDOW_LEN - 1) as f64
    }
}

/// One zero-mean window of 400 frames per trace.
pub fn make_windows(trace: &TactileTrace) -> Result<Vec<SignalWindow>> {
    if trace.len() < 16 {
        return Err(Error::Insufficient(format!(
            "trace has {} samples; windows need at least 16",
            trace.len()
        )));
    }
    let r = if trace.len() == WINDOW_LEN {
        trace.clone()
    } else {
        resample_to(trace, WINDOW_LEN)
    };
    let mut values = r.dz();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    for v in &mut values {
        *v -= mean;
    }
    let labels = r
        .samples
        .iter()
        .map(|s| s.label.class_id().unwrap_or(1))
        .collect();
    Ok(vec![SignalWindow::new(
        values,
        labels,
        trace.path_id,
        r.samples[0].arc_s,
        r.samples[WINDOW_LEN - 1].arc_s,
    )?])
}

/// Timestamps (ms) of refined maxima and minima of a periodic signal.
/// Extremes are taken between hysteresis crossings of the mean.
fn extremes(x: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let h = 0.25 * sd;
    let refine = |i: usize| -> f64 {
        if i == 0 || i + 1 >= n {
            return t[i];
        }
        let (ym, y0, yp) = (x[i - 1], x[i], x[i + 1]);
        let den = ym - 2.0 * y0 + yp;
        if den == 0.0 {
            return t[i];
        }
        let d = (0.5 * (ym - yp) / den).clamp(-0.5, 0.5);
        if d >= 0.0 {
            t[i] + d * (t[i + 1] - t[i])
        } else {
            t[i] + d * (t[i] - t[i - 1])
        }
    };
    let mut peaks = Vec::new();
    let mut troughs = Vec::new();
    // +1 above, -1 below, 0 before the first crossing
    let mut state = 0i8;
    let mut best = 0usize;
    for i in 0..n {
        let v = x[i] - mean;
        if v > h && state != 1 {
            if state == -1 {
                troughs.push(refine(best));
            }
            state = 1;
            best = i;
        } else if v < -h && state != -1 {
            if state == 1 {
                peaks.push(refine(best));
            }
            state = -1;
            best = i;
        } else if (state == 1 && x[i] > x[best]) || (state == -1 && x[i] < x[best]) {
            best = i;
        }
    }
    // the first episode may be cut by the signal start; drop it
    (peaks.into_iter().skip(1).collect(), troughs.into_iter().skip(1).collect())
}

/// Delay of `sig_b` relative to `sig_a` (ms): median difference between
/// each extreme of `a` and the nearest extreme of the same kind in `b`.
pub fn estimate_temporal_offset(sig_a: &[f64], t_a: &[f64], sig_b: &[f64], t_b: &[f64]) -> Result<f64> {
    if sig_a.len() != t_a.len() || sig_b.len() != t_b.len() {
        return Err(Error::validation("timestamps", "length differs from signal"));
    }
    if sig_a.len() < 8 || sig_b.len() < 8 {
        return Err(Error::Insufficient("signals are too short".into()));
    }
    let (pa, ta) = extremes(sig_a, t_a);
    let (pb, tb) = extremes(sig_b, t_b);
    if pa.len() < 2 || ta.len() < 2 || pb.len() < 2 || tb.len() < 2 {
        return Err(Error::Insufficient("no periodic peaks detected".into()));
    }
    let mut diffs = Vec::new();
    for (xa, xb) in [(&pa, &pb), (&ta, &tb)] {
        for &a in xa.iter() {
            let nearest = xb
                .iter()
                .copied()
                .min_by(|p, q| (p - a).abs().total_cmp(&(q - a).abs()))
                .unwrap();
            diffs.push(nearest - a);
        }
    }
    diffs.sort_by(f64::total_cmp);
    let m = diffs.len();
    Ok(if m % 2 == 1 {
        diffs[m / 2]
    } else {
        0.5 * (diffs[m / 2 - 1] + diffs[m / 2])
    })
}

pub fn traces_to_csv(traces: &[TactileTrace]) -> String {
    let mut s = String::from("path_id,seq,arc_mm,x_mm,y_mm,z_mm,dz_mm,force_n,label\n");
    for t in traces {
        for (i, p) in t.samples.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                t.path_id,
                i,
                p.arc_s,
                p.pos.x,
                p.pos.y,
                p.pos.z,
                p.dz,
                p.force,
                p.label.as_str()
            );
        }
    }
    s
}

pub fn traces_from_csv(text: &str) -> Result<Vec<TactileTrace>> {
    let mut out: Vec<TactileTrace> = Vec::new();
    for (i, row) in text.lines().enumerate() {
        let row = row.trim();
        if row.is_empty() || (i == 0 && row.starts_with("path_id")) {
            continue;
        }
        let f: Vec<&str> = row.split(',').map(str::trim).collect();
        if f.len() != 9 {
            return Err(Error::format("trace", format!("row {}: expected 9 fields", i + 1)));
        }
        let bad = || Error::format("trace", format!("row {}: bad value", i + 1));
        let id: usize = f[0].parse().map_err(|_| bad())?;
        let v: Vec<f64> = f[2..8]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let sample = TraceSample {
            arc_s: v[0],
            pos: Point3::new(v[1], v[2], v[3]),
            z_raw: v[3],
            dz: v[4],
            force: v[5],
            label: TraceLabel::parse(f[8])?,
        };
        match out.last_mut() {
            Some(t) if t.path_id == id => t.samples.push(sample),
            _ => out.push(TactileTrace {
                path_id: id,
                noise_seed: 0,
                samples: vec![sample],
            }),
        }
    }
    Ok(out)
}

const TWIN_MAGIC: &[u8; 4] = b"TWIN";
const TWIN_VERSION: u16 = 1;

pub fn write_windows(mut w: impl Write, windows: &[SignalWindow]) -> Result<()> {
    w.write_all(TWIN_MAGIC)?;
    w.write_all(&TWIN_VERSION.to_le_bytes())?;
    for win in windows {
        for v in &win.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&win.labels)?;
    }
    Ok(())
}

/// Reads windows until end of input. Span metadata is not stored in the
/// container and comes back as zeros.
pub fn read_windows(mut r: impl Read) -> Result<Vec<SignalWindow>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 6 || &bytes[..4] != TWIN_MAGIC {
        return Err(Error::format("TWIN", "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TWIN_VERSION {
        return Err(Error::format("TWIN", format!("unsupported version {version}")));
    }
    let rec = WINDOW_LEN * 9;
    let body = &bytes[6..];
    if body.len() % rec != 0 {
        return Err(Error::format("TWIN", "truncated window record"));
    }
    body.chunks(rec)
        .enumerate()
        .map(|(k, c)| {
            let values = c[..WINDOW_LEN * 8]
                .chunks(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let labels = c[WINDOW_LEN * 8..].to_vec();
            SignalWindow::new(values, labels, k, 0.0, 0.0)
        })
        .collect()
}

pub fn save_windows(path: impl AsRef<Path>, windows: &[SignalWindow]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_windows(f, windows)
}

pub fn load_windows(path: impl AsRef<Path>) -> Result<Vec<SignalWindow>> {
    read_windows(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{PhantomModel, RibCageSpec};
    use crate::scanplan::PathKind;
    use nalgebra::Vector3;

    fn straight(id: usize, a: Point3, b: Point3) -> ScanPath3D {
        ScanPath3D::new(id, PathKind::Parallel, vec![a, b], Vector3::z()).unwrap()
    }

    fn flat_model() -> PhantomModel {
        PhantomModel::new(RibCageSpec {
            undulation_amplitude: 0.0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn gap_only_depth() {
        let m = flat_model();
        let y = m.inter_rib_gap_midlines()[0];
        let x = m.sternum_x() + 60.0;
        let p = straight(0, Point3::new(x - 20.0, y, 7.0), Point3::new(x + 20.0, y, 7.0));
        let t = simulate_scan(&m, &p, &ControllerParams::default(), 0.0, 1).unwrap().trace;
        for s in &t.samples {
            assert!((s.z_raw - (7.0 - 3.0)).abs() < 1e-12);
            assert_eq!(s.label, TraceLabel::Gap);
        }
    }

    #[test]
    fn single_entrance_on_step() {
        let m = flat_model();
        let x = m.sternum_x() + 60.0;
        let y0 = m.inter_rib_gap_midlines()[0];
        let y1 = m.rib_centers_y()[1];
        let p = straight(0, Point3::new(x, y0, 7.0), Point3::new(x, y1, 7.0));
        let t = simulate_scan(&m, &p, &ControllerParams::default(), 0.0, 1).unwrap().trace;
        let entrances = t.samples.iter().filter(|s| s.label == TraceLabel::Entrance).count();
        assert_eq!(entrances, 1);
        let first = t.samples[0].z_raw;
        let last = t.samples.last().unwrap().z_raw;
        assert!((last - first - 2.7).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_trace() {
        let m = PhantomModel::new(Default::default()).unwrap();
        let x = m.sternum_x() + 40.0;
        let p = straight(4, Point3::new(x, 5.0, 7.0), Point3::new(x, 200.0, 7.0));
        let c = ControllerParams::default();
        let a = simulate_scan(&m, &p, &c, 0.1, 9).unwrap().trace;
        let b = simulate_scan(&m, &p, &c, 0.1, 9).unwrap().trace;
        assert_eq!(a, b);
    }

    #[test]
    fn transitions_from_flags() {
        use TraceLabel::*;
        let l = label_transitions(&[false, true, true, true, false, true, true]);
        assert_eq!(l, vec![Gap, Entrance, Bone, Exit, Gap, Entrance, Bone]);
    }

    #[test]
    fn constant_is_removed() {
        let z = vec![3.25; 600];
        let out = highpass(&z, 0.5, 25.0).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn short_signal_rejected() {
        assert!(matches!(highpass(&[0.0; 100], 0.5, 25.0), Err(Error::Insufficient(_))));
    }

    #[test]
    fn window_mean_is_zero() {
        let m = PhantomModel::new(Default::default()).unwrap();
        let x = m.sternum_x() + 40.0;
        let p = straight(1, Point3::new(x, 5.0, 7.0), Point3::new(x, 220.0, 7.0));
        let t = simulate_scan(&m, &p, &ControllerParams::default(), 0.1, 3).unwrap().trace;
        let t = preprocess(&t, &PreprocessParams::default()).unwrap();
        let w = make_windows(&t).unwrap();
        assert_eq!(w.len(), 1);
        let mean: f64 = w[0].values.iter().sum::<f64>() / 400.0;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn twin_round_trip() {
        let w = SignalWindow::new(
            (0..400).map(|i| (i as f64 * 0.37).sin()).collect(),
            (0..400).map(|i| (i % 4) as u8).collect(),
            0,
            0.0,
            0.0,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_windows(&mut buf, &[w.clone(), w.clone()]).unwrap();
        let back = read_windows(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].values, w.values);
        assert_eq!(back[1].labels, w.labels);
    }

    #[test]
    fn offset_of_identical_signals() {
        let t: Vec<f64> = (0..1000).map(|i| i as f64 * 10.0).collect();
        let a: Vec<f64> = t.iter().map(|&ti| (2.0 * PI * ti / 700.0).sin()).collect();
        assert_eq!(estimate_temporal_offset(&a, &t, &a, &t).unwrap(), 0.0);
    }

    #[test]
    fn flat_signal_has_no_peaks() {
        let t: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(estimate_temporal_offset(&[1.0; 100], &t, &[1.0; 100], &t).is_err());
    }
}
