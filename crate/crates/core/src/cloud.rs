//! Point clouds in millimetres and their CSV / sidecar representation.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Provenance of a point cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CloudKind {
    TemplateUs,
    TactileSparse,
    TactileDense,
    TargetGt,
    TargetRecon,
}

impl CloudKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CloudKind::TemplateUs => "template_us",
            CloudKind::TactileSparse => "tactile_sparse",
            CloudKind::TactileDense => "tactile_dense",
            CloudKind::TargetGt => "target_gt",
            CloudKind::TargetRecon => "target_recon",
        }
    }
}

impl FromStr for CloudKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "template_us" => CloudKind::TemplateUs,
            "tactile_sparse" => CloudKind::TactileSparse,
            "tactile_dense" => CloudKind::TactileDense,
            "target_gt" => CloudKind::TargetGt,
            "target_recon" => CloudKind::TargetRecon,
            other => return Err(Error::validation("kind", format!("unknown cloud kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    kind: CloudKind,
    pub frame_id: String,
}

impl PointCloud {
    /// Fails if any coordinate is NaN or infinite.
    pub fn new(points: Vec<Point3>, kind: CloudKind, frame_id: impl Into<String>) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(Error::validation(
                "points",
                format!("point {i} has a non-finite coordinate"),
            ));
        }
        Ok(Self {
            points,
            kind,
            frame_id: frame_id.into(),
        })
    }

    pub fn empty(kind: CloudKind, frame_id: impl Into<String>) -> Self {
        Self {
            points: Vec::new(),
            kind,
            frame_id: frame_id.into(),
        }
    }

    pub fn kind(&self) -> CloudKind {
        self.kind
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same kind and frame, new coordinates.
    pub fn with_points(&self, points: Vec<Point3>) -> Result<Self> {
        PointCloud::new(points, self.kind, self.frame_id.clone())
    }

    pub fn is_flat(&self) -> bool {
        self.points.iter().all(|p| p.z == 0.0)
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(nalgebra::Vector3::zeros(), |a, p| a + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(32 * (self.points.len() + 1));
        out.push_str("x_mm,y_mm,z_mm\n");
        for p in &self.points {
            let _ = writeln!(out, "{:.6},{:.6},{:.6}", p.x, p.y, p.z);
        }
        out
    }

    pub fn from_csv(text: &str, kind: CloudKind, frame_id: impl Into<String>) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("x_mm,y_mm,z_mm") => {}
            other => {
                return Err(Error::format(
                    "point cloud csv",
                    format!("unexpected header {other:?}"),
                ))
            }
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format("point cloud csv", format!("row {}: {e}", i + 1)))?;
            if vals.len() != 3 {
                return Err(Error::format(
                    "point cloud csv",
                    format!("row {} has {} columns", i + 1, vals.len()),
                ));
            }
            points.push(Point3::new(vals[0], vals[1], vals[2]));
        }
        PointCloud::new(points, kind, frame_id)
    }

    pub fn metadata(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("kind", self.kind.as_str());
        kv.set("frame_id", &self.frame_id);
        kv.set("points", self.points.len());
        kv
    }

    /// Writes `<path>` as CSV and `<path>.meta` as the key=value sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv())?;
        self.metadata().save(sidecar_path(path))?;
        Ok(())
    }

    /// Reads a CSV cloud; kind and frame come from the sidecar when present.
    pub fn load(path: impl AsRef<Path>, default_kind: CloudKind) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let meta_path = sidecar_path(path);
        let (kind, frame) = if meta_path.exists() {
            let kv = KeyValues::load(&meta_path)?;
            let kind = match kv.get_str("kind") {
                Some(k) => k.parse()?,
                None => default_kind,
            };
            (kind, kv.get_str("frame_id").unwrap_or("").to_string())
        } else {
            (default_kind, String::new())
        };
        PointCloud::from_csv(&text, kind, frame)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}
