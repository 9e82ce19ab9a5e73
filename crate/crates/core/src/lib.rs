//! Tactile mapping of subcutaneous rib structures for intercostal scan-path
//! planning, simulated end to end on parametric phantoms.

pub mod classifier;
pub mod cloud;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod pathtransfer;
pub mod phantom;
pub mod registration;
pub mod scanplan;
pub mod tactile_pc;
pub mod tactsim;

pub use cloud::{CloudKind, PointCloud};
pub use error::{Error, Result};
pub use geometry::{Point2, Point3, RigidTransform};
