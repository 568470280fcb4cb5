//! Grid construction, crash counting, tract reallocation and image feature
//! aggregation.

pub mod geometry;
pub mod grid;
pub mod images;
pub mod io;
pub mod tracts;

pub use geometry::{Polygon, ProjectedPoint, Rect};
pub use grid::{assign_crashes, build_grid, AssignmentDiagnostics, CrashCategory, CrashRecord, GridCell, GridSpec};
pub use images::{aggregate_images, visual_entropy, CellVisual, ImageRecord, N_CATEGORIES};
pub use tracts::{areal_weight_tracts, CellSocio, TractRecord};
