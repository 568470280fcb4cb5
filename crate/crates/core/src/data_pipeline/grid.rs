//! Uniform analysis grid and crash counting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::geometry::{Polygon, ProjectedPoint, Rect};
use crate::error::{invalid, Error, Result};

pub const DEFAULT_CELL_SIZE: f64 = 2000.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: ProjectedPoint,
    pub cell_size: f64,
    pub n_cols: usize,
    pub n_rows: usize,
    /// Upper corner of the extent; edge cells are truncated to it.
    pub limit: ProjectedPoint,
    /// Row-major inclusion flags, `None` when every cell is kept.
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    /// Row-major index in the full (unmasked) grid.
    pub cell_id: u64,
    pub bounds: Rect,
    pub crash_count: u64,
    pub subtype_counts: BTreeMap<CrashCategory, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashCategory {
    Angle,
    PedestrianBicycle,
    RearEnd,
    Fatality,
    SeriousInjury,
    Injury,
    Other,
}

impl CrashCategory {
    pub const ALL: [CrashCategory; 7] = [
        CrashCategory::Angle,
        CrashCategory::PedestrianBicycle,
        CrashCategory::RearEnd,
        CrashCategory::Fatality,
        CrashCategory::SeriousInjury,
        CrashCategory::Injury,
        CrashCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CrashCategory::Angle => "angle",
            CrashCategory::PedestrianBicycle => "pedestrian_bicycle",
            CrashCategory::RearEnd => "rear_end",
            CrashCategory::Fatality => "fatality",
            CrashCategory::SeriousInjury => "serious_injury",
            CrashCategory::Injury => "injury",
            CrashCategory::Other => "other",
        }
    }

    /// Column name used for this subtype's count in the grid table.
    pub fn column(self) -> String {
        format!("crashes_{}", self.as_str())
    }
}

impl fmt::Display for CrashCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CrashCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        Ok(match norm.as_str() {
            "angle" => CrashCategory::Angle,
            "pedestrianbicycle" | "pedbike" | "pedestrian" | "bicycle" => {
                CrashCategory::PedestrianBicycle
            }
            "rearend" => CrashCategory::RearEnd,
            "fatality" | "fatal" => CrashCategory::Fatality,
            "seriousinjury" => CrashCategory::SeriousInjury,
            "injury" => CrashCategory::Injury,
            "other" => CrashCategory::Other,
            _ => return Err(invalid!("unknown crash category `{s}`")),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrashRecord {
    pub location: ProjectedPoint,
    pub category: CrashCategory,
    pub year: i32,
}

impl GridSpec {
    pub fn full_len(&self) -> usize {
        self.n_cols * self.n_rows
    }

    pub fn is_included(&self, cell_id: u64) -> bool {
        match &self.mask {
            Some(m) => m.get(cell_id as usize).copied().unwrap_or(false),
            None => (cell_id as usize) < self.full_len(),
        }
    }

    fn col_lo(&self, col: usize) -> f64 {
        self.origin.x + col as f64 * self.cell_size
    }

    fn row_lo(&self, row: usize) -> f64 {
        self.origin.y + row as f64 * self.cell_size
    }

    /// Bounds of the cell at (col, row), truncated to the extent.
    pub fn bounds(&self, col: usize, row: usize) -> Rect {
        let max_x = if col + 1 == self.n_cols {
            self.limit.x
        } else {
            self.col_lo(col + 1)
        };
        let max_y = if row + 1 == self.n_rows {
            self.limit.y
        } else {
            self.row_lo(row + 1)
        };
        Rect::new(self.col_lo(col), self.row_lo(row), max_x, max_y)
    }

    pub fn bounds_of(&self, cell_id: u64) -> Rect {
        let id = cell_id as usize;
        self.bounds(id % self.n_cols, id / self.n_cols)
    }

    /// Cell id containing `p` under the half-open convention, ignoring the mask.
    pub fn locate_unmasked(&self, p: ProjectedPoint) -> Option<u64> {
        if !p.is_finite()
            || p.x < self.origin.x
            || p.y < self.origin.y
            || p.x >= self.limit.x
            || p.y >= self.limit.y
        {
            return None;
        }
        let col = index_along(p.x, self.origin.x, self.cell_size, self.n_cols, |c| {
            self.col_lo(c)
        });
        let row = index_along(p.y, self.origin.y, self.cell_size, self.n_rows, |r| {
            self.row_lo(r)
        });
        Some((row * self.n_cols + col) as u64)
    }

    /// Cell id containing `p`, `None` when outside the extent or masked out.
    pub fn locate(&self, p: ProjectedPoint) -> Option<u64> {
        self.locate_unmasked(p).filter(|&id| self.is_included(id))
    }

    /// Included cell ids in ascending order.
    pub fn cell_ids(&self) -> Vec<u64> {
        (0..self.full_len() as u64)
            .filter(|&id| self.is_included(id))
            .collect()
    }
}

// floor division, then nudged so the answer agrees exactly with the cell
// boundaries computed by `lo`.
fn index_along(v: f64, origin: f64, size: f64, n: usize, lo: impl Fn(usize) -> f64) -> usize {
    let mut i = (((v - origin) / size).floor().max(0.0) as usize).min(n - 1);
    while i > 0 && v < lo(i) {
        i -= 1;
    }
    while i + 1 < n && v >= lo(i + 1) {
        i += 1;
    }
    i
}

/// Tile `extent` with square cells of side `cell_size`, anchored at its lower
/// corner. Partial cells along the upper edges are kept and truncated. When a
/// mask is given, cells whose centroid falls outside it are dropped.
pub fn build_grid(
    extent: Rect,
    cell_size: f64,
    mask: Option<&[Polygon]>,
) -> Result<(GridSpec, Vec<GridCell>)> {
    if !(cell_size > 0.0) || !cell_size.is_finite() {
        return Err(invalid!("cell size must be positive, got {cell_size}"));
    }
    let finite = [extent.min_x, extent.min_y, extent.max_x, extent.max_y]
        .iter()
        .all(|v| v.is_finite());
    if !finite || !(extent.width() > 0.0) || !(extent.height() > 0.0) {
        return Err(invalid!(
            "degenerate extent [{}, {}] x [{}, {}]",
            extent.min_x,
            extent.max_x,
            extent.min_y,
            extent.max_y
        ));
    }
    let n_cols = (extent.width() / cell_size).ceil() as usize;
    let n_rows = (extent.height() / cell_size).ceil() as usize;
    let mut spec = GridSpec {
        origin: ProjectedPoint::new(extent.min_x, extent.min_y),
        cell_size,
        n_cols,
        n_rows,
        limit: ProjectedPoint::new(extent.max_x, extent.max_y),
        mask: None,
    };
    if let Some(polys) = mask {
        let flags = (0..spec.full_len() as u64)
            .map(|id| {
                let c = spec.bounds_of(id).centroid();
                polys.iter().any(|p| p.contains(c))
            })
            .collect();
        spec.mask = Some(flags);
    }
    let cells = spec
        .cell_ids()
        .into_iter()
        .map(|id| GridCell {
            cell_id: id,
            bounds: spec.bounds_of(id),
            crash_count: 0,
            subtype_counts: CrashCategory::ALL.iter().map(|&c| (c, 0)).collect(),
        })
        .collect();
    Ok((spec, cells))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignmentDiagnostics {
    pub assigned: u64,
    /// Valid records falling outside every included cell.
    pub outside: u64,
    /// Records skipped for non-finite coordinates.
    pub skipped: u64,
}

/// Count crashes per cell. `cells` must come from [`build_grid`] on `grid`;
/// their counts are overwritten.
pub fn assign_crashes(
    crashes: &[CrashRecord],
    grid: &GridSpec,
    cells: &mut [GridCell],
) -> AssignmentDiagnostics {
    let slot: BTreeMap<u64, usize> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| (c.cell_id, i))
        .collect();
    for c in cells.iter_mut() {
        c.crash_count = 0;
        c.subtype_counts = CrashCategory::ALL.iter().map(|&k| (k, 0)).collect();
    }
    let mut diag = AssignmentDiagnostics::default();
    for rec in crashes {
        if !rec.location.is_finite() {
            diag.skipped += 1;
            continue;
        }
        match grid.locate(rec.location).and_then(|id| slot.get(&id)) {
            Some(&i) => {
                let cell = &mut cells[i];
                cell.crash_count += 1;
                *cell.subtype_counts.entry(rec.category).or_insert(0) += 1;
                diag.assigned += 1;
            }
            None => diag.outside += 1,
        }
    }
    if diag.skipped > 0 {
        log::warn!("skipped {} crash records with non-finite coordinates", diag.skipped);
    }
    diag
}
