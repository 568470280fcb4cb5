//! Reallocation of tract-level socioeconomic percentages onto grid cells.
//!
//! Population inside a tract is taken to be uniformly spread over its area.
//! The share of tract `t` landing in cell `g` is
//! `w = population(t) * area(t ∩ g) / area(t)`, and each attribute in the
//! cell is the `w`-weighted mean over overlapping tracts. The cell's
//! population is `Σ w`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::geometry::Polygon;
use super::grid::GridSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TractRecord {
    pub id: String,
    /// One or more polygon parts.
    pub polygons: Vec<Polygon>,
    pub population: f64,
    /// Percentage attributes in `[0, 100]`.
    pub attributes: BTreeMap<String, f64>,
}

impl TractRecord {
    pub fn area(&self) -> f64 {
        self.polygons.iter().map(Polygon::area).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSocio {
    pub cell_id: u64,
    /// Allocated population, `Σ_t w_{t,g}`.
    pub population: f64,
    /// `None` when no population reaches the cell.
    pub values: BTreeMap<String, Option<f64>>,
}

impl CellSocio {
    pub fn is_missing(&self) -> bool {
        !(self.population > 0.0)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ArealDiagnostics {
    pub excluded_tracts: Vec<String>,
    pub missing_cells: Vec<u64>,
}

/// Population-weighted areal interpolation of tract attributes.
///
/// Returns one row per included grid cell, in ascending cell id order.
pub fn areal_weight_tracts(
    tracts: &[TractRecord],
    grid: &GridSpec,
) -> (Vec<CellSocio>, ArealDiagnostics) {
    let ids = grid.cell_ids();
    let slot: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let names: BTreeSet<&String> = tracts.iter().flat_map(|t| t.attributes.keys()).collect();

    let mut weight = vec![0.0; ids.len()];
    // per cell, per attribute: (Σ w·attr, Σ w over tracts carrying attr)
    let mut sums: Vec<BTreeMap<&str, (f64, f64)>> = vec![BTreeMap::new(); ids.len()];
    let mut diag = ArealDiagnostics::default();

    for tract in tracts {
        let area = tract.area();
        if !(area > 0.0) {
            log::warn!("tract `{}` has zero area; excluded", tract.id);
            diag.excluded_tracts.push(tract.id.clone());
            continue;
        }
        for poly in &tract.polygons {
            let bb = poly.bbox();
            let (c0, c1) = span(bb.min_x, bb.max_x, grid.origin.x, grid.cell_size, grid.n_cols);
            let (r0, r1) = span(bb.min_y, bb.max_y, grid.origin.y, grid.cell_size, grid.n_rows);
            for row in r0..r1 {
                for col in c0..c1 {
                    let id = (row * grid.n_cols + col) as u64;
                    let Some(&i) = slot.get(&id) else { continue };
                    let overlap = poly.intersection_area(&grid.bounds(col, row));
                    if overlap <= 0.0 {
                        continue;
                    }
                    let w = tract.population * overlap / area;
                    weight[i] += w;
                    for (name, &v) in &tract.attributes {
                        if v.is_finite() {
                            // running weighted mean; a lone contributor is reproduced exactly
                            let e = sums[i].entry(name.as_str()).or_insert((0.0, 0.0));
                            e.1 += w;
                            e.0 += (w / e.1) * (v - e.0);
                        }
                    }
                }
            }
        }
    }

    let rows = ids
        .iter()
        .enumerate()
        .map(|(i, &cell_id)| {
            let values = names
                .iter()
                .map(|name| {
                    let v = sums[i]
                        .get(name.as_str())
                        .filter(|(_, w)| *w > 0.0)
                        .map(|(m, _)| *m);
                    ((*name).clone(), v)
                })
                .collect();
            CellSocio {
                cell_id,
                population: weight[i],
                values,
            }
        })
        .collect::<Vec<_>>();
    diag.missing_cells = rows.iter().filter(|r| r.is_missing()).map(|r| r.cell_id).collect();
    (rows, diag)
}

fn span(lo: f64, hi: f64, origin: f64, size: f64, n: usize) -> (usize, usize) {
    let a = ((lo - origin) / size).floor().max(0.0);
    let b = ((hi - origin) / size).floor() + 1.0;
    let a = (a as usize).min(n);
    let b = (b.max(0.0) as usize).min(n);
    (a, b.max(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_pipeline::geometry::Rect;
    use crate::data_pipeline::grid::build_grid;

    fn tract(id: &str, r: Rect, pop: f64, poverty: f64) -> TractRecord {
        TractRecord {
            id: id.into(),
            polygons: vec![Polygon::from_rect(&r)],
            population: pop,
            attributes: [("poverty".to_string(), poverty)].into(),
        }
    }

    #[test]
    fn tract_inside_one_cell_is_identity() {
        let (spec, _) = build_grid(Rect::new(0.0, 0.0, 4000.0, 2000.0), 2000.0, None).unwrap();
        let (rows, diag) =
            areal_weight_tracts(&[tract("a", Rect::new(100.0, 100.0, 900.0, 900.0), 50.0, 10.0)], &spec);
        assert_eq!(rows[0].values["poverty"], Some(10.0));
        assert_eq!(rows[0].population, 50.0);
        assert_eq!(rows[1].values["poverty"], None);
        assert_eq!(diag.missing_cells, vec![1]);
    }

    #[test]
    fn two_half_inside_tracts() {
        // cell [0,2000)^2; tract A covers x in [-2000, 2000) (half inside),
        // tract B covers x in [0, 4000) (half inside).
        let (spec, _) = build_grid(Rect::new(-2000.0, 0.0, 4000.0, 2000.0), 2000.0, None).unwrap();
        let a = tract("a", Rect::new(-2000.0, 0.0, 2000.0, 2000.0), 100.0, 10.0);
        let b = tract("b", Rect::new(0.0, 0.0, 4000.0, 2000.0), 300.0, 20.0);
        let (rows, _) = areal_weight_tracts(&[a, b], &spec);
        let mid = rows.iter().find(|r| r.cell_id == 1).unwrap();
        assert_eq!(mid.population, 200.0);
        assert_eq!(mid.values["poverty"], Some(17.5));
    }

    #[test]
    fn zero_area_tract_excluded() {
        let (spec, _) = build_grid(Rect::new(0.0, 0.0, 2000.0, 2000.0), 2000.0, None).unwrap();
        let flat = tract("flat", Rect::new(10.0, 10.0, 10.0, 500.0), 10.0, 5.0);
        let (rows, diag) = areal_weight_tracts(&[flat], &spec);
        assert_eq!(diag.excluded_tracts, vec!["flat".to_string()]);
        assert!(rows[0].is_missing());
    }
}
