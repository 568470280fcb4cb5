//! Readers for crash, tract and image inputs; grid table assembly and
//! GeoJSON export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::geometry::{Polygon, ProjectedPoint, Rect};
use super::grid::{CrashCategory, CrashRecord, GridCell};
use super::images::{CellVisual, ImageRecord, N_CATEGORIES};
use super::tracts::{CellSocio, TractRecord};
use crate::error::{invalid, Error, Result};
use crate::table::DataTable;

pub const OUTCOME_COLUMN: &str = "crashes";
pub const POPULATION_COLUMN: &str = "population";
pub const ENTROPY_COLUMN: &str = "entropy";

pub fn seg_column(k: usize) -> String {
    format!("seg_{k:02}")
}

#[derive(Debug, Deserialize)]
struct CrashRow {
    x: f64,
    y: f64,
    category: String,
    year: i32,
}

/// Reads `x, y, category, year` rows. Unparseable coordinates are kept as
/// NaN so that crash assignment tallies them as skipped.
pub fn read_crashes(path: &Path) -> Result<Vec<CrashRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize::<CrashRow>() {
        let row = rec?;
        out.push(CrashRecord {
            location: ProjectedPoint::new(row.x, row.y),
            category: row.category.parse()?,
            year: row.year,
        });
    }
    Ok(out)
}

pub fn read_images(path: &Path) -> Result<Vec<ImageRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let pos = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid!("{}: missing column `{name}`", path.display()))
    };
    let (pid, px, py, ph) = (pos("point_id")?, pos("x")?, pos("y")?, pos("heading")?);
    let seg: Vec<usize> = (0..N_CATEGORIES).map(|k| pos(&seg_column(k))).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64> {
            rec[j].trim().parse::<f64>().map_err(|_| {
                invalid!("{}: row {}: `{}` is not a number", path.display(), line + 1, &rec[j])
            })
        };
        let mut proportions = [0.0; N_CATEGORIES];
        for (k, &j) in seg.iter().enumerate() {
            proportions[k] = num(j)?;
        }
        let heading = num(ph)?;
        out.push(ImageRecord {
            point_id: rec[pid].to_string(),
            location: ProjectedPoint::new(num(px)?, num(py)?),
            heading: heading as u16,
            proportions,
        });
    }
    Ok(out)
}

fn ring_from_json(v: &Value) -> Result<Vec<ProjectedPoint>> {
    v.as_array()
        .ok_or_else(|| invalid!("ring is not an array"))?
        .iter()
        .map(|p| {
            let c = p.as_array().filter(|c| c.len() >= 2);
            match c.and_then(|c| Some((c[0].as_f64()?, c[1].as_f64()?))) {
                Some((x, y)) => Ok(ProjectedPoint::new(x, y)),
                None => Err(invalid!("bad coordinate {p}")),
            }
        })
        .collect()
}

fn polygon_from_json(v: &Value) -> Result<Polygon> {
    let rings = v.as_array().ok_or_else(|| invalid!("polygon is not an array"))?;
    let mut rings = rings.iter().map(ring_from_json);
    let exterior = rings.next().ok_or_else(|| invalid!("polygon without rings"))??;
    Ok(Polygon {
        exterior,
        holes: rings.collect::<Result<_>>()?,
    })
}

/// Polygon parts of a GeoJSON `Polygon` or `MultiPolygon` geometry.
pub fn polygons_from_geometry(geom: &Value) -> Result<Vec<Polygon>> {
    let coords = &geom["coordinates"];
    match geom["type"].as_str() {
        Some("Polygon") => Ok(vec![polygon_from_json(coords)?]),
        Some("MultiPolygon") => coords
            .as_array()
            .ok_or_else(|| invalid!("bad MultiPolygon"))?
            .iter()
            .map(polygon_from_json)
            .collect(),
        other => Err(invalid!("unsupported geometry type {other:?}")),
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads tract polygons. Every numeric property other than `population` is
/// taken as a percentage attribute.
pub fn read_tracts(path: &Path) -> Result<Vec<TractRecord>> {
    let doc = read_json(path)?;
    let features = doc["features"]
        .as_array()
        .ok_or_else(|| invalid!("{}: not a FeatureCollection", path.display()))?;
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let props = f["properties"].as_object().cloned().unwrap_or_default();
            let population = props
                .get(POPULATION_COLUMN)
                .and_then(Value::as_f64)
                .ok_or_else(|| invalid!("tract {i}: missing numeric `population`"))?;
            let id = match props.get("id").or_else(|| f.get("id")) {
                Some(Value::String(s)) => s.clone(),
                Some(v) if !v.is_null() => v.to_string(),
                _ => i.to_string(),
            };
            let mut attributes = BTreeMap::new();
            for (k, v) in &props {
                if k == POPULATION_COLUMN || k == "id" {
                    continue;
                }
                if let Some(x) = v.as_f64() {
                    if !(0.0..=100.0).contains(&x) {
                        return Err(invalid!("tract `{id}`: `{k}` = {x} outside [0, 100]"));
                    }
                    attributes.insert(k.clone(), x);
                }
            }
            Ok(TractRecord {
                id,
                polygons: polygons_from_geometry(&f["geometry"])?,
                population,
                attributes,
            })
        })
        .collect()
}

pub fn read_mask(path: &Path) -> Result<Vec<Polygon>> {
    let doc = read_json(path)?;
    let geoms: Vec<&Value> = match doc["type"].as_str() {
        Some("FeatureCollection") => doc["features"]
            .as_array()
            .map(|fs| fs.iter().map(|f| &f["geometry"]).collect())
            .unwrap_or_default(),
        Some("Feature") => vec![&doc["geometry"]],
        _ => vec![&doc],
    };
    let mut out = Vec::new();
    for g in geoms {
        out.extend(polygons_from_geometry(g)?);
    }
    Ok(out)
}

/// Join crash counts, reallocated socioeconomic values and visual features
/// into one table (one row per included cell, ascending id). Missing values
/// are NaN.
pub fn assemble_grid_table(
    cells: &[GridCell],
    socio: &[CellSocio],
    visual: &[CellVisual],
) -> Result<DataTable> {
    let ids: Vec<u64> = cells.iter().map(|c| c.cell_id).collect();
    let socio_by: BTreeMap<u64, &CellSocio> = socio.iter().map(|s| (s.cell_id, s)).collect();
    let vis_by: BTreeMap<u64, &CellVisual> = visual.iter().map(|v| (v.cell_id, v)).collect();
    let mut t = DataTable::new(ids.clone());
    t.push(OUTCOME_COLUMN, cells.iter().map(|c| c.crash_count as f64).collect())?;
    for cat in CrashCategory::ALL {
        t.push(
            cat.column(),
            cells
                .iter()
                .map(|c| c.subtype_counts.get(&cat).copied().unwrap_or(0) as f64)
                .collect(),
        )?;
    }
    let attr_names: Vec<String> = socio
        .first()
        .map(|s| s.values.keys().cloned().collect())
        .unwrap_or_default();
    if !socio.is_empty() {
        t.push(
            POPULATION_COLUMN,
            ids.iter()
                .map(|id| socio_by.get(id).map_or(f64::NAN, |s| s.population))
                .collect(),
        )?;
    }
    for name in &attr_names {
        t.push(
            name.clone(),
            ids.iter()
                .map(|id| {
                    socio_by
                        .get(id)
                        .and_then(|s| s.values.get(name).copied().flatten())
                        .unwrap_or(f64::NAN)
                })
                .collect(),
        )?;
    }
    if !visual.is_empty() {
        for k in 0..N_CATEGORIES {
            t.push(
                seg_column(k),
                ids.iter()
                    .map(|id| vis_by.get(id).and_then(|v| v.means).map_or(f64::NAN, |m| m[k]))
                    .collect(),
            )?;
        }
        t.push(
            ENTROPY_COLUMN,
            ids.iter()
                .map(|id| vis_by.get(id).and_then(|v| v.entropy).unwrap_or(f64::NAN))
                .collect(),
        )?;
    }
    Ok(t)
}

fn num_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

pub fn rect_geometry(r: &Rect) -> Value {
    let ring: Vec<[f64; 2]> = r.ring().iter().map(|p| [p.x, p.y]).collect();
    json!({ "type": "Polygon", "coordinates": [ring] })
}

/// FeatureCollection with one polygon per row of `table`, properties being
/// the table's columns. `bounds` maps cell id to its rectangle.
pub fn grid_geojson(table: &DataTable, bounds: &BTreeMap<u64, Rect>) -> Result<Value> {
    let features = table
        .ids
        .iter()
        .enumerate()
        .map(|(r, id)| {
            let rect = bounds
                .get(id)
                .ok_or_else(|| invalid!("cell {id} has no geometry"))?;
            let mut props = Map::new();
            props.insert("cell_id".into(), json!(id));
            for c in &table.columns {
                props.insert(c.name.clone(), num_or_null(c.values[r]));
            }
            Ok(json!({
                "type": "Feature",
                "geometry": rect_geometry(rect),
                "properties": props,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({ "type": "FeatureCollection", "features": features }))
}

/// Cell rectangles from a grid GeoJSON previously written by
/// [`grid_geojson`] (bounding box of each feature's polygon).
pub fn read_grid_bounds(path: &Path) -> Result<BTreeMap<u64, Rect>> {
    let doc = read_json(path)?;
    let features = doc["features"]
        .as_array()
        .ok_or_else(|| invalid!("{}: not a FeatureCollection", path.display()))?;
    features
        .iter()
        .map(|f| {
            let id = f["properties"]["cell_id"]
                .as_u64()
                .ok_or_else(|| invalid!("feature without integer cell_id"))?;
            let polys = polygons_from_geometry(&f["geometry"])?;
            let bb = polys
                .first()
                .ok_or_else(|| invalid!("cell {id}: empty geometry"))?
                .bbox();
            Ok((id, bb))
        })
        .collect()
}
