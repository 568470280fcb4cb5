//! Bundled toy inputs: a 6 x 5 grid of 2 km cells with crash points, six
//! census tracts and street-image segmentation rows, all drawn from a fixed
//! seed. `data/toy/` holds the committed copy.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde_json::json;

use crate::data_pipeline::grid::CrashCategory;
use crate::data_pipeline::images::N_CATEGORIES;
use crate::data_pipeline::io::seg_column;
use crate::error::{Error, Result};
use crate::rng;

pub const TOY_SEED: u64 = 2024;
pub const N_COLS: usize = 6;
pub const N_ROWS: usize = 5;
pub const CELL: f64 = 2000.0;
const POINTS_PER_CELL: usize = 3;
const HEADINGS: [u16; 4] = [0, 90, 180, 270];
/// Segmentation indices with cell-level structure.
const ROAD: usize = 0;
const BUILDING: usize = 2;
const VEGETATION: usize = 8;
const SKY: usize = 10;

const CATEGORY_WEIGHTS: [(CrashCategory, f64); 7] = [
    (CrashCategory::Angle, 0.25),
    (CrashCategory::RearEnd, 0.20),
    (CrashCategory::PedestrianBicycle, 0.08),
    (CrashCategory::Injury, 0.30),
    (CrashCategory::SeriousInjury, 0.06),
    (CrashCategory::Fatality, 0.02),
    (CrashCategory::Other, 0.09),
];

struct Latent {
    urban: f64,
    green: f64,
}

fn normal(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

fn write(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn latents() -> Vec<Latent> {
    let mut r = rng::stream(TOY_SEED, 0);
    (0..N_COLS * N_ROWS)
        .map(|_| {
            let urban = normal(&mut r);
            let green = -0.5 * urban + 0.87 * normal(&mut r);
            Latent { urban, green }
        })
        .collect()
}

fn cell_origin(id: usize) -> (f64, f64) {
    ((id % N_COLS) as f64 * CELL, (id / N_COLS) as f64 * CELL)
}

fn category(u: f64) -> CrashCategory {
    let mut acc = 0.0;
    for (c, w) in CATEGORY_WEIGHTS {
        acc += w;
        if u < acc {
            return c;
        }
    }
    CrashCategory::Other
}

fn crashes_csv(cells: &[Latent]) -> String {
    let mut r = rng::stream(TOY_SEED, 1);
    let mut s = String::from("x,y,category,year\n");
    for (id, c) in cells.iter().enumerate() {
        let rate = (2.6 + 0.35 * c.urban - 0.3 * c.green + 0.1 * normal(&mut r)).exp();
        let count = Poisson::new(rate).expect("positive rate").sample(&mut r) as usize;
        let (x0, y0) = cell_origin(id);
        for _ in 0..count {
            let x = x0 + 1.0 + r.random::<f64>() * (CELL - 2.0);
            let y = y0 + 1.0 + r.random::<f64>() * (CELL - 2.0);
            let cat = category(r.random());
            let year = r.random_range(2018..=2022);
            let _ = writeln!(s, "{x:.1},{y:.1},{cat},{year}");
        }
    }
    s
}

fn images_csv(cells: &[Latent]) -> String {
    let mut r = rng::stream(TOY_SEED, 2);
    let mut s = String::from("point_id,x,y,heading");
    for k in 0..N_CATEGORIES {
        s.push(',');
        s.push_str(&seg_column(k));
    }
    s.push('\n');
    for (id, c) in cells.iter().enumerate() {
        let (x0, y0) = cell_origin(id);
        for p in 0..POINTS_PER_CELL {
            let x = x0 + 100.0 + r.random::<f64>() * (CELL - 200.0);
            let y = y0 + 100.0 + r.random::<f64>() * (CELL - 200.0);
            for h in HEADINGS {
                let mut w = [-0.5; N_CATEGORIES];
                w[ROAD] = 1.5 + 0.3 * c.urban;
                w[BUILDING] = 0.8 + 0.6 * c.urban;
                w[VEGETATION] = 1.0 + 0.7 * c.green;
                w[SKY] = 1.0 - 0.3 * c.urban;
                let e: Vec<f64> = w.iter().map(|m| (m + 0.4 * normal(&mut r)).exp()).collect();
                let total: f64 = e.iter().sum();
                let classified = 0.9 + 0.08 * r.random::<f64>();
                let _ = write!(s, "c{id:02}p{p},{x:.1},{y:.1},{h}");
                for v in e {
                    // floor keeps the row sum at or below one
                    let q = (v / total * classified * 1e4).floor() / 1e4;
                    let _ = write!(s, ",{q:.4}");
                }
                s.push('\n');
            }
        }
    }
    s
}

fn tracts_geojson() -> serde_json::Value {
    let xs = [0.0, 4500.0, 8000.0, N_COLS as f64 * CELL];
    let ys = [0.0, 5500.0, N_ROWS as f64 * CELL];
    let mut r = rng::stream(TOY_SEED, 3);
    let mut features = Vec::new();
    for j in 0..ys.len() - 1 {
        for i in 0..xs.len() - 1 {
            let (x0, x1, y0, y1) = (xs[i], xs[i + 1], ys[j], ys[j + 1]);
            let pct = |r: &mut rand_chacha::ChaCha8Rng, mean: f64, sd: f64| {
                ((mean + sd * normal(r)).clamp(0.0, 100.0) * 10.0).round() / 10.0
            };
            let population = (1500.0 + 4000.0 * r.random::<f64>()).round();
            features.push(json!({
                "type": "Feature",
                "properties": {
                    "id": format!("T{}", j * (xs.len() - 1) + i + 1),
                    "population": population,
                    "pct_poverty": pct(&mut r, 15.0, 6.0),
                    "pct_minority": pct(&mut r, 35.0, 12.0),
                    "pct_no_vehicle": pct(&mut r, 8.0, 3.0),
                    "pct_elderly": pct(&mut r, 18.0, 5.0),
                },
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]],
                },
            }));
        }
    }
    json!({ "type": "FeatureCollection", "features": features })
}

/// Writes `crashes.csv`, `images.csv` and `tracts.geojson` into `dir`.
pub fn write_toy_inputs(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cells = latents();
    write(&dir.join("crashes.csv"), crashes_csv(&cells))?;
    write(&dir.join("images.csv"), images_csv(&cells))?;
    write(
        &dir.join("tracts.geojson"),
        serde_json::to_string_pretty(&tracts_geojson())? + "\n",
    )?;
    Ok(())
}

/// Extent covered by the toy grid, `[min_x, min_y, max_x, max_y]`.
pub fn toy_extent() -> [f64; 4] {
    [0.0, 0.0, N_COLS as f64 * CELL, N_ROWS as f64 * CELL]
}
