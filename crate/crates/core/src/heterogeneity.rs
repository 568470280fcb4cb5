//! Effect heterogeneity: quartile subgroups of CATEs, semi-elasticities,
//! per-subtype forests and CATE maps.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::causal_forest::{run_forest, CateEstimate, ForestParams, ForestRun};
use crate::data_pipeline::io::rect_geometry;
use crate::data_pipeline::Rect;
use crate::dml::DmlEstimate;
use crate::error::{invalid, Error, Result};
use crate::learners::LearnerSpec;
use crate::stats;

pub const MIN_SUBGROUP_CATES: usize = 8;
pub const DENSITY_POINTS: usize = 256;
/// Density grid reaches this many bandwidths past the data.
const DENSITY_REACH: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Gaussian kernel density with Silverman's rule-of-thumb bandwidth.
/// `None` when the bandwidth is zero.
pub fn kde(values: &[f64], points: usize) -> Option<Density> {
    let n = values.len();
    if n < 2 || points < 2 {
        return None;
    }
    let sd = stats::sample_sd(values);
    let iqr = stats::quantile(values, 0.75) - stats::quantile(values, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (n as f64).powf(-0.2);
    if !(h > 0.0) {
        return None;
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - DENSITY_REACH * h;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + DENSITY_REACH * h;
    let step = (hi - lo) / (points - 1) as f64;
    let norm = 1.0 / (n as f64 * h * (2.0 * PI).sqrt());
    let x: Vec<f64> = (0..points).map(|k| lo + step * k as f64).collect();
    let y = x
        .iter()
        .map(|g| {
            norm * values
                .iter()
                .map(|v| {
                    let u = (g - v) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Some(Density { bandwidth: h, x, y })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgroup {
    pub label: String,
    /// Covariate range `(lower, upper]`; Q1 is closed below at the minimum.
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
    /// Mean member CATE.
    pub ate: f64,
    /// `sd / sqrt(n)`; NaN with fewer than 2 members.
    pub se: f64,
    /// Fewer than 2 members.
    pub flagged: bool,
    pub density: Option<Density>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub covariate: String,
    /// 25th, 50th and 75th percentiles (type 7).
    pub cut_points: [f64; 3],
    pub groups: Vec<Subgroup>,
}

/// Quartile index of `v` given cut points: `<= q25` is 0, and so on.
pub fn quartile_of(v: f64, cuts: &[f64; 3]) -> usize {
    cuts.iter().take_while(|&&c| v > c).count()
}

/// Split defined CATEs into covariate quartiles.
pub fn quartile_subgroups(cates: &[CateEstimate], covariate: &[f64], name: &str) -> Result<SubgroupReport> {
    if cates.len() != covariate.len() {
        return Err(Error::DimensionMismatch {
            expected: cates.len(),
            got: covariate.len(),
        });
    }
    let rows: Vec<(f64, f64)> = cates
        .iter()
        .zip(covariate)
        .filter(|(c, v)| c.defined && v.is_finite())
        .map(|(c, v)| (*v, c.tau))
        .collect();
    if rows.len() < MIN_SUBGROUP_CATES {
        return Err(invalid!(
            "subgroups need at least {MIN_SUBGROUP_CATES} defined CATEs, got {}",
            rows.len()
        ));
    }
    let mut cov: Vec<f64> = rows.iter().map(|r| r.0).collect();
    cov.sort_by(f64::total_cmp);
    let cuts = [
        stats::quantile_sorted(&cov, 0.25),
        stats::quantile_sorted(&cov, 0.5),
        stats::quantile_sorted(&cov, 0.75),
    ];
    let mut members: [Vec<f64>; 4] = Default::default();
    for (v, tau) in &rows {
        members[quartile_of(*v, &cuts)].push(*tau);
    }
    let bounds = [cov[0], cuts[0], cuts[1], cuts[2], cov[cov.len() - 1]];
    let groups = members
        .iter()
        .enumerate()
        .map(|(q, taus)| {
            let flagged = taus.len() < 2;
            Subgroup {
                label: format!("Q{}", q + 1),
                lower: bounds[q],
                upper: bounds[q + 1],
                n: taus.len(),
                ate: stats::mean(taus),
                se: if flagged {
                    f64::NAN
                } else {
                    stats::sample_sd(taus) / (taus.len() as f64).sqrt()
                },
                flagged,
                density: if flagged { None } else { kde(taus, DENSITY_POINTS) },
            }
        })
        .collect();
    Ok(SubgroupReport {
        covariate: name.to_string(),
        cut_points: cuts,
        groups,
    })
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

impl SubgroupReport {
    /// One `summary` row per quartile followed by its `density` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["covariate", "group", "record", "lower", "upper", "n", "ate", "se", "flagged", "x", "density"])?;
        for g in &self.groups {
            w.write_record([
                self.covariate.clone(),
                g.label.clone(),
                "summary".into(),
                num(g.lower),
                num(g.upper),
                g.n.to_string(),
                num(g.ate),
                num(g.se),
                g.flagged.to_string(),
                String::new(),
                String::new(),
            ])?;
            if let Some(d) = &g.density {
                for (x, y) in d.x.iter().zip(&d.y) {
                    w.write_record([
                        self.covariate.clone(),
                        g.label.clone(),
                        "density".into(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        x.to_string(),
                        y.to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// `round(100 · ate / y_q1)`, half away from zero. `None` unless `y_q1 > 0`.
pub fn delta_percent(ate: f64, y_q1: f64) -> Option<i64> {
    (y_q1 > 0.0 && ate.is_finite()).then(|| (100.0 * ate / y_q1).round() as i64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiElasticityRow {
    pub outcome: String,
    pub ate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub y_mean: f64,
    /// Mean outcome where the raw treatment is at or below its 25th percentile.
    pub y_q1: f64,
    pub treatment_q1_cut: f64,
    pub delta_pct: Option<i64>,
}

/// Semi-elasticity of `outcome` with respect to a one-SD treatment increase.
/// `t_raw` is the treatment on its original scale.
pub fn semi_elasticity(outcome: &str, ate: &DmlEstimate, y: &[f64], t_raw: &[f64]) -> Result<SemiElasticityRow> {
    if y.len() != t_raw.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: t_raw.len(),
        });
    }
    if y.is_empty() {
        return Err(invalid!("semi-elasticity needs data"));
    }
    let cut = stats::quantile(t_raw, 0.25);
    let low: Vec<f64> = y.iter().zip(t_raw).filter(|(_, t)| **t <= cut).map(|(v, _)| *v).collect();
    let y_q1 = stats::mean(&low);
    let delta_pct = delta_percent(ate.theta, y_q1);
    if delta_pct.is_none() {
        log::warn!("{outcome}: baseline mean {y_q1} leaves the semi-elasticity undefined");
    }
    Ok(SemiElasticityRow {
        outcome: outcome.to_string(),
        ate: ate.theta,
        se: ate.se,
        ci_low: ate.ci_low,
        ci_high: ate.ci_high,
        p_value: ate.p_value,
        y_mean: stats::mean(y),
        y_q1,
        treatment_q1_cut: cut,
        delta_pct,
    })
}

pub fn write_semi_elasticity_csv(path: &Path, rows: &[SemiElasticityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "outcome", "ate", "se", "ci_low", "ci_high", "p_value", "y_mean", "y_q1", "treatment_q1_cut", "delta_pct",
    ])?;
    for r in rows {
        w.write_record([
            r.outcome.clone(),
            num(r.ate),
            num(r.se),
            num(r.ci_low),
            num(r.ci_high),
            num(r.p_value),
            num(r.y_mean),
            num(r.y_q1),
            num(r.treatment_q1_cut),
            r.delta_pct.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SubtypeResult {
    pub outcome: String,
    pub run: Option<ForestRun>,
    pub semi: Option<SemiElasticityRow>,
    pub error: Option<String>,
}

/// One forest per outcome, all sharing covariates, treatment and seed.
/// Failures are recorded per outcome.
#[allow(clippy::too_many_arguments)]
pub fn per_subtype_forests(
    x: ArrayView2<'_, f64>,
    t: &[f64],
    t_raw: &[f64],
    outcomes: &[(String, Vec<f64>)],
    params: &ForestParams,
    centering: &LearnerSpec,
    k: usize,
) -> Vec<SubtypeResult> {
    outcomes
        .par_iter()
        .map(|(name, y)| {
            let attempt = run_forest(x, y, t, params, centering, k)
                .and_then(|run| semi_elasticity(name, &run.ate, y, t_raw).map(|s| (run, s)));
            match attempt {
                Ok((run, semi)) => SubtypeResult {
                    outcome: name.clone(),
                    run: Some(run),
                    semi: Some(semi),
                    error: None,
                },
                Err(e) => {
                    log::warn!("subtype {name}: {e}");
                    SubtypeResult {
                        outcome: name.clone(),
                        run: None,
                        semi: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect()
}

fn opt(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

/// GeoJSON feature collection with one feature per CATE, ordered by cell id.
pub fn export_cate_map(ids: &[u64], cates: &[CateEstimate], bounds: &BTreeMap<u64, Rect>) -> Result<Value> {
    if ids.len() != cates.len() {
        return Err(Error::DimensionMismatch {
            expected: ids.len(),
            got: cates.len(),
        });
    }
    let mut rows: Vec<(u64, &CateEstimate)> = ids.iter().copied().zip(cates).collect();
    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(invalid!("cell {} appears twice in the CATE set", w[0].0));
    }
    let features = rows
        .iter()
        .map(|(id, c)| {
            let rect = bounds
                .get(id)
                .ok_or_else(|| invalid!("cell {id} has a CATE but is not in the grid"))?;
            Ok(json!({
                "type": "Feature",
                "geometry": rect_geometry(rect),
                "properties": {
                    "cell_id": id,
                    "tau": if c.defined { opt(c.tau) } else { Value::Null },
                    "variance": opt(c.variance),
                    "ci_low": opt(c.ci_low),
                    "ci_high": opt(c.ci_high),
                    "defined": c.defined,
                },
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({ "type": "FeatureCollection", "features": features }))
}

/// `(cell_id, tau, ci_low, ci_high, defined)`
pub type MapRow = (u64, f64, f64, f64, bool);

/// Inverse of [`export_cate_map`]'s properties, with null values as NaN.
pub fn read_cate_map(v: &Value) -> Result<Vec<MapRow>> {
    let features = v["features"]
        .as_array()
        .ok_or_else(|| invalid!("CATE map has no feature array"))?;
    features
        .iter()
        .map(|f| {
            let p = &f["properties"];
            let id = p["cell_id"].as_u64().ok_or_else(|| invalid!("feature without cell_id"))?;
            let get = |k: &str| p[k].as_f64().unwrap_or(f64::NAN);
            let defined = p["defined"].as_bool().ok_or_else(|| invalid!("cell {id}: no defined flag"))?;
            Ok((id, get("tau"), get("ci_low"), get("ci_high"), defined))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cate(tau: f64) -> CateEstimate {
        CateEstimate {
            tau,
            variance: 0.25,
            ci_low: tau - 1.0,
            ci_high: tau + 1.0,
            defined: true,
            clamped: false,
            n_trees: 10,
        }
    }

    #[test]
    fn table_four_rows() {
        let rows = [
            (-3.29, 61.55, -5),
            (-0.76, 16.00, -5),
            (-3.52, 39.29, -9),
            (-0.30, 2.78, -11),
            (-0.74, 9.62, -8),
            (-7.96, 142.14, -6),
        ];
        for (ate, yq1, want) in rows {
            assert_eq!(delta_percent(ate, yq1), Some(want));
        }
        assert_eq!(delta_percent(0.0, 5.0), Some(0));
        assert_eq!(delta_percent(-1.0, 0.0), None);
        assert_eq!(delta_percent(0.5, 100.0), Some(1));
        assert_eq!(delta_percent(-0.5, 100.0), Some(-1));
    }

    #[test]
    fn semi_elasticity_uses_raw_low_quartile() {
        let t_raw = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [10.0, 20.0, 30.0, 40.0, 50.0];
        let est = DmlEstimate::from_theta_se(-1.5, 0.5, "cf", 5, 0);
        let r = semi_elasticity("total", &est, &y, &t_raw).unwrap();
        assert_eq!(r.treatment_q1_cut, 2.0);
        assert_eq!(r.y_q1, 15.0);
        assert_eq!(r.delta_pct, Some(-10));
        assert_eq!(r.y_mean, 30.0);
    }

    #[test]
    fn constant_cates_share_one_value() {
        let cates = vec![cate(-2.0); 12];
        let cov: Vec<f64> = (0..12).map(f64::from).collect();
        let r = quartile_subgroups(&cates, &cov, "c").unwrap();
        assert!(r.groups.iter().all(|g| g.ate == -2.0 && g.density.is_none()));
        assert_eq!(r.groups.iter().map(|g| g.n).sum::<usize>(), 12);
    }

    #[test]
    fn monotone_strata_and_weighted_mean() {
        let cov: Vec<f64> = (0..40).map(|i| ((i * 17) % 40) as f64 / 10.0).collect();
        let cates: Vec<CateEstimate> = cov.iter().map(|v| cate(*v * 2.0 + 0.1 * (v * 9.0).sin())).collect();
        let r = quartile_subgroups(&cates, &cov, "x1").unwrap();
        for w in r.groups.windows(2) {
            assert!(w[0].ate < w[1].ate);
        }
        let weighted: f64 = r.groups.iter().map(|g| g.ate * g.n as f64).sum::<f64>() / 40.0;
        let overall = stats::mean(&cates.iter().map(|c| c.tau).collect::<Vec<_>>());
        assert!((weighted - overall).abs() < 1e-10);
        for g in &r.groups {
            let d = g.density.as_ref().unwrap();
            let area: f64 = d.x.windows(2).zip(d.y.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum();
            assert!((area - 1.0).abs() < 1e-3, "{area}");
        }
    }

    #[test]
    fn tied_covariate_flags_small_groups() {
        let mut cov = vec![1.0; 10];
        cov[9] = 2.0;
        let r = quartile_subgroups(&vec![cate(1.0); 10], &cov, "c").unwrap();
        assert_eq!(r.groups[0].n, 9);
        assert!(r.groups[1].flagged && r.groups[1].se.is_nan());
        assert!(quartile_subgroups(&vec![cate(1.0); 5], &[1.0; 5], "c").is_err());
    }

    fn four_cells() -> BTreeMap<u64, Rect> {
        (0..4u64)
            .map(|i| {
                let x0 = (i % 2) as f64 * 10.0;
                let y0 = (i / 2) as f64 * 10.0;
                (i, Rect::new(x0, y0, x0 + 10.0, y0 + 10.0))
            })
            .collect()
    }

    #[test]
    fn cate_map_round_trip() {
        let mut cates: Vec<CateEstimate> = [-1.0, -2.0, -3.0, -4.0].iter().map(|t| cate(*t)).collect();
        cates[2] = CateEstimate {
            defined: false,
            tau: f64::NAN,
            ..cates[2]
        };
        let ids = [3, 1, 2, 0];
        let v = export_cate_map(&ids, &cates, &four_cells()).unwrap();
        let text = serde_json::to_string(&v).unwrap();
        let back = read_cate_map(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(back[0].1, -4.0);
        assert_eq!(back[3].1, -1.0);
        assert!(!back[2].4 && back[2].1.is_nan());
        assert!(v["features"][2]["properties"]["tau"].is_null());
        assert!(export_cate_map(&[9], &cates[..1], &four_cells()).is_err());
    }
}
