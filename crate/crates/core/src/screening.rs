//! Covariate screening and standardization.
//!
//! Candidates are ranked by absolute Spearman correlation with the outcome,
//! the strongest `k_corr` are re-ranked by boosted-ensemble gain importance,
//! and the top `k_final` survive. Treatments and covariates are then
//! z-scored; the outcome stays in raw counts.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::learners::{fit, LearnerKind, LearnerSpec};
use crate::stats;
use crate::table::{Column, DataTable};

pub const DEFAULT_K_CORR: usize = 17;
pub const DEFAULT_K_FINAL: usize = 10;

/// Spearman rank correlation with average ranks for ties. `None` when either
/// column is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(invalid!("spearman needs at least 3 points, got {}", x.len()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(invalid!("spearman input contains missing values"));
    }
    Ok(stats::pearson(&stats::average_ranks(x), &stats::average_ranks(y)))
}

/// Column-major matrix from named table columns.
pub fn matrix(table: &DataTable, names: &[String]) -> Result<Array2<f64>> {
    let cols: Vec<&[f64]> = names.iter().map(|n| table.require(n)).collect::<Result<_>>()?;
    Ok(Array2::from_shape_fn((table.n_rows(), cols.len()), |(i, j)| cols[j][i]))
}

/// Normalized split-gain importance of each feature in a depth-wise boosted
/// ensemble fitted to the outcome.
pub fn importance_rank(table: &DataTable, outcome: &str, features: &[String], spec: &LearnerSpec) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(invalid!("importance ranking needs at least one feature"));
    }
    if features.len() == 1 {
        return Ok(vec![1.0]);
    }
    let x = matrix(table, features)?;
    let model = fit(spec, x.view(), table.require(outcome)?)?;
    Ok(model.gain_importance())
}

pub fn default_importance_spec(seed: u64) -> LearnerSpec {
    LearnerSpec::new(LearnerKind::GbtDepthwise, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScreen {
    pub feature: String,
    pub rho: Option<f64>,
    pub importance: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub outcome: String,
    pub k_corr: usize,
    pub k_final: usize,
    pub features: Vec<FeatureScreen>,
    /// In selection order.
    pub selected: Vec<String>,
}

fn abs_rho(f: &FeatureScreen) -> f64 {
    f.rho.map_or(f64::NEG_INFINITY, f64::abs)
}

fn by_corr(a: &FeatureScreen, b: &FeatureScreen) -> Ordering {
    abs_rho(b).total_cmp(&abs_rho(a)).then_with(|| a.feature.cmp(&b.feature))
}

/// Top `k_corr` by |ρ|, then top `k_final` of those by importance. Ties fall
/// back to (|ρ| desc, name asc). Features with undefined ρ rank last.
pub fn select_covariates(features: &[FeatureScreen], k_corr: usize, k_final: usize) -> Result<Vec<String>> {
    if k_final == 0 {
        return Err(invalid!("k_final must be positive"));
    }
    if k_final > k_corr {
        return Err(invalid!("k_final {k_final} exceeds k_corr {k_corr}"));
    }
    if features.len() < k_final {
        return Err(invalid!(
            "{} candidates is fewer than k_final {k_final}",
            features.len()
        ));
    }
    let mut pool: Vec<&FeatureScreen> = features.iter().collect();
    pool.sort_by(|a, b| by_corr(a, b));
    pool.truncate(k_corr.min(pool.len()));
    pool.sort_by(|a, b| b.importance.total_cmp(&a.importance).then_with(|| by_corr(a, b)));
    Ok(pool[..k_final].iter().map(|f| f.feature.clone()).collect())
}

/// Full screen over `candidates`. Rows with a missing outcome or candidate
/// are ignored for both ρ and importance.
pub fn screen(
    table: &DataTable,
    outcome: &str,
    candidates: &[String],
    k_corr: usize,
    k_final: usize,
    spec: &LearnerSpec,
) -> Result<ScreenReport> {
    let mut names = candidates.to_vec();
    names.push(outcome.to_string());
    let (complete, _) = listwise_complete(table, &names)?;
    let y = complete.require(outcome)?;
    let rhos: Vec<Option<f64>> = candidates
        .iter()
        .map(|c| spearman(complete.require(c)?, y))
        .collect::<Result<_>>()?;
    let importance = importance_rank(&complete, outcome, candidates, spec)?;
    let mut features: Vec<FeatureScreen> = candidates
        .iter()
        .zip(rhos)
        .zip(importance)
        .map(|((c, rho), importance)| FeatureScreen {
            feature: c.clone(),
            rho,
            importance,
            selected: false,
        })
        .collect();
    let selected = select_covariates(&features, k_corr, k_final)?;
    for f in &mut features {
        f.selected = selected.contains(&f.feature);
    }
    Ok(ScreenReport {
        outcome: outcome.to_string(),
        k_corr,
        k_final,
        features,
        selected,
    })
}

impl ScreenReport {
    /// `feature,rho,importance,selected`; undefined ρ is an empty field.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["feature", "rho", "importance", "selected"])?;
        for f in &self.features {
            w.write_record([
                f.feature.clone(),
                f.rho.map(|r| r.to_string()).unwrap_or_default(),
                f.importance.to_string(),
                f.selected.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Table restricted to `columns`, dropping rows with any missing value.
/// Returns the number of dropped rows.
pub fn listwise_complete(table: &DataTable, columns: &[String]) -> Result<(DataTable, usize)> {
    let cols: Vec<&[f64]> = columns.iter().map(|c| table.require(c)).collect::<Result<_>>()?;
    let keep: Vec<usize> = (0..table.n_rows())
        .filter(|&i| cols.iter().all(|c| c[i].is_finite()))
        .collect();
    let dropped = table.n_rows() - keep.len();
    if dropped > 0 {
        log::info!("listwise deletion dropped {dropped} of {} rows", table.n_rows());
    }
    let mut out = DataTable::new(keep.iter().map(|&i| table.ids[i]).collect());
    for (name, c) in columns.iter().zip(&cols) {
        if out.get(name).is_none() {
            out.push(name.clone(), keep.iter().map(|&i| c[i]).collect())?;
        }
    }
    Ok((out, dropped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub name: String,
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub sd: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub columns: Vec<ColumnScale>,
}

impl Standardization {
    pub fn get(&self, name: &str) -> Option<&ColumnScale> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Undo the z-scoring on every column this standardization covers.
    pub fn inverse(&self, table: &DataTable) -> DataTable {
        let mut out = table.clone();
        for col in &mut out.columns {
            if let Some(s) = self.get(&col.name) {
                for v in &mut col.values {
                    *v = *v * s.sd + s.mean;
                }
            }
        }
        out
    }
}

/// `(x − mean) / sd` on each named column; other columns pass through.
pub fn zscore(table: &DataTable, columns: &[String]) -> Result<(DataTable, Standardization)> {
    let mut out = table.clone();
    let mut scales = Vec::with_capacity(columns.len());
    for name in columns {
        let values = table.require(name)?;
        let mean = stats::mean(values);
        let sd = stats::sample_sd(values);
        if !(sd > 0.0) {
            return Err(Error::ZeroVariance(name.clone()));
        }
        let col: &mut Column = out.columns.iter_mut().find(|c| &c.name == name).expect("required above");
        for v in &mut col.values {
            *v = (*v - mean) / sd;
        }
        scales.push(ColumnScale {
            name: name.clone(),
            mean,
            sd,
        });
    }
    Ok((out, Standardization { columns: scales }))
}

/// Analysis matrix: raw outcome, standardized treatments and covariates,
/// complete rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub table: DataTable,
    pub outcome: String,
    pub treatments: Vec<String>,
    pub covariates: Vec<String>,
    pub scaling: Standardization,
    pub dropped_rows: usize,
}

impl FeatureTable {
    pub fn assemble(source: &DataTable, outcome: &str, treatments: &[String], covariates: &[String]) -> Result<Self> {
        let mut names = vec![outcome.to_string()];
        names.extend(treatments.iter().cloned());
        names.extend(covariates.iter().filter(|c| !treatments.contains(c)).cloned());
        let (complete, dropped_rows) = listwise_complete(source, &names)?;
        if complete.n_rows() < 3 {
            return Err(invalid!("only {} complete rows remain", complete.n_rows()));
        }
        let (table, scaling) = zscore(&complete, &names[1..])?;
        Ok(Self {
            table,
            outcome: outcome.to_string(),
            treatments: treatments.to_vec(),
            covariates: covariates.iter().filter(|c| !treatments.contains(c)).cloned().collect(),
            scaling,
            dropped_rows,
        })
    }

    pub fn y(&self) -> &[f64] {
        self.table.get(&self.outcome).expect("present by construction")
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.table.require(name)
    }

    pub fn x(&self) -> Array2<f64> {
        matrix(&self.table, &self.covariates).expect("present by construction")
    }

    /// Covariates plus every treatment except `treatment`.
    pub fn controls_excluding(&self, treatment: &str) -> (Array2<f64>, Vec<String>) {
        let names: Vec<String> = self
            .covariates
            .iter()
            .chain(self.treatments.iter().filter(|t| *t != treatment))
            .cloned()
            .collect();
        (matrix(&self.table, &names).expect("present by construction"), names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn fs(name: &str, rho: Option<f64>, importance: f64) -> FeatureScreen {
        FeatureScreen {
            feature: name.into(),
            rho,
            importance,
            selected: false,
        }
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spearman(&x, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap(), Some(1.0));
        assert_eq!(spearman(&x, &[5.0, 1.0, 0.0, -3.0, -9.0]).unwrap(), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 3.0, 4.0]).unwrap(), Some(1.0));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn selection_tie_break() {
        let f = [fs("b", Some(0.5), 0.2), fs("a", Some(0.5), 0.2), fs("c", Some(-0.9), 0.2)];
        assert_eq!(select_covariates(&f, 3, 3).unwrap(), vec!["c", "a", "b"]);
        assert!(select_covariates(&f, 3, 4).is_err());
        assert!(select_covariates(&f, 2, 3).is_err());
    }

    #[test]
    fn two_stage_filter() {
        let f = [
            fs("a", Some(0.9), 0.1),
            fs("b", Some(0.8), 0.5),
            fs("c", Some(0.1), 0.9),
            fs("d", None, 1.0),
        ];
        assert_eq!(select_covariates(&f, 2, 1).unwrap(), vec!["b"]);
        assert_eq!(select_covariates(&f, 3, 2).unwrap(), vec!["c", "b"]);
    }

    #[test]
    fn zscore_round_trip() {
        let mut t = DataTable::new(vec![1, 2, 3]);
        t.push("a", vec![2.0, 4.0, 6.0]).unwrap();
        t.push("y", vec![7.0, 1.0, 3.0]).unwrap();
        let (z, s) = zscore(&t, &["a".to_string()]).unwrap();
        assert_eq!(z.get("a").unwrap(), &[-1.0, 0.0, 1.0]);
        assert_eq!(z.get("y").unwrap(), t.get("y").unwrap());
        assert_eq!(s.get("a").unwrap().mean, 4.0);
        assert_eq!(s.get("a").unwrap().sd, 2.0);
        let back = s.inverse(&z);
        for (a, b) in back.get("a").unwrap().iter().zip(t.get("a").unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
        let (zz, _) = zscore(&z, &["a".to_string()]).unwrap();
        for (a, b) in zz.get("a").unwrap().iter().zip(z.get("a").unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_names_constant_column() {
        let mut t = DataTable::new(vec![1, 2, 3]);
        t.push("flat", vec![1.0; 3]).unwrap();
        match zscore(&t, &["flat".to_string()]) {
            Err(Error::ZeroVariance(c)) => assert_eq!(c, "flat"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn listwise_deletion_counts_rows() {
        let mut t = DataTable::new(vec![1, 2, 3, 4]);
        t.push("a", vec![1.0, f64::NAN, 3.0, 4.0]).unwrap();
        t.push("b", vec![1.0, 2.0, 3.0, f64::NAN]).unwrap();
        let (c, dropped) = listwise_complete(&t, &["a".into(), "b".into()]).unwrap();
        assert_eq!(dropped, 2);
        assert_eq!(c.ids, vec![1, 3]);
    }

    fn random_table(n: usize, p: usize, seed: u64) -> (DataTable, Vec<String>) {
        let mut r = rng::rng(seed);
        let mut t = DataTable::new((0..n as u64).collect());
        let names: Vec<String> = (0..p).map(|j| format!("f{j:02}")).collect();
        for name in &names {
            t.push(name.clone(), (0..n).map(|_| r.sample(StandardNormal)).collect()).unwrap();
        }
        (t, names)
    }

    #[test]
    fn single_feature_importance_is_one() {
        let (mut t, names) = random_table(30, 1, 1);
        t.push("y", vec![0.0; 30]).unwrap();
        assert_eq!(importance_rank(&t, "y", &names, &default_importance_spec(1)).unwrap(), vec![1.0]);
    }

    #[test]
    fn pure_function_feature_ranks_first() {
        let (mut t, names) = random_table(300, 5, 2);
        let y: Vec<f64> = t.get("f03").unwrap().iter().map(|v| v.sin() * 3.0).collect();
        t.push("y", y).unwrap();
        let imp = importance_rank(&t, "y", &names, &default_importance_spec(2)).unwrap();
        let best = (0..5).max_by(|&a, &b| imp[a].total_cmp(&imp[b])).unwrap();
        assert_eq!(best, 3);
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn null_outcome_spreads_importance() {
        for seed in 0..20 {
            let (mut t, names) = random_table(200, 5, 100 + seed);
            let mut r = rng::rng(seed);
            t.push("y", (0..200).map(|_| r.sample(StandardNormal)).collect()).unwrap();
            let spec = LearnerSpec {
                n_trees: 50,
                ..default_importance_spec(seed)
            };
            let imp = importance_rank(&t, "y", &names, &spec).unwrap();
            assert!(imp.iter().all(|&v| v < 3.0 / 5.0), "seed {seed}: {imp:?}");
        }
    }

    #[test]
    fn planted_features_recovered() {
        let planted = ["f01", "f04", "f07", "f10"];
        let mut hits = 0;
        for seed in 0..20 {
            let (mut t, names) = random_table(400, 12, 200 + seed);
            let mut r = rng::rng(seed);
            let y: Vec<f64> = (0..400)
                .map(|i| {
                    planted.iter().map(|p| t.get(p).unwrap()[i]).sum::<f64>() + 0.5 * r.sample::<f64, _>(StandardNormal)
                })
                .collect();
            t.push("y", y).unwrap();
            let spec = LearnerSpec {
                n_trees: 60,
                ..default_importance_spec(seed)
            };
            let report = screen(&t, "y", &names, 8, 4, &spec).unwrap();
            let mut got = report.selected.clone();
            got.sort();
            if got == planted {
                hits += 1;
            }
        }
        assert!(hits >= 18, "{hits}/20");
    }

    #[test]
    fn feature_table_keeps_outcome_raw() {
        let (mut t, names) = random_table(20, 3, 5);
        t.push("y", (0..20).map(|i| i as f64).collect()).unwrap();
        let ft = FeatureTable::assemble(&t, "y", &names[..1], &names[1..]).unwrap();
        assert_eq!(ft.y(), t.get("y").unwrap());
        let sd = stats::sample_sd(ft.column("f00").unwrap());
        assert!((sd - 1.0).abs() < 1e-10);
        assert_eq!(ft.x().ncols(), 2);
        let (ctrl, cn) = ft.controls_excluding("f00");
        assert_eq!((ctrl.ncols(), cn.len()), (2, 2));
    }
}
