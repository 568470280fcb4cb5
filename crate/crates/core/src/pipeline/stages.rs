use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::artifacts::{
    read_cate_csv, read_json, write_json, AnalysisMeta, Estimates, ForestSummary, OlsRow,
};
use super::config::RunConfig;
use super::*;
use crate::causal_forest::{run_forest, write_cate_csv, ForestParams};
use crate::data_pipeline::grid::{assign_crashes, build_grid, CrashCategory};
use crate::data_pipeline::images::aggregate_images;
use crate::data_pipeline::io::{
    assemble_grid_table, grid_geojson, read_crashes, read_grid_bounds, read_images, read_mask,
    read_tracts,
};
use crate::data_pipeline::tracts::areal_weight_tracts;
use crate::data_pipeline::Rect;
use crate::dml::{ols_baseline, robustness_screen, ScreenData};
use crate::heterogeneity::{
    export_cate_map, per_subtype_forests, quartile_subgroups, semi_elasticity,
    write_semi_elasticity_csv,
};
use crate::learners::{fit, LearnerSpec};
use crate::rng;
use crate::screening::{self, default_importance_spec, FeatureTable};
use crate::shap::{
    dependence_data, global_importance, interaction_matrix, tree_shap, write_dependence_csv,
    write_importance_csv, write_interactions_csv, MAX_ENUM_FEATURES,
};
use crate::synthetic::{score_estimator, write_scores_csv};
use crate::table::DataTable;

pub(super) struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a Path,
}

/// File name for a per-column artifact; characters outside `[A-Za-z0-9_-]`
/// become `_`.
pub fn column_file(prefix: &str, column: &str, ext: &str) -> String {
    let safe: String = column
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{prefix}_{safe}.{ext}")
}

impl Ctx<'_> {
    pub fn run(&self, stage: Stage) -> Result<Vec<String>> {
        match stage {
            Stage::GridBuild => self.grid_build(),
            Stage::Screen => self.screen(),
            Stage::Dml => self.dml(),
            Stage::Shap => self.shap(),
            Stage::Cforest => self.cforest(),
            Stage::Hetero => self.hetero(),
            Stage::Simulate => self.simulate(),
            Stage::Report => self.report(),
        }
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn seed(&self, stage: Stage) -> u64 {
        rng::derive_named(self.cfg.seed, stage.as_str())
    }

    fn grid_build(&self) -> Result<Vec<String>> {
        let cfg = self.cfg;
        let g = cfg.grid.as_ref().ok_or_else(|| invalid!("missing grid section"))?;
        let [x0, y0, x1, y1] = g.extent;
        let mask = cfg.inputs.mask.as_deref().map(read_mask).transpose()?;
        let (spec, mut cells) = build_grid(Rect::new(x0, y0, x1, y1), g.cell_size, mask.as_deref())?;
        let table = match &cfg.inputs.grid_table {
            Some(p) => {
                let t = DataTable::read_csv(p)?;
                if let Some(id) = t.ids.iter().find(|&&id| !spec.is_included(id)) {
                    return Err(invalid!("{}: cell {id} is not in the grid", p.display()));
                }
                if t.ids.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(invalid!("{}: cell ids must be unique and ascending", p.display()));
                }
                t
            }
            None => {
                let path = cfg.inputs.crashes.as_deref().ok_or_else(|| invalid!("no crash input"))?;
                let diag = assign_crashes(&read_crashes(path)?, &spec, &mut cells);
                log::info!(
                    "crashes: {} assigned, {} outside, {} skipped",
                    diag.assigned,
                    diag.outside,
                    diag.skipped
                );
                let socio = match &cfg.inputs.tracts {
                    Some(p) => areal_weight_tracts(&read_tracts(p)?, &spec).0,
                    None => Vec::new(),
                };
                let visual = match &cfg.inputs.images {
                    Some(p) => aggregate_images(&read_images(p)?, &spec)?.0,
                    None => Vec::new(),
                };
                assemble_grid_table(&cells, &socio, &visual)?
            }
        };
        table.write_csv(&self.path(GRID_TABLE))?;
        let bounds: BTreeMap<u64, Rect> = table.ids.iter().map(|&id| (id, spec.bounds_of(id))).collect();
        write_json(&self.path(GRID_GEOJSON), &grid_geojson(&table, &bounds)?)?;
        Ok(vec![GRID_TABLE.into(), GRID_GEOJSON.into()])
    }

    fn screen(&self) -> Result<Vec<String>> {
        let cfg = self.cfg;
        let grid = DataTable::read_csv(&self.path(GRID_TABLE))?;
        grid.require(&cfg.outcome)?;
        for t in &cfg.treatments {
            grid.require(t)?;
        }
        let subtypes = &cfg.heterogeneity.subtypes;
        let candidates: Vec<String> = match &cfg.candidates {
            Some(c) => c.clone(),
            None => {
                let subtype_cols: Vec<String> = CrashCategory::ALL.iter().map(|c| c.column()).collect();
                grid.names()
                    .into_iter()
                    .map(String::from)
                    .filter(|n| {
                        *n != cfg.outcome
                            && !cfg.treatments.contains(n)
                            && !subtype_cols.contains(n)
                            && !subtypes.contains(n)
                    })
                    .collect()
            }
        };
        if let Some(c) = candidates.iter().find(|c| cfg.treatments.contains(c) || **c == cfg.outcome) {
            return Err(invalid!("candidate `{c}` is the outcome or a treatment"));
        }
        let s = &cfg.screening;
        let report = screening::screen(
            &grid,
            &cfg.outcome,
            &candidates,
            s.k_corr,
            s.k_final,
            &default_importance_spec(self.seed(Stage::Screen)),
        )?;
        report.write_csv(&self.path(SCREEN_REPORT))?;

        let mut ft = FeatureTable::assemble(&grid, &cfg.outcome, &cfg.treatments, &report.selected)?;
        let row_of: BTreeMap<u64, usize> = grid.ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        for name in subtypes {
            let col = grid.require(name)?;
            let values: Vec<f64> = ft.table.ids.iter().map(|id| col[row_of[id]]).collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(invalid!("subtype outcome `{name}` has missing values"));
            }
            ft.table.push(name.clone(), values)?;
        }
        ft.table.write_csv(&self.path(ANALYSIS_TABLE))?;
        let meta = AnalysisMeta {
            outcome: ft.outcome.clone(),
            treatments: ft.treatments.clone(),
            covariates: ft.covariates.clone(),
            subtypes: subtypes.clone(),
            n_rows: ft.table.n_rows(),
            dropped_rows: ft.dropped_rows,
            scaling: ft.scaling.clone(),
        };
        write_json(&self.path(ANALYSIS_META), &meta)?;
        Ok(vec![SCREEN_REPORT.into(), ANALYSIS_TABLE.into(), ANALYSIS_META.into()])
    }

    fn analysis(&self) -> Result<(FeatureTable, AnalysisMeta)> {
        let meta: AnalysisMeta = read_json(&self.path(ANALYSIS_META))?;
        let ft = meta.feature_table(DataTable::read_csv(&self.path(ANALYSIS_TABLE))?)?;
        Ok((ft, meta))
    }

    /// Controls used while estimating `treatment`, with their names. Other
    /// treatments are included when the config rotates them.
    fn controls(&self, ft: &FeatureTable, treatment: &str) -> (Array2<f64>, Vec<String>) {
        if self.cfg.dml.rotate_treatments {
            ft.controls_excluding(treatment)
        } else {
            (ft.x(), ft.covariates.clone())
        }
    }

    fn dml(&self) -> Result<Vec<String>> {
        let cfg = self.cfg;
        let (ft, meta) = self.analysis()?;
        let seed = self.seed(Stage::Dml);
        let treatments: Vec<(String, Vec<f64>)> = meta
            .treatments
            .iter()
            .map(|t| Ok((t.clone(), ft.column(t)?.to_vec())))
            .collect::<Result<_>>()?;
        let x = ft.x();
        let data = ScreenData {
            y: ft.y(),
            treatments: &treatments,
            x: x.view(),
            rotate_treatments: cfg.dml.rotate_treatments,
        };
        let learners: Vec<LearnerSpec> = cfg.learners.iter().map(|l| l.spec(0)).collect();
        let matrix = robustness_screen(&data, &learners, cfg.dml.k, cfg.dml.reps, cfg.dml.alpha, seed)?;
        let ols = meta
            .treatments
            .iter()
            .map(|t| {
                let (xc, names) = self.controls(&ft, t);
                let res = ols_baseline(ft.y(), ft.column(t)?, xc.view(), &names);
                Ok(OlsRow {
                    treatment: t.clone(),
                    error: res.as_ref().err().map(ToString::to_string),
                    estimate: res.ok(),
                })
            })
            .collect::<Result<_>>()?;
        let est = Estimates {
            outcome: meta.outcome.clone(),
            n: ft.table.n_rows(),
            k: cfg.dml.k,
            reps: cfg.dml.reps,
            seed,
            rotate_treatments: cfg.dml.rotate_treatments,
            primary_treatment: cfg.primary_treatment()?.to_string(),
            primary_learner: cfg.dml.primary_learner,
            screen: matrix,
            ols,
        };
        write_json(&self.path(ESTIMATES), &est)?;
        Ok(vec![ESTIMATES.into()])
    }

    fn shap(&self) -> Result<Vec<String>> {
        let cfg = self.cfg;
        let (ft, _) = self.analysis()?;
        let primary = cfg.primary_treatment()?;
        let (x, names) = self.controls(&ft, primary);
        let seed = self.seed(Stage::Shap);
        let entry = cfg.shap_entry();
        let g = fit(&entry.spec(rng::derive(seed, 0)), x.view(), ft.y())?;
        let m = fit(&entry.spec(rng::derive(seed, 1)), x.view(), ft.column(primary)?)?;
        let ids = &ft.table.ids;
        let expl_g = tree_shap(&g, x.view(), Some(ids))?;
        let expl_m = tree_shap(&m, x.view(), Some(ids))?;
        let imp_g = global_importance(&expl_g, &names)?;
        let imp_m = global_importance(&expl_m, &names)?;
        write_importance_csv(
            &self.path(SHAP_IMPORTANCE),
            &[("g".into(), imp_g.clone()), ("m".into(), imp_m)],
        )?;
        let mut files = vec![SHAP_IMPORTANCE.to_string()];

        if names.len() <= MAX_ENUM_FEATURES {
            let n = cfg.shap.interaction_samples;
            let ig = interaction_matrix(&g, x.view(), &names, n, rng::derive(seed, 2))?;
            let im = interaction_matrix(&m, x.view(), &names, n, rng::derive(seed, 3))?;
            write_interactions_csv(&self.path(SHAP_INTERACTIONS), &[("g".into(), ig), ("m".into(), im)])?;
            files.push(SHAP_INTERACTIONS.into());
        } else {
            log::warn!(
                "{} features exceed the exact interaction limit of {MAX_ENUM_FEATURES}; interactions skipped",
                names.len()
            );
        }

        let (frac, iters) = (cfg.shap.lowess_frac, cfg.shap.lowess_iters);
        for f in imp_g.iter().take(cfg.shap.dependence_features) {
            let j = names.iter().position(|n| *n == f.feature).expect("importance names come from `names`");
            let curves = [
                ("g".to_string(), dependence_data(&expl_g, x.view(), j, &f.feature, frac, iters)?),
                ("m".to_string(), dependence_data(&expl_m, x.view(), j, &f.feature, frac, iters)?),
            ];
            let file = column_file("dependence", &f.feature, "csv");
            write_dependence_csv(&self.path(&file), &curves)?;
            files.push(file);
        }
        Ok(files)
    }

    fn cforest(&self) -> Result<Vec<String>> {
        let cfg = self.cfg;
        let (ft, meta) = self.analysis()?;
        let primary = cfg.primary_treatment()?;
        let (x, _) = self.controls(&ft, primary);
        let params = ForestParams {
            seed: self.seed(Stage::Cforest),
            ..cfg.forest.params.clone()
        };
        let centering = cfg.centering_entry().spec(0);
        let run = run_forest(x.view(), ft.y(), ft.column(primary)?, &params, &centering, cfg.forest.k)?;
        write_cate_csv(&self.path(CATE_CSV), &ft.table.ids, &run.cates)?;
        let model_path = self.path(CFOREST_MODEL);
        std::fs::write(&model_path, run.model.to_json()? + "\n").map_err(|e| Error::io(&model_path, e))?;
        let summary = ForestSummary {
            outcome: meta.outcome.clone(),
            treatment: primary.to_string(),
            n: ft.table.n_rows(),
            n_defined: run.cates.iter().filter(|c| c.defined).count(),
            n_clamped: run.cates.iter().filter(|c| c.clamped).count(),
            ate: run.ate,
            params,
            centering,
            k: cfg.forest.k,
        };
        write_json(&self.path(CFOREST_SUMMARY), &summary)?;
        Ok(vec![CATE_CSV.into(), CFOREST_MODEL.into(), CFOREST_SUMMARY.into()])
    }

    fn hetero(&self) -> Result<Vec<String>> {
        let cfg = self.cfg;
        let (ft, meta) = self.analysis()?;
        let summary: ForestSummary = read_json(&self.path(CFOREST_SUMMARY))?;
        let (ids, cates) = read_cate_csv(&self.path(CATE_CSV), summary.params.n_trees)?;
        if ids != ft.table.ids {
            return Err(invalid!("{CATE_CSV} rows do not match {ANALYSIS_TABLE}; rerun cforest"));
        }
        let grid = DataTable::read_csv(&self.path(GRID_TABLE))?;
        let row_of: BTreeMap<u64, usize> = grid.ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        let raw = |name: &str| -> Result<Vec<f64>> {
            let col = grid.require(name)?;
            ids.iter()
                .map(|id| {
                    row_of
                        .get(id)
                        .map(|&r| col[r])
                        .ok_or_else(|| invalid!("cell {id} missing from {GRID_TABLE}"))
                })
                .collect()
        };
        let mut files = Vec::new();
        for cov in &cfg.heterogeneity.subgroup_covariates {
            let report = quartile_subgroups(&cates, &raw(cov)?, cov)?;
            let file = column_file("subgroups", cov, "csv");
            report.write_csv(&self.path(&file))?;
            files.push(file);
        }

        let t_raw = raw(&summary.treatment)?;
        let mut rows = vec![semi_elasticity(&meta.outcome, &summary.ate, ft.y(), &t_raw)?];
        let outcomes: Vec<(String, Vec<f64>)> = meta
            .subtypes
            .iter()
            .map(|s| Ok((s.clone(), ft.column(s)?.to_vec())))
            .collect::<Result<_>>()?;
        let (x, _) = self.controls(&ft, &summary.treatment);
        let t = ft.column(&summary.treatment)?;
        for r in per_subtype_forests(x.view(), t, &t_raw, &outcomes, &summary.params, &summary.centering, summary.k) {
            match r.semi {
                Some(s) => rows.push(s),
                None => log::warn!("subtype {} omitted: {}", r.outcome, r.error.unwrap_or_default()),
            }
        }
        write_semi_elasticity_csv(&self.path(SEMI_ELASTICITY), &rows)?;
        files.push(SEMI_ELASTICITY.into());

        let bounds = read_grid_bounds(&self.path(GRID_GEOJSON))?;
        write_json(&self.path(CATE_MAP), &export_cate_map(&ids, &cates, &bounds)?)?;
        files.push(CATE_MAP.into());
        Ok(files)
    }

    fn simulate(&self) -> Result<Vec<String>> {
        let sim = self.cfg.simulate.as_ref().ok_or_else(|| invalid!("missing simulate section"))?;
        let dgp = sim.dgp.with_seed(self.seed(Stage::Simulate));
        let scores = sim
            .estimators
            .iter()
            .map(|e| score_estimator(e, &dgp, sim.reps))
            .collect::<Result<Vec<_>>>()?;
        write_scores_csv(&self.path(SCORES), &scores)?;
        Ok(vec![SCORES.into()])
    }

    fn report(&self) -> Result<Vec<String>> {
        let text = report::render(self.out)?;
        let path = self.path(REPORT);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(vec![REPORT.into()])
    }
}
