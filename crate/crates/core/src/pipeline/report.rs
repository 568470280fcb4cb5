//! Plain-text summary tables rendered from stored artifacts.
//!
//! Only `estimates.json` is required. Forest, semi-elasticity and simulation
//! sections appear when their artifacts exist. Semi-elasticities are
//! recomputed from the stored ATE and baseline mean.

use std::fmt::Write as _;
use std::path::Path;

use super::artifacts::{read_json, read_scores_csv, read_semi_elasticity_csv, Estimates, ForestSummary};
use super::{CFOREST_SUMMARY, ESTIMATES, SCORES, SEMI_ELASTICITY};
use crate::dml::DmlEstimate;
use crate::error::Result;
use crate::heterogeneity::{delta_percent, SemiElasticityRow};

/// Left-aligned first column, right-aligned others, two spaces apart.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let n = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let mut s = String::new();
        for (j, c) in cells.iter().enumerate().take(n) {
            if j > 0 {
                s.push_str("  ");
            }
            let pad = width[j] - c.chars().count();
            if j == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (n - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

fn f2(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        "NA".into()
    }
}

fn p3(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        "NA".into()
    }
}

fn ci(lo: f64, hi: f64) -> String {
    format!("[{}, {}]", f2(lo), f2(hi))
}

fn ate_row(label: &str, e: &DmlEstimate) -> Vec<String> {
    vec![label.into(), f2(e.theta), f2(e.se), ci(e.ci_low, e.ci_high), p3(e.p_value)]
}

fn missing_row(label: &str, why: &str) -> Vec<String> {
    vec![label.into(), "NA".into(), "NA".into(), why.into(), "NA".into()]
}

/// Average treatment effect table: DML, causal forest, OLS baseline.
pub fn ate_table(est: &Estimates, forest: Option<&ForestSummary>) -> String {
    let mut rows = Vec::new();
    match est.primary() {
        Some(e) => rows.push(ate_row("DML-PLR", e)),
        None => rows.push(missing_row("DML-PLR", "failed")),
    }
    if let Some(f) = forest {
        rows.push(ate_row("Causal Forest", &f.ate));
    }
    match est.ols_for(&est.primary_treatment) {
        Some(e) => rows.push(ate_row("Baseline (OLS)", e)),
        None => rows.push(missing_row("Baseline (OLS)", "failed")),
    }
    format_table(&["Model", "ATE", "SE", "95% CI", "P value"], &rows)
}

/// One row per treatment: estimate and p-value per learner, then verdict.
pub fn robustness_table(est: &Estimates) -> String {
    let mut learners: Vec<&str> = Vec::new();
    for c in &est.screen.cells {
        if !learners.contains(&c.learner.as_str()) {
            learners.push(&c.learner);
        }
    }
    let rows: Vec<Vec<String>> = est
        .screen
        .verdicts
        .iter()
        .map(|v| {
            let mut row = vec![v.treatment.clone()];
            for l in &learners {
                row.push(match est.screen.cell(&v.treatment, l).and_then(|c| c.estimate.as_ref()) {
                    Some(e) => format!("{} (p={})", f2(e.theta), p3(e.p_value)),
                    None => "failed".into(),
                });
            }
            row.push(v.verdict.to_string());
            row
        })
        .collect();
    let mut header = vec!["Treatment"];
    header.extend(&learners);
    header.push("Verdict");
    format_table(&header, &rows)
}

/// Semi-elasticity table with the Q1 threshold footer.
pub fn semi_elasticity_table(rows: &[SemiElasticityRow], treatment: &str, n: usize) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.outcome.clone(),
                f2(r.ate),
                ci(r.ci_low, r.ci_high),
                p3(r.p_value),
                f2(r.y_mean),
                f2(r.y_q1),
                delta_percent(r.ate, r.y_q1).map_or_else(|| "NA".into(), |d| format!("{d}%")),
            ]
        })
        .collect();
    let mut s = format_table(&["Outcome", "ATE", "95% CI", "P value", "Y mean", "Y mean (Q1)", "Delta %"], &body);
    let _ = writeln!(s, "N={n}");
    if let Some(r) = rows.first() {
        let _ = writeln!(s, "{treatment} <= {:.4} (Q1)", r.treatment_q1_cut);
    }
    s
}

pub fn render(out: &Path) -> Result<String> {
    let est: Estimates = read_json(&out.join(ESTIMATES))?;
    let forest_path = out.join(CFOREST_SUMMARY);
    let forest: Option<ForestSummary> = if forest_path.is_file() {
        Some(read_json(&forest_path)?)
    } else {
        None
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Average treatment effect of {} on {} (n = {}, {}-fold cross-fitting, {} repetitions, primary learner {})\n",
        est.primary_treatment,
        est.outcome,
        est.n,
        est.k,
        est.reps,
        est.primary_learner.as_str()
    );
    s.push_str(&ate_table(&est, forest.as_ref()));
    let _ = writeln!(s, "\nRobustness screen (alpha = {})\n", est.screen.alpha);
    s.push_str(&robustness_table(&est));

    let semi_path = out.join(SEMI_ELASTICITY);
    if semi_path.is_file() {
        let rows = read_semi_elasticity_csv(&semi_path)?;
        let treatment = forest.as_ref().map_or(est.primary_treatment.as_str(), |f| f.treatment.as_str());
        let n = forest.as_ref().map_or(est.n, |f| f.n);
        let _ = writeln!(s, "\nCausal forest effects and semi-elasticities\n");
        s.push_str(&semi_elasticity_table(&rows, treatment, n));
    }

    let scores_path = out.join(SCORES);
    if scores_path.is_file() {
        let rows = read_scores_csv(&scores_path)?;
        if let Some(first) = rows.first() {
            let header: Vec<&str> = first.iter().map(|(h, _)| h.as_str()).collect();
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|(_, v)| match v.parse::<f64>() {
                            Ok(x) if v.contains('.') => format!("{x:.3}"),
                            _ => v.clone(),
                        })
                        .collect()
                })
                .collect();
            let _ = writeln!(s, "\nSimulation scores\n");
            s.push_str(&format_table(&header, &body));
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_align() {
        let t = format_table(&["a", "bb"], &[vec!["xyz".into(), "1".into()], vec!["q".into(), "22.5".into()]]);
        assert_eq!(t, "a      bb\n---------\nxyz     1\nq    22.5\n");
    }

    #[test]
    fn semi_elasticity_rows_recompute_delta() {
        let row = SemiElasticityRow {
            outcome: "crashes_angle".into(),
            ate: -3.29,
            se: 1.46,
            ci_low: -6.15,
            ci_high: -0.43,
            p_value: 0.024,
            y_mean: 34.79,
            y_q1: 61.55,
            delta_pct: None,
            treatment_q1_cut: 0.0751,
        };
        let t = semi_elasticity_table(&[row], "greenery", 1042);
        assert!(t.lines().nth(2).unwrap().ends_with("-5%"), "{t}");
        assert!(t.contains("N=1042\ngreenery <= 0.0751 (Q1)\n"));
    }
}
