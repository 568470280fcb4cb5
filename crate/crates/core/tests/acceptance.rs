//! The ten acceptance criteria. Each test prints one `PASS` or `FAIL` line
//! straight to stdout so the line survives output capture.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix2, Vector2};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use causalgrid::causal_forest::{
    fit_forest, run_forest, CausalForestModel, ForestParams, HonestTree, FOREST_FORMAT_VERSION,
};
use causalgrid::data_pipeline::{
    areal_weight_tracts, assign_crashes, build_grid, visual_entropy, CrashCategory, CrashRecord, Polygon,
    ProjectedPoint, Rect, TractRecord,
};
use causalgrid::dml::{robustness_screen, DmlEstimate, ScreenData, Verdict};
use causalgrid::heterogeneity::{delta_percent, semi_elasticity};
use causalgrid::learners::{fit, LearnerKind, LearnerSpec, Tree, TreeNode};
use causalgrid::pipeline::{self, RunConfig, Stage, CATE_CSV, ESTIMATES};
use causalgrid::rng;
use causalgrid::screening::spearman;
use causalgrid::shap::{brute_shap, tree_shap};
use causalgrid::synthetic::{
    gen_hetero, gen_plr, outcome_nuisance, score_estimator, treatment_nuisance, DgpSpec, Effect, Estimator,
    OutcomeForm, TreatmentForm,
};

fn verdict(id: u32, name: &str, start: Instant, failures: &[String], detail: &str) {
    let status = if failures.is_empty() { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "C{id:<2} {status} {name} ({detail}; {:.1}s)",
        start.elapsed().as_secs_f64()
    );
    for f in failures {
        let _ = writeln!(out, "      {f}");
    }
    assert!(failures.is_empty(), "C{id} failed: {failures:?}");
}

fn check(failures: &mut Vec<String>, ok: bool, msg: impl Into<String>) {
    if !ok {
        failures.push(msg.into());
    }
}

#[test]
fn c01_semi_elasticity_table_rows() {
    let start = Instant::now();
    // (outcome, ATE, Y mean over Q1, published delta %)
    let rows = [
        ("angle", -3.29, 61.55, -5),
        ("pedestrian_bicycle", -0.76, 16.00, -5),
        ("rear_end", -3.52, 39.29, -9),
        ("fatality", -0.30, 2.78, -11),
        ("serious_injury", -0.74, 9.62, -8),
        ("injury", -7.96, 142.14, -6),
    ];
    let mut failures = Vec::new();
    // the lowest two of five treatment values form Q1; both carry Y(Q1)
    let t_raw = [1.0, 2.0, 3.0, 4.0, 5.0];
    for (name, ate, y_q1, want) in rows {
        let est = DmlEstimate::from_theta_se(ate, 1.0, "causal_forest", 5, 0);
        let y = [y_q1, y_q1, 1e3, 2e3, 3e3];
        let row = semi_elasticity(name, &est, &y, &t_raw).unwrap();
        check(&mut failures, row.y_q1 == y_q1, format!("{name}: Y(Q1) {} != {y_q1}", row.y_q1));
        check(&mut failures, row.delta_pct == Some(want), format!("{name}: {:?} != {want}", row.delta_pct));
        check(&mut failures, delta_percent(ate, y_q1) == Some(want), format!("{name}: delta_percent"));
    }
    verdict(1, "semi-elasticity rows", start, &failures, "6 rows, exact");
}

#[test]
fn c02_tree_shap_matches_enumeration() {
    let start = Instant::now();
    let (n, p) = (300, 10);
    let mut r = rng::rng(21);
    let x: Array2<f64> = Array2::from_shape_fn((n, p), |_| StandardNormal.sample(&mut r));
    let y: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|row| row[0] * row[1] + (2.0 * row[2]).sin() + row[3].abs() - 0.5 * row[4] + 0.3 * row[9] * row[5])
        .collect();
    let probe = Array2::from_shape_fn((50, p), |_| StandardNormal.sample(&mut r));
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for kind in LearnerKind::ALL {
        let spec = LearnerSpec {
            n_trees: 50,
            min_leaf: 3,
            ..LearnerSpec::new(kind, 4)
        };
        let model = fit(&spec, x.view(), &y).unwrap();
        let fast = tree_shap(&model, probe.view(), None).unwrap();
        for (i, e) in fast.iter().enumerate() {
            let row = probe.row(i).to_vec();
            let slow = brute_shap(&model, &row).unwrap();
            let d = e.phi.iter().zip(&slow.phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(d);
            check(&mut failures, d <= 1e-8, format!("{kind} instance {i}: |phi - oracle| = {d:e}"));
            let f = model.predict_row(&row);
            for (label, ex) in [("tree", e), ("brute", &slow)] {
                let gap = (ex.prediction() - f).abs();
                check(&mut failures, gap <= 1e-8, format!("{kind} instance {i}: {label} local accuracy off by {gap:e}"));
            }
        }
    }
    verdict(2, "tree Shapley equals subset enumeration", start, &failures, &format!("4 kinds x 50 instances, max gap {worst:.1e}"));
}

#[test]
fn c03_dml_coverage_linear() {
    let start = Instant::now();
    let stumps = LearnerSpec {
        n_trees: 150,
        max_depth: Some(1),
        ..LearnerSpec::new(LearnerKind::GbtDepthwise, 0)
    };
    let est = Estimator::Dml {
        learner: stumps,
        k: 5,
        reps: 1,
    };
    let spec = DgpSpec::plr(1000, 2.0, OutcomeForm::Linear, TreatmentForm::Linear, 7);
    let s = score_estimator(&est, &spec, 200).unwrap();
    let mut failures = Vec::new();
    check(&mut failures, (0.90..=0.98).contains(&s.coverage), format!("coverage {}", s.coverage));
    check(&mut failures, s.bias.abs() < 0.1, format!("bias {}", s.bias));
    verdict(3, "DML coverage on the linear oracle", start, &failures, &format!("coverage {:.3}, bias {:+.4}", s.coverage, s.bias));
}

#[test]
fn c04_bias_ordering() {
    let start = Instant::now();
    let spec = DgpSpec::plr(1000, 2.0, OutcomeForm::SineInteraction, TreatmentForm::Logistic, 11);
    let dml = Estimator::Dml {
        learner: LearnerSpec::new(LearnerKind::GbtDepthwise, 0),
        k: 5,
        reps: 1,
    };
    let d = score_estimator(&dml, &spec, 100).unwrap();
    let naive = score_estimator(&Estimator::OlsNaive, &spec, 100).unwrap();
    let controls = score_estimator(&Estimator::OlsControls, &spec, 100).unwrap();
    let mut failures = Vec::new();
    check(&mut failures, naive.bias.abs() > d.bias.abs(), format!("naive bias {} vs dml {}", naive.bias, d.bias));
    check(&mut failures, controls.coverage < 0.80, format!("ols_controls coverage {}", controls.coverage));
    check(&mut failures, d.coverage >= 0.90, format!("dml coverage {}", d.coverage));
    verdict(
        4,
        "OLS bias exceeds DML bias",
        start,
        &failures,
        &format!(
            "bias naive {:+.3} dml {:+.3}; coverage controls {:.2} dml {:.2}",
            naive.bias, d.bias, controls.coverage, d.coverage
        ),
    );
}

fn split(feature: usize, threshold: f64, left: usize, right: usize) -> TreeNode {
    TreeNode::Split {
        feature,
        threshold,
        left,
        right,
        cover: 0.0,
        value: 0.0,
        gain: 0.0,
    }
}

fn leaf() -> TreeNode {
    TreeNode::Leaf { value: 0.0, cover: 0.0 }
}

fn honest(nodes: Vec<TreeNode>, estimate_rows: Vec<u32>, x: &Array2<f64>, y: &[f64], t: &[f64]) -> HonestTree {
    let mut h = HonestTree {
        tree: Tree { nodes },
        split_rows: vec![],
        estimate_rows,
        estimate_leaves: vec![],
        leaf_stats: vec![],
    };
    h.fill_leaf_stats(x.view(), y, t);
    h
}

fn model(trees: Vec<HonestTree>, n: usize, p: usize, y: Vec<f64>, t: Vec<f64>) -> CausalForestModel {
    CausalForestModel {
        format_version: FOREST_FORMAT_VERSION,
        params: ForestParams::new(2, 0),
        n,
        n_features: p,
        y_resid: y,
        t_resid: t,
        trees,
        bags: vec![vec![]],
    }
}

#[test]
fn c05_forest_weights_equal_dense_wls() {
    let start = Instant::now();
    let n = 20;
    let mut r = rng::rng(5);
    let x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { (i % 5) as f64 } else { (i / 5) as f64 });
    let t: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    let y: Vec<f64> = t.iter().map(|v| 1.5 * v + r.random::<f64>()).collect();

    // tree A: x0 <= 1.5 | (x1 <= 2 | else); tree B: x1 <= 1 | else
    let rows_a: Vec<u32> = (0..n as u32).filter(|i| i % 2 == 0).collect();
    let rows_b: Vec<u32> = (0..n as u32).filter(|i| i % 3 != 1).collect();
    let a = honest(vec![split(0, 1.5, 1, 2), leaf(), split(1, 2.0, 3, 4), leaf(), leaf()], rows_a.clone(), &x, &y, &t);
    let b = honest(vec![split(1, 1.0, 1, 2), leaf(), leaf()], rows_b.clone(), &x, &y, &t);
    let m = model(vec![a, b], n, 2, y.clone(), t.clone());

    let leaf_a = |q: &[f64]| if q[0] <= 1.5 { 0 } else if q[1] <= 2.0 { 1 } else { 2 };
    let leaf_b = |q: &[f64]| usize::from(q[1] > 1.0);
    let mut failures = Vec::new();
    let queries = [[0.0, 0.0], [1.0, 3.0], [2.0, 0.5], [4.0, 2.0], [3.0, 3.5], [-1.0, 10.0]];
    for q in queries {
        // dense membership of each estimation row in the query's leaf
        let mut w = vec![0.0; n];
        let same_a = |i: usize| leaf_a(x.row(i).as_slice().unwrap()) == leaf_a(&q);
        let same_b = |i: usize| leaf_b(x.row(i).as_slice().unwrap()) == leaf_b(&q);
        for (rows, same) in [(&rows_a, &same_a as &dyn Fn(usize) -> bool), (&rows_b, &same_b)] {
            let members: Vec<usize> = rows.iter().map(|&i| i as usize).filter(|&i| same(i)).collect();
            for &i in &members {
                w[i] += 0.5 / members.len() as f64;
            }
        }
        // weighted least squares of y on (1, t)
        let mut xtx = Matrix2::zeros();
        let mut xty = Vector2::zeros();
        for i in 0..n {
            let z = Vector2::new(1.0, t[i]);
            xtx += w[i] * z * z.transpose();
            xty += w[i] * y[i] * z;
        }
        let beta = xtx.lu().solve(&xty).unwrap();
        let c = m.estimate_cate(&q).unwrap();
        let gap = (c.tau - beta[1]).abs();
        check(&mut failures, gap <= 1e-12, format!("query {q:?}: tau {} vs dense {} ({gap:e})", c.tau, beta[1]));
        let fw = m.forest_weights(&q).unwrap();
        let wgap = fw.iter().zip(&w).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        check(&mut failures, wgap <= 1e-12, format!("query {q:?}: weights differ by {wgap:e}"));
    }

    let tiny_x = Array2::zeros((3, 1));
    let (ty, tt) = (vec![0.0, 2.0, 4.0], vec![0.0, 1.0, 2.0]);
    let single = honest(vec![leaf()], vec![0, 1, 2], &tiny_x, &ty, &tt);
    let hand = model(vec![single], 3, 1, ty, tt);
    let tau = hand.estimate_cate(&[0.0]).unwrap().tau;
    check(&mut failures, tau == 2.0, format!("hand example tau {tau}"));
    verdict(5, "forest-weight CATE equals dense WLS", start, &failures, &format!("{} queries, hand tau {tau}", queries.len()));
}

#[test]
fn c06_causal_forest_recovery() {
    let start = Instant::now();
    let centering = LearnerSpec::new(LearnerKind::GbtDepthwise, 0);
    let params = ForestParams::new(500, 1);
    let mut failures = Vec::new();

    let hom = gen_plr(&DgpSpec::plr(2000, 1.5, OutcomeForm::SineInteraction, TreatmentForm::Logistic, 100)).unwrap();
    let run = run_forest(hom.x.view(), &hom.y, &hom.t, &params, &centering, 5).unwrap();
    let taus: Vec<f64> = run.cates.iter().filter(|c| c.defined).map(|c| c.tau).collect();
    let mad = taus.iter().map(|t| (t - 1.5).abs()).sum::<f64>() / taus.len() as f64;
    let ate = run.ate.theta;
    check(&mut failures, (1.2..=1.8).contains(&ate), format!("ATE {ate}"));
    check(&mut failures, mad <= 0.3, format!("mean |tau - 1.5| = {mad}"));

    let spec = DgpSpec {
        effect: Effect::Linear { a: 0.0, b: 1.0 },
        ..DgpSpec::plr(2000, 0.0, OutcomeForm::SineInteraction, TreatmentForm::Randomized, 200)
    };
    let het = gen_hetero(&spec).unwrap();
    let run = run_forest(het.x.view(), &het.y, &het.t, &params, &centering, 5).unwrap();
    let (tau, x1): (Vec<f64>, Vec<f64>) = run
        .cates
        .iter()
        .zip(het.x.column(0))
        .filter(|(c, _)| c.defined)
        .map(|(c, x)| (c.tau, *x))
        .unzip();
    let rho = spearman(&tau, &x1).unwrap().unwrap_or(f64::NAN);
    check(&mut failures, rho >= 0.5, format!("Spearman {rho}"));
    verdict(
        6,
        "causal forest recovery",
        start,
        &failures,
        &format!("homogeneous ATE {ate:.3}, mean abs error {mad:.3}; Spearman {rho:.3}"),
    );
}

#[test]
fn c07_honesty() {
    let start = Instant::now();
    let n = 600;
    let mut r = rng::rng(70);
    let x: Array2<f64> = Array2::from_shape_fn((n, 4), |_| StandardNormal.sample(&mut r));
    let t: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let e: f64 = StandardNormal.sample(&mut r);
            3.0 * x[[i, 0]].signum() * t[i] + x[[i, 1]] + e
        })
        .collect();
    let params = ForestParams {
        min_leaf: 5,
        mtry: Some(4),
        ..ForestParams::new(40, 7)
    };
    let m = fit_forest(x.view(), y.clone(), t.clone(), &params).unwrap();
    let mut failures = Vec::new();
    let mut split_trees = 0;
    for (b, tree) in m.trees.iter().enumerate() {
        split_trees += usize::from(tree.tree.nodes.len() > 1);
        let mut poisoned = y.clone();
        for &j in &tree.split_rows {
            poisoned[j as usize] = 1e9 * (1.0 + j as f64);
        }
        let mut again = tree.clone();
        again.fill_leaf_stats(x.view(), &poisoned, &t);
        let same = serde_json::to_string(&again.leaf_stats).unwrap() == serde_json::to_string(&tree.leaf_stats).unwrap();
        check(&mut failures, same, format!("tree {b}: leaf statistics moved"));
        // control: poisoning an estimation row must move them
        let mut control = y.clone();
        control[tree.estimate_rows[0] as usize] += 1.0;
        let mut moved = tree.clone();
        moved.fill_leaf_stats(x.view(), &control, &t);
        check(&mut failures, moved.leaf_stats != tree.leaf_stats, format!("tree {b}: control did not move"));
    }
    verdict(7, "honest leaves ignore splitting rows", start, &failures, &format!("{} trees, {split_trees} with splits", m.trees.len()));
}

#[test]
fn c08_robustness_screen() {
    let start = Instant::now();
    let n = 1000;
    let learners: Vec<LearnerSpec> = LearnerKind::ALL.iter().map(|&k| LearnerSpec::new(k, 0)).collect();
    let (mut real_ok, mut placebo_ok) = (0, 0);
    let seeds = 20;
    for s in 0..seeds {
        let mut r = rng::rng(rng::derive(77, s));
        let x = Array2::from_shape_fn((n, 5), |_| StandardNormal.sample(&mut r));
        let (mut t1, mut t2, mut y) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let row = x.row(i).to_vec();
            let (e1, e2, e): (f64, f64, f64) = (
                StandardNormal.sample(&mut r),
                StandardNormal.sample(&mut r),
                StandardNormal.sample(&mut r),
            );
            t1[i] = treatment_nuisance(TreatmentForm::Linear, &row) + e1;
            t2[i] = e2;
            y[i] = -2.0 * t1[i] + outcome_nuisance(OutcomeForm::SineInteraction, &row) + e;
        }
        let treatments = vec![("real".to_string(), t1), ("placebo".to_string(), t2)];
        let data = ScreenData {
            y: &y,
            treatments: &treatments,
            x: x.view(),
            rotate_treatments: true,
        };
        let m = robustness_screen(&data, &learners, 5, 1, 0.05, s).unwrap();
        real_ok += usize::from(m.verdict("real") == Some(Verdict::RobustNegative));
        placebo_ok += usize::from(m.verdict("placebo") == Some(Verdict::NotRobust));
    }
    let mut failures = Vec::new();
    check(&mut failures, real_ok >= 18, format!("robust_negative in {real_ok}/{seeds}"));
    check(&mut failures, placebo_ok >= 18, format!("placebo not_robust in {placebo_ok}/{seeds}"));
    verdict(8, "robustness screen verdicts", start, &failures, &format!("real {real_ok}/{seeds}, placebo {placebo_ok}/{seeds}"));
}

#[test]
fn c09_data_pipeline_oracles() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut r = rng::rng(9);

    // assignment against a scan of every cell
    let extent = Rect::new(-500.0, 250.0, 9300.0, 7100.0);
    let (spec, mut cells) = build_grid(extent, 1000.0, None).unwrap();
    let crashes: Vec<CrashRecord> = (0..1000)
        .map(|k| {
            // a tenth of the points land on grid lines, some outside
            let snap = k % 10 == 0;
            let mut px = -800.0 + r.random::<f64>() * 10_400.0;
            let mut py = 0.0 + r.random::<f64>() * 7_400.0;
            if snap {
                px = -500.0 + 1000.0 * (px / 1000.0).round();
                py = 250.0 + 1000.0 * (py / 1000.0).round();
            }
            CrashRecord {
                location: ProjectedPoint::new(px, py),
                category: CrashCategory::ALL[k % CrashCategory::ALL.len()],
                year: 2020,
            }
        })
        .collect();
    let diag = assign_crashes(&crashes, &spec, &mut cells);
    let mut brute = vec![0u64; cells.len()];
    let mut outside = 0;
    for c in &crashes {
        let (px, py) = (c.location.x, c.location.y);
        let hits: Vec<usize> = cells
            .iter()
            .enumerate()
            .filter(|(_, cell)| {
                let b = &cell.bounds;
                px >= b.min_x && px < b.max_x && py >= b.min_y && py < b.max_y
            })
            .map(|(i, _)| i)
            .collect();
        check(&mut failures, hits.len() <= 1, format!("point ({px}, {py}) in {} cells", hits.len()));
        match hits.first() {
            Some(&i) => brute[i] += 1,
            None => outside += 1,
        }
    }
    let counts: Vec<u64> = cells.iter().map(|c| c.crash_count).collect();
    check(&mut failures, counts == brute, "cell counts differ from the scan");
    check(&mut failures, diag.outside == outside, format!("outside {} vs {outside}", diag.outside));

    let h = visual_entropy(&[1.0 / 18.0; 18]).unwrap();
    check(&mut failures, (h - 18f64.log2()).abs() <= 1e-12, format!("uniform entropy {h}"));

    // two tracts each half inside the middle cell
    let (g, _) = build_grid(Rect::new(-2000.0, 0.0, 4000.0, 2000.0), 2000.0, None).unwrap();
    let tract = |id: &str, rect: Rect, pop: f64, v: f64| TractRecord {
        id: id.into(),
        polygons: vec![Polygon::from_rect(&rect)],
        population: pop,
        attributes: [("poverty".to_string(), v)].into(),
    };
    let pair = [
        tract("a", Rect::new(-2000.0, 0.0, 2000.0, 2000.0), 100.0, 10.0),
        tract("b", Rect::new(0.0, 0.0, 4000.0, 2000.0), 300.0, 20.0),
    ];
    let (rows, _) = areal_weight_tracts(&pair, &g);
    let mid = rows.iter().find(|c| c.cell_id == 1).unwrap();
    check(&mut failures, mid.values["poverty"] == Some(17.5), format!("hand example {:?}", mid.values["poverty"]));

    let gap = areal_monte_carlo(&mut r);
    check(&mut failures, gap <= 0.5, format!("Monte Carlo gap {gap} pp"));
    verdict(9, "data pipeline oracles", start, &failures, &format!("1000 points, entropy {h:.12}, areal 17.5, Monte Carlo gap {gap:.3} pp"));
}

/// Largest per-cell difference, in percentage points, between areal
/// weighting and 1e5 uniformly scattered residents per tract.
fn areal_monte_carlo(r: &mut impl Rng) -> f64 {
    let (g, _) = build_grid(Rect::new(0.0, 0.0, 6000.0, 4000.0), 1000.0, None).unwrap();
    let quad = |pts: [(f64, f64); 4]| Polygon::new(pts.iter().map(|&(x, y)| ProjectedPoint::new(x, y)).collect());
    let tracts = vec![
        (quad([(0.0, 0.0), (3300.0, 0.0), (2700.0, 2100.0), (0.0, 1800.0)]), 1200.0, 12.0),
        (quad([(3300.0, 0.0), (6000.0, 0.0), (6000.0, 2500.0), (2700.0, 2100.0)]), 800.0, 31.0),
        (quad([(0.0, 1800.0), (2700.0, 2100.0), (3100.0, 4000.0), (0.0, 4000.0)]), 2500.0, 7.5),
        (quad([(2700.0, 2100.0), (6000.0, 2500.0), (6000.0, 4000.0), (3100.0, 4000.0)]), 400.0, 54.0),
    ];
    let records: Vec<TractRecord> = tracts
        .iter()
        .enumerate()
        .map(|(k, (poly, pop, v))| TractRecord {
            id: format!("t{k}"),
            polygons: vec![poly.clone()],
            population: *pop,
            attributes: [("poverty".to_string(), *v)].into(),
        })
        .collect();
    let (rows, _) = areal_weight_tracts(&records, &g);
    let n_cells = g.full_len();
    let (mut num, mut den) = (vec![0.0; n_cells], vec![0.0; n_cells]);
    for (poly, pop, v) in &tracts {
        let bb = poly.bbox();
        let weight = pop / 1e5;
        let mut placed = 0;
        while placed < 100_000 {
            let p = ProjectedPoint::new(
                bb.min_x + r.random::<f64>() * bb.width(),
                bb.min_y + r.random::<f64>() * bb.height(),
            );
            if !poly.contains(p) {
                continue;
            }
            placed += 1;
            if let Some(id) = g.locate(p) {
                num[id as usize] += weight * v;
                den[id as usize] += weight;
            }
        }
    }
    rows.iter()
        .map(|c| {
            let i = c.cell_id as usize;
            (c.values["poverty"].unwrap() - num[i] / den[i]).abs()
        })
        .fold(0.0, f64::max)
}

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy/config.json")
}

#[test]
fn c10_toy_pipeline_determinism() {
    let start = Instant::now();
    let cfg = RunConfig::load(&toy_config()).unwrap();
    let stages: Vec<Stage> = pipeline::full_run(&cfg);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (dir, threads) in dirs.iter().zip([1, 4]) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| pipeline::execute(&cfg, dir.path(), &stages))
            .unwrap();
    }
    let mut failures = Vec::new();
    for name in [ESTIMATES, CATE_CSV] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        check(&mut failures, a == b, format!("{name} differs between 1 and 4 threads"));
    }
    verdict(10, "toy pipeline determinism", start, &failures, "estimates.json and cate.csv byte-identical across 1 and 4 threads");
}
