//! LOWESS against a reference fit (frac 0.3, two robustness passes, no
//! interpolation shortcut) frozen in `fixtures/lowess_step.csv`.

use std::path::Path;

use causalgrid::shap::lowess;

#[test]
fn noisy_step_matches_reference() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/lowess_step.csv");
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let (mut x, mut y, mut want) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let v: Vec<f64> = rec.iter().map(|s| s.parse().unwrap()).collect();
        x.push(v[0]);
        y.push(v[1]);
        want.push(v[2]);
    }
    let curve = lowess(&x, &y, 0.3, 2).unwrap();
    assert_eq!(curve.x, x);
    for (i, (got, w)) in curve.y.iter().zip(&want).enumerate() {
        assert!((got - w).abs() < 1e-9, "point {i}: {got} vs {w}");
    }
}
