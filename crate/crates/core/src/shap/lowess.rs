//! Locally weighted linear regression with tricube weights and bisquare
//! robustness iterations.

use crate::error::{invalid, Result};
use crate::stats;

pub const DEFAULT_FRAC: f64 = 0.3;
pub const DEFAULT_ITERS: usize = 2;

/// Smoothed curve evaluated at every input point, sorted by `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowessCurve {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

fn tricube(u: f64) -> f64 {
    if u < 1.0 {
        let t = 1.0 - u * u * u;
        t * t * t
    } else {
        0.0
    }
}

fn bisquare(u: f64) -> f64 {
    if u.abs() < 1.0 {
        let t = 1.0 - u * u;
        t * t
    } else {
        0.0
    }
}

/// Each fit uses the `floor(frac·n)` nearest points (at least 2). `iters`
/// robustness passes follow the initial fit.
pub fn lowess(x: &[f64], y: &[f64], frac: f64, iters: usize) -> Result<LowessCurve> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(invalid!("lowess frac must lie in (0, 1], got {frac}"));
    }
    if x.len() != y.len() {
        return Err(invalid!("lowess x has {} points, y has {}", x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(invalid!("lowess needs at least 2 points, got {n}"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid!("lowess input contains non-finite values"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let k = ((frac * n as f64 + 1e-10) as usize).clamp(2, n);

    let mut robust = vec![1.0; n];
    let mut fit = vec![0.0; n];
    let mut w = vec![0.0; k];
    for pass in 0..=iters {
        let (mut left, mut right) = (0usize, k);
        for i in 0..n {
            let xi = xs[i];
            while right < n && xi - xs[left] > xs[right] - xi {
                left += 1;
                right += 1;
            }
            let radius = (xi - xs[left]).max(xs[right - 1] - xi);
            let mut total = 0.0;
            for (wj, j) in w.iter_mut().zip(left..right) {
                let kern = if radius > 0.0 { tricube((xs[j] - xi).abs() / radius) } else { 1.0 };
                *wj = kern * robust[j];
                total += *wj;
            }
            if total <= 0.0 {
                fit[i] = ys[i];
                continue;
            }
            let (mut xbar, mut ybar) = (0.0, 0.0);
            for (wj, j) in w.iter_mut().zip(left..right) {
                *wj /= total;
                xbar += *wj * xs[j];
                ybar += *wj * ys[j];
            }
            let mut sxx = 0.0;
            let mut sxy = 0.0;
            for (wj, j) in w.iter().zip(left..right) {
                let dx = xs[j] - xbar;
                sxx += wj * dx * dx;
                sxy += wj * dx * ys[j];
            }
            let span = xs[right - 1] - xs[left];
            fit[i] = if sxx <= 1e-14 * span * span || sxx == 0.0 {
                ybar
            } else {
                ybar + sxy / sxx * (xi - xbar)
            };
        }
        if pass == iters {
            break;
        }
        let resid: Vec<f64> = ys.iter().zip(&fit).map(|(a, b)| a - b).collect();
        let abs: Vec<f64> = resid.iter().map(|r| r.abs()).collect();
        let scale = 6.0 * stats::median(&abs);
        if !(scale > 0.0) {
            break;
        }
        for (rw, r) in robust.iter_mut().zip(&resid) {
            *rw = bisquare(r / scale);
        }
    }
    Ok(LowessCurve { x: xs, y: fit })
}
