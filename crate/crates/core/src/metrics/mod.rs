//! Agreement metrics between a low-cost series and its reference: Pearson
//! correlation, R², MSE/RMSE and the paired t-test.

mod special;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use special::{ln_gamma, regularized_incomplete_beta, student_t_cdf, student_t_two_sided};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricsError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, found {found}")]
    TooFew { needed: usize, found: usize },
    #[error("series is constant")]
    ConstantSeries,
    #[error("reference series is constant")]
    ConstantTruth,
    #[error("all paired differences are equal; t is undefined")]
    ZeroVariance,
}

fn check(a: &[f64], b: &[f64], needed: usize) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < needed {
        return Err(MetricsError::TooFew { needed, found: a.len() });
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation coefficient.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check(x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ConstantSeries);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Coefficient of determination of `yhat` against the reference `y`. Can be
/// negative when `yhat` is worse than the reference mean.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    check(y, yhat, 2)?;
    let my = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (my - v).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricsError::ConstantTruth);
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mse_rmse(y: &[f64], yhat: &[f64]) -> Result<(f64, f64), MetricsError> {
    check(y, yhat, 1)?;
    let mse = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    Ok((mse, mse.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided p-value; values below 1e-300 are reported as 0.
    pub p: f64,
    pub df: f64,
}

/// Two-sided paired t-test on `a − b` with the Bessel-corrected standard
/// deviation.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricsError> {
    check(a, b, 2)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let md = mean(&d);
    let var = d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sd <= 64.0 * f64::EPSILON * scale || sd == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    let t = md / (sd / n.sqrt());
    let df = n - 1.0;
    let mut p = student_t_two_sided(t, df);
    if p < 1e-300 {
        p = 0.0;
    }
    Ok(TTest { t, p, df })
}

/// Significance marker: `**` for p ≤ 0.001, `*` for p ≤ 0.01, `.` for p ≤ 0.05.
pub fn significance_code(p: f64) -> &'static str {
    if p <= 0.001 {
        "**"
    } else if p <= 0.01 {
        "*"
    } else if p <= 0.05 {
        "."
    } else {
        ""
    }
}

/// Full comparison of predictions against a reference series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub r2: Option<f64>,
    pub mse: f64,
    pub rmse: f64,
    pub pcc: Option<f64>,
    pub t_value: Option<f64>,
    pub p_value: Option<f64>,
}

impl MetricsReport {
    /// Metrics that are undefined for degenerate inputs (constant series,
    /// identical differences) are left empty rather than failing the report.
    pub fn compute(y: &[f64], yhat: &[f64]) -> Result<Self, MetricsError> {
        let (mse, rmse) = mse_rmse(y, yhat)?;
        let t = paired_t_test(yhat, y).ok();
        Ok(MetricsReport {
            n: y.len(),
            r2: r2(y, yhat).ok(),
            mse,
            rmse,
            pcc: pcc(y, yhat).ok(),
            t_value: t.map(|t| t.t),
            p_value: t.map(|t| t.p),
        })
    }

    pub fn significance(&self) -> &'static str {
        self.p_value.map(significance_code).unwrap_or("")
    }
}
