//! Small fitting helpers shared by the order and drift checks.

use crate::error::{Error, Result};

/// Least-squares line `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config(format!(
            "linear fit needs two or more paired samples, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|xi| (xi - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("linear fit needs distinct abscissae".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Config("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    Ok(linear_fit(&lx, &ly)?.0)
}

/// `max - min` of a series; zero for an empty one.
pub fn amplitude(series: &[f64]) -> f64 {
    let (lo, hi) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if series.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_exact_lines() {
        let (m, b) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((m - 2.0).abs() < 1e-15 && (b - 1.0).abs() < 1e-15);
        let s = log_log_slope(&[0.1, 0.05, 0.025], &[1e-3, 1.25e-4, 1.5625e-5]).unwrap();
        assert!((s - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(linear_fit(&[1.0], &[1.0]).is_err());
        assert!(linear_fit(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(log_log_slope(&[1.0, 2.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn amplitude_of_series() {
        assert_eq!(amplitude(&[]), 0.0);
        assert_eq!(amplitude(&[0.0, -0.5, 2.0]), 2.5);
    }
}
