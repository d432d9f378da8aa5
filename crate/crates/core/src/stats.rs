//! Binomial confidence intervals and log-log regression.

use serde::Serialize;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Proportion {
    pub hits: u64,
    pub trials: u64,
    pub freq: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Proportion {
    /// Wilson score interval at 95%.
    pub fn wilson(hits: u64, trials: u64) -> Self {
        assert!(trials > 0 && hits <= trials);
        let n = trials as f64;
        let p = hits as f64 / n;
        let z2 = Z95 * Z95;
        let denom = 1.0 + z2 / n;
        let centre = (p + z2 / (2.0 * n)) / denom;
        let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
        Proportion {
            hits,
            trials,
            freq: p,
            ci_lo: (centre - half).max(0.0),
            ci_hi: (centre + half).min(1.0),
        }
    }

    pub fn width(&self) -> f64 {
        self.ci_hi - self.ci_lo
    }
}

/// Ordinary least-squares slope of `ln y` against `ln x` over the points with
/// `y > 0`. `None` when fewer than two such points exist.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_brackets_frequency() {
        let p = Proportion::wilson(30, 100);
        assert!(p.ci_lo < 0.3 && 0.3 < p.ci_hi);
        // statsmodels proportion_confint(30, 100, method="wilson")
        assert!((p.ci_lo - 0.218_948_852_949_327_56).abs() < 1e-12, "{}", p.ci_lo);
        assert!((p.ci_hi - 0.395_848_546_333_466_67).abs() < 1e-12, "{}", p.ci_hi);
    }

    #[test]
    fn wilson_zero_hits() {
        let p = Proportion::wilson(0, 10_000);
        assert_eq!(p.ci_lo, 0.0);
        assert!(p.ci_hi > 0.0 && p.ci_hi < 5e-4);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1e-3, 2e-3, 4e-3, 8e-3];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(0.7)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() - 0.7).abs() < 1e-12);
        assert!(log_log_slope(&xs, &[0.0, 0.0, 0.0, 1.0]).is_none());
    }
}
