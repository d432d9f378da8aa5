//! Deterministic reference instances.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::measure::{fit_power_coefficient, verify_upper_doubling, DiscreteMeasure, Dominator};
use crate::space::{validate_quasimetric, MetricKind, PointCloud};
use crate::tb::{bergman_preset, Kernel, KernelSpec, TbInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Grid1d,
    Grid2dSup,
    Cantor1000,
    SnowflakeHalf,
    Bergman,
}

pub const ALL: [Preset; 5] = [Preset::Grid1d, Preset::Grid2dSup, Preset::Cantor1000, Preset::SnowflakeHalf, Preset::Bergman];

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Grid1d => "grid1d",
            Preset::Grid2dSup => "grid2d_sup",
            Preset::Cantor1000 => "cantor1000",
            Preset::SnowflakeHalf => "snowflake_half",
            Preset::Bergman => "bergman",
        }
    }

    /// Default point count.
    pub fn default_size(self) -> usize {
        match self {
            Preset::Grid1d => 1000,
            Preset::Grid2dSup => 576,
            Preset::Cantor1000 => 64,
            Preset::SnowflakeHalf => 256,
            Preset::Bergman => 300,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL.iter().copied().find(|p| p.name() == s).ok_or_else(|| {
            Error::invalid(format!("unknown preset {s:?}; expected one of grid1d, grid2d_sup, cantor1000, snowflake_half, bergman"))
        })
    }
}

/// `n` points `i / n` of `[0, 1)`.
pub fn grid1d_cloud(n: usize) -> Result<PointCloud> {
    PointCloud::from_coords((0..n).map(|i| vec![i as f64 / n as f64]).collect(), MetricKind::Euclidean)
}

/// `side^2` points of `[0, 1)^2` under the sup distance.
pub fn grid2d_cloud(side: usize) -> Result<PointCloud> {
    let h = 1.0 / side as f64;
    let coords = (0..side * side).map(|k| vec![(k / side) as f64 * h, (k % side) as f64 * h]).collect();
    PointCloud::from_coords(coords, MetricKind::Sup)
}

/// Four branches per level, each level `ratio` times finer: the points
/// `sum_l d_l ratio^l` with digits `d_l` in `0..4`.
pub fn cantor_cloud(levels: u32, ratio: f64) -> Result<PointCloud> {
    let n = 4usize.pow(levels);
    let coords = (0..n)
        .map(|mut k| {
            let mut x = 0.0;
            for l in 0..levels {
                x += (k % 4) as f64 * ratio.powi(l as i32);
                k /= 4;
            }
            vec![x]
        })
        .collect();
    PointCloud::from_coords(coords, MetricKind::Euclidean)
}

/// `|x - y|^2` on the grid `i / n`.
pub fn snowflake_half_cloud(n: usize) -> Result<PointCloud> {
    PointCloud::snowflake_coords((0..n).map(|i| vec![i as f64 / n as f64]).collect(), 2.0)
}

fn power_instance(cloud: PointCloud, exponent: f64, kernel: KernelSpec, a0: f64) -> Result<TbInstance> {
    let n = cloud.n();
    let mu = DiscreteMeasure::uniform(n, 1.0 / n as f64)?;
    let lambda = Dominator::power(fit_power_coefficient(&cloud, &mu, exponent), exponent)?;
    verify_upper_doubling(&cloud, &mu, &lambda)?;
    let one = vec![C64::new(1.0, 0.0); n];
    Ok(TbInstance { cloud, mu, lambda, kernel: Kernel::new(kernel), b1: one.clone(), b2: one, a0: Some(a0) })
}

/// A preset at its default size, or at `size` points where the preset
/// allows it (the 2-D grid rounds down to a square, the Cantor cloud is
/// fixed).
pub fn build(preset: Preset, size: Option<usize>, seed: u64) -> Result<TbInstance> {
    let n = size.unwrap_or(preset.default_size());
    if n < 2 {
        return Err(Error::invalid("presets need at least two points"));
    }
    match preset {
        Preset::Grid1d => power_instance(grid1d_cloud(n)?, 1.0, KernelSpec::Cauchy, 1.0),
        Preset::Grid2dSup => {
            let side = (n as f64).sqrt().floor() as usize;
            power_instance(grid2d_cloud(side)?, 2.0, KernelSpec::NearDiagonal { h: 0.25 }, 1.0)
        }
        Preset::Cantor1000 => {
            let ratio = 1e-3;
            power_instance(cantor_cloud(3, ratio)?, 4f64.ln() / (1.0 / ratio).ln(), KernelSpec::NearDiagonal { h: 1.0 }, 1.0)
        }
        Preset::SnowflakeHalf => {
            let cloud = snowflake_half_cloud(n)?;
            let a0 = validate_quasimetric(&cloud, &[])?.a0;
            power_instance(cloud, 0.5, KernelSpec::NearDiagonal { h: 0.0625 }, a0)
        }
        Preset::Bergman => bergman_preset(1, 1.0, n, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::build_net;

    #[test]
    fn names_round_trip() {
        for p in ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("grid3d".parse::<Preset>().is_err());
    }

    #[test]
    fn cantor_cloud_has_three_scales() {
        let c = cantor_cloud(3, 1e-3).unwrap();
        assert_eq!(c.n(), 64);
        assert!((c.min_gap() - 1e-6).abs() < 1e-15);
        assert!((c.diam() - 3.003003).abs() < 1e-12);
        let net = build_net(&c, 1e-3, 1.0).unwrap();
        let sizes: Vec<usize> = net.levels.iter().map(|l| l.len()).collect();
        // one centre, then the 4, 16 and 64 clusters of the three scales
        let nontrivial = sizes.iter().filter(|&&s| s > 1 && s < 64).count();
        assert!(nontrivial >= 2, "{sizes:?}");
        assert_eq!(*sizes.last().unwrap(), 64);
    }

    #[test]
    fn presets_are_deterministic_and_doubling() {
        for p in ALL {
            let size = match p {
                Preset::Grid1d => Some(200),
                Preset::Grid2dSup => Some(100),
                Preset::SnowflakeHalf => Some(64),
                Preset::Bergman => Some(80),
                Preset::Cantor1000 => None,
            };
            let a = build(p, size, 3).unwrap();
            let b = build(p, size, 3).unwrap();
            assert_eq!(a.mu.weights, b.mu.weights);
            assert_eq!(a.cloud.to_json(), b.cloud.to_json());
            verify_upper_doubling(&a.cloud, &a.mu, &a.lambda).unwrap();
        }
        let g = build(Preset::Grid1d, Some(1000), 0).unwrap();
        assert_eq!(g.cloud.n(), 1000);
        match g.lambda.kind {
            crate::measure::DominatorKind::Power { coef, exponent } => {
                assert_eq!(exponent, 1.0);
                assert!((coef - 3.0).abs() < 1e-9, "{coef}");
            }
            _ => panic!("grid dominator should be a power"),
        }
        let s = build(Preset::SnowflakeHalf, Some(64), 0).unwrap();
        assert!((s.a0.unwrap() - 2.0).abs() < 1e-6 && s.a0.unwrap() <= 2.0 + 1e-9);
    }
}
