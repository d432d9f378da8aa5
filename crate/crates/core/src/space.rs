//! Finite quasimetric clouds, their certificates, and the snowflake metric
//! used to build cubes on quasimetric input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest cloud accepted by the exhaustive triple scan.
pub const VALIDATION_CAP: usize = 2000;

/// Relative tolerance for every distance comparison.
pub const REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Euclidean,
    Sup,
    Snowflake,
    Explicit,
    Bergman,
}

/// On-disk form of a cloud.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloudSpec {
    pub n: usize,
    pub coords: Option<Vec<Vec<f64>>>,
    pub dist: Option<Vec<Vec<f64>>>,
    pub metric: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

/// A finite set with a symmetric distance matrix.
#[derive(Debug, Clone)]
pub struct PointCloud {
    n: usize,
    coords: Option<Vec<Vec<f64>>>,
    base: Option<Vec<Vec<f64>>>,
    metric: MetricKind,
    beta: Option<f64>,
    dist: Vec<f64>,
    max_dist: f64,
    min_gap: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `||x| - |y|| + |1 - <x, y>/(|x||y|)|` for complex vectors stored as
/// interleaved (re, im) pairs.
pub fn bergman_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (mut re, mut im) = (0.0, 0.0);
    for k in (0..a.len()).step_by(2) {
        // conj(a_k) * b_k
        re += a[k] * b[k] + a[k + 1] * b[k + 1];
        im += a[k] * b[k + 1] - a[k + 1] * b[k];
    }
    let s = na * nb;
    let (re, im) = (1.0 - re / s, -im / s);
    (na - nb).abs() + (re * re + im * im).sqrt()
}

impl PointCloud {
    fn finish(
        n: usize,
        coords: Option<Vec<Vec<f64>>>,
        base: Option<Vec<Vec<f64>>>,
        metric: MetricKind,
        beta: Option<f64>,
        dist: Vec<f64>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("cloud has no points"));
        }
        let mut max_dist = 0.0f64;
        let mut min_gap = f64::INFINITY;
        for i in 0..n {
            if dist[i * n + i] != 0.0 {
                return Err(Error::invalid(format!("nonzero self-distance at point {i}")));
            }
            for j in (i + 1)..n {
                let v = dist[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::invalid(format!("distance ({i}, {j}) = {v} is not a finite nonnegative number")));
                }
                if v == 0.0 {
                    return Err(Error::invalid(format!("points {i} and {j} coincide")));
                }
                max_dist = max_dist.max(v);
                min_gap = min_gap.min(v);
            }
        }
        Ok(PointCloud { n, coords, base, metric, beta, dist, max_dist, min_gap })
    }

    fn check_coords(coords: &[Vec<f64>]) -> Result<usize> {
        let dim = coords.first().map(|c| c.len()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::invalid("coordinates must have positive dimension"));
        }
        for (i, c) in coords.iter().enumerate() {
            if c.len() != dim {
                return Err(Error::invalid(format!("point {i} has dimension {} instead of {dim}", c.len())));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
            }
        }
        Ok(dim)
    }

    fn pairwise(coords: &[Vec<f64>], f: impl Fn(&[f64], &[f64]) -> f64) -> Vec<f64> {
        let n = coords.len();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = f(&coords[i], &coords[j]);
                dist[i * n + j] = v;
                dist[j * n + i] = v;
            }
        }
        dist
    }

    /// Coordinates under the Euclidean, sup, or Bergman distance.
    pub fn from_coords(coords: Vec<Vec<f64>>, metric: MetricKind) -> Result<Self> {
        let dim = Self::check_coords(&coords)?;
        let dist = match metric {
            MetricKind::Euclidean => Self::pairwise(&coords, euclid),
            MetricKind::Sup => Self::pairwise(&coords, sup),
            MetricKind::Bergman => {
                if dim % 2 != 0 {
                    return Err(Error::invalid("bergman coordinates must be (re, im) pairs"));
                }
                for (i, c) in coords.iter().enumerate() {
                    let r = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if r == 0.0 || r > 1.0 + 1e-12 {
                        return Err(Error::invalid(format!("bergman point {i} has modulus {r} outside (0, 1]")));
                    }
                }
                Self::pairwise(&coords, bergman_distance)
            }
            other => return Err(Error::invalid(format!("{other:?} is not a coordinate metric"))),
        };
        Self::finish(coords.len(), Some(coords), None, metric, None, dist)
    }

    /// `|x - y|^beta` on Euclidean coordinates.
    pub fn snowflake_coords(coords: Vec<Vec<f64>>, beta: f64) -> Result<Self> {
        Self::check_beta(beta)?;
        Self::check_coords(&coords)?;
        let dist = Self::pairwise(&coords, |a, b| euclid(a, b).powf(beta));
        Self::finish(coords.len(), Some(coords), None, MetricKind::Snowflake, Some(beta), dist)
    }

    /// `base(x, y)^beta` for an explicit base matrix.
    pub fn snowflake_dist(base: Vec<Vec<f64>>, beta: f64) -> Result<Self> {
        Self::check_beta(beta)?;
        let flat = Self::flatten(&base)?;
        let dist = flat.iter().map(|v| if *v > 0.0 { v.powf(beta) } else { *v }).collect();
        Self::finish(base.len(), None, Some(base), MetricKind::Snowflake, Some(beta), dist)
    }

    /// A user-supplied distance matrix.
    pub fn explicit(dist: Vec<Vec<f64>>) -> Result<Self> {
        let flat = Self::flatten(&dist)?;
        Self::finish(dist.len(), None, None, MetricKind::Explicit, None, flat)
    }

    pub(crate) fn from_flat(n: usize, dist: Vec<f64>) -> Result<Self> {
        Self::finish(n, None, None, MetricKind::Explicit, None, dist)
    }

    fn check_beta(beta: f64) -> Result<()> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::invalid(format!("snowflake power {beta} must be positive")));
        }
        Ok(())
    }

    fn flatten(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = rows.len();
        let mut flat = Vec::with_capacity(n * n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::invalid(format!("distance row {i} has length {} instead of {n}", r.len())));
            }
            flat.extend_from_slice(r);
        }
        let tol = REL_TOL * flat.iter().cloned().fold(0.0, f64::max);
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (flat[i * n + j], flat[j * n + i]);
                if a < 0.0 || b < 0.0 {
                    return Err(Error::invalid(format!("negative distance between {i} and {j}")));
                }
                if (a - b).abs() > tol {
                    return Err(Error::invalid(format!("asymmetric distance between {i} and {j}: {a} vs {b}")));
                }
            }
        }
        Ok(flat)
    }

    pub fn from_spec(spec: &CloudSpec) -> Result<Self> {
        let cloud = match (spec.metric, &spec.coords, &spec.dist) {
            (MetricKind::Explicit, _, Some(d)) => Self::explicit(d.clone())?,
            (MetricKind::Snowflake, Some(c), _) => Self::snowflake_coords(c.clone(), spec.beta.unwrap_or(1.0))?,
            (MetricKind::Snowflake, None, Some(d)) => Self::snowflake_dist(d.clone(), spec.beta.unwrap_or(1.0))?,
            (m, Some(c), _) if m != MetricKind::Explicit => Self::from_coords(c.clone(), m)?,
            (m, _, _) => return Err(Error::invalid(format!("metric {m:?} needs {}", if m == MetricKind::Explicit { "dist" } else { "coords" }))),
        };
        if cloud.n != spec.n {
            return Err(Error::invalid(format!("declared n = {} but {} points given", spec.n, cloud.n)));
        }
        Ok(cloud)
    }

    pub fn to_spec(&self) -> CloudSpec {
        let dist = match self.metric {
            MetricKind::Explicit => Some((0..self.n).map(|i| self.row(i).to_vec()).collect()),
            MetricKind::Snowflake => self.base.clone(),
            _ => None,
        };
        CloudSpec { n: self.n, coords: self.coords.clone(), dist, metric: self.metric, beta: self.beta }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_spec(&serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_spec()).expect("cloud spec serializes")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn d(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.dist[i * self.n..(i + 1) * self.n]
    }

    pub fn coords(&self) -> Option<&[Vec<f64>]> {
        self.coords.as_deref()
    }

    pub fn metric(&self) -> MetricKind {
        self.metric
    }

    pub fn diam(&self) -> f64 {
        self.max_dist
    }

    /// Smallest positive distance; infinite for a singleton.
    pub fn min_gap(&self) -> f64 {
        self.min_gap
    }

    /// Absolute slack used in comparisons at the scale of this cloud.
    pub fn tol(&self) -> f64 {
        REL_TOL * self.max_dist.max(f64::MIN_POSITIVE)
    }

    /// Distance from `x` to a set; infinite for the empty set.
    pub fn dist_to_set(&self, x: usize, set: &[usize]) -> f64 {
        let row = self.row(x);
        set.iter().map(|&y| row[y]).fold(f64::INFINITY, f64::min)
    }

    /// Open ball `{y : d(x, y) < r}` in ascending id order.
    pub fn ball(&self, x: usize, r: f64) -> Vec<usize> {
        self.row(x).iter().enumerate().filter(|(_, d)| **d < r).map(|(y, _)| y).collect()
    }

    /// Indices of row `x` sorted by distance (ties by id).
    pub fn sorted_row(&self, x: usize) -> Vec<usize> {
        let row = self.row(x);
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.sort_by(|a, b| row[*a].total_cmp(&row[*b]).then(a.cmp(b)));
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularityEntry {
    pub eps: f64,
    pub a_eps: f64,
}

/// Constants of a finite quasimetric, all obtained by exhaustive scans.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuasiCertificate {
    pub n: usize,
    pub a0: f64,
    pub regularity: Vec<RegularityEntry>,
    pub doubling_n: usize,
    pub dim: f64,
    pub max_dist: f64,
    pub min_gap: f64,
}

impl QuasiCertificate {
    pub fn is_metric(&self) -> bool {
        self.a0 <= 1.0
    }

    /// Tabulated `A(eps)` for a grid value of `eps`.
    pub fn a_eps(&self, eps: f64) -> Option<f64> {
        self.regularity.iter().find(|e| e.eps == eps).map(|e| e.a_eps)
    }
}

/// `2^-j` for `j = 0..=11`.
pub fn default_eps_grid() -> Vec<f64> {
    (0..12).map(|j| 0.5f64.powi(j)).collect()
}

/// Exhaustive scan over triples of distinct points.
///
/// `a0` is the smallest constant with `d(x,y) <= a0 (d(x,z) + d(z,y))` up to
/// the comparison slack, clamped at 1. Each `A(eps)` is the smallest constant
/// with `d(x,y) <= (1+eps) d(x,z) + A(eps) d(z,y)`, clamped at 0.
pub fn validate_quasimetric(cloud: &PointCloud, eps_grid: &[f64]) -> Result<QuasiCertificate> {
    validate_quasimetric_capped(cloud, eps_grid, VALIDATION_CAP)
}

pub fn validate_quasimetric_capped(cloud: &PointCloud, eps_grid: &[f64], cap: usize) -> Result<QuasiCertificate> {
    let n = cloud.n();
    if n > cap {
        return Err(Error::invalid(format!("cloud of {n} points exceeds the validation cap {cap}")));
    }
    if eps_grid.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::invalid("regularity grid values must be positive"));
    }
    let tol = cloud.tol();
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (cloud.d(i, j), cloud.d(j, i));
            if a < 0.0 || (a - b).abs() > tol {
                return Err(Error::invalid(format!("pair ({i}, {j}) is negative or asymmetric: {a} vs {b}")));
            }
        }
    }
    let onepe: Vec<f64> = eps_grid.iter().map(|e| 1.0 + e).collect();
    let mut a0 = 1.0f64;
    let mut a_eps = vec![0.0f64; eps_grid.len()];
    for x in 0..n {
        let rx = cloud.row(x);
        for y in (x + 1)..n {
            let a = rx[y] - tol;
            if a <= 0.0 {
                continue;
            }
            let ry = cloud.row(y);
            for z in 0..n {
                if z == x || z == y {
                    continue;
                }
                let (b, c) = (rx[z], ry[z]);
                if a > a0 * (b + c) {
                    a0 = a / (b + c);
                }
                if b < a {
                    for (k, ope) in onepe.iter().enumerate() {
                        let num = a - ope * b;
                        if num > a_eps[k] * c {
                            a_eps[k] = num / c;
                        }
                    }
                }
                if c < a {
                    for (k, ope) in onepe.iter().enumerate() {
                        let num = a - ope * c;
                        if num > a_eps[k] * b {
                            a_eps[k] = num / b;
                        }
                    }
                }
            }
        }
    }
    let doubling_n = doubling_constant(cloud);
    Ok(QuasiCertificate {
        n,
        a0,
        regularity: eps_grid.iter().zip(&a_eps).map(|(&eps, &a)| RegularityEntry { eps, a_eps: a }).collect(),
        doubling_n,
        dim: (doubling_n as f64).log2(),
        max_dist: cloud.diam(),
        min_gap: cloud.min_gap(),
    })
}

/// Largest greedy count of `r/2`-balls needed to cover a ball `B(x, r)`, over
/// every centre and radii `min_gap * sqrt(2)^j` up to twice the diameter.
fn doubling_constant(cloud: &PointCloud) -> usize {
    let n = cloud.n();
    if n == 1 {
        return 1;
    }
    let mut radii = Vec::new();
    let mut r = cloud.min_gap();
    while r <= 2.0 * cloud.diam() {
        radii.push(r);
        r *= std::f64::consts::SQRT_2;
    }
    let mut worst = 1;
    let mut covered = vec![false; n];
    for x in 0..n {
        let order = cloud.sorted_row(x);
        let row = cloud.row(x);
        for &r in &radii {
            let mut members: Vec<usize> = order.iter().copied().take_while(|&y| row[y] < r).collect();
            members.sort_unstable();
            for &m in &members {
                covered[m] = false;
            }
            let mut count = 0;
            for &p in &members {
                if covered[p] {
                    continue;
                }
                count += 1;
                let rp = cloud.row(p);
                for &q in &members {
                    if rp[q] < r / 2.0 {
                        covered[q] = true;
                    }
                }
            }
            worst = worst.max(count);
        }
    }
    worst
}

/// The snowflaked path metric together with its comparison constants.
#[derive(Debug, Clone)]
pub struct SnowflakeMetric {
    pub beta: f64,
    pub metric: PointCloud,
    /// `min rho / (2^-beta d^beta)` over pairs; at least 1 when the lower
    /// comparison holds.
    pub lower_slack: f64,
    /// `min 4^beta d^beta / rho` over pairs; at least 1 when the upper
    /// comparison holds.
    pub upper_slack: f64,
}

/// Shortest-path metric on edge weights `rho^(1/beta)` with
/// `beta = log2(3 a0^2)`, checked against `2^-beta d^beta <= rho <= 4^beta d^beta`.
pub fn macias_segovia_metric(cloud: &PointCloud, a0: f64) -> Result<SnowflakeMetric> {
    if !(a0 >= 1.0) {
        return Err(Error::invalid(format!("quasimetric constant {a0} below 1")));
    }
    let n = cloud.n();
    let beta = (3.0 * a0 * a0).log2();
    let inv = 1.0 / beta;
    let mut d: Vec<f64> = (0..n * n).map(|k| cloud.dist[k].powf(inv)).collect();
    for k in 0..n {
        let dk: Vec<f64> = d[k * n..(k + 1) * n].to_vec();
        for i in 0..n {
            let dik = d[i * n + k];
            let row = &mut d[i * n..(i + 1) * n];
            for j in 0..n {
                let via = dik + dk[j];
                if via < row[j] {
                    row[j] = via;
                }
            }
        }
    }
    let (mut lower, mut upper) = (f64::INFINITY, f64::INFINITY);
    let (lo_c, hi_c) = (2f64.powf(-beta), 4f64.powf(beta));
    for i in 0..n {
        for j in (i + 1)..n {
            let rho = cloud.d(i, j);
            let db = d[i * n + j].powf(beta);
            lower = lower.min(rho / (lo_c * db));
            upper = upper.min(hi_c * db / rho);
            if rho < lo_c * db * (1.0 - 1e-9) || rho > hi_c * db * (1.0 + 1e-9) {
                return Err(Error::violation(
                    "snowflake comparison",
                    format!("pair ({i}, {j}): rho = {rho}, d^beta = {db}"),
                ));
            }
        }
    }
    Ok(SnowflakeMetric { beta, metric: PointCloud::from_flat(n, d)?, lower_slack: lower, upper_slack: upper })
}

/// Greedy count, in ascending id order, of points of `B(center, r)` that are
/// pairwise at least `2 alpha r` apart.
pub fn packing_number(cloud: &PointCloud, center: usize, r: f64, alpha: f64) -> usize {
    let sep = 2.0 * alpha * r;
    let tol = cloud.tol();
    let mut kept: Vec<usize> = Vec::new();
    for y in cloud.ball(center, r) {
        let row = cloud.row(y);
        if kept.iter().all(|&k| row[k] >= sep - tol) {
            kept.push(y);
        }
    }
    kept.len()
}
