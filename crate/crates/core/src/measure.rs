//! Discrete measures and upper doubling dominators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::PointCloud;

/// Relative slack when comparing masses and dominator values.
pub const MASS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("measure has no atoms"));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid(format!("weight {i} = {} is not positive", weights[i])));
        }
        Ok(DiscreteMeasure { weights })
    }

    pub fn uniform(n: usize, each: f64) -> Result<Self> {
        Self::new(vec![each; n])
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn mass_of(&self, set: &[usize]) -> f64 {
        set.iter().map(|&i| self.weights[i]).sum()
    }

    /// Mass of the open ball `{y : d(x, y) < r}`.
    pub fn ball_mass(&self, cloud: &PointCloud, x: usize, r: f64) -> f64 {
        cloud.row(x).iter().zip(&self.weights).filter(|(d, _)| **d < r).map(|(_, w)| w).sum()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.weights.iter().map(|w| w * c).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DominatorKind {
    /// `coef * r^exponent`
    Power { coef: f64, exponent: f64 },
    /// `max(depth(x)^m, coef * r^exponent)`
    Boundary { m: f64, coef: f64, exponent: f64, depth: Vec<f64> },
    /// Right-continuous step function per point on a common radius grid.
    Tabulated { radii: Vec<f64>, values: Vec<Vec<f64>> },
}

/// A function `lambda(x, r)` dominating ball masses, with its doubling
/// constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dominator {
    pub kind: DominatorKind,
    pub c_lambda: f64,
}

/// On-disk dominator description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DominatorSpec {
    pub kind: String,
    #[serde(rename = "C", default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub d: Option<f64>,
    #[serde(default)]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<Vec<f64>>>,
}

const C_LAMBDA_FLOOR: f64 = 1.0 + 1e-9;

impl Dominator {
    pub fn power(coef: f64, exponent: f64) -> Result<Self> {
        if !(coef > 0.0 && exponent >= 0.0) {
            return Err(Error::invalid(format!("power dominator needs coef > 0 and exponent >= 0, got {coef}, {exponent}")));
        }
        // a constant dominator doubles with any constant; 2 keeps the dimension at 1
        let c_lambda = if exponent == 0.0 { 2.0 } else { 2f64.powf(exponent).max(C_LAMBDA_FLOOR) };
        Ok(Dominator { kind: DominatorKind::Power { coef, exponent }, c_lambda })
    }

    /// `max((1 - |x|)^m, r^m)` for points of the closed unit ball.
    pub fn bergman(cloud: &PointCloud, m: f64) -> Result<Self> {
        let coords = cloud.coords().ok_or_else(|| Error::invalid("bergman dominator needs coordinates"))?;
        if !(m > 0.0) {
            return Err(Error::invalid("bergman exponent must be positive"));
        }
        let depth = coords.iter().map(|c| (1.0 - c.iter().map(|v| v * v).sum::<f64>().sqrt()).max(0.0)).collect();
        Ok(Dominator {
            kind: DominatorKind::Boundary { m, coef: 1.0, exponent: m, depth },
            c_lambda: 2f64.powf(m).max(C_LAMBDA_FLOOR),
        })
    }

    pub fn tabulated(radii: Vec<f64>, values: Vec<Vec<f64>>, c_lambda: f64) -> Result<Self> {
        if radii.is_empty() || radii.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("tabulated radii must be strictly increasing and nonempty"));
        }
        if values.iter().any(|v| v.len() != radii.len() || v.iter().any(|x| !(*x > 0.0))) {
            return Err(Error::invalid("tabulated values must be positive, one per radius"));
        }
        Ok(Dominator { kind: DominatorKind::Tabulated { radii, values }, c_lambda: c_lambda.max(C_LAMBDA_FLOOR) })
    }

    pub fn from_spec(spec: &DominatorSpec, cloud: &PointCloud) -> Result<Self> {
        match spec.kind.as_str() {
            "power" => Self::power(
                spec.c.ok_or_else(|| Error::invalid("power dominator needs C"))?,
                spec.d.ok_or_else(|| Error::invalid("power dominator needs d"))?,
            ),
            "bergman" => Self::bergman(cloud, spec.m.ok_or_else(|| Error::invalid("bergman dominator needs m"))?),
            "tabulated" => Self::tabulated(
                spec.radii.clone().ok_or_else(|| Error::invalid("tabulated dominator needs radii"))?,
                spec.values.clone().ok_or_else(|| Error::invalid("tabulated dominator needs values"))?,
                spec.c.ok_or_else(|| Error::invalid("tabulated dominator needs C"))?,
            ),
            other => Err(Error::invalid(format!("unknown dominator kind {other:?}"))),
        }
    }

    pub fn to_spec(&self) -> DominatorSpec {
        let mut spec = DominatorSpec { kind: String::new(), c: None, d: None, m: None, radii: None, values: None };
        match &self.kind {
            DominatorKind::Power { coef, exponent } => {
                spec.kind = "power".into();
                spec.c = Some(*coef);
                spec.d = Some(*exponent);
            }
            DominatorKind::Boundary { m, .. } => {
                spec.kind = "bergman".into();
                spec.m = Some(*m);
            }
            DominatorKind::Tabulated { radii, values } => {
                spec.kind = "tabulated".into();
                spec.c = Some(self.c_lambda);
                spec.radii = Some(radii.clone());
                spec.values = Some(values.clone());
            }
        }
        spec
    }

    /// Doubling dimension `log2 C_lambda`.
    pub fn dim(&self) -> f64 {
        self.c_lambda.log2()
    }

    pub fn eval(&self, x: usize, r: f64) -> f64 {
        match &self.kind {
            DominatorKind::Power { coef, exponent } => coef * r.powf(*exponent),
            DominatorKind::Boundary { m, coef, exponent, depth } => depth[x].powf(*m).max(coef * r.powf(*exponent)),
            DominatorKind::Tabulated { radii, values } => {
                let k = radii.partition_point(|g| *g <= r);
                values[x][k.saturating_sub(1)]
            }
        }
    }

    /// The dominator seen through the comparison `rho <= 4^beta d^beta`:
    /// `lambda_d(x, r) = lambda(x, (4 r)^beta)`.
    pub fn on_snowflake(&self, beta: f64) -> Dominator {
        if beta == 1.0 {
            return self.clone();
        }
        let f = 4f64.powf(beta);
        match &self.kind {
            DominatorKind::Power { coef, exponent } => Dominator {
                kind: DominatorKind::Power { coef: coef * f.powf(*exponent), exponent: exponent * beta },
                c_lambda: 2f64.powf(exponent * beta).max(C_LAMBDA_FLOOR),
            },
            DominatorKind::Boundary { m, coef, exponent, depth } => Dominator {
                kind: DominatorKind::Boundary { m: *m, coef: coef * f.powf(*exponent), exponent: exponent * beta, depth: depth.clone() },
                c_lambda: 2f64.powf(exponent * beta).max(C_LAMBDA_FLOOR),
            },
            DominatorKind::Tabulated { radii, values } => Dominator {
                kind: DominatorKind::Tabulated {
                    radii: radii.iter().map(|r| r.powf(1.0 / beta) / 4.0).collect(),
                    values: values.clone(),
                },
                c_lambda: self.c_lambda.powf(beta.ceil()),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DoublingReport {
    pub c_lambda: f64,
    /// `max lambda(x, 2r) / lambda(x, r)` over the grid.
    pub worst_doubling: f64,
    /// `max mu(closed ball) / lambda(x, r)` over the grid.
    pub worst_mass: f64,
}

/// Checks monotonicity, doubling, and majorisation on the radius grid made of
/// every distance from `x` and its double.
///
/// Mass is taken over the closed ball, the right limit of the open ball, so the
/// check also covers every radius between grid points for continuous dominators.
pub fn verify_upper_doubling(cloud: &PointCloud, mu: &DiscreteMeasure, lambda: &Dominator) -> Result<DoublingReport> {
    let n = cloud.n();
    if mu.n() != n {
        return Err(Error::invalid(format!("measure has {} atoms for {n} points", mu.n())));
    }
    let mut worst_doubling = 0.0f64;
    let mut worst_mass = 0.0f64;
    for x in 0..n {
        let order = cloud.sorted_row(x);
        let row = cloud.row(x);
        let mut radii: Vec<f64> = order.iter().skip(1).map(|&y| row[y]).collect();
        radii.extend(order.iter().skip(1).map(|&y| 2.0 * row[y]));
        radii.sort_by(f64::total_cmp);
        radii.dedup();
        let mut prev = 0.0f64;
        for &r in &radii {
            let l = lambda.eval(x, r);
            if !(l > 0.0) || l < prev * (1.0 - MASS_TOL) {
                return Err(Error::violation("monotone dominator", format!("x = {x}, r = {r}")));
            }
            prev = l;
            let ratio = lambda.eval(x, 2.0 * r) / l;
            worst_doubling = worst_doubling.max(ratio);
            if ratio > lambda.c_lambda * (1.0 + MASS_TOL) {
                return Err(Error::violation("doubling", format!("x = {x}, r = {r}, ratio = {ratio}")));
            }
        }
        let sorted: Vec<f64> = order.iter().map(|&y| row[y]).collect();
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(0.0);
        for &y in &order {
            prefix.push(prefix.last().unwrap() + mu.weights[y]);
        }
        for &rr in &radii {
            let closed = prefix[sorted.partition_point(|d| *d <= rr)];
            let ratio = closed / lambda.eval(x, rr);
            worst_mass = worst_mass.max(ratio);
            if ratio > 1.0 + MASS_TOL {
                return Err(Error::violation("mass majorisation", format!("x = {x}, r = {rr}, mass/lambda = {ratio}")));
            }
        }
    }
    Ok(DoublingReport { c_lambda: lambda.c_lambda, worst_doubling, worst_mass })
}

/// Smallest coefficient `c` with closed-ball mass at most `c r^exponent` at
/// every distance from every point.
pub fn fit_power_coefficient(cloud: &PointCloud, mu: &DiscreteMeasure, exponent: f64) -> f64 {
    let n = cloud.n();
    let mut coef = 0.0f64;
    for x in 0..n {
        let order = cloud.sorted_row(x);
        let row = cloud.row(x);
        let mut mass = 0.0;
        let mut k = 0;
        while k < n {
            let r = row[order[k]];
            while k < n && row[order[k]] == r {
                mass += mu.weights[order[k]];
                k += 1;
            }
            if r > 0.0 {
                coef = coef.max(mass / r.powf(exponent));
            }
        }
    }
    coef
}

/// Largest uniform weight whose measure is majorised by `lambda`.
pub fn max_uniform_weight(cloud: &PointCloud, lambda: &Dominator) -> f64 {
    let n = cloud.n();
    let mut best = f64::INFINITY;
    for x in 0..n {
        let order = cloud.sorted_row(x);
        let row = cloud.row(x);
        let mut k = 0;
        while k < n {
            let r = row[order[k]];
            while k < n && row[order[k]] == r {
                k += 1;
            }
            if r > 0.0 {
                best = best.min(lambda.eval(x, r) / k as f64);
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TailBound {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// `A_eps = 2^eps / (2^eps - 1)`.
pub fn tail_constant(eps: f64) -> f64 {
    let t = 2f64.powf(eps);
    t / (t - 1.0)
}

/// Tail sum `sum_{x outside B(c, r)} d(x,c)^-eps w(x) / lambda(c, d(x,c))`
/// against `C_lambda A_eps r^-eps`.
pub fn tail_integral_bound(
    cloud: &PointCloud,
    mu: &DiscreteMeasure,
    lambda: &Dominator,
    center: usize,
    r: f64,
    eps: f64,
) -> Result<TailBound> {
    if !(eps > 0.0) || !(r > 0.0) {
        return Err(Error::invalid("tail bound needs eps > 0 and r > 0"));
    }
    let row = cloud.row(center);
    let lhs: f64 = (0..cloud.n())
        .filter(|&x| row[x] >= r)
        .map(|x| row[x].powf(-eps) * mu.weights[x] / lambda.eval(center, row[x]))
        .sum();
    let rhs = lambda.c_lambda * tail_constant(eps) * r.powf(-eps);
    Ok(TailBound { lhs, rhs, ratio: lhs / rhs })
}

/// Worst tail ratio over every centre and every radius equal to a distance
/// from that centre.
pub fn max_tail_ratio(cloud: &PointCloud, mu: &DiscreteMeasure, lambda: &Dominator, eps: f64) -> (f64, usize, f64) {
    let n = cloud.n();
    let a = tail_constant(eps) * lambda.c_lambda;
    let mut worst = (0.0, 0, 0.0);
    for c in 0..n {
        let order = cloud.sorted_row(c);
        let row = cloud.row(c);
        let terms: Vec<f64> = order
            .iter()
            .map(|&x| if row[x] > 0.0 { row[x].powf(-eps) * mu.weights[x] / lambda.eval(c, row[x]) } else { 0.0 })
            .collect();
        let mut suffix = 0.0;
        for k in (1..n).rev() {
            suffix += terms[k];
            let r = row[order[k]];
            if k > 1 && row[order[k - 1]] == r {
                continue;
            }
            let ratio = suffix / (a * r.powf(-eps));
            if ratio > worst.0 {
                worst = (ratio, c, r);
            }
        }
    }
    worst
}
