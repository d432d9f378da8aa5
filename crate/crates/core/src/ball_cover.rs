//! Random almost-coverings by separated quasimetric balls.
//!
//! Balls live in the original quasimetric of the cloud. Every stage builds a
//! pair of nested nets on the points still available, promotes each coarse
//! centre to a random child, drops conflicting promotions and draws a common
//! radius factor `tau` uniform on `[1, 2]`. The `(1 + omega)` enlargements of
//! the balls are then removed before the next stage, `s` generations finer.

use serde::{Deserialize, Serialize};

use crate::dyadic::greedy_net;
use crate::error::{Error, Result};
use crate::rng::{keyed_index, keyed_uniform, stream, trial_seed};
use crate::space::{validate_quasimetric, PointCloud, QuasiCertificate};
use crate::stats::Proportion;

/// Buffer probability per unit of `omega` under a uniform radius factor.
pub const BUFFER_SLOPE: f64 = 4.0;
/// Largest exponent tried on the `omega = 2^-j` grid.
const OMEGA_GRID_MAX: i32 = 60;
/// Fewest trials accepted by the coverage estimators.
pub const MIN_COVER_TRIALS: usize = 1000;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CoverParams {
    pub theta: f64,
    pub upsilon: f64,
    pub a0: f64,
    pub pi0: f64,
    pub omega: f64,
    pub eta0: f64,
    pub eps_reg: f64,
    /// `max(A(eps_reg), 1)`.
    pub a_eps: f64,
    /// Generation step between stages.
    pub s: u32,
    /// Number of stages.
    pub stages: usize,
}

impl CoverParams {
    /// `c(omega)` times `theta^g` bounds the gap between balls of different
    /// stages whose coarser one has generation `g`.
    pub fn cross_coefficient(&self) -> f64 {
        (self.omega / 3.0) / ((1.0 + self.eps_reg) * self.a_eps) * self.radius_unit()
    }

    /// Same-stage gap coefficient.
    pub fn same_coefficient(&self) -> f64 {
        0.125 * self.a0.powi(-4)
    }

    /// Radius of a ball of generation `g` is `tau * radius_unit() * theta^g`.
    pub fn radius_unit(&self) -> f64 {
        self.a0.powi(-4) / 32.0
    }

    /// Re-evaluates the four defining inequalities.
    pub fn inequalities(&self) -> [(&'static str, bool); 4] {
        let (p, e) = (self.pi0, self.eta0);
        let target = (1.0 - self.upsilon) / (1.0 - self.upsilon / 2.0);
        [
            ("pi0 / (pi0 + eta0) >= 1 - upsilon/2", p / (p + e) >= 1.0 - self.upsilon / 2.0),
            ("1 - (1 - pi0 - eta0)^M > (1 - upsilon)/(1 - upsilon/2)", 1.0 - miss(p, e).powi(self.stages as i32) > target),
            ("(1 + eps)^2 < 1 + omega/3", (1.0 + self.eps_reg).powi(2) < 1.0 + self.omega / 3.0),
            ("2 A(eps) theta^s < omega/3", 2.0 * self.a_eps * self.theta.powi(self.s as i32) < self.omega / 3.0),
        ]
    }
}

fn miss(pi0: f64, eta0: f64) -> f64 {
    (1.0 - pi0 - eta0).max(0.0)
}

fn check_theta(a0: f64, theta: f64) -> Result<()> {
    let cap = a0.powi(-4) / 32.0;
    if !(theta > 0.0 && theta < cap) {
        return Err(Error::invalid(format!("theta = {theta} must lie in (0, {cap})")));
    }
    Ok(())
}

/// Largest `omega = 2^-j` with `pi0 / (pi0 + 4 omega) >= 1 - upsilon/2`.
fn omega_for(pi0: f64, upsilon: f64) -> Result<f64> {
    (1..=OMEGA_GRID_MAX)
        .map(|j| 0.5f64.powi(j))
        .find(|&w| pi0 / (pi0 + BUFFER_SLOPE * w) >= 1.0 - upsilon / 2.0)
        .ok_or_else(|| Error::infeasible("pi0 / (pi0 + eta0) >= 1 - upsilon/2 has no solution on the omega grid"))
}

/// Parameters for a known lower bound `pi0` on single-stage coverage.
pub fn derive_params_with_pi0(cert: &QuasiCertificate, theta: f64, upsilon: f64, pi0: f64) -> Result<CoverParams> {
    check_theta(cert.a0, theta)?;
    if !(upsilon > 0.0 && upsilon < 1.0) {
        return Err(Error::invalid(format!("upsilon = {upsilon} must lie in (0, 1)")));
    }
    if !(pi0 > 0.0 && pi0 <= 1.0) {
        return Err(Error::infeasible(format!("single-stage coverage bound {pi0} is not positive")));
    }
    let omega = omega_for(pi0, upsilon)?;
    let eta0 = BUFFER_SLOPE * omega;

    let mut table = cert.regularity.clone();
    table.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    let entry = table.iter().find(|e| (1.0 + e.eps).powi(2) < 1.0 + omega / 3.0).ok_or_else(|| {
        let smallest = table.last().map_or(f64::NAN, |e| e.eps);
        Error::infeasible(format!(
            "(1 + eps)^2 < 1 + omega/3 with omega = {omega}: smallest tabulated eps is {smallest}"
        ))
    })?;
    let a_eps = entry.a_eps.max(1.0);
    let mut s = 1u32;
    while 2.0 * a_eps * theta.powi(s as i32) >= omega / 3.0 {
        s += 1;
    }

    let target = (1.0 - upsilon) / (1.0 - upsilon / 2.0);
    let q = miss(pi0, eta0);
    let mut stages = 1usize;
    while 1.0 - q.powi(stages as i32) <= target {
        stages += 1;
    }
    Ok(CoverParams { theta, upsilon, a0: cert.a0, pi0, omega, eta0, eps_reg: entry.eps, a_eps, s, stages })
}

/// Smallest Wilson lower bound, over all points, of the probability of being
/// covered by a single stage at generation `k`.
pub fn pilot_pi0(cloud: &PointCloud, a0: f64, theta: f64, k: i32, trials: usize, seed: u64) -> Result<Proportion> {
    check_theta(a0, theta)?;
    if trials < MIN_COVER_TRIALS {
        return Err(Error::invalid(format!("pilot needs at least {MIN_COVER_TRIALS} trials")));
    }
    let n = cloud.n();
    let all: Vec<usize> = (0..n).collect();
    let mut hits = vec![0u64; n];
    let mut inside = vec![false; n];
    for t in 0..trials {
        let st = sample_stage(cloud, a0, theta, k, &all, trial_seed(seed, t as u64), 0)?;
        inside.iter_mut().for_each(|b| *b = false);
        for b in &st.balls {
            for &y in &b.members {
                inside[y] = true;
            }
        }
        for (h, &i) in hits.iter_mut().zip(&inside) {
            *h += i as u64;
        }
    }
    let worst = hits.iter().copied().min().unwrap_or(0);
    Ok(Proportion::wilson(worst, trials as u64))
}

/// Pilot estimate of `pi0` followed by the parameter search.
pub fn derive_cover_params(
    cloud: &PointCloud,
    cert: &QuasiCertificate,
    theta: f64,
    upsilon: f64,
    k: i32,
    pilot_trials: usize,
    seed: u64,
) -> Result<CoverParams> {
    let pilot = pilot_pi0(cloud, cert.a0, theta, k, pilot_trials, seed)?;
    log::info!("pilot single-stage coverage: {} hits of {}, lower bound {}", pilot.hits, pilot.trials, pilot.ci_lo);
    if pilot.ci_lo <= 0.0 {
        return Err(Error::infeasible("pilot coverage interval contains 0"));
    }
    let pi0 = pilot.ci_lo;
    let mut cert = cert.clone();
    if let Ok(omega) = omega_for(pi0, upsilon) {
        if !cert.regularity.iter().any(|e| (1.0 + e.eps).powi(2) < 1.0 + omega / 3.0) {
            // the tabulated grid is too coarse; scan the first dyadic eps that fits
            if let Some(eps) = (0..64).map(|j| 0.5f64.powi(j)).find(|e| (1.0 + e).powi(2) < 1.0 + omega / 3.0) {
                cert.regularity.extend(validate_quasimetric(cloud, &[eps])?.regularity);
            }
        }
    }
    derive_params_with_pi0(&cert, theta, upsilon, pi0)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Ball {
    pub center: usize,
    pub radius: f64,
    pub stage: usize,
    pub gen: i32,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RandomBallFamily {
    pub k: i32,
    pub balls: Vec<Ball>,
    pub tau: Vec<f64>,
    pub buffer_factor: f64,
    /// Stage at which each point left the working set, if it did.
    pub removed_at: Vec<Option<usize>>,
    /// Ball containing each point.
    pub covered_by: Vec<Option<usize>>,
}

impl RandomBallFamily {
    pub fn covers(&self, x: usize) -> bool {
        self.covered_by[x].is_some()
    }

    /// Whether `x` fell in `(1 + omega) B \ B` for a ball of stage `m`.
    pub fn in_buffer(&self, x: usize, m: usize) -> bool {
        self.removed_at[x] == Some(m) && self.covered_by[x].is_none()
    }

    /// Keeps only the balls meeting `region`.
    pub fn restrict_to(&mut self, region: &[usize]) {
        let mut inside = vec![false; self.covered_by.len()];
        for &x in region {
            inside[x] = true;
        }
        self.balls.retain(|b| b.members.iter().any(|&y| inside[y]));
        self.covered_by.iter_mut().for_each(|c| *c = None);
        for (i, b) in self.balls.iter().enumerate() {
            for &y in &b.members {
                self.covered_by[y] = Some(i);
            }
        }
    }
}

struct Stage {
    tau: f64,
    balls: Vec<Ball>,
}

/// One stage at generation `gen` on the points of `working`.
fn sample_stage(cloud: &PointCloud, a0: f64, theta: f64, gen: i32, working: &[usize], seed: u64, stage: usize) -> Result<Stage> {
    let tol = cloud.tol();
    let scale = theta.powi(gen);
    let coarse = greedy_net(cloud, working, scale);
    let mut in_coarse = vec![false; cloud.n()];
    for &z in &coarse {
        in_coarse[z] = true;
    }
    // fine net seeded with the coarse one so every coarse centre has a child
    let pool: Vec<usize> = coarse.iter().copied().chain(working.iter().copied().filter(|&y| !in_coarse[y])).collect();
    let fine = greedy_net(cloud, &pool, scale * theta);

    let close = scale / (2.0 * a0);
    let mut children = vec![Vec::new(); coarse.len()];
    for &c in &fine {
        let row = cloud.row(c);
        let mut close_hit = None;
        let mut best = (f64::INFINITY, usize::MAX);
        for (a, &z) in coarse.iter().enumerate() {
            let d = row[z];
            if d < close {
                if close_hit.is_some() {
                    return Err(Error::violation("unique close parent", format!("gen = {gen}, point {c}")));
                }
                close_hit = Some(a);
            }
            if d < best.0 {
                best = (d, a);
            }
        }
        let parent = close_hit.unwrap_or(best.1);
        if close_hit.is_none() && best.0 >= scale + tol {
            return Err(Error::violation("parent within loose radius", format!("gen = {gen}, point {c}, nearest at {}", best.0)));
        }
        children[parent].push(c);
    }

    let conflict = scale / (4.0 * a0 * a0) - tol;
    let mut centers: Vec<usize> = Vec::new();
    for (a, ch) in children.iter().enumerate() {
        let y = ch[keyed_index(seed, stream::COVER_ARROW, stage as i64, a as u64, ch.len())];
        let row = cloud.row(y);
        if centers.iter().all(|&c| row[c] >= conflict) {
            centers.push(y);
        }
    }

    let tau = keyed_uniform(seed, stream::TAU, stage as i64, 0, 1.0, 2.0);
    let radius = tau * a0.powi(-4) / 32.0 * scale;
    let balls = centers
        .into_iter()
        .map(|c| {
            let row = cloud.row(c);
            let members = working.iter().copied().filter(|&y| row[y] < radius).collect();
            Ball { center: c, radius, stage, gen, members }
        })
        .collect();
    Ok(Stage { tau, balls })
}

/// The multi-stage family for one seed.
pub fn sample_almost_cover(cloud: &PointCloud, k: i32, params: &CoverParams, seed: u64) -> Result<RandomBallFamily> {
    check_theta(params.a0, params.theta)?;
    let n = cloud.n();
    let mut working: Vec<usize> = (0..n).collect();
    let mut family = RandomBallFamily {
        k,
        balls: Vec::new(),
        tau: Vec::new(),
        buffer_factor: 1.0 + params.omega,
        removed_at: vec![None; n],
        covered_by: vec![None; n],
    };
    for m in 0..params.stages {
        if working.is_empty() {
            break;
        }
        let gen = k + (m as u32 * params.s) as i32;
        let st = sample_stage(cloud, params.a0, params.theta, gen, &working, seed, m)?;
        family.tau.push(st.tau);
        for b in &st.balls {
            let idx = family.balls.len();
            for &y in &b.members {
                family.covered_by[y] = Some(idx);
            }
            let row = cloud.row(b.center);
            let outer = b.radius * family.buffer_factor;
            for &y in &working {
                if row[y] < outer {
                    family.removed_at[y] = Some(m);
                }
            }
            family.balls.push(b.clone());
        }
        working.retain(|&y| family.removed_at[y].is_none());
    }
    Ok(family)
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverReport {
    pub balls: usize,
    /// Smallest ratio of a same-stage gap to its required bound.
    pub same_stage_ratio: f64,
    /// Smallest ratio of a cross-stage gap to its required bound.
    pub cross_stage_ratio: f64,
    pub cross_coefficient: f64,
}

/// Exhaustive scan over all pairs of balls: disjointness, radius formula and
/// both separation bounds.
pub fn verify_cover(cloud: &PointCloud, params: &CoverParams, family: &RandomBallFamily) -> Result<CoverReport> {
    let tol = cloud.tol();
    let unit = params.radius_unit();
    for (i, b) in family.balls.iter().enumerate() {
        let tau = family.tau[b.stage];
        let want = tau * unit * params.theta.powi(b.gen);
        if (b.radius - want).abs() > 1e-12 * want {
            return Err(Error::violation("ball radius", format!("ball {i}: {} vs {want}", b.radius)));
        }
    }
    let mut owner = vec![usize::MAX; cloud.n()];
    for (i, b) in family.balls.iter().enumerate() {
        for &y in &b.members {
            if owner[y] != usize::MAX {
                return Err(Error::violation("disjoint balls", format!("point {y} in balls {} and {i}", owner[y])));
            }
            owner[y] = i;
        }
    }
    let same = params.same_coefficient();
    let cross = params.cross_coefficient();
    let (mut same_ratio, mut cross_ratio) = (f64::INFINITY, f64::INFINITY);
    for (i, a) in family.balls.iter().enumerate() {
        for (j, b) in family.balls.iter().enumerate().skip(i + 1) {
            let gap = a
                .members
                .iter()
                .flat_map(|&x| b.members.iter().map(move |&y| (x, y)))
                .map(|(x, y)| cloud.d(x, y))
                .fold(f64::INFINITY, f64::min);
            let (bound, ratio) = if a.stage == b.stage {
                (same * params.theta.powi(a.gen), &mut same_ratio)
            } else {
                (cross * params.theta.powi(a.gen.min(b.gen)), &mut cross_ratio)
            };
            if gap < bound - tol {
                let what = if a.stage == b.stage { "same-stage separation" } else { "cross-stage separation" };
                return Err(Error::violation(what, format!("balls {i} and {j}: gap {gap} < {bound}")));
            }
            *ratio = ratio.min(gap / bound);
        }
    }
    log::debug!("cross-stage coefficient c(omega) = {cross}");
    Ok(CoverReport { balls: family.balls.len(), same_stage_ratio: same_ratio, cross_stage_ratio: cross_ratio, cross_coefficient: cross })
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverStats {
    /// Frequency of `x` lying in some ball.
    pub coverage: Vec<Proportion>,
    /// Frequency of `x` lying in a buffer annulus, worst stage.
    pub buffer: Vec<Proportion>,
}

/// Per-point coverage and buffer frequencies over `trials` families.
pub fn cover_statistics(cloud: &PointCloud, k: i32, params: &CoverParams, trials: usize, seed: u64) -> Result<CoverStats> {
    if trials < MIN_COVER_TRIALS {
        return Err(Error::invalid(format!("coverage estimates need at least {MIN_COVER_TRIALS} trials")));
    }
    let n = cloud.n();
    let mut covered = vec![0u64; n];
    let mut buffered = vec![vec![0u64; params.stages]; n];
    for t in 0..trials {
        let fam = sample_almost_cover(cloud, k, params, trial_seed(seed, t as u64))?;
        for x in 0..n {
            if fam.covers(x) {
                covered[x] += 1;
            } else if let Some(m) = fam.removed_at[x] {
                buffered[x][m] += 1;
            }
        }
    }
    let tr = trials as u64;
    Ok(CoverStats {
        coverage: covered.iter().map(|&h| Proportion::wilson(h, tr)).collect(),
        buffer: buffered.iter().map(|b| Proportion::wilson(b.iter().copied().max().unwrap_or(0), tr)).collect(),
    })
}

pub fn coverage_probability(cloud: &PointCloud, k: i32, params: &CoverParams, x: usize, trials: usize, seed: u64) -> Result<Proportion> {
    if x >= cloud.n() {
        return Err(Error::invalid(format!("point {x} out of range")));
    }
    if trials < MIN_COVER_TRIALS {
        return Err(Error::invalid(format!("coverage estimates need at least {MIN_COVER_TRIALS} trials")));
    }
    let mut hits = 0u64;
    for t in 0..trials {
        hits += sample_almost_cover(cloud, k, params, trial_seed(seed, t as u64))?.covers(x) as u64;
    }
    Ok(Proportion::wilson(hits, trials as u64))
}
