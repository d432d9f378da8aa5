//! Randomised cube systems obtained by promoting reference centres one level
//! down, and Monte Carlo estimates of their boundary and badness statistics.

use serde::Serialize;

use crate::dyadic::{build_cubes, build_relation, exterior_distance, net_quality, CubeId, DyadicSystem, CHRIST_RULE, REFERENCE_RULE};
use crate::error::{Error, Result};
use crate::rng::{keyed_index, stream, trial_seed};
use crate::space::PointCloud;
use crate::stats::{log_log_slope, Proportion};

/// Conflict radius of promoted centres, as a fraction of `delta^k`.
pub const CONFLICT: f64 = 0.25;
/// Guaranteed covering radius of the surviving centres, in units of `delta^k`.
pub const COVER_BOUND: f64 = 3.0;
/// Covering radius past which a sample is rejected as broken.
pub const COVER_FAIL: f64 = 4.0;
/// Fewest trials accepted by the boundary estimator.
pub const MIN_BOUNDARY_TRIALS: usize = 10_000;

/// Maximal `delta^k`-separated nets with the reference parent rule.
#[derive(Debug, Clone)]
pub struct ReferenceFrame {
    pub delta: f64,
    pub k_min: i32,
    pub levels: Vec<Vec<usize>>,
    pub parents: Vec<Vec<usize>>,
    /// Children of each reference centre, as indices into the next level.
    pub children: Vec<Vec<Vec<usize>>>,
    /// Earlier centres of the same level that a promoted centre may conflict with.
    neighbours: Vec<Vec<Vec<usize>>>,
}

impl ReferenceFrame {
    pub fn new(cloud: &PointCloud, delta: f64) -> Result<Self> {
        let net = crate::dyadic::build_net(cloud, delta, 1.0)?;
        let parents = build_relation(cloud, delta, net.k_min, &net.levels, REFERENCE_RULE)?;
        let depth = net.levels.len();
        let mut children = Vec::with_capacity(depth);
        for i in 0..depth {
            let mut ch = vec![Vec::new(); net.levels[i].len()];
            if i + 1 < depth {
                for (b, &p) in parents[i + 1].iter().enumerate() {
                    ch[p].push(b);
                }
            }
            if let Some(a) = ch.iter().position(|c| c.is_empty()).filter(|_| i + 1 < depth) {
                return Err(Error::violation("reference child", format!("k = {}, alpha = {a} has no child", net.k_min + i as i32)));
            }
            children.push(ch);
        }
        let tol = cloud.tol();
        let neighbours = net
            .levels
            .iter()
            .enumerate()
            .map(|(i, centers)| {
                // a promoted centre moves less than delta^k away from its reference centre
                let reach = (2.0 + CONFLICT) * delta.powi(net.k_min + i as i32) + tol;
                centers
                    .iter()
                    .enumerate()
                    .map(|(a, &z)| (0..a).filter(|&g| cloud.d(z, centers[g]) < reach).collect())
                    .collect()
            })
            .collect();
        Ok(ReferenceFrame { delta, k_min: net.k_min, levels: net.levels, parents, children, neighbours })
    }

    pub fn k_max(&self) -> i32 {
        self.k_min + self.levels.len() as i32 - 1
    }

    fn index(&self, gen: i32) -> usize {
        (gen - self.k_min) as usize
    }
}

/// For every reference centre above the finest level, the index of the
/// child it is promoted to.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrows {
    pub choice: Vec<Vec<usize>>,
}

/// Uniform child choices keyed by `(seed, k, alpha)`.
pub fn draw_arrows(frame: &ReferenceFrame, seed: u64) -> Arrows {
    draw_arrows_from(frame, seed, 0)
}

fn draw_arrows_from(frame: &ReferenceFrame, seed: u64, first: usize) -> Arrows {
    let depth = frame.levels.len();
    let choice = (0..depth.saturating_sub(1))
        .map(|i| {
            if i < first {
                return Vec::new();
            }
            let gen = frame.k_min + i as i32;
            frame.children[i]
                .iter()
                .enumerate()
                .map(|(a, ch)| ch[keyed_index(seed, stream::ARROW, gen as i64, a as u64, ch.len())])
                .collect()
        })
        .collect();
    Arrows { choice }
}

#[derive(Debug, Clone)]
pub struct RandomSystem {
    pub system: DyadicSystem,
    /// Promoted point of every reference centre, per level.
    pub promoted: Vec<Vec<usize>>,
    /// Reference indices that survived conflict removal, per level.
    pub survivors: Vec<Vec<usize>>,
}

/// Promoted centres of one level with conflicts removed greedily in index
/// order. Returns the promoted points and the surviving indices.
fn promote_level(cloud: &PointCloud, frame: &ReferenceFrame, arrows: &Arrows, i: usize) -> (Vec<usize>, Vec<usize>) {
    let last = frame.levels.len() - 1;
    if i == last {
        let all = frame.levels[last].clone();
        return (all.clone(), (0..all.len()).collect());
    }
    let next = &frame.levels[i + 1];
    let promoted: Vec<usize> = arrows.choice[i].iter().map(|&b| next[b]).collect();
    let thr = CONFLICT * frame.delta.powi(frame.k_min + i as i32) - cloud.tol();
    let mut kept = vec![false; promoted.len()];
    let mut survivors = Vec::new();
    for (a, &y) in promoted.iter().enumerate() {
        let row = cloud.row(y);
        if frame.neighbours[i][a].iter().all(|&g| !kept[g] || row[promoted[g]] >= thr) {
            kept[a] = true;
            survivors.push(a);
        }
    }
    (promoted, survivors)
}

/// Cube system from given arrows, built on the levels from generation
/// `from_gen` down to the finest one.
pub fn promote(cloud: &PointCloud, frame: &ReferenceFrame, arrows: &Arrows, from_gen: i32) -> Result<RandomSystem> {
    let first = frame.index(from_gen.clamp(frame.k_min, frame.k_max()));
    let depth = frame.levels.len();
    let mut centers = Vec::with_capacity(depth - first);
    let mut promoted = Vec::with_capacity(depth - first);
    let mut survivors = Vec::with_capacity(depth - first);
    for i in first..depth {
        let (p, s) = promote_level(cloud, frame, arrows, i);
        let c: Vec<usize> = s.iter().map(|&a| p[a]).collect();
        if i + 1 < depth {
            let side = frame.delta.powi(frame.k_min + i as i32);
            let (_, cover) = net_quality(cloud, &c);
            if cover >= COVER_FAIL * side {
                return Err(Error::violation("promoted covering", format!("k = {}, radius {cover}", frame.k_min + i as i32)));
            }
        }
        centers.push(c);
        promoted.push(p);
        survivors.push(s);
    }
    let k0 = frame.k_min + first as i32;
    let parents = build_relation(cloud, frame.delta, k0, &centers, CHRIST_RULE)?;
    let system = build_cubes(cloud, frame.delta, k0, centers, parents)?;
    Ok(RandomSystem { system, promoted, survivors })
}

/// A full random cube system for `seed`.
pub fn sample_random_system(cloud: &PointCloud, frame: &ReferenceFrame, seed: u64) -> Result<RandomSystem> {
    promote(cloud, frame, &draw_arrows(frame, seed), frame.k_min)
}

/// Frequency with which the reference centre `(k, alpha)` is promoted to its
/// child `beta` and survives conflict removal.
pub fn promotion_probability(
    cloud: &PointCloud,
    frame: &ReferenceFrame,
    k: i32,
    alpha: usize,
    beta: usize,
    trials: usize,
    seed: u64,
) -> Result<Proportion> {
    if trials < 1000 {
        return Err(Error::invalid("promotion estimates need at least 1000 trials"));
    }
    if k >= frame.k_max() || k < frame.k_min {
        return Err(Error::invalid(format!("generation {k} has no finer reference level")));
    }
    let i = frame.index(k);
    if !frame.children[i].get(alpha).is_some_and(|c| c.contains(&beta)) {
        return Err(Error::invalid(format!("({}, {beta}) is not a child of ({k}, {alpha})", k + 1)));
    }
    let mut hits = 0;
    for t in 0..trials {
        let arrows = draw_arrows_from(frame, trial_seed(seed, t as u64), i);
        if arrows.choice[i][alpha] == beta {
            let (_, surv) = promote_level(cloud, frame, &arrows, i);
            if surv.binary_search(&alpha).is_ok() {
                hits += 1;
            }
        }
    }
    Ok(Proportion::wilson(hits, trials as u64))
}

#[derive(Debug, Clone, Serialize)]
pub struct RandomizationStats {
    /// Smallest lower confidence bound over all reference pairs of the level.
    pub pi0: f64,
    pub pi1: f64,
    /// `ln pi1 / ln delta`.
    pub eta: f64,
}

pub fn randomization_stats(cloud: &PointCloud, frame: &ReferenceFrame, k: i32, trials: usize, seed: u64) -> Result<RandomizationStats> {
    let i = frame.index(k);
    let mut pi0 = 1.0f64;
    for (a, ch) in frame.children[i].iter().enumerate() {
        for &b in ch {
            pi0 = pi0.min(promotion_probability(cloud, frame, k, a, b, trials, seed)?.ci_lo);
        }
    }
    let pi1 = 1.0 - pi0;
    Ok(RandomizationStats { pi0, pi1, eta: pi1.ln() / frame.delta.ln() })
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundaryRow {
    pub eps: f64,
    pub p: Proportion,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundaryReport {
    pub point: usize,
    pub gen: i32,
    pub rows: Vec<BoundaryRow>,
    /// Log-log slope of frequency against `eps`; absent when fewer than two
    /// frequencies are positive.
    pub slope: Option<f64>,
}

/// Frequency, over random systems, that `x` lies within `eps delta^k` of the
/// complement of its generation-`k` cube.
pub fn boundary_probability(
    cloud: &PointCloud,
    frame: &ReferenceFrame,
    x: usize,
    k: i32,
    eps: &[f64],
    trials: usize,
    seed: u64,
) -> Result<BoundaryReport> {
    if trials < MIN_BOUNDARY_TRIALS {
        return Err(Error::invalid(format!("boundary estimates need at least {MIN_BOUNDARY_TRIALS} trials")));
    }
    if let Some(e) = eps.iter().find(|e| !(**e > 0.0) || 500.0 * **e > frame.delta * (1.0 + 1e-12)) {
        return Err(Error::invalid(format!("eps = {e} must satisfy 0 < 500 eps <= delta")));
    }
    if x >= cloud.n() || k < frame.k_min || k > frame.k_max() {
        return Err(Error::invalid("point or generation out of range"));
    }
    let side = frame.delta.powi(k);
    let mut hits = vec![0u64; eps.len()];
    for t in 0..trials {
        let arrows = draw_arrows_from(frame, trial_seed(seed, t as u64), frame.index(k));
        let sys = promote(cloud, frame, &arrows, k)?.system;
        let ext = exterior_distance(cloud, &sys, k, x);
        for (h, e) in hits.iter_mut().zip(eps) {
            if ext <= e * side {
                *h += 1;
            }
        }
    }
    let rows: Vec<BoundaryRow> = eps.iter().zip(&hits).map(|(&e, &h)| BoundaryRow { eps: e, p: Proportion::wilson(h, trials as u64) }).collect();
    let slope = log_log_slope(eps, &rows.iter().map(|r| r.p.freq).collect::<Vec<_>>());
    Ok(BoundaryReport { point: x, gen: k, rows, slope })
}

/// `gamma = alpha / (2 (alpha + dim))`.
pub fn goodness_exponent(alpha: f64, dim: f64) -> f64 {
    alpha / (2.0 * (alpha + dim))
}

/// Distance from every point to the cube `q`.
fn distance_to_cube(cloud: &PointCloud, sys: &DyadicSystem, q: CubeId) -> Vec<f64> {
    let members = sys.members(q);
    (0..cloud.n()).map(|y| cloud.dist_to_set(y, members)).collect()
}

/// Whether `q` is bad: some cube `R` of `other` with `l(Q) <= delta^r l(R)`
/// has both `d(Q, R)` and `d(Q, X \ R)` below `l(Q)^gamma l(R)^(1-gamma)`.
///
/// That happens exactly when the open neighbourhood of `Q` at that radius
/// meets two different cubes of the generation of `R`.
fn bad_given_distances(other: &DyadicSystem, gen: i32, dq: &[f64], order: &[usize], r: i32, gamma: f64) -> bool {
    let top = (gen - r).min(other.k_max());
    for g in other.k_min..=top {
        let t = other.delta.powf(gamma * gen as f64 + (1.0 - gamma) * g as f64);
        let cube_of = &other.level(g).cube_of;
        let mut first = None;
        for &y in order {
            if dq[y] >= t {
                break;
            }
            match first {
                None => first = Some(cube_of[y]),
                Some(c) if c != cube_of[y] => return true,
                _ => {}
            }
        }
    }
    false
}

pub fn is_bad(cloud: &PointCloud, sys: &DyadicSystem, q: CubeId, other: &DyadicSystem, r: i32, gamma: f64) -> bool {
    let dq = distance_to_cube(cloud, sys, q);
    let mut order: Vec<usize> = (0..cloud.n()).collect();
    order.sort_by(|a, b| dq[*a].total_cmp(&dq[*b]));
    bad_given_distances(other, q.gen, &dq, &order, r, gamma)
}

/// Goodness of every cube of `sys` with respect to `other`; `true` is good.
pub fn label_goodness(cloud: &PointCloud, sys: &DyadicSystem, other: &DyadicSystem, r: i32, gamma: f64) -> Vec<Vec<bool>> {
    sys.levels
        .iter()
        .map(|l| (0..l.centers.len()).map(|idx| !is_bad(cloud, sys, CubeId { gen: l.gen, idx }, other, r, gamma)).collect())
        .collect()
}

/// Frequency over random `other` systems that the fixed cube `q` is bad, for
/// each `r`.
pub fn badness_probability(
    cloud: &PointCloud,
    frame: &ReferenceFrame,
    sys: &DyadicSystem,
    q: CubeId,
    rs: &[i32],
    gamma: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<(i32, Proportion)>> {
    if trials == 0 || rs.iter().any(|r| *r < 1) {
        return Err(Error::invalid("badness needs trials > 0 and r >= 1"));
    }
    let dq = distance_to_cube(cloud, sys, q);
    let mut order: Vec<usize> = (0..cloud.n()).collect();
    order.sort_by(|a, b| dq[*a].total_cmp(&dq[*b]));
    let mut hits = vec![0u64; rs.len()];
    for t in 0..trials {
        let other = sample_random_system(cloud, frame, trial_seed(seed, t as u64))?.system;
        for (h, &r) in hits.iter_mut().zip(rs) {
            if bad_given_distances(&other, q.gen, &dq, &order, r, gamma) {
                *h += 1;
            }
        }
    }
    Ok(rs.iter().zip(hits).map(|(&r, h)| (r, Proportion::wilson(h, trials as u64))).collect())
}

/// Exact badness probability by enumerating every arrow configuration.
pub fn badness_probability_exact(
    cloud: &PointCloud,
    frame: &ReferenceFrame,
    sys: &DyadicSystem,
    q: CubeId,
    r: i32,
    gamma: f64,
    max_configs: usize,
) -> Result<f64> {
    let slots: Vec<(usize, usize)> = (0..frame.levels.len().saturating_sub(1))
        .flat_map(|i| (0..frame.levels[i].len()).map(move |a| (i, a)))
        .filter(|&(i, a)| frame.children[i][a].len() > 1)
        .collect();
    let total: f64 = slots.iter().map(|&(i, a)| frame.children[i][a].len() as f64).product();
    if total > max_configs as f64 {
        return Err(Error::invalid(format!("{total} configurations exceed the limit {max_configs}")));
    }
    let dq = distance_to_cube(cloud, sys, q);
    let mut order: Vec<usize> = (0..cloud.n()).collect();
    order.sort_by(|a, b| dq[*a].total_cmp(&dq[*b]));
    let mut arrows = Arrows {
        choice: (0..frame.levels.len().saturating_sub(1)).map(|i| frame.children[i].iter().map(|c| c[0]).collect()).collect(),
    };
    let mut digits = vec![0usize; slots.len()];
    let mut bad = 0usize;
    loop {
        for (s, &(i, a)) in slots.iter().enumerate() {
            arrows.choice[i][a] = frame.children[i][a][digits[s]];
        }
        let other = promote(cloud, frame, &arrows, frame.k_min)?.system;
        if bad_given_distances(&other, q.gen, &dq, &order, r, gamma) {
            bad += 1;
        }
        let mut s = 0;
        loop {
            if s == slots.len() {
                return Ok(bad as f64 / total);
            }
            let (i, a) = slots[s];
            digits[s] += 1;
            if digits[s] < frame.children[i][a].len() {
                break;
            }
            digits[s] = 0;
            s += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::{build_system, verify_system};
    use crate::space::MetricKind;

    fn line(xs: &[f64]) -> PointCloud {
        PointCloud::from_coords(xs.iter().map(|x| vec![*x]).collect(), MetricKind::Euclidean).unwrap()
    }

    fn grid(n: usize) -> PointCloud {
        line(&(0..n).map(|i| i as f64 / n as f64).collect::<Vec<_>>())
    }

    #[test]
    fn reference_centres_all_have_children() {
        let c = grid(300);
        let f = ReferenceFrame::new(&c, 0.25).unwrap();
        for i in 0..f.levels.len() - 1 {
            assert!(f.children[i].iter().all(|ch| !ch.is_empty()));
        }
    }

    #[test]
    fn same_seed_same_system() {
        let c = grid(200);
        let f = ReferenceFrame::new(&c, 0.25).unwrap();
        let a = sample_random_system(&c, &f, 5).unwrap().system;
        let b = sample_random_system(&c, &f, 5).unwrap().system;
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn grid_systems_verify_at_small_delta() {
        let c = grid(1000);
        let f = ReferenceFrame::new(&c, 1e-3).unwrap();
        for s in 0..5 {
            let rs = sample_random_system(&c, &f, s).unwrap();
            verify_system(&c, &rs.system).unwrap();
        }
    }

    #[test]
    fn surviving_centres_are_separated() {
        let c = grid(500);
        let f = ReferenceFrame::new(&c, 0.25).unwrap();
        for s in 0..10 {
            let rs = sample_random_system(&c, &f, s).unwrap();
            for l in &rs.system.levels[..rs.system.levels.len() - 1] {
                let side = 0.25f64.powi(l.gen);
                let (sep, cover) = net_quality(&c, &l.centers);
                assert!(sep >= side / 4.0 - 1e-12, "{sep} vs {side}");
                assert!(cover < COVER_BOUND * side);
            }
        }
    }

    #[test]
    fn two_children_without_conflict_is_half() {
        // at generation 3 the centre 0 has the two children 0 and 0.01
        let c = line(&[0.0, 0.01, 1.0]);
        let f = ReferenceFrame::new(&c, 0.25).unwrap();
        let i = (3 - f.k_min) as usize;
        assert_eq!(f.children[i][0].len(), 2);
        let p = promotion_probability(&c, &f, 3, 0, f.children[i][0][1], 20_000, 3).unwrap();
        assert!(p.ci_lo <= 0.5 && 0.5 <= p.ci_hi, "{p:?}");
    }

    #[test]
    fn boundary_preconditions() {
        let c = grid(100);
        let f = ReferenceFrame::new(&c, 1e-3).unwrap();
        assert!(boundary_probability(&c, &f, 3, 0, &[1e-3], 10_000, 1).is_err());
        assert!(boundary_probability(&c, &f, 3, 0, &[1e-6], 100, 1).is_err());
    }

    #[test]
    fn exact_badness_matches_monte_carlo_on_a_tiny_cloud() {
        let c = line(&[
            0.0804, 0.1527, 0.2193, 0.2837, 0.4025, 0.4611, 0.4833, 0.5772, 0.5966, 0.7066,
            0.7106, 0.8748,
        ]);
        let f = ReferenceFrame::new(&c, 0.25).unwrap();
        let d = build_system(&c, 0.25, 0.125, CHRIST_RULE).unwrap();
        let q = CubeId { gen: 3, idx: 4 };
        let gamma = goodness_exponent(1.0, 1.0);
        let exact = badness_probability_exact(&c, &f, &d, q, 1, gamma, 1 << 20).unwrap();
        assert!(exact > 0.0 && exact < 1.0, "{exact}");
        let mc = badness_probability(&c, &f, &d, q, &[1], gamma, 4000, 9).unwrap()[0].1;
        assert!((mc.freq - exact).abs() <= 1.5 * mc.width(), "{exact} vs {mc:?}");
    }
}
