//! Net hierarchies, parent relations, and the half-open cubes they induce.
//!
//! A cube of generation `k` is the set of points whose chain of parents,
//! started at the bottom level where every point is its own centre, passes
//! through the given level-`k` centre.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::PointCloud;

/// Diameter constant: `diam Q < C0 delta^k`.
pub const C0: f64 = 10.0;
/// Inner ball constant: `B(x_Q, C1 delta^k)` lies in `Q`.
pub const C1: f64 = 0.01;
/// Covering constant of the cube centres.
pub const C3: f64 = 4.0;
/// Outer ball radius factor: `Q` lies in `B(x_Q, 5 delta^k)`.
pub const OUTER: f64 = 5.0;
/// Largest `delta` for which the structural properties are proven.
pub const PROVEN_DELTA: f64 = 1e-3;

/// How a centre picks its parent one level up: the unique centre closer than
/// `close * delta^(k-1)` if there is one, otherwise the nearest centre, which
/// must lie closer than `loose * delta^(k-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationRule {
    pub close: f64,
    pub loose: f64,
}

/// Thresholds for cube systems built from `delta^k / 8`-separated nets.
pub const CHRIST_RULE: RelationRule = RelationRule { close: 1.0 / 16.0, loose: 4.0 };
/// Thresholds for the maximal `delta^k`-separated reference nets.
pub const REFERENCE_RULE: RelationRule = RelationRule { close: 0.5, loose: 1.0 };

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetHierarchy {
    pub delta: f64,
    pub sep_factor: f64,
    pub k_min: i32,
    /// Centre point ids per level, ascending.
    pub levels: Vec<Vec<usize>>,
    /// Smallest distance between two centres of a level (infinite if one).
    pub separation: Vec<f64>,
    /// Largest distance from a point to its nearest centre.
    pub covering: Vec<f64>,
}

impl NetHierarchy {
    pub fn k_max(&self) -> i32 {
        self.k_min + self.levels.len() as i32 - 1
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 0.25) {
        return Err(Error::invalid(format!("delta = {delta} must lie in (0, 1/4]")));
    }
    if delta > PROVEN_DELTA {
        log::warn!("delta = {delta} exceeds {PROVEN_DELTA}; cube properties are checked, not guaranteed");
    }
    Ok(())
}

/// Coarsest level with a single centre and finest level where every point is
/// a centre, for nets separated at `sep_factor * delta^k`.
pub fn level_range(cloud: &PointCloud, delta: f64, sep_factor: f64) -> (i32, i32) {
    if cloud.n() == 1 {
        return (0, 0);
    }
    let tol = cloud.tol();
    let diam = cloud.diam();
    let mut k_min = ((diam / sep_factor).ln() / delta.ln()).floor() as i32;
    while sep_factor * delta.powi(k_min) <= diam + tol {
        k_min -= 1;
    }
    while sep_factor * delta.powi(k_min + 1) > diam + tol {
        k_min += 1;
    }
    let mut k_max = k_min;
    while delta.powi(k_max) >= cloud.min_gap() + tol {
        k_max += 1;
    }
    (k_min, k_max)
}

/// Greedy maximal separated subset of `pool` in the order given.
pub fn greedy_net(cloud: &PointCloud, pool: &[usize], sep: f64) -> Vec<usize> {
    let tol = cloud.tol();
    if sep <= cloud.min_gap() + tol {
        return pool.to_vec();
    }
    let mut kept: Vec<usize> = Vec::new();
    for &y in pool {
        let row = cloud.row(y);
        if kept.iter().all(|&c| row[c] >= sep - tol) {
            kept.push(y);
        }
    }
    kept
}

/// Greedy maximal `sep_factor * delta^k`-separated sets in ascending id order.
pub fn build_net(cloud: &PointCloud, delta: f64, sep_factor: f64) -> Result<NetHierarchy> {
    check_delta(delta)?;
    if !(sep_factor > 0.0 && sep_factor <= 1.0) {
        return Err(Error::invalid(format!("separation factor {sep_factor} must lie in (0, 1]")));
    }
    let (k_min, k_max) = level_range(cloud, delta, sep_factor);
    let all: Vec<usize> = (0..cloud.n()).collect();
    let mut levels = Vec::new();
    let mut separation = Vec::new();
    let mut covering = Vec::new();
    for k in k_min..=k_max {
        let centers = greedy_net(cloud, &all, sep_factor * delta.powi(k));
        let (s, c) = net_quality(cloud, &centers);
        levels.push(centers);
        separation.push(s);
        covering.push(c);
    }
    Ok(NetHierarchy { delta, sep_factor, k_min, levels, separation, covering })
}

/// Achieved separation and covering radius of a centre set.
pub fn net_quality(cloud: &PointCloud, centers: &[usize]) -> (f64, f64) {
    if centers.len() == cloud.n() {
        return (cloud.min_gap(), 0.0);
    }
    let mut sep = f64::INFINITY;
    for (i, &a) in centers.iter().enumerate() {
        for &b in &centers[..i] {
            sep = sep.min(cloud.d(a, b));
        }
    }
    let cover = (0..cloud.n()).map(|x| cloud.dist_to_set(x, centers)).fold(0.0, f64::max);
    (sep, cover)
}

/// Parent of every centre, as an index into the level above.
pub fn build_relation(cloud: &PointCloud, delta: f64, k_min: i32, levels: &[Vec<usize>], rule: RelationRule) -> Result<Vec<Vec<usize>>> {
    let tol = cloud.tol();
    let mut parents = vec![Vec::new()];
    for i in 1..levels.len() {
        let k = k_min + i as i32;
        let scale = delta.powi(k - 1);
        let (close, loose) = (rule.close * scale, rule.loose * scale);
        let above = &levels[i - 1];
        let mut par = Vec::with_capacity(levels[i].len());
        for (alpha, &c) in levels[i].iter().enumerate() {
            let row = cloud.row(c);
            let mut best = (f64::INFINITY, usize::MAX);
            let mut close_hit = None;
            for (beta, &p) in above.iter().enumerate() {
                let d = row[p];
                if d < close {
                    if let Some(prev) = close_hit {
                        return Err(Error::violation(
                            "unique close parent",
                            format!("k = {k}, alpha = {alpha}, candidates {prev} and {beta}"),
                        ));
                    }
                    close_hit = Some(beta);
                }
                if d < best.0 {
                    best = (d, beta);
                }
            }
            let parent = match close_hit {
                Some(b) => b,
                None if best.0 < loose + tol => best.1,
                None => {
                    return Err(Error::violation(
                        "parent within loose radius",
                        format!("k = {k}, alpha = {alpha}, nearest at {}", best.0),
                    ))
                }
            };
            par.push(parent);
        }
        parents.push(par);
    }
    Ok(parents)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CubeId {
    pub gen: i32,
    pub idx: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Level {
    pub gen: i32,
    pub centers: Vec<usize>,
    /// Index of the parent cube one level up; empty on the top level.
    pub parent: Vec<usize>,
    /// Cube index of every point at this level.
    pub cube_of: Vec<usize>,
    #[serde(skip)]
    pub children: Vec<Vec<usize>>,
    #[serde(skip)]
    pub members: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DyadicSystem {
    pub delta: f64,
    pub k_min: i32,
    pub levels: Vec<Level>,
}

/// Chain realisation of the cubes over a net and its parent relation.
pub fn build_cubes(cloud: &PointCloud, delta: f64, k_min: i32, levels: Vec<Vec<usize>>, parents: Vec<Vec<usize>>) -> Result<DyadicSystem> {
    let n = cloud.n();
    let bottom = levels.last().ok_or_else(|| Error::invalid("empty net"))?;
    if bottom.len() != n || bottom.iter().enumerate().any(|(i, &c)| i != c) {
        return Err(Error::invalid("the finest level must contain every point in id order"));
    }
    let depth = levels.len();
    let mut out: Vec<Level> = Vec::with_capacity(depth);
    let mut cube_of: Vec<usize> = (0..n).collect();
    let mut built = Vec::with_capacity(depth);
    for i in (0..depth).rev() {
        if i + 1 < depth {
            let par = &parents[i + 1];
            cube_of = cube_of.iter().map(|&c| par[c]).collect();
        }
        built.push(cube_of.clone());
    }
    built.reverse();
    for (i, (centers, cube_of)) in levels.into_iter().zip(built).enumerate() {
        let mut members = vec![Vec::new(); centers.len()];
        for (x, &c) in cube_of.iter().enumerate() {
            members[c].push(x);
        }
        let mut children = vec![Vec::new(); centers.len()];
        if i + 1 < depth {
            for (beta, &p) in parents[i + 1].iter().enumerate() {
                children[p].push(beta);
            }
        }
        out.push(Level {
            gen: k_min + i as i32,
            centers,
            parent: parents[i].clone(),
            cube_of,
            children,
            members,
        });
    }
    Ok(DyadicSystem { delta, k_min, levels: out })
}

/// Net, relation, and cubes in one step.
pub fn build_system(cloud: &PointCloud, delta: f64, sep_factor: f64, rule: RelationRule) -> Result<DyadicSystem> {
    let net = build_net(cloud, delta, sep_factor)?;
    let parents = build_relation(cloud, delta, net.k_min, &net.levels, rule)?;
    build_cubes(cloud, delta, net.k_min, net.levels, parents)
}

impl DyadicSystem {
    pub fn k_max(&self) -> i32 {
        self.k_min + self.levels.len() as i32 - 1
    }

    pub fn has_gen(&self, gen: i32) -> bool {
        gen >= self.k_min && gen <= self.k_max()
    }

    pub fn level(&self, gen: i32) -> &Level {
        &self.levels[(gen - self.k_min) as usize]
    }

    /// Side length `delta^gen`.
    pub fn side(&self, gen: i32) -> f64 {
        self.delta.powi(gen)
    }

    pub fn members(&self, q: CubeId) -> &[usize] {
        &self.level(q.gen).members[q.idx]
    }

    pub fn center(&self, q: CubeId) -> usize {
        self.level(q.gen).centers[q.idx]
    }

    pub fn cube_of(&self, gen: i32, x: usize) -> CubeId {
        CubeId { gen, idx: self.level(gen).cube_of[x] }
    }

    pub fn children(&self, q: CubeId) -> impl Iterator<Item = CubeId> + '_ {
        self.level(q.gen).children[q.idx].iter().map(move |&idx| CubeId { gen: q.gen + 1, idx })
    }

    pub fn parent(&self, q: CubeId) -> Option<CubeId> {
        (q.gen > self.k_min).then(|| CubeId { gen: q.gen - 1, idx: self.level(q.gen).parent[q.idx] })
    }

    pub fn cubes(&self) -> impl Iterator<Item = CubeId> + '_ {
        self.levels
            .iter()
            .flat_map(|l| (0..l.centers.len()).map(move |idx| CubeId { gen: l.gen, idx }))
    }

    pub fn n_cubes(&self) -> usize {
        self.levels.iter().map(|l| l.centers.len()).sum()
    }

    pub fn n_points(&self) -> usize {
        self.levels[0].cube_of.len()
    }

    /// Whether every point of `q` lies in `r` (possibly of another system).
    pub fn contained_in(&self, q: CubeId, other: &DyadicSystem, r: CubeId) -> bool {
        let cube_of = &other.level(r.gen).cube_of;
        self.members(q).iter().all(|&x| cube_of[x] == r.idx)
    }

    /// Rebuild the derived member and child lists, e.g. after deserialising.
    pub fn reindex(&mut self) {
        let depth = self.levels.len();
        for i in 0..depth {
            let m = self.levels[i].centers.len();
            let mut members = vec![Vec::new(); m];
            for (x, &c) in self.levels[i].cube_of.iter().enumerate() {
                members[c].push(x);
            }
            let mut children = vec![Vec::new(); m];
            if i + 1 < depth {
                for (beta, &p) in self.levels[i + 1].parent.iter().enumerate() {
                    children[p].push(beta);
                }
            }
            self.levels[i].members = members;
            self.levels[i].children = children;
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut sys: DyadicSystem = serde_json::from_str(text)?;
        sys.reindex();
        Ok(sys)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("system serializes")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SystemReport {
    pub levels: usize,
    pub cubes: usize,
    /// `min d(x_Q, X \ Q) / delta^k`; at least `C1`.
    pub inner_ratio: f64,
    /// `max d(x, x_Q) / delta^k` over members; below `OUTER`.
    pub outer_ratio: f64,
    /// `max diam Q / delta^k`; below `C0`.
    pub diameter_ratio: f64,
    pub proven_regime: bool,
}

/// Partition, nesting, centre membership, inner ball, outer ball, and
/// diameter checks over every cube.
pub fn verify_system(cloud: &PointCloud, sys: &DyadicSystem) -> Result<SystemReport> {
    let n = cloud.n();
    let tol = cloud.tol();
    let witness = |k: i32, a: usize, x: usize| format!("k = {k}, alpha = {a}, x = {x}");
    let mut inner_ratio = f64::INFINITY;
    let mut outer_ratio = 0.0f64;
    let mut diameter_ratio = 0.0f64;
    for (i, level) in sys.levels.iter().enumerate() {
        let k = level.gen;
        let side = sys.side(k);
        if level.cube_of.len() != n {
            return Err(Error::violation("partition", format!("k = {k}: membership has {} entries", level.cube_of.len())));
        }
        let mut seen = vec![0usize; level.centers.len()];
        for (x, &c) in level.cube_of.iter().enumerate() {
            if c >= level.centers.len() {
                return Err(Error::violation("partition", witness(k, c, x)));
            }
            seen[c] += 1;
        }
        if let Some(a) = seen.iter().position(|&s| s == 0) {
            return Err(Error::violation("partition", format!("k = {k}, alpha = {a} is empty")));
        }
        if i > 0 {
            let up = &sys.levels[i - 1];
            for x in 0..n {
                if up.cube_of[x] != level.parent[level.cube_of[x]] {
                    return Err(Error::violation("nesting", witness(k, level.cube_of[x], x)));
                }
            }
        }
        for (a, &c) in level.centers.iter().enumerate() {
            if level.cube_of[c] != a {
                return Err(Error::violation("centre membership", witness(k, a, c)));
            }
            let row = cloud.row(c);
            for x in 0..n {
                let d = row[x];
                if level.cube_of[x] == a {
                    outer_ratio = outer_ratio.max(d / side);
                    if d >= OUTER * side + tol {
                        return Err(Error::violation("outer ball", witness(k, a, x)));
                    }
                } else {
                    inner_ratio = inner_ratio.min(d / side);
                    if d < C1 * side - tol {
                        return Err(Error::violation("inner ball", witness(k, a, x)));
                    }
                }
            }
        }
        for (a, members) in level.members.iter().enumerate() {
            for (p, &x) in members.iter().enumerate() {
                let row = cloud.row(x);
                for &y in &members[..p] {
                    let d = row[y];
                    diameter_ratio = diameter_ratio.max(d / side);
                    if d >= C0 * side + tol {
                        return Err(Error::violation("diameter", witness(k, a, x)));
                    }
                }
            }
        }
    }
    Ok(SystemReport {
        levels: sys.levels.len(),
        cubes: sys.n_cubes(),
        inner_ratio,
        outer_ratio,
        diameter_ratio,
        proven_regime: sys.delta <= PROVEN_DELTA,
    })
}

/// Distance from `x` to the nearest point in a different cube of the same
/// generation; infinite when the generation has a single cube.
pub fn exterior_distance(cloud: &PointCloud, sys: &DyadicSystem, gen: i32, x: usize) -> f64 {
    let cube_of = &sys.level(gen).cube_of;
    let own = cube_of[x];
    cloud.row(x).iter().zip(cube_of).filter(|(_, c)| **c != own).map(|(d, _)| *d).fold(f64::INFINITY, f64::min)
}

/// `exterior_distance` for every point of one generation.
pub fn exterior_distances(cloud: &PointCloud, sys: &DyadicSystem, gen: i32) -> Vec<f64> {
    (0..cloud.n()).map(|x| exterior_distance(cloud, sys, gen, x)).collect()
}

/// Points within `eps * l(Q)` of both `Q` and its complement.
pub fn boundary_layer(cloud: &PointCloud, sys: &DyadicSystem, q: CubeId, eps: f64) -> Result<Vec<usize>> {
    if !(eps > 0.0) {
        return Err(Error::invalid("boundary width must be positive"));
    }
    let t = eps * sys.side(q.gen);
    let members = sys.members(q);
    let cube_of = &sys.level(q.gen).cube_of;
    let outside: Vec<usize> = (0..cloud.n()).filter(|&x| cube_of[x] != q.idx).collect();
    Ok((0..cloud.n())
        .filter(|&x| {
            let (to_q, to_out) = if cube_of[x] == q.idx {
                (0.0, cloud.dist_to_set(x, &outside))
            } else {
                (cloud.dist_to_set(x, members), 0.0)
            };
            to_q <= t && to_out <= t
        })
        .collect())
}

/// Points of `q` lying in the boundary layer of some cube of `other` whose
/// generation differs from that of `q` by at most `r`.
///
/// A point lies in some layer of generation `g` exactly when it is within
/// `eps delta^g` of a point outside its own generation-`g` cube.
pub fn boundary_region(cloud: &PointCloud, sys: &DyadicSystem, other: &DyadicSystem, q: CubeId, eps: f64, r: i32) -> Vec<usize> {
    let gens: Vec<i32> = ((q.gen - r)..=(q.gen + r)).filter(|g| other.has_gen(*g)).collect();
    sys.members(q)
        .iter()
        .copied()
        .filter(|&x| gens.iter().any(|&g| exterior_distance(cloud, other, g, x) <= eps * other.side(g)))
        .collect()
}

/// Centres of the cubes containing `x` at generations `k..=k+m`; past the
/// finest level every point is its own centre.
pub fn chain_centers(sys: &DyadicSystem, x: usize, k: i32, m: i32) -> Vec<usize> {
    (k..=k + m)
        .map(|j| if j > sys.k_max() { x } else { sys.center(sys.cube_of(j.max(sys.k_min), x)) })
        .collect()
}

/// If `x` is closer than `eps delta^k` to the complement of its generation-`k`
/// cube, the chain centres at generations `k <= j < i <= k + m` are at least
/// `delta^j / 500` apart. Returns whether the conclusion holds.
pub fn chain_separation_check(cloud: &PointCloud, sys: &DyadicSystem, x: usize, k: i32, m: i32, eps: f64) -> Result<bool> {
    if m < 0 || !sys.has_gen(k) {
        return Err(Error::invalid(format!("chain needs m >= 0 and generation {k} in range")));
    }
    if 500.0 * eps > sys.delta.powi(m) * (1.0 + 1e-12) {
        return Err(Error::invalid(format!("500 eps = {} exceeds delta^m", 500.0 * eps)));
    }
    if m == 0 || exterior_distance(cloud, sys, k, x) >= eps * sys.side(k) {
        return Ok(true);
    }
    let chain = chain_centers(sys, x, k, m);
    let tol = cloud.tol();
    for a in 0..chain.len() {
        for b in (a + 1)..chain.len() {
            let j = k + a as i32;
            if cloud.d(chain[a], chain[b]) < sys.side(j) / 500.0 - tol {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::MetricKind;

    fn grid(n: usize) -> PointCloud {
        PointCloud::from_coords((0..n).map(|i| vec![i as f64 / n as f64]).collect(), MetricKind::Euclidean).unwrap()
    }

    #[test]
    fn grid_thousand_two_levels() {
        let c = grid(1000);
        let net = build_net(&c, 1e-3, 1.0).unwrap();
        assert_eq!(net.k_min, 0);
        assert_eq!(net.k_max(), 1);
        assert!(net.levels[0].len() <= 2);
        assert_eq!(net.levels[1].len(), 1000);
    }

    #[test]
    fn singleton_has_one_level() {
        let c = PointCloud::from_coords(vec![vec![0.5]], MetricKind::Euclidean).unwrap();
        let sys = build_system(&c, 1e-3, 0.125, CHRIST_RULE).unwrap();
        assert_eq!(sys.levels.len(), 1);
        assert_eq!(sys.levels[0].centers, vec![0]);
        verify_system(&c, &sys).unwrap();
    }

    #[test]
    fn grid_system_verifies_and_matches_descendant_closure() {
        let c = grid(1000);
        let sys = build_system(&c, 1e-3, 0.125, CHRIST_RULE).unwrap();
        let rep = verify_system(&c, &sys).unwrap();
        assert!(rep.proven_regime);
        for q in sys.cubes() {
            // descendants by walking the relation downwards
            let mut frontier = vec![q];
            while frontier[0].gen < sys.k_max() {
                frontier = frontier.iter().flat_map(|f| sys.children(*f)).collect();
            }
            let mut pts: Vec<usize> = frontier.iter().map(|f| sys.center(*f)).collect();
            pts.sort_unstable();
            assert_eq!(pts, sys.members(q));
        }
    }

    #[test]
    fn corrupted_relation_is_caught() {
        let c = grid(200);
        let net = build_net(&c, 1e-3, 0.125).unwrap();
        let mut parents = build_relation(&c, 1e-3, net.k_min, &net.levels, CHRIST_RULE).unwrap();
        // move one bottom singleton under a far-away parent
        let last = parents.len() - 1;
        let far = net.levels[last - 1].len() - 1;
        let x = net.levels[last - 1][0];
        if far != parents[last][x] {
            parents[last][x] = far;
            let sys = build_cubes(&c, 1e-3, net.k_min, net.levels.clone(), parents).unwrap();
            assert!(matches!(verify_system(&c, &sys), Err(Error::Violation { .. })));
        }
    }

    #[test]
    fn whole_space_has_empty_boundary() {
        let c = grid(50);
        let sys = build_system(&c, 1e-3, 0.125, CHRIST_RULE).unwrap();
        let top = CubeId { gen: sys.k_min, idx: 0 };
        assert_eq!(sys.members(top).len(), 50);
        assert!(boundary_layer(&c, &sys, top, 0.5).unwrap().is_empty());
    }

    #[test]
    fn boundary_layer_brute_force() {
        let c = grid(64);
        let sys = build_system(&c, 0.25, 1.0 / 8.0, CHRIST_RULE).unwrap();
        for q in sys.cubes() {
            for eps in [0.01, 0.1, 0.3] {
                let got = boundary_layer(&c, &sys, q, eps).unwrap();
                let t = eps * sys.side(q.gen);
                let inside = sys.members(q);
                let want: Vec<usize> = (0..64)
                    .filter(|&x| {
                        let dq = inside.iter().map(|&y| c.d(x, y)).fold(f64::INFINITY, f64::min);
                        let dout = (0..64).filter(|y| !inside.contains(y)).map(|y| c.d(x, y)).fold(f64::INFINITY, f64::min);
                        dq <= t && dout <= t
                    })
                    .collect();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn chain_check_trivial_cases() {
        let c = grid(100);
        let sys = build_system(&c, 1e-3, 0.125, CHRIST_RULE).unwrap();
        assert!(chain_separation_check(&c, &sys, 3, 0, 0, 1e-3).unwrap());
        assert!(chain_separation_check(&c, &sys, 3, 0, 1, 1e-3).is_err());
        assert!(chain_separation_check(&c, &sys, 3, 0, 1, 1e-6).unwrap());
    }
}
