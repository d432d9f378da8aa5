//! Conditional expectations and martingale differences over a cube system,
//! plain or adapted to an accretive function.
//!
//! With `b` given, the expectation on a cube `Q` is
//! `(int_Q f / int_Q b) * b` on `Q`; the plain case is `b = 1`. Everything is
//! stored through these ratios, one per cube, so a difference on `Q` has
//! coefficient `ratio(Q') - ratio(Q)` on each child `Q'`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dyadic::{CubeId, DyadicSystem};
use crate::error::{Error, Result};
use crate::linalg::{hermitian_eigenvalues, C64};
use crate::measure::{DiscreteMeasure, MASS_TOL};

/// Doob's L^2 constant of the dyadic maximal operator, squared.
pub const CARLESON_CONSTANT: f64 = 4.0;

/// Relative size below which `int_Q b` counts as zero.
const DEGENERATE: f64 = 1e-12;

/// Integrals of `f` over every cube, per level, accumulated bottom-up in
/// child order.
pub fn cube_integrals(sys: &DyadicSystem, mu: &DiscreteMeasure, f: &[C64]) -> Vec<Vec<C64>> {
    let depth = sys.levels.len();
    let mut out: Vec<Vec<C64>> = vec![Vec::new(); depth];
    out[depth - 1] = f.iter().zip(&mu.weights).map(|(v, w)| v * w).collect();
    for i in (0..depth - 1).rev() {
        let below = &out[i + 1];
        out[i] = sys.levels[i].children.iter().map(|ch| ch.iter().map(|&c| below[c]).sum()).collect();
    }
    out
}

fn cube_masses(sys: &DyadicSystem, mu: &DiscreteMeasure) -> Vec<Vec<f64>> {
    let depth = sys.levels.len();
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); depth];
    out[depth - 1] = mu.weights.clone();
    for i in (0..depth - 1).rev() {
        let below = &out[i + 1];
        out[i] = sys.levels[i].children.iter().map(|ch| ch.iter().map(|&c| below[c]).sum()).collect();
    }
    out
}

fn real(f: &[f64]) -> Vec<C64> {
    f.iter().map(|&x| C64::new(x, 0.0)).collect()
}

/// Expectation ratios of `f` from generation `start` down, and the
/// `L^2(mu)` mass of `b` on each of those cubes.
#[derive(Debug, Clone, Serialize)]
pub struct Martingale {
    pub start: i32,
    pub adapted: bool,
    pub ratios: Vec<Vec<C64>>,
    pub b_energy: Vec<Vec<f64>>,
    pub mass: Vec<Vec<f64>>,
}

pub fn decompose(sys: &DyadicSystem, mu: &DiscreteMeasure, f: &[C64], m: i32, b: Option<&[C64]>) -> Result<Martingale> {
    let n = sys.n_points();
    if f.len() != n || mu.n() != n || b.is_some_and(|b| b.len() != n) {
        return Err(Error::invalid("function, measure and system sizes differ"));
    }
    if !sys.has_gen(m) {
        return Err(Error::invalid(format!("start generation {m} outside [{}, {}]", sys.k_min, sys.k_max())));
    }
    let first = (m - sys.k_min) as usize;
    let fi = cube_integrals(sys, mu, f);
    let mass = cube_masses(sys, mu);
    let (bi, b_energy) = match b {
        Some(b) => {
            let sq: Vec<f64> = b.iter().map(|z| z.norm_sqr()).collect();
            let abs: Vec<C64> = b.iter().map(|z| C64::new(z.norm(), 0.0)).collect();
            let e = cube_integrals(sys, mu, &real(&sq));
            let a = cube_integrals(sys, mu, &abs);
            let bi = cube_integrals(sys, mu, b);
            for (i, level) in bi.iter().enumerate().skip(first) {
                for (idx, v) in level.iter().enumerate() {
                    if v.norm() <= DEGENERATE * a[i][idx].re {
                        let q = CubeId { gen: sys.k_min + i as i32, idx };
                        return Err(Error::violation("accretivity", format!("cube {q:?} has zero b-average")));
                    }
                }
            }
            (bi, e.into_iter().map(|l| l.into_iter().map(|z| z.re).collect()).collect::<Vec<Vec<f64>>>())
        }
        None => (mass.iter().map(|l| real(l)).collect(), mass.clone()),
    };
    let ratios = fi
        .iter()
        .zip(&bi)
        .skip(first)
        .map(|(fl, bl)| fl.iter().zip(bl).map(|(a, c)| a / c).collect())
        .collect();
    Ok(Martingale {
        start: m,
        adapted: b.is_some(),
        ratios,
        b_energy: b_energy.into_iter().skip(first).collect(),
        mass: mass.into_iter().skip(first).collect(),
    })
}

impl Martingale {
    fn at(&self, gen: i32) -> usize {
        (gen - self.start) as usize
    }

    pub fn ratio(&self, q: CubeId) -> C64 {
        self.ratios[self.at(q.gen)][q.idx]
    }

    /// Coefficient of the child `q` in the difference on its parent.
    pub fn coefficient(&self, sys: &DyadicSystem, q: CubeId) -> C64 {
        let p = sys.parent(q).expect("coefficient of a top cube");
        self.ratio(q) - self.ratio(p)
    }

    /// `Delta_Q f` as `(point, value)` pairs over the members of `q`.
    pub fn difference(&self, sys: &DyadicSystem, q: CubeId, b: Option<&[C64]>) -> Vec<(usize, C64)> {
        let mut out = Vec::with_capacity(sys.members(q).len());
        for c in sys.children(q) {
            let a = self.coefficient(sys, c);
            out.extend(sys.members(c).iter().map(|&x| (x, b.map_or(a, |b| a * b[x]))));
        }
        out
    }

    /// `E_Q f` for a cube of the starting generation.
    pub fn expectation(&self, sys: &DyadicSystem, q: CubeId, b: Option<&[C64]>) -> Vec<(usize, C64)> {
        let a = self.ratio(q);
        sys.members(q).iter().map(|&x| (x, b.map_or(a, |b| a * b[x]))).collect()
    }

    /// `||Delta_Q f||^2`.
    pub fn difference_energy(&self, sys: &DyadicSystem, q: CubeId) -> f64 {
        let i = self.at(q.gen + 1);
        sys.level(q.gen).children[q.idx]
            .iter()
            .map(|&c| (self.ratios[i][c] - self.ratio(q)).norm_sqr() * self.b_energy[i][c])
            .sum()
    }

    pub fn expectation_energy(&self, q: CubeId) -> f64 {
        self.ratio(q).norm_sqr() * self.b_energy[self.at(q.gen)][q.idx]
    }

    /// Cubes carrying a difference: generations from the start to one above
    /// the bottom.
    pub fn difference_cubes<'a>(&self, sys: &'a DyadicSystem) -> impl Iterator<Item = CubeId> + 'a {
        let start = self.start;
        let bottom = sys.k_max();
        sys.cubes().filter(move |q| q.gen >= start && q.gen < bottom)
    }

    pub fn start_cubes(&self) -> impl Iterator<Item = CubeId> + '_ {
        let gen = self.start;
        (0..self.ratios[0].len()).map(move |idx| CubeId { gen, idx })
    }

    /// `sum ||Delta_Q f||^2 + sum ||E_Q f||^2`.
    pub fn energy(&self, sys: &DyadicSystem) -> f64 {
        let d: f64 = self.difference_cubes(sys).map(|q| self.difference_energy(sys, q)).sum();
        let e: f64 = self.start_cubes().map(|q| self.expectation_energy(q)).sum();
        d + e
    }

    /// Telescoped value at every point: `b(x)` times the bottom ratio.
    pub fn reconstruct(&self, sys: &DyadicSystem, b: Option<&[C64]>) -> Vec<C64> {
        let n = sys.n_points();
        (0..n)
            .map(|x| {
                let mut v = self.ratio(sys.cube_of(self.start, x));
                for g in self.start + 1..=sys.k_max() {
                    v += self.coefficient(sys, sys.cube_of(g, x));
                }
                b.map_or(v, |b| v * b[x])
            })
            .collect()
    }
}

pub fn l2_norm_sq(mu: &DiscreteMeasure, f: &[C64]) -> f64 {
    f.iter().zip(&mu.weights).map(|(v, w)| v.norm_sqr() * w).sum()
}

pub fn inner(mu: &DiscreteMeasure, f: &[C64], g: &[C64]) -> C64 {
    f.iter().zip(g).zip(&mu.weights).map(|((a, b), w)| a * b.conj() * w).sum()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergyCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

impl EnergyCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        let ratio = if lhs == 0.0 && rhs == 0.0 { 1.0 } else { rhs / lhs };
        EnergyCheck { lhs, rhs, ratio }
    }
}

/// `||f||^2` against the plain martingale energy.
pub fn pythagoras_check(sys: &DyadicSystem, mu: &DiscreteMeasure, f: &[C64], m: i32) -> Result<EnergyCheck> {
    let mart = decompose(sys, mu, f, m, None)?;
    Ok(EnergyCheck::new(l2_norm_sq(mu, f), mart.energy(sys)))
}

/// Adapted energy of `f` divided by `||f||^2`.
pub fn adapted_comparability(sys: &DyadicSystem, mu: &DiscreteMeasure, f: &[C64], b: &[C64], m: i32) -> Result<EnergyCheck> {
    let mart = decompose(sys, mu, f, m, Some(b))?;
    Ok(EnergyCheck::new(l2_norm_sq(mu, f), mart.energy(sys)))
}

/// Extremal values over all `f` of the adapted energy divided by `||f||^2`,
/// from the eigenvalues of the energy form in the `L^2(mu)` basis.
pub fn comparability_bracket(sys: &DyadicSystem, mu: &DiscreteMeasure, b: &[C64], m: i32) -> Result<(f64, f64)> {
    let n = sys.n_points();
    // energy(f) = sum_rows |<row, f>|^2 with f scaled by sqrt(w)
    let probe = vec![C64::new(0.0, 0.0); n];
    let mart = decompose(sys, mu, &probe, m, Some(b))?;
    let bi = cube_integrals(sys, mu, b);
    let first = (m - sys.k_min) as usize;
    let sw: Vec<f64> = mu.weights.iter().map(|w| w.sqrt()).collect();
    // row of ratio(Q) acting on the scaled function
    let ratio_row = |gen: i32, idx: usize| -> Vec<(usize, C64)> {
        let i = (gen - sys.k_min) as usize;
        let c = bi[i][idx];
        sys.members(CubeId { gen, idx }).iter().map(|&x| (x, C64::new(sw[x], 0.0) / c)).collect()
    };
    let mut gram = DMatrix::<C64>::zeros(n, n);
    let mut add_row = |row: &[(usize, C64)], scale: f64| {
        for &(x, a) in row {
            for &(y, c) in row {
                gram[(x, y)] += a.conj() * c * scale;
            }
        }
    };
    for (idx, &e) in mart.b_energy[0].iter().enumerate() {
        add_row(&ratio_row(m, idx), e);
    }
    for (i, level) in sys.levels.iter().enumerate().skip(first + 1) {
        for idx in 0..level.centers.len() {
            let parent = level.parent[idx];
            let mut row = ratio_row(level.gen, idx);
            let mut index = vec![usize::MAX; n];
            for (k, &(x, _)) in row.iter().enumerate() {
                index[x] = k;
            }
            for (x, a) in ratio_row(level.gen - 1, parent) {
                if index[x] == usize::MAX {
                    row.push((x, -a));
                } else {
                    row[index[x]].1 -= a;
                }
            }
            add_row(&row, mart.b_energy[i - first][idx]);
        }
    }
    let eig = hermitian_eigenvalues(gram);
    Ok((eig[0].max(0.0), *eig.last().unwrap()))
}

/// `M f(x) = sup_{Q containing x} <|f|>_Q`.
pub fn dyadic_maximal(sys: &DyadicSystem, mu: &DiscreteMeasure, f: &[C64]) -> Vec<f64> {
    let abs: Vec<C64> = f.iter().map(|z| C64::new(z.norm(), 0.0)).collect();
    let ints = cube_integrals(sys, mu, &abs);
    let mass = cube_masses(sys, mu);
    let n = sys.n_points();
    (0..n)
        .map(|x| {
            sys.levels
                .iter()
                .enumerate()
                .map(|(i, l)| ints[i][l.cube_of[x]].re / mass[i][l.cube_of[x]])
                .fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CarlesonReport {
    pub lhs: f64,
    pub norm_sq: f64,
    pub ratio: f64,
    /// Largest packing sum over its cube mass.
    pub packing: f64,
}

/// `sum_{R in Q} a_R mu(R)` for every cube `Q`, per level.
fn packing_sums(sys: &DyadicSystem, mass: &[Vec<f64>], a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let depth = sys.levels.len();
    let mut sub: Vec<Vec<f64>> = vec![Vec::new(); depth];
    for i in (0..depth).rev() {
        sub[i] = (0..sys.levels[i].centers.len())
            .map(|idx| {
                let below: f64 = if i + 1 < depth { sys.levels[i].children[idx].iter().map(|&c| sub[i + 1][c]).sum() } else { 0.0 };
                a[i][idx] * mass[i][idx] + below
            })
            .collect();
    }
    sub
}

/// Largest `sum_{R in Q} a_R mu(R) / mu(Q)` over all cubes `Q`.
pub fn packing_constant(sys: &DyadicSystem, mu: &DiscreteMeasure, a: &[Vec<f64>]) -> f64 {
    let mass = cube_masses(sys, mu);
    let sub = packing_sums(sys, &mass, a);
    sub.iter().zip(&mass).flat_map(|(s, m)| s.iter().zip(m).map(|(s, m)| s / m)).fold(0.0, f64::max)
}

/// `sum_Q |<f>_Q|^2 a_Q mu(Q)` against `4 ||f||^2` for a packing sequence.
pub fn carleson_check(sys: &DyadicSystem, mu: &DiscreteMeasure, a: &[Vec<f64>], f: &[C64]) -> Result<CarlesonReport> {
    if a.len() != sys.levels.len() || a.iter().zip(&sys.levels).any(|(r, l)| r.len() != l.centers.len()) {
        return Err(Error::invalid("sequence shape does not match the cube system"));
    }
    if let Some(v) = a.iter().flatten().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(format!("sequence value {v} is negative")));
    }
    let mass = cube_masses(sys, mu);
    let sub = packing_sums(sys, &mass, a);
    let mut packing: f64 = 0.0;
    for (i, (s, m)) in sub.iter().zip(&mass).enumerate() {
        for (idx, (s, m)) in s.iter().zip(m).enumerate() {
            if *s > m * (1.0 + MASS_TOL) {
                let q = CubeId { gen: sys.k_min + i as i32, idx };
                return Err(Error::violation("Carleson packing", format!("cube {q:?}: {s} > {m}")));
            }
            packing = packing.max(s / m);
        }
    }
    let ints = cube_integrals(sys, mu, f);
    let lhs: f64 = ints
        .iter()
        .zip(&mass)
        .zip(a)
        .flat_map(|((fi, mi), ai)| fi.iter().zip(mi).zip(ai).map(|((v, m), a)| v.norm_sqr() / m * a))
        .sum();
    let norm_sq = l2_norm_sq(mu, f);
    let ratio = if norm_sq == 0.0 { 0.0 } else { lhs / norm_sq };
    if lhs > CARLESON_CONSTANT * norm_sq * (1.0 + MASS_TOL) {
        return Err(Error::violation("Carleson embedding", format!("ratio {ratio}")));
    }
    Ok(CarlesonReport { lhs, norm_sq, ratio, packing })
}

/// Divides a nonnegative sequence by its packing constant when that exceeds 1.
pub fn normalize_packing(sys: &DyadicSystem, mu: &DiscreteMeasure, a: &mut [Vec<f64>]) {
    let p = packing_constant(sys, mu, a);
    if p > 1.0 {
        a.iter_mut().flatten().for_each(|v| *v /= p);
    }
}

/// `S h = sum_Q ||Delta_Q h||^2 mu(Q)^-1 chi_Q + sum ||E_Q h||^2 mu(Q)^-1 chi_Q`.
pub fn square_function(sys: &DyadicSystem, mu: &DiscreteMeasure, h: &[C64], m: i32, b: &[C64]) -> Result<Vec<f64>> {
    let mart = decompose(sys, mu, h, m, Some(b))?;
    let n = sys.n_points();
    let mut out = vec![0.0; n];
    for q in mart.start_cubes() {
        let v = mart.expectation_energy(q) / mart.mass[0][q.idx];
        sys.members(q).iter().for_each(|&x| out[x] += v);
    }
    for q in mart.difference_cubes(sys) {
        let v = mart.difference_energy(sys, q) / mart.mass[(q.gen - m) as usize][q.idx];
        sys.members(q).iter().for_each(|&x| out[x] += v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct AccretivityConstants {
    pub strong: f64,
    /// Smallest `|int_Q b| / mu(Q)` per system.
    pub weak: Vec<f64>,
    pub sup: f64,
}

pub fn accretivity_constants(b: &[C64], mu: &DiscreteMeasure, systems: &[&DyadicSystem]) -> AccretivityConstants {
    let strong = b.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    let sup = b.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let weak = systems
        .iter()
        .map(|sys| {
            let ints = cube_integrals(sys, mu, b);
            let mass = cube_masses(sys, mu);
            ints.iter()
                .zip(&mass)
                .flat_map(|(i, m)| i.iter().zip(m).map(|(v, m)| v.norm() / m))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    AccretivityConstants { strong, weak, sup }
}
