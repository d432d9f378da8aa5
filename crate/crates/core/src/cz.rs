//! Matrices of cube pairings: the separated-cube matrix and the nested
//! matrix, their Schur sums and operator norms.
//!
//! Distances between cubes are exact minima over member pairs. Cube metric
//! quantities are taken in whatever cloud the systems were built on.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dyadic::{CubeId, DyadicSystem, C0, C1, C3};
use crate::error::{Error, Result};
use crate::linalg::{power_norm_dense, spectral_norm};
use crate::measure::{DiscreteMeasure, Dominator};
use crate::space::PointCloud;

/// Largest cube count for which norms are also computed densely.
pub const DENSE_CUBES: usize = 500;
/// Relative eigenvalue tolerance of the power iteration.
pub const POWER_TOL: f64 = 1e-12;

/// `alpha / (2 (alpha + d))` with `d = log2 C_lambda`.
pub fn gamma(alpha: f64, c_lambda: f64) -> Result<f64> {
    if !(alpha > 0.0) || !(c_lambda > 1.0) {
        return Err(Error::invalid(format!("need alpha > 0 and C_lambda > 1, got {alpha}, {c_lambda}")));
    }
    let d = c_lambda.log2();
    Ok(alpha / (2.0 * (alpha + d)))
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct TbParams {
    pub alpha: f64,
    pub d: f64,
    pub gamma: f64,
    pub r: i32,
    pub kappa: f64,
    pub wbp_dilation: f64,
    pub kernel_const: f64,
    pub c0: f64,
    pub c1: f64,
    pub c3: f64,
}

impl TbParams {
    /// Parameters with the smallest admissible `r` for `delta`, unless `r`
    /// is given, in which case it is checked.
    pub fn new(alpha: f64, c_lambda: f64, kappa: f64, wbp_dilation: f64, kernel_const: f64, delta: f64, r: Option<i32>) -> Result<Self> {
        let g = gamma(alpha, c_lambda)?;
        if !(kappa > 1.0 && wbp_dilation > 1.0) {
            return Err(Error::invalid("dilations must exceed 1"));
        }
        let mut p = TbParams {
            alpha,
            d: c_lambda.log2(),
            gamma: g,
            r: 0,
            kappa,
            wbp_dilation,
            kernel_const,
            c0: C0,
            c1: C1,
            c3: C3,
        };
        match r {
            Some(r) => {
                p.r = r;
                if !p.r_admissible(delta) {
                    return Err(Error::infeasible(format!("r = {r} violates the generation-gap inequalities at delta = {delta}")));
                }
            }
            None => {
                p.r = (1..=10_000).find(|&r| {
                    p.r = r;
                    p.r_admissible(delta)
                }).ok_or_else(|| Error::infeasible("no admissible r below 10000"))?;
            }
        }
        Ok(p)
    }

    /// `C C0 kappa`.
    pub fn whitney(&self) -> f64 {
        self.kernel_const * self.c0 * self.kappa
    }

    pub fn r_admissible(&self, delta: f64) -> bool {
        let lhs = delta.powi(self.r);
        let first = lhs <= self.c1 / (self.whitney() + self.c0 + self.c3);
        let second = delta.powf(-(1.0 - self.gamma) * self.r as f64) >= self.whitney();
        first && second
    }
}

/// Flat numbering of the cubes of a system, coarse to fine.
#[derive(Debug, Clone)]
pub struct CubeIndex {
    pub k_min: i32,
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl CubeIndex {
    pub fn new(sys: &DyadicSystem) -> Self {
        let mut offsets = Vec::with_capacity(sys.levels.len());
        let mut total = 0;
        for l in &sys.levels {
            offsets.push(total);
            total += l.centers.len();
        }
        CubeIndex { k_min: sys.k_min, offsets, total }
    }

    pub fn flat(&self, q: CubeId) -> usize {
        self.offsets[(q.gen - self.k_min) as usize] + q.idx
    }
}

/// Exact cube-to-cube distances for every pair of levels of two systems.
pub struct CubeDistances {
    k_min_a: i32,
    k_min_b: i32,
    /// `[level_a][level_b]` matrices indexed by cube indices.
    table: Vec<Vec<DMatrix<f64>>>,
}

impl CubeDistances {
    pub fn new(cloud: &PointCloud, a: &DyadicSystem, b: &DyadicSystem) -> Self {
        let n = cloud.n();
        let table = a
            .levels
            .iter()
            .map(|la| {
                b.levels
                    .iter()
                    .map(|lb| {
                        let mut m = DMatrix::from_element(la.centers.len(), lb.centers.len(), f64::INFINITY);
                        for x in 0..n {
                            let qa = la.cube_of[x];
                            let row = cloud.row(x);
                            for (y, &d) in row.iter().enumerate() {
                                let e = &mut m[(qa, lb.cube_of[y])];
                                if d < *e {
                                    *e = d;
                                }
                            }
                        }
                        m
                    })
                    .collect()
            })
            .collect();
        CubeDistances { k_min_a: a.k_min, k_min_b: b.k_min, table }
    }

    pub fn get(&self, q: CubeId, r: CubeId) -> f64 {
        self.table[(q.gen - self.k_min_a) as usize][(r.gen - self.k_min_b) as usize][(q.idx, r.idx)]
    }
}

fn cube_masses(sys: &DyadicSystem, mu: &DiscreteMeasure) -> Vec<Vec<f64>> {
    sys.levels.iter().map(|l| l.members.iter().map(|m| mu.mass_of(m)).collect()).collect()
}

/// `sup_{z in Q} lambda(z, r)` over the members of `Q`.
pub fn sup_dominator(sys: &DyadicSystem, lambda: &Dominator, q: CubeId, r: f64) -> f64 {
    sys.members(q).iter().map(|&z| lambda.eval(z, r)).fold(0.0, f64::max)
}

/// Dense matrix with rows indexed by the cubes of one system and columns by
/// those of another.
#[derive(Debug, Clone)]
pub struct CubeMatrix {
    pub rows: CubeIndex,
    pub cols: CubeIndex,
    pub values: DMatrix<f64>,
}

impl CubeMatrix {
    pub fn get(&self, q: CubeId, r: CubeId) -> f64 {
        self.values[(self.rows.flat(q), self.cols.flat(r))]
    }

    pub fn n_cubes(&self) -> usize {
        self.rows.total.max(self.cols.total)
    }

    /// Coordinate list `gen_Q,idx_Q,gen_R,idx_R,value` of the nonzero entries.
    pub fn to_csv(&self, row_sys: &DyadicSystem, col_sys: &DyadicSystem) -> String {
        let mut out = String::from("gen_q,idx_q,gen_r,idx_r,value\n");
        for q in row_sys.cubes() {
            for r in col_sys.cubes() {
                let v = self.get(q, r);
                if v != 0.0 {
                    let _ = writeln!(out, "{},{},{},{},{:.11e}", q.gen, q.idx, r.gen, r.idx, v);
                }
            }
        }
        out
    }
}

/// The separated-cube matrix entry for `Q` in `D`, `R` in `D'`.
pub fn separated_entry(
    d: &DyadicSystem,
    dp: &DyadicSystem,
    lambda: &Dominator,
    alpha: f64,
    q: CubeId,
    r: CubeId,
    dist: f64,
    mass_q: f64,
    mass_r: f64,
) -> f64 {
    let (lq, lr) = (d.side(q.gen), dp.side(r.gen));
    if lq > lr {
        return 0.0;
    }
    let big = lq + lr + dist;
    (lq * lr).powf(alpha / 2.0) / (big.powf(alpha) * sup_dominator(d, lambda, q, big)) * (mass_q * mass_r).sqrt()
}

pub fn assemble_separated(cloud: &PointCloud, d: &DyadicSystem, dp: &DyadicSystem, mu: &DiscreteMeasure, lambda: &Dominator, alpha: f64) -> Result<CubeMatrix> {
    let dist = CubeDistances::new(cloud, d, dp);
    assemble_separated_with(&dist, d, dp, mu, lambda, alpha)
}

pub fn assemble_separated_with(
    dist: &CubeDistances,
    d: &DyadicSystem,
    dp: &DyadicSystem,
    mu: &DiscreteMeasure,
    lambda: &Dominator,
    alpha: f64,
) -> Result<CubeMatrix> {
    let (rows, cols) = (CubeIndex::new(d), CubeIndex::new(dp));
    let (mq, mr) = (cube_masses(d, mu), cube_masses(dp, mu));
    let mut values = DMatrix::zeros(rows.total, cols.total);
    for q in d.cubes() {
        if d.members(q).is_empty() {
            return Err(Error::violation("nonempty cube", format!("{q:?}")));
        }
        for r in dp.cubes() {
            let v = separated_entry(d, dp, lambda, alpha, q, r, dist.get(q, r), mq[(q.gen - d.k_min) as usize][q.idx], mr[(r.gen - dp.k_min) as usize][r.idx]);
            values[(rows.flat(q), cols.flat(r))] = v;
        }
    }
    Ok(CubeMatrix { rows, cols, values })
}

/// `good[level][idx]` labels for the cubes of `D`.
pub fn assemble_nested(d: &DyadicSystem, dp: &DyadicSystem, mu: &DiscreteMeasure, good: &[Vec<bool>], alpha: f64, r: i32) -> Result<CubeMatrix> {
    if good.len() != d.levels.len() {
        return Err(Error::invalid("goodness labels do not match the system"));
    }
    let (rows, cols) = (CubeIndex::new(d), CubeIndex::new(dp));
    let mq = cube_masses(d, mu);
    let mr = cube_masses(dp, mu);
    let mut values = DMatrix::zeros(rows.total, cols.total);
    for q in d.cubes() {
        if !good[(q.gen - d.k_min) as usize][q.idx] {
            continue;
        }
        let center = d.center(q);
        for rg in dp.k_min..=dp.k_max().min(q.gen - r - 1) {
            let big = dp.cube_of(rg, center);
            if !d.contained_in(q, dp, big) {
                continue;
            }
            let child = dp.cube_of(rg + 1, center);
            let ratio = d.side(q.gen) / dp.side(rg);
            let m1 = mr[(child.gen - dp.k_min) as usize][child.idx];
            values[(rows.flat(q), cols.flat(big))] = ratio.powf(alpha / 2.0) * (mq[(q.gen - d.k_min) as usize][q.idx] / m1).sqrt();
        }
    }
    Ok(CubeMatrix { rows, cols, values })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SchurSums {
    pub m: i32,
    pub k: i32,
    /// Largest `int K(x, y) dmu(x)` over `y`.
    pub row_max: f64,
    /// Largest `int K(x, y) dmu(y)` over `x`.
    pub col_max: f64,
    pub reference: f64,
    pub ratio: f64,
}

/// Schur sums of the block with `Q` of generation `k + m` and `R` of
/// generation `k`.
pub fn schur_sums(matrix: &CubeMatrix, d: &DyadicSystem, dp: &DyadicSystem, mu: &DiscreteMeasure, alpha: f64, m: i32, k: i32) -> Result<SchurSums> {
    if m < 0 {
        return Err(Error::invalid("m must be nonnegative"));
    }
    let reference = d.delta.powf(alpha * m as f64 / 2.0);
    let (gq, gr) = (k + m, k);
    if !d.has_gen(gq) || !dp.has_gen(gr) {
        return Ok(SchurSums { m, k, row_max: 0.0, col_max: 0.0, reference, ratio: 0.0 });
    }
    let (mq, mr) = (cube_masses(d, mu), cube_masses(dp, mu));
    let mq = &mq[(gq - d.k_min) as usize];
    let mr = &mr[(gr - dp.k_min) as usize];
    // K = T / sqrt(mu(Q) mu(R)), integrated against the other variable
    let kernel = |qi: usize, ri: usize| {
        matrix.get(CubeId { gen: gq, idx: qi }, CubeId { gen: gr, idx: ri }) / (mq[qi] * mr[ri]).sqrt()
    };
    let row_max = (0..mr.len())
        .map(|ri| (0..mq.len()).map(|qi| kernel(qi, ri) * mq[qi]).sum::<f64>())
        .fold(0.0, f64::max);
    let col_max = (0..mq.len())
        .map(|qi| (0..mr.len()).map(|ri| kernel(qi, ri) * mr[ri]).sum::<f64>())
        .fold(0.0, f64::max);
    let ratio = row_max.max(col_max) / reference;
    Ok(SchurSums { m, k, row_max, col_max, reference, ratio })
}

/// Every available `(m, k)` block.
pub fn all_schur_sums(matrix: &CubeMatrix, d: &DyadicSystem, dp: &DyadicSystem, mu: &DiscreteMeasure, alpha: f64) -> Result<Vec<SchurSums>> {
    let mut out = Vec::new();
    for k in dp.k_min..=dp.k_max() {
        for m in 0..=(d.k_max() - k).max(0) {
            if d.has_gen(k + m) {
                out.push(schur_sums(matrix, d, dp, mu, alpha, m, k)?);
            }
        }
    }
    Ok(out)
}

/// `sum_m max_k sqrt(row * col)`: blocks of fixed `m` act on disjoint rows and
/// columns, so this bounds the norm of the whole matrix.
pub fn schur_bound(sums: &[SchurSums]) -> f64 {
    let mut per_m: std::collections::BTreeMap<i32, f64> = Default::default();
    for s in sums {
        let e = per_m.entry(s.m).or_insert(0.0);
        *e = e.max((s.row_max * s.col_max).sqrt());
    }
    per_m.values().sum()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NormReport {
    pub power: f64,
    pub dense: Option<f64>,
}

/// Power iteration, and a full decomposition for small matrices; the two
/// must agree to `1e-6` relatively.
pub fn matrix_norm(matrix: &CubeMatrix) -> Result<NormReport> {
    let power = power_norm_dense(&matrix.values, POWER_TOL)?;
    let dense = (matrix.n_cubes() <= DENSE_CUBES).then(|| spectral_norm(&matrix.values));
    if let Some(s) = dense {
        if (s - power).abs() > 1e-6 * s.max(f64::MIN_POSITIVE) {
            return Err(Error::NoConvergence(format!("power iteration {power} vs dense {s}")));
        }
    }
    Ok(NormReport { power, dense })
}

/// Lemma-type separation hypotheses for `Q` in `D`, `R` in `D'`.
pub fn separation_hypotheses(d: &DyadicSystem, dp: &DyadicSystem, params: &TbParams, q: CubeId, r: CubeId, dist: f64) -> bool {
    let (lq, lr) = (d.side(q.gen), dp.side(r.gen));
    lq <= lr && dist >= params.kernel_const * params.c0 * lq && dist >= lq.powf(params.gamma) * lr.powf(1.0 - params.gamma)
}
