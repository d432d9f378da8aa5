//! Kernels on a cloud, the discrete operator they define, and the
//! functionals entering the local Tb bound: BMO with dilated normalisation,
//! the weak boundedness constant, the paraproduct, the surgery of an
//! adjacent pair of cubes, and the good/bad decomposition diagnostics.
//!
//! Pairings are bilinear, `<f, g> = int f g dmu`, so the adjoint of `T` is
//! the operator with the transposed kernel. The diagonal of every kernel is
//! left out of the operator.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ball_cover::{derive_cover_params, sample_almost_cover, CoverParams};
use crate::cz::{assemble_separated_with, matrix_norm, CubeDistances, TbParams};
use crate::dyadic::{exterior_distances, CubeId, DyadicSystem, C0};
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, C64};
use crate::martingale::{cube_integrals, decompose};
use crate::measure::{max_uniform_weight, verify_upper_doubling, DiscreteMeasure, Dominator, DominatorSpec};
use crate::random_dyadic::{goodness_exponent, label_goodness, sample_random_system, ReferenceFrame};
use crate::rng::{keyed, stream, trial_seed};
use crate::space::{macias_segovia_metric, validate_quasimetric, CloudSpec, MetricKind, PointCloud, QuasiCertificate};
use crate::stats::Z95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Zero,
    /// `1 / (x - y)` on the first coordinate.
    Cauchy,
    /// `(1 - conj(x) . y)^(-m)` on interleaved complex coordinates.
    Bergman { m: f64 },
    /// `max(0, 1 - rho / h) / max(lambda(x, rho), lambda(y, rho))`.
    NearDiagonal { h: f64 },
    /// Full matrices of real and imaginary parts; `im` may be empty.
    Explicit {
        re: Vec<Vec<f64>>,
        #[serde(default)]
        im: Vec<Vec<f64>>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    #[serde(flatten)]
    pub spec: KernelSpec,
    #[serde(default = "one")]
    pub scale: f64,
}

impl Kernel {
    pub fn new(spec: KernelSpec) -> Self {
        Kernel { spec, scale: 1.0 }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Kernel { spec: self.spec.clone(), scale: self.scale * c }
    }
}

/// Kernel values at every ordered pair, zero on the diagonal.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub values: DMatrix<C64>,
    /// All imaginary parts vanish.
    pub real: bool,
}

impl KernelMatrix {
    pub fn build(cloud: &PointCloud, lambda: &Dominator, kernel: &Kernel) -> Result<Self> {
        let n = cloud.n();
        let mut values = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
        match &kernel.spec {
            KernelSpec::Zero => {}
            KernelSpec::Cauchy => {
                let coords = cloud.coords().ok_or_else(|| Error::invalid("cauchy kernel needs coordinates"))?;
                if coords[0].len() != 1 {
                    return Err(Error::invalid("cauchy kernel needs one-dimensional coordinates"));
                }
                for x in 0..n {
                    for y in 0..n {
                        if x != y {
                            values[(x, y)] = C64::new(1.0 / (coords[x][0] - coords[y][0]), 0.0);
                        }
                    }
                }
            }
            KernelSpec::Bergman { m } => {
                let coords = cloud.coords().ok_or_else(|| Error::invalid("bergman kernel needs coordinates"))?;
                if coords[0].len() % 2 != 0 {
                    return Err(Error::invalid("bergman kernel needs interleaved complex coordinates"));
                }
                if !(*m > 0.0) {
                    return Err(Error::invalid("bergman exponent must be positive"));
                }
                for x in 0..n {
                    for y in 0..n {
                        if x != y {
                            let z = C64::new(1.0, 0.0) - conj_dot(&coords[x], &coords[y]);
                            values[(x, y)] = if m.fract() == 0.0 { z.powi(-(*m as i32)) } else { z.powf(-m) };
                        }
                    }
                }
            }
            KernelSpec::NearDiagonal { h } => {
                if !(*h > 0.0) {
                    return Err(Error::invalid("near-diagonal width must be positive"));
                }
                for x in 0..n {
                    for y in 0..n {
                        let r = cloud.d(x, y);
                        if x != y && r < *h {
                            let l = lambda.eval(x, r).max(lambda.eval(y, r));
                            values[(x, y)] = C64::new((1.0 - r / h) / l, 0.0);
                        }
                    }
                }
            }
            KernelSpec::Explicit { re, im } => {
                let square = |m: &Vec<Vec<f64>>| m.len() == n && m.iter().all(|r| r.len() == n);
                if !square(re) || !(im.is_empty() || square(im)) {
                    return Err(Error::invalid(format!("explicit kernel must be {n} x {n}")));
                }
                for x in 0..n {
                    for y in 0..n {
                        if x != y {
                            values[(x, y)] = C64::new(re[x][y], if im.is_empty() { 0.0 } else { im[x][y] });
                        }
                    }
                }
            }
        }
        if kernel.scale != 1.0 {
            values *= C64::new(kernel.scale, 0.0);
        }
        if let Some(((x, y), v)) = values.iter().enumerate().map(|(k, v)| ((k % n, k / n), v)).find(|(_, v)| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::violation("finite kernel", format!("K({x}, {y}) = {v}")));
        }
        let real = values.iter().all(|v| v.im == 0.0);
        Ok(KernelMatrix { values, real })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, x: usize, y: usize) -> C64 {
        self.values[(x, y)]
    }
}

/// `conj(a) . b` for interleaved complex vectors.
fn conj_dot(a: &[f64], b: &[f64]) -> C64 {
    let mut s = C64::new(0.0, 0.0);
    for k in (0..a.len()).step_by(2) {
        s += C64::new(a[k], -a[k + 1]) * C64::new(b[k], b[k + 1]);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HolderWitness {
    pub x: usize,
    pub x_prime: usize,
    pub y: usize,
    /// Smoothness in the second variable.
    pub second: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelCertificate {
    pub alpha: f64,
    /// Triples are tested when `rho(x, y) >= admissibility * rho(x, x')`.
    pub admissibility: f64,
    pub c_size: f64,
    pub c_holder: f64,
    pub size_witness: Option<(usize, usize)>,
    pub holder_witness: Option<HolderWitness>,
}

/// Smallest size and smoothness constants over every pair and every
/// admissible triple.
pub fn verify_standard_kernel(
    cloud: &PointCloud,
    lambda: &Dominator,
    kernel: &KernelMatrix,
    alpha: f64,
    admissibility: f64,
) -> Result<KernelCertificate> {
    let n = cloud.n();
    if kernel.n() != n {
        return Err(Error::invalid("kernel and cloud sizes differ"));
    }
    if !(alpha > 0.0 && admissibility >= 1.0) {
        return Err(Error::invalid("need alpha > 0 and admissibility constant >= 1"));
    }
    let mut lam = vec![0.0; n * n];
    let mut rho_a = vec![0.0; n * n];
    let mut by_row = vec![C64::new(0.0, 0.0); n * n];
    let mut by_col = vec![C64::new(0.0, 0.0); n * n];
    for x in 0..n {
        for y in 0..n {
            let r = cloud.d(x, y);
            lam[x * n + y] = lambda.eval(x, r);
            rho_a[x * n + y] = r.powf(alpha);
            by_row[x * n + y] = kernel.get(x, y);
            by_col[y * n + x] = kernel.get(x, y);
        }
    }
    let mut c_size = 0.0f64;
    let mut size_witness = None;
    for x in 0..n {
        for y in 0..n {
            if x == y {
                continue;
            }
            let v = kernel.get(x, y).norm() * lam[x * n + y].max(lam[y * n + x]);
            if !v.is_finite() {
                return Err(Error::violation("kernel size bound", format!("unbounded ratio at ({x}, {y})")));
            }
            if v > c_size {
                c_size = v;
                size_witness = Some((x, y));
            }
        }
    }
    let (first, w1) = holder_scan(cloud, &by_row, &rho_a, &lam, admissibility)?;
    let (second, w2) = holder_scan(cloud, &by_col, &rho_a, &lam, admissibility)?;
    let (c_holder, holder_witness) = if second > first {
        (second, w2.map(|(x, x_prime, y)| HolderWitness { x, x_prime, y, second: true }))
    } else {
        (first, w1.map(|(x, x_prime, y)| HolderWitness { x, x_prime, y, second: false }))
    };
    Ok(KernelCertificate { alpha, admissibility, c_size, c_holder, size_witness, holder_witness })
}

/// `max |k(x,y) - k(x',y)| rho(x,y)^a lambda(x, rho(x,y)) / rho(x,x')^a` over
/// triples with `rho(x,y) >= c rho(x,x')`, for `k` stored row-major.
fn holder_scan(cloud: &PointCloud, k: &[C64], rho_a: &[f64], lam: &[f64], c: f64) -> Result<(f64, Option<(usize, usize, usize)>)> {
    let n = cloud.n();
    let mut best = 0.0f64;
    let mut witness = None;
    for x in 0..n {
        let row = cloud.row(x);
        let kx = &k[x * n..(x + 1) * n];
        for xp in 0..n {
            if xp == x {
                continue;
            }
            let thr = c * row[xp];
            let kxp = &k[xp * n..(xp + 1) * n];
            let inv = 1.0 / rho_a[x * n + xp];
            for y in 0..n {
                if y == x || y == xp || row[y] < thr {
                    continue;
                }
                let v = (kx[y] - kxp[y]).norm() * rho_a[x * n + y] * lam[x * n + y] * inv;
                if v > best {
                    best = v;
                    witness = Some((x, xp, y));
                }
            }
        }
    }
    if !best.is_finite() {
        let (x, xp, y) = witness.unwrap_or((0, 0, 0));
        return Err(Error::violation("kernel smoothness bound", format!("unbounded ratio at ({x}, {xp}, {y})")));
    }
    Ok((best, witness))
}

/// `Tf(x) = sum_{y != x} K(x,y) f(y) w(y)`.
pub fn apply(kernel: &KernelMatrix, mu: &DiscreteMeasure, f: &[C64]) -> Vec<C64> {
    let fw = DVector::from_iterator(f.len(), f.iter().zip(&mu.weights).map(|(v, w)| v * w));
    (&kernel.values * fw).as_slice().to_vec()
}

/// The transpose operator `T* g(y) = sum_{x != y} K(x,y) g(x) w(x)`.
pub fn apply_adjoint(kernel: &KernelMatrix, mu: &DiscreteMeasure, g: &[C64]) -> Vec<C64> {
    let gw = DVector::from_iterator(g.len(), g.iter().zip(&mu.weights).map(|(v, w)| v * w));
    (kernel.values.tr_mul(&gw)).as_slice().to_vec()
}

/// `int f g dmu`.
pub fn pairing(mu: &DiscreteMeasure, f: &[C64], g: &[C64]) -> C64 {
    f.iter().zip(g).zip(&mu.weights).map(|((a, b), w)| a * b * w).sum()
}

/// `sqrt(w_x) K(x,y) sqrt(w_y)`, unitarily similar to `T` on `L^2(mu)`.
pub fn weighted_matrix(kernel: &KernelMatrix, mu: &DiscreteMeasure) -> DMatrix<C64> {
    let s: Vec<f64> = mu.weights.iter().map(|w| w.sqrt()).collect();
    DMatrix::from_fn(kernel.n(), kernel.n(), |x, y| kernel.get(x, y) * (s[x] * s[y]))
}

/// Exact `||T||` on `L^2(mu)`.
pub fn operator_norm(kernel: &KernelMatrix, mu: &DiscreteMeasure) -> f64 {
    let w = weighted_matrix(kernel, mu);
    if kernel.real {
        spectral_norm(&w.map(|z| z.re))
    } else {
        spectral_norm(&w)
    }
}

/// Unit-norm `f`, `g` with `<Tf, g>` close to `||T||`.
#[derive(Debug, Clone)]
pub struct ExtremalPair {
    pub f: Vec<C64>,
    pub g: Vec<C64>,
    pub value: C64,
}

const PAIR_ITER: usize = 2000;

/// Power iteration for the top singular pair of the weighted matrix, with a
/// full decomposition when it stalls below half the norm.
pub fn extremal_pair(kernel: &KernelMatrix, mu: &DiscreteMeasure, norm: f64) -> ExtremalPair {
    let n = kernel.n();
    let s: Vec<f64> = mu.weights.iter().map(|w| w.sqrt()).collect();
    let w = weighted_matrix(kernel, mu);
    let finish = |v: DVector<C64>, u: DVector<C64>| {
        let f: Vec<C64> = v.iter().zip(&s).map(|(a, b)| a / b).collect();
        let g: Vec<C64> = u.iter().zip(&s).map(|(a, b)| a.conj() / b).collect();
        let value = pairing(mu, &apply(kernel, mu, &f), &g);
        ExtremalPair { f, g, value }
    };
    if norm == 0.0 {
        let e = DVector::from_element(n, C64::new(1.0 / (n as f64).sqrt(), 0.0));
        return finish(e.clone(), e);
    }
    let mut v = DVector::from_fn(n, |i, _| C64::new(1.0 + 0.5 * (i as f64 * 0.618_033_988_7).fract(), 0.3 * (i as f64 * 0.414_213_562_3).fract()));
    v /= C64::new(v.norm(), 0.0);
    let mut last = 0.0;
    for _ in 0..PAIR_ITER {
        let wv = &w * &v;
        let next = w.ad_mul(&wv);
        let est = wv.norm();
        let nn = next.norm();
        if nn == 0.0 {
            break;
        }
        v = next / C64::new(nn, 0.0);
        if (est - last).abs() <= 1e-13 * est {
            break;
        }
        last = est;
    }
    let wv = &w * &v;
    let u = &wv / C64::new(wv.norm().max(f64::MIN_POSITIVE), 0.0);
    let pair = finish(v, u);
    if pair.value.norm() >= norm / 2.0 {
        return pair;
    }
    log::warn!("power iteration stalled at {} of {norm}; using a full decomposition", pair.value.norm());
    let svd = w.svd(true, true);
    let top = svd.singular_values.imax();
    let u = svd.u.expect("left vectors requested").column(top).into_owned();
    let v = svd.v_t.expect("right vectors requested").row(top).adjoint();
    finish(v, u)
}

/// Ball radii around a centre from its sorted distances: every positive
/// distance, every midpoint between consecutive ones, and twice the largest
/// so the whole cloud is a ball too.
fn ball_radii(sorted: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = sorted.iter().copied().filter(|v| *v > 0.0).collect();
    d.dedup();
    let mut radii = Vec::with_capacity(2 * d.len() + 1);
    for (i, &v) in d.iter().enumerate() {
        radii.push(v);
        if let Some(&next) = d.get(i + 1) {
            radii.push(0.5 * (v + next));
        }
    }
    if let Some(&last) = d.last() {
        radii.push(2.0 * last);
    }
    radii
}

/// `sup_B (int_B |f - <f>_B|^2 dmu / mu(kappa B))^(1/2)` over open balls.
///
/// For the quadratic oscillation the best constant on `B` is the
/// `mu`-average, so no inner optimisation is needed.
pub fn bmo2_norm(cloud: &PointCloud, mu: &DiscreteMeasure, f: &[C64], kappa: f64) -> Result<f64> {
    if !(kappa > 1.0) {
        return Err(Error::invalid(format!("dilation kappa = {kappa} must exceed 1")));
    }
    let n = cloud.n();
    if f.len() != n || mu.n() != n {
        return Err(Error::invalid("function, measure and cloud sizes differ"));
    }
    let mut best = 0.0f64;
    let mut pw = vec![0.0; n + 1];
    let mut pf = vec![C64::new(0.0, 0.0); n + 1];
    let mut pq = vec![0.0; n + 1];
    for x in 0..n {
        let order = cloud.sorted_row(x);
        let row = cloud.row(x);
        let sorted: Vec<f64> = order.iter().map(|&y| row[y]).collect();
        // shifting by f(x) leaves the oscillation unchanged and keeps constants exact
        for (j, &y) in order.iter().enumerate() {
            let g = f[y] - f[x];
            let w = mu.weights[y];
            pw[j + 1] = pw[j] + w;
            pf[j + 1] = pf[j] + g * w;
            pq[j + 1] = pq[j] + g.norm_sqr() * w;
        }
        for r in ball_radii(&sorted) {
            let cnt = sorted.partition_point(|d| *d < r);
            if cnt < 2 {
                continue;
            }
            let osc = (pq[cnt] - pf[cnt].norm_sqr() / pw[cnt]).max(0.0);
            let big = pw[sorted.partition_point(|d| *d < kappa * r)];
            best = best.max(osc / big);
        }
    }
    Ok(best.sqrt())
}

/// `sup_B |<T(b1 chi_B), b2 chi_B>| / mu(Lambda B)` over open balls of `rho`.
pub fn wbp_constant(cloud: &PointCloud, mu: &DiscreteMeasure, kernel: &KernelMatrix, b1: &[C64], b2: &[C64], dilation: f64) -> Result<f64> {
    if !(dilation > 1.0) {
        return Err(Error::invalid(format!("dilation {dilation} must exceed 1")));
    }
    let n = cloud.n();
    if kernel.n() != n || b1.len() != n || b2.len() != n || mu.n() != n {
        return Err(Error::invalid("kernel, functions, measure and cloud sizes differ"));
    }
    let w = &mu.weights;
    let mut sym = vec![C64::new(0.0, 0.0); n * n];
    for x in 0..n {
        for y in 0..n {
            let a = kernel.get(x, y) * b1[y] * b2[x] * (w[x] * w[y]);
            sym[x * n + y] += a;
            sym[y * n + x] += a;
        }
    }
    let mut best = 0.0f64;
    let mut acc = vec![C64::new(0.0, 0.0); n + 1];
    let mut pw = vec![0.0; n + 1];
    for c in 0..n {
        let order = cloud.sorted_row(c);
        let row = cloud.row(c);
        let sorted: Vec<f64> = order.iter().map(|&y| row[y]).collect();
        for (j, &p) in order.iter().enumerate() {
            let sp = &sym[p * n..(p + 1) * n];
            let add: C64 = order[..j].iter().map(|&q| sp[q]).sum();
            acc[j + 1] = acc[j] + add;
            pw[j + 1] = pw[j] + w[p];
        }
        for r in ball_radii(&sorted) {
            let cnt = sorted.partition_point(|d| *d < r);
            let big = pw[sorted.partition_point(|d| *d < dilation * r)];
            best = best.max(acc[cnt].norm() / big);
        }
    }
    Ok(best)
}

/// Minimum over `Q'` of the distance to the complement of the cube of `other`
/// at generation `gen` containing it.
fn min_exterior(ext: &[f64], members: &[usize]) -> f64 {
    members.iter().map(|&x| ext[x]).fold(f64::INFINITY, f64::min)
}

fn inside(members: &[usize], cube_of: &[usize], idx: usize) -> bool {
    members.iter().all(|&x| cube_of[x] == idx)
}

/// The paraproduct as a dense matrix `(Pi f)(x) = sum_y P(x,y) f(y)`.
#[derive(Debug, Clone)]
pub struct Paraproduct {
    pub matrix: DMatrix<C64>,
    /// Admissible `(R' in D', Q' in D)` pairs.
    pub pairs: Vec<(CubeId, CubeId)>,
    /// No admissible pair exists, so `Pi = 0`.
    pub empty: bool,
}

/// `Pi f = sum (int_{R'} f / int_{R'} b2) (Delta^{b1}_{Q'})^t (T^t b2)` over
/// `R'` in `D'` and `Q'` in `D` inside `R'`, `r` generations finer, at
/// distance at least `whitney * l(Q')` from the complement of `R'`.
///
/// The transpose of `Delta^b_Q` is `h -> b^-1 Delta^b_Q(b h)`.
pub fn paraproduct(
    dcloud: &PointCloud,
    d: &DyadicSystem,
    dp: &DyadicSystem,
    mu: &DiscreteMeasure,
    kernel: &KernelMatrix,
    b1: &[C64],
    b2: &[C64],
    r: i32,
    whitney: f64,
) -> Result<Paraproduct> {
    let n = dcloud.n();
    if r < 1 {
        return Err(Error::invalid("paraproduct needs r >= 1"));
    }
    let h = apply_adjoint(kernel, mu, b2);
    let bh: Vec<C64> = h.iter().zip(b1).map(|(a, b)| a * b).collect();
    let mart = decompose(d, mu, &bh, d.k_min, Some(b1))?;
    let ib2 = cube_integrals(dp, mu, b2);
    let mut matrix = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
    let mut pairs = Vec::new();
    for rp in dp.cubes() {
        let g = rp.gen + r;
        if !d.has_gen(g) || g >= d.k_max() {
            continue;
        }
        let ext = exterior_distances(dcloud, dp, rp.gen);
        let cube_of = &dp.level(rp.gen).cube_of;
        let denom = ib2[(rp.gen - dp.k_min) as usize][rp.idx];
        if denom.norm() == 0.0 {
            return Err(Error::violation("accretivity", format!("cube {rp:?} of D' has zero b2-integral")));
        }
        for idx in 0..d.level(g).centers.len() {
            let qp = CubeId { gen: g, idx };
            let mq = d.members(qp);
            if !inside(mq, cube_of, rp.idx) || min_exterior(&ext, mq) < whitney * d.side(g) {
                continue;
            }
            pairs.push((rp, qp));
            let col: Vec<(usize, C64)> = dp.members(rp).iter().map(|&y| (y, C64::new(mu.weights[y], 0.0) / denom)).collect();
            for (x, v) in mart.difference(d, qp, Some(b1)) {
                let u = v / b1[x];
                for &(y, c) in &col {
                    matrix[(x, y)] += u * c;
                }
            }
        }
    }
    let empty = pairs.is_empty();
    Ok(Paraproduct { matrix, pairs, empty })
}

pub fn paraproduct_apply(pp: &Paraproduct, f: &[C64]) -> Vec<C64> {
    (&pp.matrix * DVector::from_column_slice(f)).as_slice().to_vec()
}

/// Exact norm of `Pi` on `L^2(mu)`.
pub fn paraproduct_norm(pp: &Paraproduct, mu: &DiscreteMeasure) -> f64 {
    if pp.empty {
        return 0.0;
    }
    let s: Vec<f64> = mu.weights.iter().map(|w| w.sqrt()).collect();
    let m = DMatrix::from_fn(s.len(), s.len(), |x, y| pp.matrix[(x, y)] * (s[x] / s[y]));
    if m.iter().all(|z| z.im == 0.0) {
        spectral_norm(&m.map(|z| z.re))
    } else {
        spectral_norm(&m)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CarlesonDiagnostic {
    /// `max_Q sum_R ||Delta^b_R(b phi)||^2 / mu(Q)` over Whitney cubes `R`.
    pub max_ratio: f64,
    pub witness: Option<CubeId>,
    /// `||phi||^2` in BMO with dilation `kappa`.
    pub bmo_sq: f64,
}

/// Whitney-cube Carleson sums of `phi` over `Q` in `D'` with `R` in `D`
/// inside `Q`, at least `r` generations finer and `whitney * l(R)` away from
/// the complement of `Q`.
pub fn whitney_carleson(
    rho: &PointCloud,
    dcloud: &PointCloud,
    d: &DyadicSystem,
    dp: &DyadicSystem,
    mu: &DiscreteMeasure,
    phi: &[C64],
    b: &[C64],
    r: i32,
    whitney: f64,
    kappa: f64,
) -> Result<CarlesonDiagnostic> {
    let bphi: Vec<C64> = phi.iter().zip(b).map(|(a, c)| a * c).collect();
    let mart = decompose(d, mu, &bphi, d.k_min, Some(b))?;
    let ext: HashMap<i32, Vec<f64>> = dp.levels.iter().map(|l| (l.gen, exterior_distances(dcloud, dp, l.gen))).collect();
    let mut sums: Vec<Vec<f64>> = dp.levels.iter().map(|l| vec![0.0; l.centers.len()]).collect();
    for q in mart.difference_cubes(d) {
        let members = d.members(q);
        let energy = mart.difference_energy(d, q);
        for g in dp.k_min..=(q.gen - r).min(dp.k_max()) {
            let cube_of = &dp.level(g).cube_of;
            let outer = cube_of[members[0]];
            if inside(members, cube_of, outer) && min_exterior(&ext[&g], members) >= whitney * d.side(q.gen) {
                sums[(g - dp.k_min) as usize][outer] += energy;
            }
        }
    }
    let mut max_ratio = 0.0f64;
    let mut witness = None;
    for (i, level) in sums.iter().enumerate() {
        for (idx, s) in level.iter().enumerate() {
            let q = CubeId { gen: dp.k_min + i as i32, idx };
            let ratio = s / mu.mass_of(dp.members(q));
            if ratio > max_ratio {
                max_ratio = ratio;
                witness = Some(q);
            }
        }
    }
    let bmo = bmo2_norm(rho, mu, phi, kappa)?;
    Ok(CarlesonDiagnostic { max_ratio, witness, bmo_sq: bmo * bmo })
}

/// Everything the surgery of an adjacent pair needs.
pub struct SurgeryInput<'a> {
    pub rho: &'a PointCloud,
    /// The cloud the cubes were built on.
    pub dcloud: &'a PointCloud,
    pub a0: f64,
    /// Snowflake exponent relating `dcloud` to `rho`; 1 when they coincide.
    pub beta: f64,
    pub mu: &'a DiscreteMeasure,
    pub kernel: &'a KernelMatrix,
    pub b1: &'a [C64],
    pub b2: &'a [C64],
    pub d: &'a DyadicSystem,
    pub dp: &'a DyadicSystem,
    pub params: &'a TbParams,
    pub cover: &'a CoverParams,
    pub norm: f64,
    /// Dimension `d` of the dominator.
    pub dim: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct SurgeryTerms {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: [f64; 3],
    pub f: [f64; 3],
    pub g1: f64,
    pub g2: f64,
}

impl SurgeryTerms {
    pub fn sum(&self) -> f64 {
        self.a + self.b + self.c + self.d + self.e.iter().sum::<f64>() + self.f.iter().sum::<f64>() + self.g1 + self.g2
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct SurgeryRhs {
    /// `||T||` times the products of norms bounding A, C, E and F.
    pub boundary: f64,
    /// `eps^-d mu(S1)^(1/2) mu(S2)^(1/2)` summed over B, D and G2.
    pub separated: f64,
    /// `sum_B mu(Lambda B)`, the weight of the weak boundedness constant.
    pub wbp_mass: f64,
    /// `||T|| mu(uncovered)^(1/2) mu(Delta)^(1/2)`.
    pub uncovered: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdjacentSurgeryReport {
    pub q: CubeId,
    pub r: CubeId,
    pub eps: f64,
    pub upsilon: f64,
    /// Generation of the ball family.
    pub k: i32,
    pub attempts: usize,
    pub balls: usize,
    /// `|<T(chi_Q b1), chi_R b2>|`.
    pub total: f64,
    /// `|total - sum of the signed terms|`.
    pub residual: f64,
    pub terms: SurgeryTerms,
    pub rhs: SurgeryRhs,
    pub triangle_holds: bool,
    pub dilated_balls_inside: bool,
    /// Largest ratio of a Cauchy-Schwarz term to its bound; at most 1.
    pub cauchy_schwarz_ratio: f64,
    /// Largest `|B|, |D|, |G2|` over its separation bound.
    pub separated_ratio: f64,
    /// Largest `|<T(b1 chi_B), b2 chi_B>| / mu(Lambda B)` over the balls.
    pub ball_wbp: f64,
    /// `mu(Delta~ \ U) / mu(Delta~)`, zero when `Delta~` is null.
    pub uncovered_fraction: f64,
}

pub const SURGERY_ATTEMPTS: usize = 100;

fn members_mask(n: usize, members: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &x in members {
        m[x] = true;
    }
    m
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect()
}

/// Points of `Q` within `eps l(Q)` of its complement, and points outside
/// `Q` within `eps l(Q)` of it.
fn boundary_mask(dcloud: &PointCloud, sys: &DyadicSystem, q: CubeId, eps: f64) -> Vec<bool> {
    let t = eps * sys.side(q.gen);
    let members = sys.members(q);
    let own = &sys.level(q.gen).cube_of;
    (0..dcloud.n())
        .map(|x| {
            if own[x] == q.idx {
                crate::dyadic::exterior_distance(dcloud, sys, q.gen, x) <= t
            } else {
                dcloud.dist_to_set(x, members) <= t
            }
        })
        .collect()
}

impl SurgeryInput<'_> {
    /// `<T(b1 chi_u), b2 chi_v>`.
    fn pair(&self, u: &[usize], v: &[usize]) -> C64 {
        let w = &self.mu.weights;
        let mut s = C64::new(0.0, 0.0);
        for &x in v {
            let mut inner = C64::new(0.0, 0.0);
            for &y in u {
                inner += self.kernel.get(x, y) * self.b1[y] * w[y];
            }
            s += inner * self.b2[x] * w[x];
        }
        s
    }

    fn norm_of(&self, set: &[usize], b: &[C64]) -> f64 {
        set.iter().map(|&x| b[x].norm_sqr() * self.mu.weights[x]).sum::<f64>().sqrt()
    }

    fn mass(&self, set: &[usize]) -> f64 {
        self.mu.mass_of(set)
    }

    /// Upper bound for a `dcloud` distance given a `rho` distance.
    fn rho_to_d(&self, t: f64) -> f64 {
        if self.beta == 1.0 {
            t
        } else {
            2.0 * t.powf(1.0 / self.beta)
        }
    }
}

/// The A to G decomposition of `<T(chi_Q b1), chi_R b2>` for `Q` in `D` and
/// `R` in `D'` of comparable size and close to each other.
pub fn adjacent_surgery(input: &SurgeryInput, q: CubeId, rr: CubeId, eps: f64, upsilon: f64, dilation: f64, seed: u64) -> Result<AdjacentSurgeryReport> {
    let (d, dp, p) = (input.d, input.dp, input.params);
    let n = input.rho.n();
    if !(eps > 0.0 && eps < 1.0 && upsilon > 0.0 && upsilon < 1.0 && dilation > 1.0) {
        return Err(Error::invalid("need 0 < eps, upsilon < 1 and dilation > 1"));
    }
    let (lq, lr) = (d.side(q.gen), dp.side(rr.gen));
    let gap = input.dcloud_cube_distance(d, q, dp, rr);
    if (q.gen - rr.gen).abs() > p.r || gap >= p.kernel_const * C0 * lq.min(lr) {
        return Err(Error::invalid(format!("cubes {q:?} and {rr:?} are not adjacent and comparable")));
    }
    let in_q = members_mask(n, d.members(q));
    let in_r = members_mask(n, dp.members(rr));
    let bq = boundary_mask(input.dcloud, d, q, eps);
    let br = boundary_mask(input.dcloud, dp, rr, eps);
    let delta: Vec<bool> = (0..n).map(|x| in_q[x] && in_r[x]).collect();
    let q_s = indices(&(0..n).map(|x| in_q[x] && !delta[x] && !br[x]).collect::<Vec<_>>());
    let q_b = indices(&(0..n).map(|x| in_q[x] && !delta[x] && br[x]).collect::<Vec<_>>());
    let r_s = indices(&(0..n).map(|x| in_r[x] && !delta[x] && !bq[x]).collect::<Vec<_>>());
    let r_b = indices(&(0..n).map(|x| in_r[x] && !delta[x] && bq[x]).collect::<Vec<_>>());
    let interior: Vec<bool> = (0..n).map(|x| delta[x] && !bq[x] && !br[x]).collect();
    let interior_idx = indices(&interior);
    let interior_mass = input.mass(&interior_idx);

    // ball generation: the stated scale, refined until a dilated ball around
    // an interior point provably stays within eps min(l(Q), l(R))
    let theta = input.cover.theta;
    let small = eps * lq.min(lr);
    let stated = (small / 8.0).powf(input.beta) / dilation;
    let mut k = (stated.ln() / theta.ln()).ceil() as i32;
    let reach = |k: i32| input.rho_to_d(input.a0 * (1.0 + dilation) * 2.0 * input.cover.radius_unit() * theta.powi(k));
    while reach(k) >= small {
        k += 1;
    }

    let mut attempts = 0;
    let mut cover: Vec<(usize, f64, Vec<usize>)> = Vec::new();
    let mut uncovered_fraction = 0.0;
    if interior_mass > 0.0 {
        let mut best = f64::INFINITY;
        loop {
            if attempts == SURGERY_ATTEMPTS {
                return Err(Error::infeasible(format!(
                    "no ball family covered all but {upsilon} of the interior in {SURGERY_ATTEMPTS} attempts; best uncovered fraction {best}"
                )));
            }
            let mut fam = sample_almost_cover(input.rho, k, input.cover, trial_seed(seed, attempts as u64))?;
            attempts += 1;
            fam.restrict_to(&interior_idx);
            let missed: Vec<usize> = interior_idx.iter().copied().filter(|&x| !fam.covers(x)).collect();
            let frac = input.mass(&missed) / interior_mass;
            best = best.min(frac);
            if frac <= upsilon {
                uncovered_fraction = frac;
                cover = fam.balls.iter().map(|b| (b.center, b.radius, b.members.clone())).collect();
                break;
            }
        }
    }

    let mut dilated_balls_inside = true;
    let mut in_u = vec![false; n];
    let mut ball_of = vec![usize::MAX; n];
    let mut balls: Vec<Vec<usize>> = Vec::new();
    let mut wbp_mass = 0.0;
    let mut ball_wbp = 0.0f64;
    let mut g1 = C64::new(0.0, 0.0);
    for (i, (center, radius, members)) in cover.iter().enumerate() {
        let row = input.rho.row(*center);
        let big: Vec<usize> = (0..n).filter(|&y| row[y] < dilation * radius).collect();
        if big.iter().any(|&y| !delta[y]) {
            dilated_balls_inside = false;
        }
        let kept: Vec<usize> = members.iter().copied().filter(|&y| delta[y]).collect();
        for &y in &kept {
            in_u[y] = true;
            ball_of[y] = i;
        }
        let own = input.pair(&kept, &kept);
        let big_mass = input.mass(&big);
        wbp_mass += big_mass;
        ball_wbp = ball_wbp.max(own.norm() / big_mass);
        g1 += own;
        balls.push(kept);
    }
    let u = indices(&in_u);
    let mut g2 = C64::new(0.0, 0.0);
    {
        let w = &input.mu.weights;
        for &x in &u {
            for &y in &u {
                if ball_of[x] != ball_of[y] {
                    g2 += input.kernel.get(x, y) * input.b1[y] * w[y] * input.b2[x] * w[x];
                }
            }
        }
    }
    let delta_idx = indices(&delta);
    let q_all = d.members(q).to_vec();
    let r_all = dp.members(rr).to_vec();
    let omega_q = indices(&(0..n).map(|x| delta[x] && br[x] && !in_u[x]).collect::<Vec<_>>());
    let omega_r = indices(&(0..n).map(|x| delta[x] && bq[x] && !br[x] && !in_u[x]).collect::<Vec<_>>());
    let omega_i = indices(&(0..n).map(|x| interior[x] && !in_u[x]).collect::<Vec<_>>());
    let omegas = [&omega_q, &omega_r, &omega_i];

    let a = input.pair(&q_all, &r_b);
    let b = input.pair(&q_all, &r_s);
    let c = input.pair(&q_b, &delta_idx);
    let dd = input.pair(&q_s, &delta_idx);
    let e: Vec<C64> = omegas.iter().map(|o| input.pair(&delta_idx, o)).collect();
    let f: Vec<C64> = omegas.iter().map(|o| input.pair(o, &u)).collect();
    let total = input.pair(&q_all, &r_all);
    let signed = a + b + c + dd + e.iter().sum::<C64>() + f.iter().sum::<C64>() + g1 + g2;
    let terms = SurgeryTerms {
        a: a.norm(),
        b: b.norm(),
        c: c.norm(),
        d: dd.norm(),
        e: [e[0].norm(), e[1].norm(), e[2].norm()],
        f: [f[0].norm(), f[1].norm(), f[2].norm()],
        g1: g1.norm(),
        g2: g2.norm(),
    };
    let scale = terms.sum().max(total.norm());
    let triangle_holds = total.norm() <= terms.sum() + 1e-12 * scale;

    let nb1 = |s: &[usize]| input.norm_of(s, input.b1);
    let nb2 = |s: &[usize]| input.norm_of(s, input.b2);
    let cs_bounds = [
        (terms.a, nb1(&q_all) * nb2(&r_b)),
        (terms.c, nb1(&q_b) * nb2(&delta_idx)),
        (terms.e[0], nb1(&delta_idx) * nb2(&omega_q)),
        (terms.e[1], nb1(&delta_idx) * nb2(&omega_r)),
        (terms.e[2], nb1(&delta_idx) * nb2(&omega_i)),
        (terms.f[0], nb1(&omega_q) * nb2(&u)),
        (terms.f[1], nb1(&omega_r) * nb2(&u)),
        (terms.f[2], nb1(&omega_i) * nb2(&u)),
    ];
    let mut boundary = 0.0;
    let mut cauchy_schwarz_ratio = 0.0f64;
    for (v, prod) in cs_bounds {
        let bound = input.norm * prod;
        boundary += bound;
        if v > 0.0 {
            cauchy_schwarz_ratio = cauchy_schwarz_ratio.max(if bound > 0.0 { v / bound } else { f64::INFINITY });
        }
    }
    let sep = |s1: &[usize], s2: &[usize]| eps.powf(-input.dim) * (input.mass(s1) * input.mass(s2)).sqrt();
    let mut g2_bound = 0.0;
    for (i, bi) in balls.iter().enumerate() {
        let rest: Vec<usize> = u.iter().copied().filter(|&x| ball_of[x] != i).collect();
        g2_bound += sep(bi, &rest);
    }
    let sep_pairs = [(terms.b, sep(&q_all, &r_s)), (terms.d, sep(&q_s, &delta_idx)), (terms.g2, g2_bound)];
    let mut separated = 0.0;
    let mut separated_ratio = 0.0f64;
    for (v, bound) in sep_pairs {
        separated += bound;
        if v > 0.0 {
            separated_ratio = separated_ratio.max(if bound > 0.0 { v / bound } else { f64::INFINITY });
        }
    }
    let missed: Vec<usize> = interior_idx.iter().copied().filter(|&x| !in_u[x]).collect();
    let rhs = SurgeryRhs {
        boundary,
        separated,
        wbp_mass,
        uncovered: input.norm * (input.mass(&missed) * input.mass(&delta_idx)).sqrt(),
    };
    Ok(AdjacentSurgeryReport {
        q,
        r: rr,
        eps,
        upsilon,
        k,
        attempts,
        balls: balls.len(),
        total: total.norm(),
        residual: (total - signed).norm(),
        terms,
        rhs,
        triangle_holds,
        dilated_balls_inside,
        cauchy_schwarz_ratio,
        separated_ratio,
        ball_wbp,
        uncovered_fraction,
    })
}

impl SurgeryInput<'_> {
    fn dcloud_cube_distance(&self, d: &DyadicSystem, q: CubeId, dp: &DyadicSystem, r: CubeId) -> f64 {
        let rm = dp.members(r);
        d.members(q).iter().map(|&x| self.dcloud.dist_to_set(x, rm)).fold(f64::INFINITY, f64::min)
    }
}

/// Adjacent comparable pairs `(Q in D, R in D')` in generation order.
pub fn adjacent_pairs(dcloud: &PointCloud, d: &DyadicSystem, dp: &DyadicSystem, params: &TbParams) -> Vec<(CubeId, CubeId)> {
    let dist = CubeDistances::new(dcloud, d, dp);
    let mut out = Vec::new();
    for q in d.cubes() {
        for r in dp.cubes() {
            if (q.gen - r.gen).abs() <= params.r && dist.get(q, r) < params.kernel_const * C0 * d.side(q.gen).min(dp.side(r.gen)) {
                out.push((q, r));
            }
        }
    }
    out
}

/// A complete test problem.
#[derive(Debug, Clone)]
pub struct TbInstance {
    pub cloud: PointCloud,
    pub mu: DiscreteMeasure,
    pub lambda: Dominator,
    pub kernel: Kernel,
    pub b1: Vec<C64>,
    pub b2: Vec<C64>,
    /// Quasimetric constant, when already known.
    pub a0: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TbOptions {
    /// Ratio of the cube systems.
    pub delta: f64,
    pub r: i32,
    pub kappa: f64,
    pub wbp_dilation: f64,
    pub eps: f64,
    pub upsilon: f64,
    pub alpha: f64,
    /// Admissibility constant of the kernel smoothness.
    pub kernel_const: f64,
    /// Values of `r` for the bad-part decay.
    pub r_decay: Vec<i32>,
    pub paraproduct: bool,
    pub separated_bound: bool,
    /// Adjacent pairs submitted to the surgery for the first seed.
    pub surgery_pairs: usize,
}

impl Default for TbOptions {
    fn default() -> Self {
        TbOptions {
            delta: 0.25,
            r: 2,
            kappa: 2.0,
            wbp_dilation: 2.0,
            eps: 0.1,
            upsilon: 0.5,
            alpha: 1.0,
            kernel_const: 2.0,
            r_decay: vec![1, 2, 3, 4],
            paraproduct: true,
            separated_bound: true,
            surgery_pairs: 0,
        }
    }
}

/// On-disk instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceBundle {
    pub cloud: CloudSpec,
    pub weights: Vec<f64>,
    pub dominator: DominatorSpec,
    pub kernel: Kernel,
    pub b1: Vec<[f64; 2]>,
    pub b2: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<TbOptions>,
}

fn to_pairs(v: &[C64]) -> Vec<[f64; 2]> {
    v.iter().map(|z| [z.re, z.im]).collect()
}

fn from_pairs(v: &[[f64; 2]]) -> Vec<C64> {
    v.iter().map(|p| C64::new(p[0], p[1])).collect()
}

impl TbInstance {
    pub fn to_bundle(&self, options: Option<TbOptions>) -> InstanceBundle {
        InstanceBundle {
            cloud: self.cloud.to_spec(),
            weights: self.mu.weights.clone(),
            dominator: self.lambda.to_spec(),
            kernel: self.kernel.clone(),
            b1: to_pairs(&self.b1),
            b2: to_pairs(&self.b2),
            a0: self.a0,
            options,
        }
    }

    pub fn from_bundle(bundle: &InstanceBundle) -> Result<Self> {
        let cloud = PointCloud::from_spec(&bundle.cloud)?;
        let n = cloud.n();
        let mu = DiscreteMeasure::new(bundle.weights.clone())?;
        let lambda = Dominator::from_spec(&bundle.dominator, &cloud)?;
        let (b1, b2) = (from_pairs(&bundle.b1), from_pairs(&bundle.b2));
        if mu.n() != n || b1.len() != n || b2.len() != n {
            return Err(Error::invalid(format!("instance arrays must all have {n} entries")));
        }
        Ok(TbInstance { cloud, mu, lambda, kernel: bundle.kernel.clone(), b1, b2, a0: bundle.a0 })
    }

    pub fn with_kernel(&self, kernel: Kernel) -> Self {
        TbInstance { kernel, ..self.clone() }
    }
}

/// Absolute pairing sums per class of cube pairs.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ClassSums {
    pub separated: f64,
    pub nested: f64,
    pub adjacent: f64,
    pub expectation: f64,
    pub bad: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedDiagnostics {
    pub seed: u64,
    pub classes: ClassSums,
    /// `|<Tf, g> - sum of all pairings| / |<Tf, g>|`.
    pub decomposition_error: f64,
    /// `||T_sep(D, D')|| + ||T_sep(D', D)||`, when computed.
    pub separated_norm: Option<f64>,
    /// Separated class sum over that norm (`f`, `g` have unit norm).
    pub separated_ratio: Option<f64>,
    /// `||f_bad||^2` for each value of `r_decay`.
    pub bad_energy: Vec<f64>,
    pub paraproduct_norm: Option<f64>,
    pub paraproduct_empty: Option<bool>,
    pub carleson: Option<CarlesonDiagnostic>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecayRow {
    pub r: i32,
    pub mean: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TbReport {
    pub n: usize,
    pub norm: f64,
    pub bmo_tb1: f64,
    pub bmo_tstar_b2: f64,
    pub wbp: f64,
    /// `bmo_tb1 + bmo_tstar_b2 + wbp + 1`.
    pub rhs: f64,
    pub ratio: f64,
    /// `|<Tf, g>|` for the near-extremal pair.
    pub extremal: f64,
    pub r: i32,
    pub r_admissible: bool,
    pub seeds: Vec<SeedDiagnostics>,
    pub bad_decay: Vec<DecayRow>,
    pub bad_decay_monotone: bool,
    pub surgeries: Vec<AdjacentSurgeryReport>,
}

impl TbReport {
    /// One row per seed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,n,norm,bmo_tb1,bmo_tstar_b2,wbp,ratio,separated,nested,adjacent,expectation,bad,decomposition_error\n");
        for row in &self.seeds {
            let c = &row.classes;
            let vals = [self.norm, self.bmo_tb1, self.bmo_tstar_b2, self.wbp, self.ratio, c.separated, c.nested, c.adjacent, c.expectation, c.bad, row.decomposition_error];
            let _ = write!(s, "{},{}", row.seed, self.n);
            for v in vals {
                let _ = write!(s, ",{v:.11e}");
            }
            s.push('\n');
        }
        s
    }
}

/// The norm of `T` and the three right-hand side functionals.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TbFunctionals {
    pub norm: f64,
    pub bmo_tb1: f64,
    pub bmo_tstar_b2: f64,
    pub wbp: f64,
}

pub fn tb_functionals(inst: &TbInstance, kernel: &KernelMatrix, kappa: f64, dilation: f64) -> Result<TbFunctionals> {
    let norm = operator_norm(kernel, &inst.mu);
    let tb1 = apply(kernel, &inst.mu, &inst.b1);
    let tb2 = apply_adjoint(kernel, &inst.mu, &inst.b2);
    Ok(TbFunctionals {
        norm,
        bmo_tb1: bmo2_norm(&inst.cloud, &inst.mu, &tb1, kappa)?,
        bmo_tstar_b2: bmo2_norm(&inst.cloud, &inst.mu, &tb2, kappa)?,
        wbp: wbp_constant(&inst.cloud, &inst.mu, kernel, &inst.b1, &inst.b2, dilation)?,
    })
}

/// The cloud cubes are built on: `rho` itself for a metric, the snowflaked
/// path metric otherwise; with its exponent.
pub fn cube_cloud(cloud: &PointCloud, a0: f64) -> Result<(PointCloud, f64)> {
    if a0 <= 1.0 {
        Ok((cloud.clone(), 1.0))
    } else {
        let s = macias_segovia_metric(cloud, a0)?;
        Ok((s.metric, s.beta))
    }
}

enum Piece {
    Diff(CubeId),
    Start,
}

/// The end-to-end run: functionals, a near-extremal pair, and its
/// decomposition against random cube systems for every seed.
pub fn tb_check(inst: &TbInstance, opts: &TbOptions, seeds: &[u64]) -> Result<TbReport> {
    let n = inst.cloud.n();
    verify_upper_doubling(&inst.cloud, &inst.mu, &inst.lambda)?;
    let kernel = KernelMatrix::build(&inst.cloud, &inst.lambda, &inst.kernel)?;
    let fx = tb_functionals(inst, &kernel, opts.kappa, opts.wbp_dilation)?;
    let rhs = fx.bmo_tb1 + fx.bmo_tstar_b2 + fx.wbp + 1.0;
    let pair = extremal_pair(&kernel, &inst.mu, fx.norm);

    let cert: Option<QuasiCertificate> = if inst.a0.is_none() || opts.surgery_pairs > 0 {
        Some(validate_quasimetric(&inst.cloud, &crate::space::default_eps_grid())?)
    } else {
        None
    };
    let a0 = inst.a0.or(cert.as_ref().map(|c| c.a0)).unwrap_or(1.0);
    let (dcloud, beta) = cube_cloud(&inst.cloud, a0)?;
    let lambda_d = inst.lambda.on_snowflake(beta);
    let dim = lambda_d.dim();
    let gamma = goodness_exponent(opts.alpha, dim);
    let params = TbParams {
        alpha: opts.alpha,
        d: dim,
        gamma,
        r: opts.r,
        kappa: opts.kappa,
        wbp_dilation: opts.wbp_dilation,
        kernel_const: opts.kernel_const,
        c0: crate::dyadic::C0,
        c1: crate::dyadic::C1,
        c3: crate::dyadic::C3,
    };
    let r_admissible = params.r_admissible(opts.delta);
    if !r_admissible {
        log::warn!("r = {} violates the generation-gap inequalities at delta = {}", opts.r, opts.delta);
    }
    let frame = ReferenceFrame::new(&dcloud, opts.delta)?;
    let expected = pairing(&inst.mu, &apply(&kernel, &inst.mu, &pair.f), &pair.g);

    let mut rows = Vec::with_capacity(seeds.len());
    let mut surgeries = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        let d = sample_random_system(&dcloud, &frame, trial_seed(seed, 0))?.system;
        let dp = sample_random_system(&dcloud, &frame, trial_seed(seed, 1))?.system;
        let m = d.k_min.max(dp.k_min);
        let mf = decompose(&d, &inst.mu, &pair.f, m, Some(&inst.b1))?;
        let mg = decompose(&dp, &inst.mu, &pair.g, m, Some(&inst.b2))?;
        let good_d = label_goodness(&dcloud, &d, &dp, opts.r, gamma);
        let good_dp = label_goodness(&dcloud, &dp, &d, opts.r, gamma);
        let dist = CubeDistances::new(&dcloud, &d, &dp);

        let pieces_f: Vec<(Piece, Vec<(usize, C64)>)> = mf
            .difference_cubes(&d)
            .map(|q| (Piece::Diff(q), mf.difference(&d, q, Some(&inst.b1))))
            .chain(mf.start_cubes().map(|q| (Piece::Start, mf.expectation(&d, q, Some(&inst.b1)))))
            .collect();
        let pieces_g: Vec<(Piece, Vec<(usize, C64)>)> = mg
            .difference_cubes(&dp)
            .map(|r| (Piece::Diff(r), mg.difference(&dp, r, Some(&inst.b2))))
            .chain(mg.start_cubes().map(|r| (Piece::Start, mg.expectation(&dp, r, Some(&inst.b2)))))
            .collect();
        let mut classes = ClassSums::default();
        let mut total = C64::new(0.0, 0.0);
        let mut tphi = vec![C64::new(0.0, 0.0); n];
        for (pf, phi) in &pieces_f {
            tphi.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
            for &(y, v) in phi {
                let c = v * inst.mu.weights[y];
                for (x, t) in tphi.iter_mut().enumerate() {
                    *t += kernel.get(x, y) * c;
                }
            }
            for (pg, psi) in &pieces_g {
                let val: C64 = psi.iter().map(|&(x, v)| tphi[x] * v * inst.mu.weights[x]).sum();
                total += val;
                let a = val.norm();
                let slot = match (pf, pg) {
                    (Piece::Start, _) | (_, Piece::Start) => &mut classes.expectation,
                    (Piece::Diff(q), Piece::Diff(r)) => {
                        if !good_d[(q.gen - d.k_min) as usize][q.idx] || !good_dp[(r.gen - dp.k_min) as usize][r.idx] {
                            &mut classes.bad
                        } else {
                            let gap = dist.get(*q, *r);
                            if (q.gen - r.gen).abs() <= opts.r {
                                if gap < params.kernel_const * C0 * d.side(q.gen).min(dp.side(r.gen)) {
                                    &mut classes.adjacent
                                } else {
                                    &mut classes.separated
                                }
                            } else if gap == 0.0 {
                                &mut classes.nested
                            } else {
                                &mut classes.separated
                            }
                        }
                    }
                };
                *slot += a;
            }
        }
        let decomposition_error = (total - expected).norm() / expected.norm().max(f64::MIN_POSITIVE);

        let (separated_norm, separated_ratio) = if opts.separated_bound {
            let m1 = assemble_separated_with(&dist, &d, &dp, &inst.mu, &lambda_d, opts.alpha)?;
            let dist_t = CubeDistances::new(&dcloud, &dp, &d);
            let m2 = assemble_separated_with(&dist_t, &dp, &d, &inst.mu, &lambda_d, opts.alpha)?;
            let s = matrix_norm(&m1)?.power + matrix_norm(&m2)?.power;
            (Some(s), Some(if s > 0.0 { classes.separated / s } else { 0.0 }))
        } else {
            (None, None)
        };

        let mut bad_energy = Vec::with_capacity(opts.r_decay.len());
        for &r in &opts.r_decay {
            let good = label_goodness(&dcloud, &d, &dp, r, gamma);
            let mut fb = vec![C64::new(0.0, 0.0); n];
            for q in mf.difference_cubes(&d) {
                if !good[(q.gen - d.k_min) as usize][q.idx] {
                    for (x, v) in mf.difference(&d, q, Some(&inst.b1)) {
                        fb[x] += v;
                    }
                }
            }
            bad_energy.push(crate::martingale::l2_norm_sq(&inst.mu, &fb));
        }

        let (paraproduct_norm, paraproduct_empty, carleson) = if opts.paraproduct {
            let pp = paraproduct(&dcloud, &d, &dp, &inst.mu, &kernel, &inst.b1, &inst.b2, opts.r, params.whitney())?;
            let tb2 = apply_adjoint(&kernel, &inst.mu, &inst.b2);
            let car = whitney_carleson(&inst.cloud, &dcloud, &d, &dp, &inst.mu, &tb2, &inst.b1, opts.r, params.whitney(), opts.kappa)?;
            (Some(paraproduct_norm(&pp, &inst.mu)), Some(pp.empty), Some(car))
        } else {
            (None, None, None)
        };

        if si == 0 && opts.surgery_pairs > 0 {
            let cert = cert.as_ref().expect("certificate computed for the surgery");
            let theta = opts.delta.min(cert.a0.powi(-4) / 64.0);
            let k0 = crate::ball_cover::MIN_COVER_TRIALS;
            let cover = derive_cover_params(&inst.cloud, cert, theta, opts.upsilon, 0, k0, trial_seed(seed, 2))?;
            let input = SurgeryInput {
                rho: &inst.cloud,
                dcloud: &dcloud,
                a0,
                beta,
                mu: &inst.mu,
                kernel: &kernel,
                b1: &inst.b1,
                b2: &inst.b2,
                d: &d,
                dp: &dp,
                params: &params,
                cover: &cover,
                norm: fx.norm,
                dim,
            };
            for (q, r) in adjacent_pairs(&dcloud, &d, &dp, &params).into_iter().take(opts.surgery_pairs) {
                surgeries.push(adjacent_surgery(&input, q, r, opts.eps, opts.upsilon, opts.wbp_dilation, trial_seed(seed, 3))?);
            }
        }

        rows.push(SeedDiagnostics {
            seed,
            classes,
            decomposition_error,
            separated_norm,
            separated_ratio,
            bad_energy,
            paraproduct_norm,
            paraproduct_empty,
            carleson,
        });
    }

    let bad_decay: Vec<DecayRow> = opts
        .r_decay
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let vals: Vec<f64> = rows.iter().map(|s| s.bad_energy[i]).collect();
            let k = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / k;
            let var = if vals.len() > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) } else { 0.0 };
            DecayRow { r, mean, std_err: (var / k).sqrt() }
        })
        .collect();
    let bad_decay_monotone = bad_decay.windows(2).all(|w| w[1].mean <= w[0].mean + Z95 * (w[0].std_err + w[1].std_err) + 1e-15);

    Ok(TbReport {
        n,
        norm: fx.norm,
        bmo_tb1: fx.bmo_tb1,
        bmo_tstar_b2: fx.bmo_tstar_b2,
        wbp: fx.wbp,
        rhs,
        ratio: fx.norm / rhs,
        extremal: pair.value.norm(),
        r: opts.r,
        r_admissible,
        seeds: rows,
        bad_decay,
        bad_decay_monotone,
        surgeries,
    })
}

/// Smallest modulus of a sampled point.
const BERGMAN_MIN_RADIUS: f64 = 0.05;
pub const BERGMAN_HALVINGS: usize = 50;

/// Points of the closed unit ball of `C^dim`, biased toward the sphere, with
/// the boundary quasimetric, the kernel `(1 - conj(x) . y)^(-m)` and the
/// dominator `max((1 - |x|)^m, r^m)`.
///
/// The uniform weight starts at `1 / samples` and drops to the largest value
/// the dominator allows; halvings then absorb rounding.
pub fn bergman_preset(dim: usize, m: f64, samples: usize, seed: u64) -> Result<TbInstance> {
    if dim == 0 || !(m > 0.0) || samples == 0 {
        return Err(Error::invalid("bergman preset needs dim >= 1, m > 0 and at least one sample"));
    }
    let mut rng = keyed(seed, stream::SAMPLE, dim as i64, samples as u64);
    let coords: Vec<Vec<f64>> = (0..samples)
        .map(|_| {
            let dir: Vec<f64> = (0..2 * dim).map(|_| normal(&mut rng)).collect();
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u: f64 = rng.gen();
            let radius = 1.0 - (1.0 - BERGMAN_MIN_RADIUS) * (1.0 - u).powi(3);
            dir.iter().map(|v| v / len * radius).collect()
        })
        .collect();
    let cloud = PointCloud::from_coords(coords, MetricKind::Bergman)?;
    let lambda = Dominator::bergman(&cloud, m)?;
    let mut w = (1.0 / samples as f64).min(max_uniform_weight(&cloud, &lambda));
    let mut halvings = 0;
    let mu = loop {
        let mu = DiscreteMeasure::uniform(samples, w)?;
        if verify_upper_doubling(&cloud, &mu, &lambda).is_ok() {
            break mu;
        }
        if halvings == BERGMAN_HALVINGS {
            return Err(Error::infeasible(format!("no uniform weight passed the doubling check after {BERGMAN_HALVINGS} halvings")));
        }
        w *= 0.5;
        halvings += 1;
    };
    let a0 = validate_quasimetric(&cloud, &[])?.a0;
    let one = vec![C64::new(1.0, 0.0); samples];
    Ok(TbInstance { cloud, mu, lambda, kernel: Kernel::new(KernelSpec::Bergman { m }), b1: one.clone(), b2: one, a0: Some(a0) })
}

fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

/// `min |1 - conj(x) . y| / d(x, y)` over distinct pairs.
pub fn bergman_lower_ratio(cloud: &PointCloud) -> Result<f64> {
    let coords = cloud.coords().ok_or_else(|| Error::invalid("needs coordinates"))?;
    let n = cloud.n();
    let mut best = f64::INFINITY;
    for x in 0..n {
        for y in 0..n {
            if x != y {
                let z = C64::new(1.0, 0.0) - conj_dot(&coords[x], &coords[y]);
                best = best.min(z.norm() / cloud.d(x, y));
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ball_cover::derive_params_with_pi0;
    use crate::dyadic::{C1, C3};
    use crate::space::default_eps_grid;

    fn grid_instance(n: usize, kernel: KernelSpec) -> TbInstance {
        let coords = (0..n).map(|i| vec![i as f64 / (n - 1).max(1) as f64]).collect();
        let cloud = PointCloud::from_coords(coords, MetricKind::Euclidean).unwrap();
        let one = vec![C64::new(1.0, 0.0); n];
        TbInstance {
            cloud,
            mu: DiscreteMeasure::uniform(n, 1.0 / n as f64).unwrap(),
            lambda: Dominator::power(3.0, 1.0).unwrap(),
            kernel: Kernel::new(kernel),
            b1: one.clone(),
            b2: one,
            a0: Some(1.0),
        }
    }

    fn kernel_of(inst: &TbInstance) -> KernelMatrix {
        KernelMatrix::build(&inst.cloud, &inst.lambda, &inst.kernel).unwrap()
    }

    fn wave(n: usize, a: f64, b: f64) -> Vec<C64> {
        (0..n).map(|i| C64::new((a * i as f64).sin() + 0.5, (b * i as f64).cos())).collect()
    }

    #[test]
    fn zero_kernel_has_zero_everything() {
        let inst = grid_instance(20, KernelSpec::Zero);
        let k = kernel_of(&inst);
        let cert = verify_standard_kernel(&inst.cloud, &inst.lambda, &k, 1.0, 2.0).unwrap();
        assert_eq!((cert.c_size, cert.c_holder), (0.0, 0.0));
        assert_eq!(operator_norm(&k, &inst.mu), 0.0);
        assert_eq!(wbp_constant(&inst.cloud, &inst.mu, &k, &inst.b1, &inst.b2, 2.0).unwrap(), 0.0);
        let opts = TbOptions { separated_bound: false, ..TbOptions::default() };
        let rep = tb_check(&inst, &opts, &[1]).unwrap();
        assert_eq!(rep.norm, 0.0);
        assert_eq!(rep.ratio, 0.0);
    }

    #[test]
    fn point_mass_picks_out_a_column() {
        let inst = grid_instance(15, KernelSpec::Cauchy);
        let k = kernel_of(&inst);
        let y0 = 6;
        let mut f = vec![C64::new(0.0, 0.0); 15];
        f[y0] = C64::new(1.0 / inst.mu.weights[y0], 0.0);
        let tf = apply(&k, &inst.mu, &f);
        for x in 0..15 {
            let want = if x == y0 { 0.0 } else { 1.0 / (inst.cloud.coords().unwrap()[x][0] - inst.cloud.coords().unwrap()[y0][0]) };
            assert!((tf[x].re - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn transpose_identity_and_naive_sum() {
        let n = 40;
        let inst = grid_instance(n, KernelSpec::Cauchy);
        let k = kernel_of(&inst);
        let (f, g) = (wave(n, 0.3, 0.7), wave(n, 1.1, 0.2));
        let lhs = pairing(&inst.mu, &apply(&k, &inst.mu, &f), &g);
        let rhs = pairing(&inst.mu, &f, &apply_adjoint(&k, &inst.mu, &g));
        assert!((lhs - rhs).norm() <= 1e-10 * lhs.norm());
        let xs: Vec<f64> = inst.cloud.coords().unwrap().iter().map(|c| c[0]).collect();
        let tf = apply(&k, &inst.mu, &f);
        for x in 0..n {
            let mut s = C64::new(0.0, 0.0);
            for y in 0..n {
                if y != x {
                    s += f[y] / (xs[x] - xs[y]) / n as f64;
                }
            }
            assert!((s - tf[x]).norm() <= 1e-12 * s.norm().max(1.0));
        }
    }

    #[test]
    fn rank_one_norm_is_product_of_weighted_norms() {
        let n = 12;
        let mut inst = grid_instance(n, KernelSpec::Zero);
        inst.mu = DiscreteMeasure::new((0..n).map(|i| 0.05 + 0.01 * i as f64).collect()).unwrap();
        let u: Vec<f64> = (0..n).map(|i| if i < 6 { 1.0 + i as f64 } else { 0.0 }).collect();
        let v: Vec<f64> = (0..n).map(|i| if i >= 6 { 2.0 - 0.1 * i as f64 } else { 0.0 }).collect();
        let re: Vec<Vec<f64>> = (0..n).map(|x| (0..n).map(|y| u[x] * v[y]).collect()).collect();
        inst.kernel = Kernel::new(KernelSpec::Explicit { re, im: Vec::new() });
        let k = kernel_of(&inst);
        let norm = |h: &[f64]| h.iter().zip(&inst.mu.weights).map(|(a, w)| a * a * w).sum::<f64>().sqrt();
        let want = norm(&u) * norm(&v);
        assert!((operator_norm(&k, &inst.mu) - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn power_pair_matches_dense_norm() {
        let inst = grid_instance(120, KernelSpec::Cauchy);
        let k = kernel_of(&inst);
        let norm = operator_norm(&k, &inst.mu);
        let pair = extremal_pair(&k, &inst.mu, norm);
        assert!((pair.value.norm() - norm).abs() <= 1e-6 * norm, "{} vs {norm}", pair.value.norm());
        let unit = |h: &[C64]| crate::martingale::l2_norm_sq(&inst.mu, h);
        assert!((unit(&pair.f) - 1.0).abs() < 1e-9 && (unit(&pair.g) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bmo_of_constants_and_two_points() {
        let inst = grid_instance(30, KernelSpec::Zero);
        let c = vec![C64::new(2.5, -1.0); 30];
        assert_eq!(bmo2_norm(&inst.cloud, &inst.mu, &c, 2.0).unwrap(), 0.0);
        let cloud = PointCloud::from_coords(vec![vec![0.0], vec![1.0]], MetricKind::Euclidean).unwrap();
        let half = [C64::new(0.0, 0.0), C64::new(1.0, 0.0)];
        // only the whole space oscillates: w0 w1 / (w0 + w1)^2
        for (w0, w1) in [(0.5, 0.5), (0.25, 0.75)] {
            let mu = DiscreteMeasure::new(vec![w0, w1]).unwrap();
            let want = (w0 * w1).sqrt() / (w0 + w1);
            assert!((bmo2_norm(&cloud, &mu, &half, 2.0).unwrap() - want).abs() < 1e-15);
        }
        let f = wave(30, 0.4, 0.9);
        let a = bmo2_norm(&inst.cloud, &inst.mu, &f, 3.0).unwrap();
        let f3: Vec<C64> = f.iter().map(|z| z * C64::new(0.0, -3.0)).collect();
        assert!((bmo2_norm(&inst.cloud, &inst.mu, &f3, 3.0).unwrap() - 3.0 * a).abs() <= 1e-12 * a);
        assert!(bmo2_norm(&inst.cloud, &inst.mu, &f, 1.0).is_err());
    }

    /// Every ball of the family enumerated explicitly.
    fn naive_wbp(inst: &TbInstance, k: &KernelMatrix, dilation: f64) -> f64 {
        let n = inst.cloud.n();
        let w = &inst.mu.weights;
        let mut best = 0.0f64;
        for c in 0..n {
            let mut d: Vec<f64> = inst.cloud.row(c).to_vec();
            d.sort_by(f64::total_cmp);
            for r in ball_radii(&d) {
                let ball: Vec<usize> = (0..n).filter(|&y| inst.cloud.d(c, y) < r).collect();
                let big: f64 = (0..n).filter(|&y| inst.cloud.d(c, y) < dilation * r).map(|y| w[y]).sum();
                let mut s = C64::new(0.0, 0.0);
                for &x in &ball {
                    for &y in &ball {
                        s += k.get(x, y) * inst.b1[y] * w[y] * inst.b2[x] * w[x];
                    }
                }
                best = best.max(s.norm() / big);
            }
        }
        best
    }

    #[test]
    fn wbp_matches_enumeration() {
        let mut inst = grid_instance(25, KernelSpec::Cauchy);
        let k = kernel_of(&inst);
        let fast = wbp_constant(&inst.cloud, &inst.mu, &k, &inst.b1, &inst.b2, 2.0).unwrap();
        assert!(fast <= 1e-12, "antisymmetric kernel tested on real constants");
        inst.b1 = wave(25, 0.5, 0.1);
        inst.b2 = wave(25, 0.2, 1.3);
        let fast = wbp_constant(&inst.cloud, &inst.mu, &k, &inst.b1, &inst.b2, 2.0).unwrap();
        let slow = naive_wbp(&inst, &k, 2.0);
        assert!(slow > 0.0 && (fast - slow).abs() <= 1e-12 * slow);
        let single = grid_instance(2, KernelSpec::Zero);
        let cloud = PointCloud::from_coords(vec![vec![0.0]], MetricKind::Euclidean).unwrap();
        let k1 = KernelMatrix::build(&cloud, &single.lambda, &Kernel::new(KernelSpec::Cauchy)).unwrap();
        let mu = DiscreteMeasure::uniform(1, 1.0).unwrap();
        let one = [C64::new(1.0, 0.0)];
        assert_eq!(wbp_constant(&cloud, &mu, &k1, &one, &one, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn cauchy_certificate_matches_brute_force() {
        let n = 30;
        let inst = grid_instance(n, KernelSpec::Cauchy);
        let k = kernel_of(&inst);
        let cert = verify_standard_kernel(&inst.cloud, &inst.lambda, &k, 1.0, 2.0).unwrap();
        let xs: Vec<f64> = inst.cloud.coords().unwrap().iter().map(|c| c[0]).collect();
        let (mut size, mut hold) = (0.0f64, 0.0f64);
        for x in 0..n {
            for y in 0..n {
                if x == y {
                    continue;
                }
                let r = (xs[x] - xs[y]).abs();
                size = size.max(3.0 * r / r);
                for z in 0..n {
                    let t = (xs[x] - xs[z]).abs();
                    if z == x || z == y || r < 2.0 * t {
                        continue;
                    }
                    hold = hold.max((1.0 / (xs[x] - xs[y]) - 1.0 / (xs[z] - xs[y])).abs() * r * 3.0 * r / t);
                }
            }
        }
        assert!((cert.c_size - size).abs() <= 1e-9 * size);
        // the two variables are symmetric for this kernel
        assert!((cert.c_holder - hold).abs() <= 1e-9 * hold, "{} vs {hold}", cert.c_holder);
        assert!(cert.c_holder.is_finite() && cert.c_holder <= 3.0 * 2.0 * 2.0);
    }

    #[test]
    fn bergman_preset_meets_its_bounds() {
        let inst = bergman_preset(1, 1.0, 60, 4).unwrap();
        assert!(bergman_lower_ratio(&inst.cloud).unwrap() >= 1.0 / 3.0);
        verify_upper_doubling(&inst.cloud, &inst.mu, &inst.lambda).unwrap();
        let k = kernel_of(&inst);
        assert!(!k.real);
        let cert = verify_standard_kernel(&inst.cloud, &inst.lambda, &k, 1.0, 2.0).unwrap();
        // |K| <= |1 - x.y|^-m <= 3^m d^-m <= 3^m / lambda
        assert!(cert.c_size <= 3.0 + 1e-12, "{}", cert.c_size);
        assert!(cert.c_holder.is_finite());
        let again = bergman_preset(1, 1.0, 60, 4).unwrap();
        assert_eq!(again.mu.weights, inst.mu.weights);
        for c in inst.cloud.coords().unwrap() {
            let r = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((BERGMAN_MIN_RADIUS - 1e-12..=1.0 + 1e-12).contains(&r));
        }
    }

    fn systems(inst: &TbInstance, seed: u64) -> (DyadicSystem, DyadicSystem) {
        let frame = ReferenceFrame::new(&inst.cloud, 0.25).unwrap();
        (
            sample_random_system(&inst.cloud, &frame, trial_seed(seed, 0)).unwrap().system,
            sample_random_system(&inst.cloud, &frame, trial_seed(seed, 1)).unwrap().system,
        )
    }

    #[test]
    fn paraproduct_of_constants_matches_term_sum() {
        let n = 64;
        let mut inst = grid_instance(n, KernelSpec::Cauchy);
        inst.b1 = (0..n).map(|i| C64::new(1.0 + 0.3 * ((i % 3) as f64), 0.2 * ((i % 2) as f64))).collect();
        let k = kernel_of(&inst);
        let (d, dp) = systems(&inst, 3);
        let pp = paraproduct(&inst.cloud, &d, &dp, &inst.mu, &k, &inst.b1, &inst.b2, 1, 0.1).unwrap();
        assert!(!pp.empty);
        let c = C64::new(0.7, -0.4);
        let got = paraproduct_apply(&pp, &vec![c; n]);
        // term oracle: b1^-1 Delta^{b1}_Q(b1 h) from plain cube averages
        let h = apply_adjoint(&k, &inst.mu, &inst.b2);
        let w = &inst.mu.weights;
        let avg = |set: &[usize], f: &dyn Fn(usize) -> C64| set.iter().map(|&x| f(x) * w[x]).sum::<C64>();
        let mut want = vec![C64::new(0.0, 0.0); n];
        for &(_, q) in &pp.pairs {
            let ratio_q = avg(d.members(q), &|x| inst.b1[x] * h[x]) / avg(d.members(q), &|x| inst.b1[x]);
            for ch in d.children(q) {
                let m = d.members(ch);
                let ratio_c = avg(m, &|x| inst.b1[x] * h[x]) / avg(m, &|x| inst.b1[x]);
                for &x in m {
                    want[x] += c * (ratio_c - ratio_q);
                }
            }
        }
        for x in 0..n {
            assert!((got[x] - want[x]).norm() <= 1e-10 * want[x].norm().max(1.0));
        }
        assert!(paraproduct_norm(&pp, &inst.mu) > 0.0);
        let zero = KernelMatrix::build(&inst.cloud, &inst.lambda, &Kernel::new(KernelSpec::Zero)).unwrap();
        let pz = paraproduct(&inst.cloud, &d, &dp, &inst.mu, &zero, &inst.b1, &inst.b2, 1, 0.1).unwrap();
        assert_eq!(paraproduct_norm(&pz, &inst.mu), 0.0);
        let far = paraproduct(&inst.cloud, &d, &dp, &inst.mu, &k, &inst.b1, &inst.b2, 40, 0.1).unwrap();
        assert!(far.empty && paraproduct_norm(&far, &inst.mu) == 0.0);
    }

    fn surgery_setup(n: usize, kernel: KernelSpec) -> (TbInstance, KernelMatrix, CoverParams, TbParams) {
        let mut inst = grid_instance(n, kernel);
        inst.b1 = wave(n, 0.3, 0.5).iter().map(|z| z + C64::new(2.0, 0.0)).collect();
        inst.b2 = wave(n, 0.7, 0.1).iter().map(|z| z + C64::new(2.0, 0.0)).collect();
        let k = kernel_of(&inst);
        let cert = validate_quasimetric(&inst.cloud, &default_eps_grid()).unwrap();
        let cover = derive_params_with_pi0(&cert, 1.0 / 64.0, 0.5, 0.9).unwrap();
        let params = TbParams { alpha: 1.0, d: 1.0, gamma: 0.25, r: 2, kappa: 2.0, wbp_dilation: 2.0, kernel_const: 1.0, c0: C0, c1: C1, c3: C3 };
        (inst, k, cover, params)
    }

    #[test]
    fn surgery_terms_add_up_on_grid_pairs() {
        let (inst, k, cover, params) = surgery_setup(80, KernelSpec::Cauchy);
        let (d, dp) = systems(&inst, 5);
        let norm = operator_norm(&k, &inst.mu);
        let input = SurgeryInput {
            rho: &inst.cloud,
            dcloud: &inst.cloud,
            a0: 1.0,
            beta: 1.0,
            mu: &inst.mu,
            kernel: &k,
            b1: &inst.b1,
            b2: &inst.b2,
            d: &d,
            dp: &dp,
            params: &params,
            cover: &cover,
            norm,
            dim: 1.0,
        };
        let pairs = adjacent_pairs(&inst.cloud, &d, &dp, &params);
        assert!(pairs.len() > 10);
        let mut with_balls = 0;
        for (i, &(q, r)) in pairs.iter().enumerate().take(20) {
            let rep = adjacent_surgery(&input, q, r, 0.05, 0.5, 2.0, i as u64).unwrap();
            assert!(rep.triangle_holds && rep.dilated_balls_inside);
            assert!(rep.residual <= 1e-12 * (rep.total + rep.terms.sum()).max(1e-300));
            assert!(rep.cauchy_schwarz_ratio <= 1.0 + 1e-9);
            assert!(rep.uncovered_fraction <= 0.5);
            // direct sum of the G terms over all pairs of covered points
            with_balls += (rep.balls > 0) as usize;
        }
        assert!(with_balls > 0);
    }

    #[test]
    fn trivial_surgeries_vanish() {
        let (inst, k, cover, params) = surgery_setup(1, KernelSpec::Zero);
        let sys = crate::dyadic::build_system(&inst.cloud, 0.25, 0.5, crate::dyadic::REFERENCE_RULE).unwrap();
        let input = SurgeryInput {
            rho: &inst.cloud,
            dcloud: &inst.cloud,
            a0: 1.0,
            beta: 1.0,
            mu: &inst.mu,
            kernel: &k,
            b1: &inst.b1,
            b2: &inst.b2,
            d: &sys,
            dp: &sys,
            params: &params,
            cover: &cover,
            norm: 0.0,
            dim: 1.0,
        };
        let top = CubeId { gen: sys.k_min, idx: 0 };
        let rep = adjacent_surgery(&input, top, top, 0.1, 0.5, 2.0, 0).unwrap();
        assert_eq!((rep.total, rep.terms.sum()), (0.0, 0.0));
        assert!(rep.triangle_holds);

        let (inst, k, cover, params) = surgery_setup(40, KernelSpec::Zero);
        let (d, dp) = systems(&inst, 2);
        let input = SurgeryInput { d: &d, dp: &dp, kernel: &k, mu: &inst.mu, rho: &inst.cloud, dcloud: &inst.cloud, b1: &inst.b1, b2: &inst.b2, params: &params, cover: &cover, ..input };
        for (q, r) in adjacent_pairs(&inst.cloud, &d, &dp, &params).into_iter().take(5) {
            let rep = adjacent_surgery(&input, q, r, 0.1, 0.5, 2.0, 1).unwrap();
            assert_eq!(rep.terms.sum(), 0.0);
        }
    }

    #[test]
    fn decomposition_is_exact_and_scaling_is_linear() {
        let n = 128;
        let mut inst = grid_instance(n, KernelSpec::Cauchy);
        inst.b1 = wave(n, 0.2, 0.3).iter().map(|z| z + C64::new(2.0, 0.0)).collect();
        let opts = TbOptions { r: 1, r_decay: vec![1, 2, 3], ..TbOptions::default() };
        let rep = tb_check(&inst, &opts, &[1, 2]).unwrap();
        for s in &rep.seeds {
            assert!(s.decomposition_error < 1e-8, "{}", s.decomposition_error);
            let c = s.classes;
            assert!(c.separated + c.adjacent + c.expectation > 0.0);
        }
        assert!(rep.extremal >= rep.norm / 2.0);
        assert!(rep.ratio.is_finite() && rep.ratio > 0.0);
        let big = inst.with_kernel(inst.kernel.scaled(3.0));
        let k1 = kernel_of(&inst);
        let k3 = kernel_of(&big);
        let a = tb_functionals(&inst, &k1, 2.0, 2.0).unwrap();
        let b = tb_functionals(&big, &k3, 2.0, 2.0).unwrap();
        for (x, y) in [(a.norm, b.norm), (a.bmo_tb1, b.bmo_tb1), (a.bmo_tstar_b2, b.bmo_tstar_b2), (a.wbp, b.wbp)] {
            assert!((y - 3.0 * x).abs() <= 1e-8 * y.max(f64::MIN_POSITIVE), "{x} {y}");
        }
    }

    #[test]
    fn bundle_round_trip() {
        let inst = grid_instance(10, KernelSpec::NearDiagonal { h: 0.3 });
        let text = serde_json::to_string(&inst.to_bundle(Some(TbOptions::default()))).unwrap();
        let back: InstanceBundle = serde_json::from_str(&text).unwrap();
        let again = TbInstance::from_bundle(&back).unwrap();
        assert_eq!(again.mu.weights, inst.mu.weights);
        assert_eq!(again.kernel, inst.kernel);
        assert_eq!(back.options, Some(TbOptions::default()));
    }
}
