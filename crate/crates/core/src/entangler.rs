//! Two-qubit gate geometry: Bell basis, Makhlin invariants, Weyl chamber
//! coordinates, the perfect-entangler polytope and the tugboat target gate.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{pauli, tensor, ComplexMatrix, I, ONE, ZERO};

const UNITARY_TOL: f64 = 1e-8;
const MEMBERSHIP_TOL: f64 = 1e-9;
const BOUNDS_TOL: f64 = 1e-12;
const INVARIANT_MATCH_TOL: f64 = 1e-7;

fn check_two_qubit(u: &ComplexMatrix) -> Result<()> {
    if u.dim() != 4 {
        return Err(Error::InvalidDimension(format!(
            "two-qubit gate must be 4x4, got {}x{}",
            u.dim(),
            u.dim()
        )));
    }
    Ok(())
}

fn check_unitary(u: &ComplexMatrix, tol: f64) -> Result<()> {
    check_two_qubit(u)?;
    let err = u.unitarity_error();
    if !(err <= tol) {
        return Err(Error::NumericDomain(format!(
            "gate is not unitary (deviation {err:.3e})"
        )));
    }
    Ok(())
}

/// Change of basis whose columns are the Bell states
/// `|Phi+>, i|Psi+>, |Psi->, i|Phi->`.
pub fn bell_matrix() -> ComplexMatrix {
    let h = FRAC_1_SQRT_2;
    let r = Complex64::new(h, 0.0);
    let i = Complex64::new(0.0, h);
    ComplexMatrix::from_rows(
        4,
        &[r, ZERO, ZERO, i, ZERO, i, r, ZERO, ZERO, i, -r, ZERO, r, ZERO, ZERO, -i],
    )
}

/// `Q^dagger U Q`. Local gates become real orthogonal and the Cartan part
/// becomes diagonal.
pub fn bell_transform(u: &ComplexMatrix) -> Result<ComplexMatrix> {
    check_two_qubit(u)?;
    let q = bell_matrix();
    Ok(&(&q.dagger() * u) * &q)
}

fn gram(u: &ComplexMatrix) -> DMatrix<Complex64> {
    let q = bell_matrix();
    let ub = (&(&q.dagger() * u) * &q).into_dmatrix();
    ub.transpose() * ub
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MakhlinInvariants {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
}

impl MakhlinInvariants {
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (self.g1 - other.g1)
            .abs()
            .max((self.g2 - other.g2).abs())
            .max((self.g3 - other.g3).abs())
    }
}

pub fn makhlin_invariants(u: &ComplexMatrix) -> Result<MakhlinInvariants> {
    check_unitary(u, UNITARY_TOL)?;
    Ok(makhlin_invariants_unchecked(u))
}

/// Invariants without the unitarity check, for projected propagators that
/// are slightly sub-unitary. `u` must be 4x4.
pub fn makhlin_invariants_unchecked(u: &ComplexMatrix) -> MakhlinInvariants {
    let m = gram(u);
    let det = u.determinant();
    let tr = m.trace();
    let tr_sq = (&m * &m).trace();
    let g12 = tr * tr / (det * 16.0);
    let g3 = (tr * tr - tr_sq) / (det * 4.0);
    MakhlinInvariants {
        g1: g12.re,
        g2: g12.im,
        g3: g3.re,
    }
}

/// `g3 sqrt(g1^2 + g2^2) - g1`, forced to zero inside the perfect-entangler
/// volume. The signed value is returned outside: positive towards the
/// identity corner, negative towards SWAP.
pub fn pe_functional(g: &MakhlinInvariants, inside: bool) -> f64 {
    if inside {
        0.0
    } else {
        g.g3 * g.g1.hypot(g.g2) - g.g1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeylPoint {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl WeylPoint {
    pub const IDENTITY: WeylPoint = WeylPoint::new(0.0, 0.0, 0.0);
    pub const CNOT: WeylPoint = WeylPoint::new(FRAC_PI_2, 0.0, 0.0);
    pub const ISWAP: WeylPoint = WeylPoint::new(FRAC_PI_2, FRAC_PI_2, 0.0);
    pub const SQRT_ISWAP: WeylPoint = WeylPoint::new(FRAC_PI_4, FRAC_PI_4, 0.0);
    pub const SWAP: WeylPoint = WeylPoint::new(FRAC_PI_2, FRAC_PI_2, FRAC_PI_2);

    pub const fn new(c1: f64, c2: f64, c3: f64) -> Self {
        Self { c1, c2, c3 }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.c1, self.c2, self.c3]
    }

    pub fn distance(&self, other: &WeylPoint) -> f64 {
        let d = [self.c1 - other.c1, self.c2 - other.c2, self.c3 - other.c3];
        d.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Phases `theta_j` of the Bell-basis eigenvalues `exp(i theta_j / 2)`
    /// of the Cartan gate, in the column order of [`bell_matrix`].
    fn bell_phases(&self) -> [f64; 4] {
        let (a, b, c) = (self.c1, self.c2, self.c3);
        [a - b + c, a + b - c, -a - b - c, -a + b + c]
    }

    fn from_bell_phases(theta: &[f64; 4]) -> Self {
        Self::new(
            0.5 * (theta[0] + theta[1]),
            0.5 * (theta[1] + theta[3]),
            0.5 * (theta[0] + theta[3]),
        )
    }
}

fn wrap_pi(x: f64) -> f64 {
    let r = x.rem_euclid(PI);
    if !(BOUNDS_TOL..=PI - BOUNDS_TOL).contains(&r) {
        0.0
    } else {
        r
    }
}

/// Maps any coordinate triple to its representative in the Weyl chamber
/// `pi > c1 >= c2 >= c3 >= 0, c1 + c2 <= pi`, with `c1 <= pi/2` on the
/// `c3 = 0` floor where both halves describe the same class.
pub fn canonicalize(c: &WeylPoint) -> WeylPoint {
    let mut v = [wrap_pi(c.c1), wrap_pi(c.c2), wrap_pi(c.c3)];
    for _ in 0..16 {
        v.sort_by(|a, b| b.total_cmp(a));
        if v[0] + v[1] > PI + BOUNDS_TOL {
            let (a, b) = (v[0], v[1]);
            v[0] = wrap_pi(PI - b);
            v[1] = wrap_pi(PI - a);
        } else {
            break;
        }
    }
    v.sort_by(|a, b| b.total_cmp(a));
    if v[2].abs() < 1e-10 && v[0] > FRAC_PI_2 {
        v[0] = PI - v[0];
        v[2] = 0.0;
        v.sort_by(|a, b| b.total_cmp(a));
    }
    WeylPoint::new(v[0], v[1], v[2])
}

/// Membership in the perfect-entangler polytope, decided on the canonical
/// point (with the mirror cell `c1 > pi/2` folded onto `pi - c1`).
pub fn pe_membership(c: &WeylPoint) -> bool {
    let p = canonicalize(c);
    let c1 = if p.c1 > FRAC_PI_2 { PI - p.c1 } else { p.c1 };
    let (lo, hi) = if c1 >= p.c2 { (p.c2, c1) } else { (c1, p.c2) };
    hi + lo >= FRAC_PI_2 - MEMBERSHIP_TOL
        && hi - lo <= FRAC_PI_2 + MEMBERSHIP_TOL
        && lo + p.c3 <= FRAC_PI_2 + MEMBERSHIP_TOL
}

/// `exp(i/2 (c1 XX + c2 YY + c3 ZZ))`, assembled from its Bell-basis
/// eigendecomposition (the three generators commute).
pub fn cartan_gate(c: &WeylPoint) -> ComplexMatrix {
    let phases = c.bell_phases();
    let diag: Vec<Complex64> = phases.iter().map(|t| Complex64::from_polar(1.0, 0.5 * t)).collect();
    let q = bell_matrix();
    &(&q * &ComplexMatrix::diagonal(&diag)) * &q.dagger()
}

/// How the three volume coordinates are sent into the Weyl chamber.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeylMap {
    /// `c1 = (b1+b2)/2, c2 = (b1-b2)/2`; only reaches the `c1 + c2 = pi/2`
    /// face of the perfect-entangler polytope.
    Direct,
    /// `c1 = b1+b2, c2 = b1-b2`; with `b3 <= 1` it covers the polytope.
    #[default]
    Rescaled,
}

impl WeylMap {
    pub fn bounds(&self) -> [(f64, f64); 3] {
        let b3_max = match self {
            WeylMap::Direct => PI,
            WeylMap::Rescaled => 1.0,
        };
        [(FRAC_PI_4, FRAC_PI_2), (0.0, FRAC_PI_4), (0.0, b3_max)]
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeylMap::Direct => "direct",
            WeylMap::Rescaled => "rescaled",
        }
    }
}

/// The map without any bounds check.
fn weyl_from_b_unchecked(coords: [f64; 3], map: WeylMap) -> WeylPoint {
    let [b1, b2, b3] = coords;
    let (c1, c2) = match map {
        WeylMap::Direct => (0.5 * (b1 + b2), 0.5 * (b1 - b2)),
        WeylMap::Rescaled => (b1 + b2, b1 - b2),
    };
    let c3 = b3 * (FRAC_PI_4 - (c2 - FRAC_PI_4).abs());
    WeylPoint::new(c1, c2, c3)
}

pub fn weyl_from_b(coords: [f64; 3], map: WeylMap) -> Result<WeylPoint> {
    let names = ["b1", "b2", "b3"];
    for (k, &(lo, hi)) in map.bounds().iter().enumerate() {
        let v = coords[k];
        if !(v >= lo - BOUNDS_TOL && v <= hi + BOUNDS_TOL) {
            return Err(Error::OutOfBounds {
                name: names[k].to_string(),
                value: v,
                lo,
                hi,
            });
        }
    }
    Ok(weyl_from_b_unchecked(coords, map))
}

/// Volume coordinates whose image under `map` is closest (euclidean) to
/// `target`, found by a coarse grid followed by a shrinking pattern search.
pub fn closest_volume_coords(target: &WeylPoint, map: WeylMap) -> [f64; 3] {
    let bounds = map.bounds();
    let dist = |b: &[f64; 3]| weyl_from_b_unchecked(*b, map).distance(target);
    let n = 20;
    let mut best = [bounds[0].0, bounds[1].0, bounds[2].0];
    let mut best_d = dist(&best);
    for i in 0..=n {
        for j in 0..=n {
            for k in 0..=n {
                let frac = |idx: usize, b: (f64, f64)| b.0 + (b.1 - b.0) * idx as f64 / n as f64;
                let cand = [frac(i, bounds[0]), frac(j, bounds[1]), frac(k, bounds[2])];
                let d = dist(&cand);
                if d < best_d {
                    best = cand;
                    best_d = d;
                }
            }
        }
    }
    let mut step: Vec<f64> = bounds.iter().map(|b| (b.1 - b.0) / n as f64).collect();
    while step.iter().any(|&s| s > 1e-13) {
        let mut improved = false;
        for k in 0..3 {
            for dir in [-1.0, 1.0] {
                let mut cand = best;
                cand[k] = (cand[k] + dir * step[k]).clamp(bounds[k].0, bounds[k].1);
                let d = dist(&cand);
                if d < best_d {
                    best = cand;
                    best_d = d;
                    improved = true;
                }
            }
        }
        if !improved {
            for s in step.iter_mut() {
                *s *= 0.5;
            }
        }
    }
    best
}

/// Z-X-Z Euler rotation `Rz(alpha) Rx(beta) Rz(gamma)`.
pub fn euler_zxz(angles: [f64; 3]) -> ComplexMatrix {
    &(&pauli::rz(angles[0]) * &pauli::rx(angles[1])) * &pauli::rz(angles[2])
}

/// Z-X-Z Euler angles of a 2x2 unitary, up to global phase.
pub fn euler_angles_zxz(u: &ComplexMatrix) -> Result<[f64; 3]> {
    if u.dim() != 2 {
        return Err(Error::InvalidDimension(format!(
            "Euler angles need a 2x2 matrix, got {}x{}",
            u.dim(),
            u.dim()
        )));
    }
    let root = u.determinant().sqrt();
    if root.norm() < 1e-12 {
        return Err(Error::NumericDomain("singular single-qubit factor".into()));
    }
    let p = u.get(0, 0) / root;
    let q = u.get(0, 1) / root;
    let beta = 2.0 * q.norm().atan2(p.norm());
    let sum = if p.norm() > 1e-14 { -2.0 * p.arg() } else { 0.0 };
    let diff = if q.norm() > 1e-14 { -2.0 * (I * q).arg() } else { 0.0 };
    Ok([0.5 * (sum + diff), beta, 0.5 * (sum - diff)])
}

/// Moving target gate: volume coordinates for the Cartan part and twelve
/// Euler angles for the four single-qubit factors `(k1a, k1b, k2a, k2b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TugboatParams {
    pub volume: [f64; 3],
    pub local_angles: [f64; 12],
}

impl TugboatParams {
    pub fn new(volume: [f64; 3]) -> Self {
        Self {
            volume,
            local_angles: [0.0; 12],
        }
    }

    /// All fifteen parameters, volume coordinates first.
    pub fn to_vec(&self) -> Vec<f64> {
        self.volume.iter().chain(self.local_angles.iter()).copied().collect()
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        if x.len() != 15 {
            return Err(Error::InvalidArgument(format!(
                "tugboat needs 15 parameters, got {}",
                x.len()
            )));
        }
        let mut p = Self::new([x[0], x[1], x[2]]);
        p.local_angles.copy_from_slice(&x[3..]);
        Ok(p)
    }
}

fn angle_triple(angles: &[f64; 12], k: usize) -> [f64; 3] {
    [angles[3 * k], angles[3 * k + 1], angles[3 * k + 2]]
}

/// `(k1a x k1b, k2a x k2b)` built from the local angles.
pub fn local_factors(angles: &[f64; 12]) -> (ComplexMatrix, ComplexMatrix) {
    let f = |k: usize| euler_zxz(angle_triple(angles, k));
    let kron = |a: ComplexMatrix, b: ComplexMatrix| tensor(&[a, b]).expect("2x2 factors");
    (kron(f(0), f(1)), kron(f(2), f(3)))
}

pub fn tugboat_gate(params: &TugboatParams, map: WeylMap) -> Result<ComplexMatrix> {
    let point = weyl_from_b(params.volume, map)?;
    Ok(tugboat_gate_unchecked(params, point))
}

pub(crate) fn tugboat_gate_unchecked(params: &TugboatParams, point: WeylPoint) -> ComplexMatrix {
    let (k1, k2) = local_factors(&params.local_angles);
    &(&k1 * &cartan_gate(&point)) * &k2
}

fn special_unitary(u: &ComplexMatrix) -> (ComplexMatrix, Complex64) {
    let det = u.determinant();
    let root = Complex64::from_polar(det.norm().powf(0.25), det.arg() / 4.0);
    (u.scale(ONE / root), root)
}

/// Simultaneous real-orthogonal diagonalization of a complex symmetric
/// normal matrix: `m = O diag(d) O^T`. Real and imaginary parts commute, so
/// a generic real combination of them shares the eigenbasis.
fn orthogonal_diagonalize(m: &DMatrix<Complex64>) -> (DMatrix<f64>, Vec<Complex64>, f64) {
    let mut best: Option<(DMatrix<f64>, Vec<Complex64>, f64)> = None;
    for t in [0.5746, 1.3127, -0.8391, 2.6911, 0.1234, -3.3301] {
        let mix = DMatrix::from_fn(4, 4, |r, c| {
            let s = |z: Complex64| z.re + t * z.im;
            0.5 * (s(m[(r, c)]) + s(m[(c, r)]))
        });
        let eig = nalgebra::SymmetricEigen::new(mix);
        let o = eig.eigenvectors;
        let oc = o.map(|x| Complex64::new(x, 0.0));
        let d = oc.transpose() * m * &oc;
        let mut off = 0.0f64;
        for r in 0..4 {
            for c in 0..4 {
                if r != c {
                    off = off.max(d[(r, c)].norm());
                }
            }
        }
        let diag = (0..4).map(|k| d[(k, k)]).collect();
        let better = best.as_ref().is_none_or(|b| off < b.2);
        if better {
            best = Some((o, diag, off));
        }
        if off < 1e-11 {
            break;
        }
    }
    best.expect("at least one attempt")
}

/// Result of extracting Weyl coordinates from a gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeylExtraction {
    pub point: WeylPoint,
    /// Largest deviation between the invariants of the gate and of the
    /// Cartan gate at `point`.
    pub invariant_residual: f64,
    pub used_fallback: bool,
}

pub fn weyl_coordinates(u: &ComplexMatrix) -> Result<WeylPoint> {
    Ok(weyl_extraction(u)?.point)
}

pub fn weyl_extraction(u: &ComplexMatrix) -> Result<WeylExtraction> {
    check_unitary(u, UNITARY_TOL)?;
    let target = makhlin_invariants_unchecked(u);
    let (su, _) = special_unitary(u);
    let (_, d, _) = orthogonal_diagonalize(&gram(&su));
    let mut theta = [0.0; 4];
    for k in 0..4 {
        theta[k] = d[k].arg();
    }
    let turns = (theta.iter().sum::<f64>() / (2.0 * PI)).round() as i64;
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| theta[b].total_cmp(&theta[a]));
    if turns > 0 {
        for &k in order.iter().take(turns as usize) {
            theta[k] -= 2.0 * PI;
        }
    } else if turns < 0 {
        for &k in order.iter().rev().take((-turns) as usize) {
            theta[k] += 2.0 * PI;
        }
    }
    let point = canonicalize(&WeylPoint::from_bell_phases(&theta));
    let residual = makhlin_invariants_unchecked(&cartan_gate(&point)).max_abs_diff(&target);
    if residual <= INVARIANT_MATCH_TOL {
        return Ok(WeylExtraction {
            point,
            invariant_residual: residual,
            used_fallback: false,
        });
    }
    let (fallback, fallback_residual) = invariant_search(&target, point);
    let (point, residual) = if fallback_residual < residual {
        (fallback, fallback_residual)
    } else {
        (point, residual)
    };
    Ok(WeylExtraction {
        point,
        invariant_residual: residual,
        used_fallback: true,
    })
}

/// Pattern search over the chamber for a point whose invariants match.
fn invariant_search(target: &MakhlinInvariants, start: WeylPoint) -> (WeylPoint, f64) {
    let cost = |p: &[f64; 3]| {
        let c = WeylPoint::new(p[0], p[1], p[2]);
        makhlin_invariants_unchecked(&cartan_gate(&c)).max_abs_diff(target)
    };
    let mut starts = vec![start.as_array()];
    let n = 8;
    for i in 0..=n {
        for j in 0..=i {
            for k in 0..=j {
                let p = [
                    PI * i as f64 / n as f64,
                    PI * j as f64 / n as f64,
                    PI * k as f64 / n as f64,
                ];
                if p[0] + p[1] <= PI {
                    starts.push(p);
                }
            }
        }
    }
    starts.sort_by(|a, b| cost(a).total_cmp(&cost(b)));
    let mut best = (start, f64::INFINITY);
    for s in starts.into_iter().take(6) {
        let mut x = s;
        let mut fx = cost(&x);
        let mut step = 0.2;
        while step > 1e-14 {
            let mut improved = false;
            for k in 0..3 {
                for dir in [-1.0, 1.0] {
                    let mut cand = x;
                    cand[k] += dir * step;
                    let fc = cost(&cand);
                    if fc < fx {
                        x = cand;
                        fx = fc;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if fx < best.1 {
            best = (canonicalize(&WeylPoint::new(x[0], x[1], x[2])), fx);
        }
    }
    best
}

/// Two-qubit Cartan decomposition
/// `U = phase (k1a x k1b) A(point) (k2a x k2b)` with `point` canonical and
/// every single-qubit factor in SU(2).
#[derive(Debug, Clone, PartialEq)]
pub struct KakDecomposition {
    pub k1: (ComplexMatrix, ComplexMatrix),
    pub point: WeylPoint,
    pub k2: (ComplexMatrix, ComplexMatrix),
    pub phase: Complex64,
}

impl KakDecomposition {
    pub fn reconstruct(&self) -> ComplexMatrix {
        let k1 = tensor(&[self.k1.0.clone(), self.k1.1.clone()]).expect("2x2 factors");
        let k2 = tensor(&[self.k2.0.clone(), self.k2.1.clone()]).expect("2x2 factors");
        (&(&k1 * &cartan_gate(&self.point)) * &k2).scale(self.phase)
    }

    /// Twelve Z-X-Z angles for the four factors, ordered as in
    /// [`TugboatParams::local_angles`].
    pub fn local_angles(&self) -> Result<[f64; 12]> {
        let mut out = [0.0; 12];
        for (k, f) in [&self.k1.0, &self.k1.1, &self.k2.0, &self.k2.1].into_iter().enumerate() {
            out[3 * k..3 * k + 3].copy_from_slice(&euler_angles_zxz(f)?);
        }
        Ok(out)
    }
}

fn permutations4() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    let mut seen = [false; 4];
                    p.iter().for_each(|&x| seen[x] = true);
                    if seen.iter().all(|&s| s) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// Splits a 4x4 matrix in SU(2)xSU(2) (up to phase) into `phase (a x b)`.
fn factor_local(k: &ComplexMatrix) -> Result<(ComplexMatrix, ComplexMatrix, Complex64)> {
    let block = |i: usize, j: usize| {
        ComplexMatrix::from_rows(
            2,
            &[
                k.get(2 * i, 2 * j),
                k.get(2 * i, 2 * j + 1),
                k.get(2 * i + 1, 2 * j),
                k.get(2 * i + 1, 2 * j + 1),
            ],
        )
    };
    let mut pick = (0, 0);
    let mut pick_norm = -1.0;
    for i in 0..2 {
        for j in 0..2 {
            let n: f64 = block(i, j).as_dmatrix().iter().map(|z| z.norm_sqr()).sum();
            if n > pick_norm {
                pick = (i, j);
                pick_norm = n;
            }
        }
    }
    let big = block(pick.0, pick.1);
    let b = big.scale(ONE / big.determinant().sqrt());
    let mut entries = [ZERO; 4];
    for i in 0..2 {
        for j in 0..2 {
            entries[2 * i + j] = (&b.dagger() * &block(i, j)).trace() * 0.5;
        }
    }
    let a = ComplexMatrix::from_rows(2, &entries);
    let root = a.determinant().sqrt();
    let a = a.scale(ONE / root);
    let rebuilt = tensor(&[a.clone(), b.clone()])?.scale(root);
    let err = rebuilt.max_abs_diff(k);
    if err > 1e-7 {
        return Err(Error::NumericDomain(format!(
            "local factor is not a tensor product (residual {err:.3e})"
        )));
    }
    Ok((a, b, root))
}

pub fn kak_decompose(u: &ComplexMatrix) -> Result<KakDecomposition> {
    check_unitary(u, UNITARY_TOL)?;
    let point = weyl_extraction(u)?.point;
    let target: Vec<Complex64> = point
        .bell_phases()
        .iter()
        .map(|t| Complex64::from_polar(1.0, *t))
        .collect();
    let (su, root) = special_unitary(u);
    let q = bell_matrix();
    let perms = permutations4();

    let mut best: Option<(f64, Complex64, DMatrix<f64>, [usize; 4])> = None;
    for sign in [ONE, I] {
        let v = su.scale(sign);
        let (o, d, _) = orthogonal_diagonalize(&gram(&v));
        for p in &perms {
            let err = (0..4).map(|j| (d[p[j]] - target[j]).norm()).fold(0.0, f64::max);
            if best.as_ref().is_none_or(|b| err < b.0) {
                best = Some((err, sign, o.clone(), *p));
            }
        }
    }
    let (err, sign, o, perm) = best.expect("candidates are non-empty");
    if err > 1e-6 {
        return Err(Error::NumericDomain(format!(
            "could not match Bell-basis spectrum (residual {err:.3e})"
        )));
    }
    let mut basis = DMatrix::from_fn(4, 4, |r, c| o[(r, perm[c])]);
    if basis.determinant() < 0.0 {
        for r in 0..4 {
            basis[(r, 0)] = -basis[(r, 0)];
        }
    }
    let basis_c = basis.map(|x| Complex64::new(x, 0.0));
    let ub = (&(&q.dagger() * &su.scale(sign)) * &q).into_dmatrix();
    let half_inv: Vec<Complex64> = point
        .bell_phases()
        .iter()
        .map(|t| Complex64::from_polar(1.0, -0.5 * t))
        .collect();
    let mut left = ub * &basis_c;
    for c in 0..4 {
        for r in 0..4 {
            left[(r, c)] *= half_inv[c];
        }
    }
    let left = left.map(|z| Complex64::new(z.re, 0.0));
    let right = basis_c.transpose();
    let qm = q.as_dmatrix();
    let k1 = ComplexMatrix::from_dmatrix(qm * left * qm.adjoint())?;
    let k2 = ComplexMatrix::from_dmatrix(qm * right * qm.adjoint())?;
    let (a1, b1, p1) = factor_local(&k1)?;
    let (a2, b2, p2) = factor_local(&k2)?;
    let kak = KakDecomposition {
        k1: (a1, b1),
        point,
        k2: (a2, b2),
        phase: root / sign * p1 * p2,
    };
    let residual = kak.reconstruct().max_abs_diff(u);
    if residual > 1e-7 {
        return Err(Error::NumericDomain(format!(
            "Cartan decomposition failed to reconstruct the gate (residual {residual:.3e})"
        )));
    }
    Ok(kak)
}

/// Tugboat parameters seeded from the Cartan decomposition of `u`: local
/// angles from its factors and volume coordinates as close as `map` allows
/// to its Weyl point.
pub fn tugboat_seed(u: &ComplexMatrix, map: WeylMap) -> Result<TugboatParams> {
    let kak = kak_decompose(u)?;
    let mut point = kak.point;
    let mirrored = WeylPoint::new(PI - point.c1, point.c2, -point.c3);
    if map == WeylMap::Direct && point.c1 > FRAC_PI_2 {
        point = mirrored;
    }
    Ok(TugboatParams {
        volume: closest_volume_coords(&point, map),
        local_angles: kak.local_angles()?,
    })
}

/// Named gate class nearest to the canonical point, with its distance.
pub fn nearest_named_class(c: &WeylPoint) -> (&'static str, f64) {
    let p = canonicalize(c);
    let candidates = [
        ("identity", WeylPoint::IDENTITY),
        ("identity", WeylPoint::new(PI, 0.0, 0.0)),
        ("CNOT/CPHASE", WeylPoint::CNOT),
        ("iSWAP", WeylPoint::ISWAP),
        ("sqrt(iSWAP)", WeylPoint::SQRT_ISWAP),
        ("sqrt(iSWAP)", WeylPoint::new(3.0 * FRAC_PI_4, FRAC_PI_4, 0.0)),
        ("SWAP", WeylPoint::SWAP),
    ];
    candidates
        .iter()
        .map(|(name, q)| (*name, p.distance(q)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty")
}

/// Fraction of uniform samples of the box `bounds` whose image under `map`
/// is a perfect entangler.
pub fn membership_probe(map: WeylMap, bounds: [(f64, f64); 3], samples: usize, seed: u64) -> f64 {
    if samples == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let b = [
            rng.random_range(bounds[0].0..=bounds[0].1),
            rng.random_range(bounds[1].0..=bounds[1].1),
            rng.random_range(bounds[2].0..=bounds[2].1),
        ];
        if pe_membership(&weyl_from_b_unchecked(b, map)) {
            hits += 1;
        }
    }
    hits as f64 / samples as f64
}

/// Volume probe results for both maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub samples: usize,
    /// Direct map over its bounds (`b3 <= pi`).
    pub direct: f64,
    /// Rescaled map over the direct-map bounds.
    pub rescaled: f64,
    /// Rescaled map over its own bounds (`b3 <= 1`).
    pub rescaled_native: f64,
}

pub fn volume_probe(samples: usize, seed: u64) -> ProbeReport {
    let wide = WeylMap::Direct.bounds();
    ProbeReport {
        samples,
        direct: membership_probe(WeylMap::Direct, wide, samples, seed),
        rescaled: membership_probe(WeylMap::Rescaled, wide, samples, seed),
        rescaled_native: membership_probe(WeylMap::Rescaled, WeylMap::Rescaled.bounds(), samples, seed),
    }
}

/// Textbook two-qubit gates, qubit 0 most significant.
pub mod gates {
    use super::*;

    pub fn cnot() -> ComplexMatrix {
        ComplexMatrix::from_real_rows(
            4,
            &[
                1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0,
            ],
        )
    }

    pub fn cphase(phi: f64) -> ComplexMatrix {
        ComplexMatrix::diagonal(&[ONE, ONE, ONE, Complex64::from_polar(1.0, phi)])
    }

    /// `exp(-i theta/2 Z x X)`; `theta = pi/2` is locally a CNOT.
    pub fn cross_resonance(theta: f64) -> ComplexMatrix {
        let zx = tensor(&[pauli::z(), pauli::x()]).expect("2x2 factors");
        crate::hilbert::expm_unchecked(&zx, 0.5 * theta)
    }

    pub fn iswap() -> ComplexMatrix {
        ComplexMatrix::from_rows(
            4,
            &[
                ONE, ZERO, ZERO, ZERO, ZERO, ZERO, I, ZERO, ZERO, I, ZERO, ZERO, ZERO, ZERO, ZERO, ONE,
            ],
        )
    }

    pub fn sqrt_iswap() -> ComplexMatrix {
        let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
        let ih = Complex64::new(0.0, FRAC_1_SQRT_2);
        ComplexMatrix::from_rows(
            4,
            &[ONE, ZERO, ZERO, ZERO, ZERO, h, ih, ZERO, ZERO, ih, h, ZERO, ZERO, ZERO, ZERO, ONE],
        )
    }

    pub fn swap() -> ComplexMatrix {
        ComplexMatrix::from_real_rows(
            4,
            &[
                1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
        )
    }

    pub fn x90() -> ComplexMatrix {
        pauli::rx(FRAC_PI_2)
    }
}
