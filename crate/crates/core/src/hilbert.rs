//! Finite-dimensional Hilbert-space primitives.
//!
//! Subsystem 0 is the leftmost tensor factor and therefore the most
//! significant digit of a ket index: for two subsystems `|q1, q2>` has index
//! `q1 * levels[1] + q2`.

use std::ops::{Add, Mul, Sub};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const I: Complex64 = Complex64::new(0.0, 1.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);
pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Numerical tolerances applied to hermiticity and unitarity checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub hermitian_tol: f64,
    pub unitary_tol: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            hermitian_tol: 1e-9,
            unitary_tol: 1e-10,
        }
    }
}

/// Dense square complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix(DMatrix<Complex64>);

impl ComplexMatrix {
    pub fn from_dmatrix(m: DMatrix<Complex64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidDimension(format!(
                "matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() < 2 {
            return Err(Error::InvalidDimension(format!(
                "matrix dimension must be >= 2, got {}",
                m.nrows()
            )));
        }
        Ok(Self(m))
    }

    /// Builds a matrix from row-major entries. Panics on a non-square length,
    /// intended for literals in code.
    pub fn from_rows(dim: usize, entries: &[Complex64]) -> Self {
        assert_eq!(entries.len(), dim * dim, "entry count must be dim^2");
        Self(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn from_real_rows(dim: usize, entries: &[f64]) -> Self {
        let c: Vec<Complex64> = entries.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        Self::from_rows(dim, &c)
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn diagonal(values: &[Complex64]) -> Self {
        Self(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(
            values,
        )))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_dmatrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn into_dmatrix(self) -> DMatrix<Complex64> {
        self.0
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.0[(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
        self.0[(row, col)] = value;
    }

    pub fn dagger(&self) -> Self {
        Self(self.0.adjoint())
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn conj(&self) -> Self {
        Self(self.0.conjugate())
    }

    pub fn trace(&self) -> Complex64 {
        self.0.trace()
    }

    pub fn determinant(&self) -> Complex64 {
        self.0.clone().determinant()
    }

    pub fn scale(&self, factor: Complex64) -> Self {
        Self(&self.0 * factor)
    }

    pub fn scale_real(&self, factor: f64) -> Self {
        self.scale(Complex64::new(factor, 0.0))
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest entry modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn hermiticity_error(&self) -> f64 {
        self.max_abs_diff(&self.dagger())
    }

    /// `max |U^dagger U - I|` over all entries.
    pub fn unitarity_error(&self) -> f64 {
        let prod = self.0.adjoint() * &self.0;
        prod.max_abs_diff_identity()
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() <= tol
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_error() < tol
    }

    /// Commutator `[self, other]`.
    pub fn commutator(&self, other: &Self) -> Self {
        Self(&self.0 * &other.0 - &other.0 * &self.0)
    }

    /// Submatrix on the given row/column indices.
    pub fn select(&self, indices: &[usize]) -> DMatrix<Complex64> {
        DMatrix::from_fn(indices.len(), indices.len(), |r, c| {
            self.0[(indices[r], indices[c])]
        })
    }
}

trait IdentityDiff {
    fn max_abs_diff_identity(&self) -> f64;
}

impl IdentityDiff for DMatrix<Complex64> {
    fn max_abs_diff_identity(&self) -> f64 {
        let mut worst = 0.0_f64;
        for r in 0..self.nrows() {
            for c in 0..self.ncols() {
                let target = if r == c { ONE } else { ZERO };
                worst = worst.max((self[(r, c)] - target).norm());
            }
        }
        worst
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: Self) -> ComplexMatrix {
        ComplexMatrix(&self.0 * &rhs.0)
    }
}

impl Mul for ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: Self) -> ComplexMatrix {
        ComplexMatrix(self.0 * rhs.0)
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn add(self, rhs: Self) -> ComplexMatrix {
        ComplexMatrix(&self.0 + &rhs.0)
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn sub(self, rhs: Self) -> ComplexMatrix {
        ComplexMatrix(&self.0 - &rhs.0)
    }
}

/// Level structure of a composite system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsystemLayout {
    levels: Vec<usize>,
    computational_labels: Vec<Vec<usize>>,
}

impl SubsystemLayout {
    /// Layout with the default computational labels `[0, 1]` per subsystem.
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        let labels = levels.iter().map(|_| vec![0, 1]).collect();
        Self::with_labels(levels, labels)
    }

    pub fn with_labels(levels: Vec<usize>, computational_labels: Vec<Vec<usize>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("layout needs at least one subsystem".into()));
        }
        if levels.len() != computational_labels.len() {
            return Err(Error::InvalidArgument(
                "one computational label list per subsystem is required".into(),
            ));
        }
        for (i, (&lv, labels)) in levels.iter().zip(&computational_labels).enumerate() {
            if lv < 1 {
                return Err(Error::InvalidDimension(format!("subsystem {i} has zero levels")));
            }
            if labels.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "subsystem {i} has no computational labels"
                )));
            }
            for (k, &l) in labels.iter().enumerate() {
                if l >= lv {
                    return Err(Error::InvalidArgument(format!(
                        "subsystem {i}: label {l} >= level count {lv}"
                    )));
                }
                if labels[..k].contains(&l) {
                    return Err(Error::InvalidArgument(format!(
                        "subsystem {i}: duplicate computational label {l}"
                    )));
                }
            }
        }
        Ok(Self {
            levels,
            computational_labels,
        })
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn computational_labels(&self) -> &[Vec<usize>] {
        &self.computational_labels
    }

    pub fn n_subsystems(&self) -> usize {
        self.levels.len()
    }

    pub fn total_dim(&self) -> usize {
        self.levels.iter().product()
    }

    /// Flat index of a product state.
    pub fn index_of(&self, labels: &[usize]) -> usize {
        debug_assert_eq!(labels.len(), self.levels.len());
        labels
            .iter()
            .zip(&self.levels)
            .fold(0, |acc, (&l, &lv)| acc * lv + l)
    }

    /// Per-subsystem labels of a flat index.
    pub fn labels_of(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.levels.len()];
        for (slot, &lv) in out.iter_mut().zip(&self.levels).rev() {
            *slot = index % lv;
            index /= lv;
        }
        out
    }

    /// Flat indices of the computational product states in lexicographic order.
    pub fn computational_indices(&self) -> Vec<usize> {
        let mut combos: Vec<Vec<usize>> = vec![vec![]];
        for labels in &self.computational_labels {
            combos = combos
                .into_iter()
                .flat_map(|prefix| {
                    labels.iter().map(move |&l| {
                        let mut next = prefix.clone();
                        next.push(l);
                        next
                    })
                })
                .collect();
        }
        combos.iter().map(|c| self.index_of(c)).collect()
    }

    /// Product states with exactly one subsystem outside its computational
    /// labels and all others inside. For two three-level systems this is
    /// `{|0,2>, |1,2>, |2,0>, |2,1>}`.
    pub fn leakage_indices(&self) -> Vec<usize> {
        (0..self.total_dim())
            .filter(|&idx| {
                let labels = self.labels_of(idx);
                let outside = labels
                    .iter()
                    .zip(&self.computational_labels)
                    .filter(|(l, comp)| !comp.contains(l))
                    .count();
                outside == 1
            })
            .collect()
    }

    /// Digits of the basis state, e.g. `"102"`; separated by `_` when some
    /// subsystem has more than ten levels.
    pub fn ket_label(&self, index: usize) -> String {
        let sep = if self.levels().iter().any(|&n| n > 10) { "_" } else { "" };
        self.labels_of(index)
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(sep)
    }
}

/// Truncated annihilation operator with `a[n, n+1] = sqrt(n+1)`.
pub fn ladder(levels: usize) -> Result<ComplexMatrix> {
    if levels < 2 {
        return Err(Error::InvalidDimension(format!(
            "ladder operator needs >= 2 levels, got {levels}"
        )));
    }
    let mut m = DMatrix::zeros(levels, levels);
    for n in 0..levels - 1 {
        m[(n, n + 1)] = Complex64::new(((n + 1) as f64).sqrt(), 0.0);
    }
    Ok(ComplexMatrix(m))
}

/// Kronecker product of the factors in order.
pub fn tensor(factors: &[ComplexMatrix]) -> Result<ComplexMatrix> {
    let (first, rest) = factors
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("tensor product of an empty list".into()))?;
    let out = rest
        .iter()
        .fold(first.0.clone(), |acc, f| acc.kronecker(&f.0));
    Ok(ComplexMatrix(out))
}

/// Embeds a single-subsystem operator into the full space.
pub fn embed(op: &ComplexMatrix, subsystem: usize, levels: &[usize]) -> Result<ComplexMatrix> {
    if subsystem >= levels.len() || op.dim() != levels[subsystem] {
        return Err(Error::InvalidArgument(format!(
            "operator of dim {} cannot act on subsystem {subsystem} of {levels:?}",
            op.dim()
        )));
    }
    let mut acc = DMatrix::<Complex64>::identity(1, 1);
    for (i, &lv) in levels.iter().enumerate() {
        let factor = if i == subsystem {
            op.0.clone()
        } else {
            DMatrix::identity(lv, lv)
        };
        acc = acc.kronecker(&factor);
    }
    Ok(ComplexMatrix(acc))
}

/// Eigendecomposition of a hermitian matrix: ascending eigenvalues and the
/// unitary whose columns are the matching eigenvectors.
pub fn eigh(h: &ComplexMatrix) -> (Vec<f64>, ComplexMatrix) {
    let eig = nalgebra::SymmetricEigen::new(h.0.clone());
    let mut order: Vec<usize> = (0..h.dim()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(h.dim(), h.dim(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, ComplexMatrix(vectors))
}

/// `exp(-i H dt)` via eigendecomposition of the hermitian generator.
pub fn expm(h: &ComplexMatrix, dt: f64) -> Result<ComplexMatrix> {
    expm_with(h, dt, &Numerics::default())
}

pub fn expm_with(h: &ComplexMatrix, dt: f64, numerics: &Numerics) -> Result<ComplexMatrix> {
    if !dt.is_finite() {
        return Err(Error::NumericDomain(format!("time step {dt} is not finite")));
    }
    let herr = h.hermiticity_error();
    if !(herr <= numerics.hermitian_tol) {
        return Err(Error::NumericDomain(format!(
            "generator is not hermitian (deviation {herr:.3e})"
        )));
    }
    Ok(expm_unchecked(h, dt))
}

/// `exp(-i H dt)` without the hermiticity check, for hot loops whose
/// generators are hermitian by construction.
pub fn expm_unchecked(h: &ComplexMatrix, dt: f64) -> ComplexMatrix {
    let eig = nalgebra::SymmetricEigen::new(h.0.clone());
    let n = h.dim();
    let v = &eig.eigenvectors;
    let phases: Vec<Complex64> = eig
        .eigenvalues
        .iter()
        .map(|&e| Complex64::from_polar(1.0, -e * dt))
        .collect();
    let mut scaled = v.clone();
    for c in 0..n {
        let p = phases[c];
        for r in 0..n {
            scaled[(r, c)] *= p;
        }
    }
    ComplexMatrix(scaled * v.adjoint())
}

/// Submatrix of `u_full` on the computational product states. Not
/// re-unitarized: leakage shows up as sub-unitarity.
pub fn project_computational(u_full: &ComplexMatrix, layout: &SubsystemLayout) -> Result<ComplexMatrix> {
    if u_full.dim() != layout.total_dim() {
        return Err(Error::InvalidArgument(format!(
            "matrix dim {} does not match layout dim {}",
            u_full.dim(),
            layout.total_dim()
        )));
    }
    let idx = layout.computational_indices();
    ComplexMatrix::from_dmatrix(u_full.select(&idx))
}

/// `|Tr(V^dagger U)|^2 / dim^2`.
pub fn overlap_fidelity(v: &ComplexMatrix, u: &ComplexMatrix) -> Result<f64> {
    if v.dim() != u.dim() {
        return Err(Error::InvalidArgument(format!(
            "fidelity between dims {} and {}",
            v.dim(),
            u.dim()
        )));
    }
    Ok(overlap_fidelity_unchecked(v, u))
}

pub(crate) fn overlap_fidelity_unchecked(v: &ComplexMatrix, u: &ComplexMatrix) -> f64 {
    // Tr(V^dagger U) = sum_ij conj(V_ij) U_ij
    let tr: Complex64 = v.0.iter().zip(u.0.iter()).map(|(a, b)| a.conj() * b).sum();
    let d = v.dim() as f64;
    tr.norm_sqr() / (d * d)
}

/// Haar-random unitary from the QR decomposition of a complex Ginibre
/// matrix, with the phases of `R`'s diagonal folded back into `Q`.
pub fn random_unitary(dim: usize, rng: &mut impl rand::Rng) -> ComplexMatrix {
    use rand_distr::StandardNormal;
    let g = DMatrix::from_fn(dim, dim, |_, _| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    let qr = g.qr();
    let (mut q, r) = qr.unpack();
    for c in 0..dim {
        let d = r[(c, c)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { ONE };
        for row in 0..dim {
            q[(row, c)] *= phase;
        }
    }
    ComplexMatrix(q)
}

pub mod pauli {
    use super::*;

    pub fn identity() -> ComplexMatrix {
        ComplexMatrix::identity(2)
    }

    pub fn x() -> ComplexMatrix {
        ComplexMatrix::from_real_rows(2, &[0.0, 1.0, 1.0, 0.0])
    }

    pub fn y() -> ComplexMatrix {
        ComplexMatrix::from_rows(2, &[ZERO, -I, I, ZERO])
    }

    pub fn z() -> ComplexMatrix {
        ComplexMatrix::from_real_rows(2, &[1.0, 0.0, 0.0, -1.0])
    }

    /// `exp(-i theta/2 X)`.
    pub fn rx(theta: f64) -> ComplexMatrix {
        let (s, c) = (theta / 2.0).sin_cos();
        ComplexMatrix::from_rows(
            2,
            &[
                Complex64::new(c, 0.0),
                Complex64::new(0.0, -s),
                Complex64::new(0.0, -s),
                Complex64::new(c, 0.0),
            ],
        )
    }

    /// `exp(-i theta/2 Z)`.
    pub fn rz(theta: f64) -> ComplexMatrix {
        ComplexMatrix::diagonal(&[
            Complex64::from_polar(1.0, -theta / 2.0),
            Complex64::from_polar(1.0, theta / 2.0),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_hermitian(dim: usize, rng: &mut impl Rng) -> ComplexMatrix {
        let mut m = DMatrix::zeros(dim, dim);
        for r in 0..dim {
            m[(r, r)] = Complex64::new(rng.random_range(-1.0..1.0), 0.0);
            for c in r + 1..dim {
                let z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                m[(r, c)] = z;
                m[(c, r)] = z.conj();
            }
        }
        ComplexMatrix(m)
    }

    #[test]
    fn ladder_two_and_three_levels() {
        let a2 = ladder(2).unwrap();
        assert_eq!(a2, ComplexMatrix::from_real_rows(2, &[0.0, 1.0, 0.0, 0.0]));

        let a3 = ladder(3).unwrap();
        assert_eq!(a3.get(0, 1), ONE);
        assert!((a3.get(1, 2).re - 2f64.sqrt()).abs() < 1e-15);
        let nonzero = a3.as_dmatrix().iter().filter(|z| z.norm() > 0.0).count();
        assert_eq!(nonzero, 2);

        let n = &a3.dagger() * &a3;
        let expected = ComplexMatrix::from_real_rows(3, &[0., 0., 0., 0., 1., 0., 0., 0., 2.]);
        assert!(n.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn ladder_rejects_single_level() {
        assert!(matches!(ladder(1), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn tensor_products() {
        let i4 = tensor(&[pauli::identity(), pauli::identity()]).unwrap();
        assert_eq!(i4, ComplexMatrix::identity(4));

        // sigma_x on the first factor maps |00> (index 0) to |10> (index 2).
        let xi = tensor(&[pauli::x(), pauli::identity()]).unwrap();
        assert_eq!(xi.get(2, 0), ONE);
        assert_eq!(xi.get(0, 0), ZERO);

        let big = tensor(&[ComplexMatrix::identity(3), ComplexMatrix::identity(3)]).unwrap();
        assert_eq!(big.dim(), 9);

        assert!(matches!(tensor(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn expm_zero_generator_is_identity() {
        let u = expm(&ComplexMatrix::zeros(5), 3.7).unwrap();
        assert!(u.max_abs_diff(&ComplexMatrix::identity(5)) < 1e-14);
    }

    #[test]
    fn expm_diagonal_generator() {
        let omegas = [0.3, -1.2, 2.5];
        let h = ComplexMatrix::diagonal(&omegas.map(|w| Complex64::new(w, 0.0)));
        let dt = 0.7;
        let u = expm(&h, dt).unwrap();
        let expected =
            ComplexMatrix::diagonal(&omegas.map(|w| Complex64::from_polar(1.0, -w * dt)));
        assert!(u.max_abs_diff(&expected) < 1e-13);
    }

    #[test]
    fn expm_group_inverse_and_unitarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let h = random_hermitian(9, &mut rng);
            let dt = rng.random_range(0.01..3.0);
            let fwd = expm(&h, dt).unwrap();
            let back = expm(&h, -dt).unwrap();
            assert!((&fwd * &back).max_abs_diff(&ComplexMatrix::identity(9)) < 1e-10);
            assert!(fwd.unitarity_error() < 1e-10);
        }
    }

    #[test]
    fn expm_composition_for_same_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_hermitian(6, &mut rng);
        let (t1, t2) = (0.41, 1.3);
        let whole = expm(&h, t1 + t2).unwrap();
        let split = &expm(&h, t1).unwrap() * &expm(&h, t2).unwrap();
        assert!(whole.max_abs_diff(&split) < 1e-9);
    }

    #[test]
    fn expm_rejects_non_hermitian() {
        let m = ComplexMatrix::from_real_rows(2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(expm(&m, 1.0), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn projection_of_identity_and_leakage_phases() {
        let layout = SubsystemLayout::new(vec![3, 3]).unwrap();
        let p = project_computational(&ComplexMatrix::identity(9), &layout).unwrap();
        assert_eq!(p, ComplexMatrix::identity(4));

        // Arbitrary phases on every state with a subsystem in |2>.
        let mut u = ComplexMatrix::identity(9);
        for idx in 0..9 {
            if layout.labels_of(idx).contains(&2) {
                u.set(idx, idx, Complex64::from_polar(1.0, 0.3 * idx as f64));
            }
        }
        let p = project_computational(&u, &layout).unwrap();
        assert!(p.max_abs_diff(&ComplexMatrix::identity(4)) < 1e-15);
    }

    #[test]
    fn projection_shows_leakage_as_sub_unitarity() {
        // Rotation mixing |1> and |2> on the second transmon.
        let layout = SubsystemLayout::new(vec![3, 3]).unwrap();
        let theta = 0.4_f64;
        let mut r = ComplexMatrix::identity(3);
        r.set(1, 1, Complex64::new(theta.cos(), 0.0));
        r.set(1, 2, Complex64::new(-theta.sin(), 0.0));
        r.set(2, 1, Complex64::new(theta.sin(), 0.0));
        r.set(2, 2, Complex64::new(theta.cos(), 0.0));
        let u = tensor(&[ComplexMatrix::identity(3), r]).unwrap();
        let p = project_computational(&u, &layout).unwrap();
        let err = p.unitarity_error();
        // |<1|P^dag P|1>| = cos^2(theta)
        assert!((err - theta.sin().powi(2)).abs() < 1e-12);
        assert!(err > 0.1);
    }

    #[test]
    fn projection_dimension_mismatch() {
        let layout = SubsystemLayout::new(vec![3, 3]).unwrap();
        assert!(project_computational(&ComplexMatrix::identity(4), &layout).is_err());
    }

    #[test]
    fn fidelity_examples() {
        let u = tensor(&[pauli::rx(0.3), pauli::rz(1.1)]).unwrap();
        assert!((overlap_fidelity(&u, &u).unwrap() - 1.0).abs() < 1e-14);
        let phased = u.scale(Complex64::from_polar(1.0, 0.77));
        assert!((overlap_fidelity(&phased, &u).unwrap() - 1.0).abs() < 1e-14);

        let cz = ComplexMatrix::from_real_rows(
            4,
            &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., -1.],
        );
        let f = overlap_fidelity(&ComplexMatrix::identity(4), &cz).unwrap();
        assert!((f - 0.25).abs() < 1e-15);

        assert!(overlap_fidelity(&ComplexMatrix::identity(2), &cz).is_err());
    }

    #[test]
    fn layout_indices() {
        let layout = SubsystemLayout::new(vec![3, 3]).unwrap();
        assert_eq!(layout.computational_indices(), vec![0, 1, 3, 4]);
        // |0,2>=2, |1,2>=5, |2,0>=6, |2,1>=7
        assert_eq!(layout.leakage_indices(), vec![2, 5, 6, 7]);
        assert_eq!(layout.labels_of(7), vec![2, 1]);
        assert_eq!(layout.index_of(&[1, 2]), 5);

        let tc = SubsystemLayout::with_labels(vec![3, 3, 3], vec![vec![0, 1], vec![0, 1], vec![0]])
            .unwrap();
        assert_eq!(tc.computational_indices(), vec![0, 3, 9, 12]);
    }

    #[test]
    fn layout_validation() {
        assert!(SubsystemLayout::with_labels(vec![2], vec![vec![0, 2]]).is_err());
        assert!(SubsystemLayout::with_labels(vec![3], vec![vec![1, 1]]).is_err());
        assert!(SubsystemLayout::with_labels(vec![3, 3], vec![vec![0, 1]]).is_err());
    }

    #[test]
    fn eigh_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_hermitian(5, &mut rng);
        let (vals, vecs) = eigh(&h);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let d = ComplexMatrix::diagonal(&vals.iter().map(|&v| Complex64::new(v, 0.0)).collect::<Vec<_>>());
        let rebuilt = &(&vecs * &d) * &vecs.dagger();
        assert!(rebuilt.max_abs_diff(&h) < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn expm_is_unitary(seed in any::<u64>(), dim in 2usize..10, dt in -5.0f64..5.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let h = random_hermitian(dim, &mut rng);
                let u = expm(&h, dt).unwrap();
                prop_assert!(u.unitarity_error() < 1e-10);
            }

            #[test]
            fn fidelity_symmetric_and_phase_invariant(seed in any::<u64>(), phi in -3.0f64..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let u = expm(&random_hermitian(4, &mut rng), 1.0).unwrap();
                let v = expm(&random_hermitian(4, &mut rng), 1.0).unwrap();
                let f_uv = overlap_fidelity(&u, &v).unwrap();
                let f_vu = overlap_fidelity(&v, &u).unwrap();
                prop_assert!((f_uv - f_vu).abs() < 1e-14);
                let phase = Complex64::from_polar(1.0, phi);
                prop_assert!((overlap_fidelity(&u.scale(phase), &v).unwrap() - f_uv).abs() < 1e-14);
                prop_assert!((overlap_fidelity(&u, &v.scale(phase)).unwrap() - f_uv).abs() < 1e-14);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&f_uv));
            }
        }
    }
}
