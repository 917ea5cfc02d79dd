//! Small-matrix geometry of SO(n).
//!
//! The inner product on matrices is `M·N = Tr(MᵀN)/2`, under which the
//! elementary skew matrices `F_ij` form an orthonormal basis of so(n).
//! Indices in this module are zero-based: `f_ij(n, 0, 1)` is `F_12`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthogonality tolerance checked when a [`Rotation`] is built.
pub const ROTATION_TOL: f64 = 1e-12;
/// Drift level above which [`Rotation::reorthonormalize`] does a polar pass.
pub const DRIFT_TOL: f64 = 1e-10;
/// Relative singular-value floor of [`polar_rotation`].
pub const DEFAULT_POLAR_TOL: f64 = 1e-10;

/// An element of SO(n).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rotation(DMatrix<f64>);

/// An element of so(n).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkewSymmetric(DMatrix<f64>);

fn check_square(m: &DMatrix<f64>) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    Ok(m.nrows())
}

fn check_same(m: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<()> {
    if m.shape() != n.shape() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: n.nrows(),
        });
    }
    Ok(())
}

/// `max |AᵀA − I|`.
pub fn orthogonality_defect(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    (a.transpose() * a - DMatrix::<f64>::identity(n, n)).amax()
}

impl Rotation {
    pub fn identity(n: usize) -> Self {
        Rotation(DMatrix::identity(n, n))
    }

    /// Checks `‖AᵀA − I‖_max ≤ 1e-12` and `det A > 0`.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let n = check_square(&a)?;
        let defect = orthogonality_defect(&a);
        let det = a.determinant();
        if !(defect <= ROTATION_TOL) || det <= 0.0 {
            return Err(Error::IllConditioned(format!(
                "matrix of size {n} is not a rotation (orthogonality defect {defect:.3e}, det {det:.3e})"
            )));
        }
        Ok(Rotation(a))
    }

    /// Wraps a matrix the caller knows to be a rotation.
    pub fn from_matrix_unchecked(a: DMatrix<f64>) -> Self {
        Rotation(a)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(&self.0 * &other.0)
    }

    /// `g·A·gᵀ`.
    pub fn conjugate_by(&self, g: &Rotation) -> Rotation {
        Rotation(&g.0 * &self.0 * g.0.transpose())
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// One polar pass when round-off drift exceeds [`DRIFT_TOL`].
    pub fn reorthonormalize(self) -> Rotation {
        if orthogonality_defect(&self.0) > DRIFT_TOL {
            polar_rotation(&self.0).unwrap_or(self)
        } else {
            self
        }
    }
}

impl SkewSymmetric {
    /// Takes the skew part `(M − Mᵀ)/2`.
    pub fn from_skew_part(m: &DMatrix<f64>) -> Result<Self> {
        check_square(m)?;
        Ok(SkewSymmetric((m - m.transpose()) * 0.5))
    }

    /// Rejects matrices with `X + Xᵀ ≠ 0`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let n = check_square(&m)?;
        if (&m + m.transpose()).amax() != 0.0 {
            return Err(Error::InvalidConfig(format!(
                "matrix of size {n} is not exactly skew-symmetric"
            )));
        }
        Ok(SkewSymmetric(m))
    }

    pub fn zeros(n: usize) -> Self {
        SkewSymmetric(DMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn scale(&self, s: f64) -> SkewSymmetric {
        SkewSymmetric(&self.0 * s)
    }

    pub fn add(&self, other: &SkewSymmetric) -> SkewSymmetric {
        SkewSymmetric(&self.0 + &other.0)
    }

    /// `g·X·gᵀ`.
    pub fn conjugate_by(&self, g: &Rotation) -> SkewSymmetric {
        let m = &g.0 * &self.0 * g.0.transpose();
        // restore exact antisymmetry lost to rounding
        SkewSymmetric((&m - m.transpose()) * 0.5)
    }
}

/// `M·N = Tr(MᵀN)/2`.
pub fn mat_inner(m: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<f64> {
    check_same(m, n)?;
    Ok(0.5 * m.dot(n))
}

/// `F_ij` with `(F_ij)_kl = δ_ik δ_jl − δ_il δ_jk`, zero-based indices.
pub fn f_ij(n: usize, i: usize, j: usize) -> SkewSymmetric {
    let mut m = DMatrix::zeros(n, n);
    if i != j {
        m[(i, j)] = 1.0;
        m[(j, i)] = -1.0;
    }
    SkewSymmetric(m)
}

/// `(F_ij)_{i<j}` in lexicographic order.
pub fn skew_basis(n: usize) -> Vec<SkewSymmetric> {
    skew_index_pairs(n)
        .into_iter()
        .map(|(i, j)| f_ij(n, i, j))
        .collect()
}

/// The `(i, j)` pairs, `i < j`, labelling [`skew_basis`].
pub fn skew_index_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Orthogonal projection onto the tangent space at `A`: `A(AᵀM − MᵀA)/2`.
pub fn tangent_project(a: &Rotation, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_same(a.matrix(), m)?;
    let at_m = a.matrix().transpose() * m;
    Ok(a.matrix() * (&at_m - at_m.transpose()) * 0.5)
}

/// Matrix exponential of a skew matrix.
pub fn exp_skew(x: &SkewSymmetric) -> Rotation {
    let n = x.dim();
    if x.0.amax() == 0.0 {
        return Rotation::identity(n);
    }
    let e = x.0.clone().exp();
    Rotation(e).reorthonormalize()
}

/// The rotation factor `A` of the polar decomposition `M = A·S`.
pub fn polar_rotation(m: &DMatrix<f64>) -> Result<Rotation> {
    let tol = DEFAULT_POLAR_TOL * m.norm();
    polar_rotation_with_tol(m, tol)
}

/// [`polar_rotation`] with an absolute singular-value floor `tol`.
///
/// The factor comes from the scaled Newton iteration
/// `X ← (ζX + ζ⁻¹X⁻ᵀ)/2`, which is backward stable; the singular values
/// are only used for the singularity check.
pub fn polar_rotation_with_tol(m: &DMatrix<f64>, tol: f64) -> Result<Rotation> {
    check_square(m)?;
    let det = m.determinant();
    let sigma_min = m.singular_values().min();
    if !(det > 0.0) || !(sigma_min > tol) {
        return Err(Error::SingularInput {
            det,
            sigma_min,
            tol,
        });
    }
    let a = newton_polar(m).ok_or(Error::SingularInput {
        det,
        sigma_min,
        tol,
    })?;
    debug_assert!(a.determinant() > 0.0);
    Ok(Rotation(a))
}

fn newton_polar(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut x = m.clone();
    let mut scaled = true;
    for _ in 0..100 {
        let inv_t = x.clone().try_inverse()?.transpose();
        let zeta = if scaled {
            (inv_t.norm() / x.norm()).sqrt()
        } else {
            1.0
        };
        let next = (&x * zeta + inv_t / zeta) * 0.5;
        let change = (&next - &x).norm() / next.norm();
        x = next;
        if !scaled {
            // one unscaled step after convergence squares the residual
            if change < 1e-14 {
                return Some(x);
            }
        } else if change < 1e-2 {
            scaled = false;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng))
    }

    fn random_rotation(n: usize, rng: &mut ChaCha8Rng) -> Rotation {
        let x = SkewSymmetric::from_skew_part(&gaussian(n, rng)).unwrap();
        exp_skew(&x)
    }

    #[test]
    fn inner_product_examples() {
        let f12 = f_ij(3, 0, 1);
        let f13 = f_ij(3, 0, 2);
        assert_eq!(mat_inner(f12.matrix(), f12.matrix()).unwrap(), 1.0);
        assert_eq!(mat_inner(f12.matrix(), f13.matrix()).unwrap(), 0.0);
        let id = DMatrix::<f64>::identity(4, 4);
        assert_eq!(mat_inner(&id, &id).unwrap(), 2.0);
        assert!(matches!(
            mat_inner(&id, &DMatrix::identity(3, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn basis_is_orthonormal() {
        let b = skew_basis(3);
        assert_eq!(b.len(), 3);
        assert_eq!(b[0].matrix()[(0, 1)], 1.0);
        assert_eq!(b[0].matrix()[(1, 0)], -1.0);
        let b = skew_basis(4);
        assert_eq!(b.len(), 6);
        for (a, x) in b.iter().enumerate() {
            for (c, y) in b.iter().enumerate() {
                let d = if a == c { 1.0 } else { 0.0 };
                assert_eq!(mat_inner(x.matrix(), y.matrix()).unwrap(), d);
            }
        }
    }

    fn signed_f(n: usize, i: usize, j: usize) -> DMatrix<f64> {
        // F_ji = −F_ij, F_ii = 0
        f_ij(n, i, j).into_matrix()
    }

    #[test]
    fn commutator_table_matches_bracket_identity() {
        let f12 = f_ij(3, 0, 1).into_matrix();
        let f23 = f_ij(3, 1, 2).into_matrix();
        let f13 = f_ij(3, 0, 2).into_matrix();
        // e1e3ᵀ − e3e1ᵀ by hand
        let br = &f12 * &f23 - &f23 * &f12;
        assert_eq!(br, f13);

        let delta = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        for n in 3..=6 {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        for l in 0..n {
                            let a = signed_f(n, i, j);
                            let b = signed_f(n, k, l);
                            let lhs = &a * &b - &b * &a;
                            let rhs = signed_f(n, i, l) * delta(j, k)
                                + signed_f(n, j, k) * delta(i, l)
                                - signed_f(n, j, l) * delta(i, k)
                                - signed_f(n, i, k) * delta(j, l);
                            assert_eq!(lhs, rhs, "n={n} ({i}{j}),({k}{l})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn projection_examples() {
        let id = Rotation::identity(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = gaussian(3, &mut rng);
        let sym = &g + g.transpose();
        assert_abs_diff_eq!(tangent_project(&id, &sym).unwrap().amax(), 0.0);
        let skew = &g - g.transpose();
        assert_eq!(tangent_project(&id, &skew).unwrap(), skew);
    }

    #[test]
    fn projection_is_idempotent_and_self_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..100 {
            let n = 3 + trial % 4;
            let a = random_rotation(n, &mut rng);
            let m = gaussian(n, &mut rng);
            let q = gaussian(n, &mut rng);
            let pm = tangent_project(&a, &m).unwrap();
            let ppm = tangent_project(&a, &pm).unwrap();
            assert!((&ppm - &pm).amax() < 1e-12);
            let skew_check = a.matrix().transpose() * &pm;
            assert!((&skew_check + skew_check.transpose()).amax() < 1e-13);
            let pq = tangent_project(&a, &q).unwrap();
            let lhs = mat_inner(&pm, &q).unwrap();
            let rhs = mat_inner(&m, &pq).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_examples() {
        assert_eq!(exp_skew(&SkewSymmetric::zeros(4)), Rotation::identity(4));
        let x = f_ij(3, 0, 1).scale(std::f64::consts::FRAC_PI_2);
        let e = exp_skew(&x);
        let expect = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((e.matrix() - expect).amax() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 3..=8 {
            let x = SkewSymmetric::from_skew_part(&(gaussian(n, &mut rng) * 3.0)).unwrap();
            let e = exp_skew(&x);
            assert!(orthogonality_defect(e.matrix()) <= 1e-12);
            assert!(e.matrix().determinant() > 0.0);
        }
    }

    #[test]
    fn polar_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_rotation(4, &mut rng);
        assert!((polar_rotation(a.matrix()).unwrap().matrix() - a.matrix()).amax() < 1e-14);
        let two = DMatrix::<f64>::identity(3, 3) * 2.0;
        assert!((polar_rotation(&two).unwrap().matrix() - DMatrix::identity(3, 3)).amax() < 1e-15);

        let a = random_rotation(3, &mut rng);
        let m = a.matrix() * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0]));
        assert!((polar_rotation(&m).unwrap().matrix() - a.matrix()).amax() < 1e-12);

        let twice = polar_rotation(polar_rotation(&m).unwrap().matrix()).unwrap();
        assert!((twice.matrix() - polar_rotation(&m).unwrap().matrix()).amax() < 1e-14);
    }

    #[test]
    fn polar_factor_is_accurate_near_rotations() {
        // QᵀM must be symmetric and Q orthogonal to round-off
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [3, 4, 7] {
            for _ in 0..2000 {
                let m = random_rotation(n, &mut rng).into_matrix() + gaussian(n, &mut rng) * 0.1;
                let q = polar_rotation(&m).unwrap();
                let s = q.matrix().transpose() * &m;
                assert!((&s - s.transpose()).amax() < 1e-13);
                assert!(orthogonality_defect(q.matrix()) < 1e-14);
                assert!(s.symmetric_eigenvalues().min() > 0.0);
            }
        }
    }

    #[test]
    fn polar_rejects_singular_and_reflections() {
        let mut m = DMatrix::<f64>::identity(3, 3);
        m[(2, 2)] = -1.0;
        assert!(matches!(polar_rotation(&m), Err(Error::SingularInput { .. })));
        m[(2, 2)] = 0.0;
        assert!(matches!(polar_rotation(&m), Err(Error::SingularInput { .. })));
    }

    #[test]
    fn polar_maximizes_trace_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_rotation(3, &mut rng);
        let m = a.matrix() * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.5, 0.5]));
        let best = polar_rotation(&m).unwrap();
        let score = |r: &DMatrix<f64>| (r.transpose() * &m).trace();
        for _ in 0..200 {
            let r = random_rotation(3, &mut rng);
            assert!(score(r.matrix()) <= score(best.matrix()) + 1e-12);
        }
    }
}
