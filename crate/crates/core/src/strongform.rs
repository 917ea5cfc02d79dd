//! Strong-form audit of the GCI profile and an independent SO(3) solver.
//!
//! The radial Laplacian on class functions is
//!
//! ```text
//! Lφ = Σ_j [ ∂²_j φ + ( Σ_{k≠j} 2/(cos θ_k − cos θ_j) + ε_n/(1 − cos θ_j) ) sin θ_j ∂_j φ ]
//!    = u_n⁻¹ ∇·(u_n ∇φ)
//! ```
//!
//! and the profile satisfies, away from the root hyperplanes,
//!
//! ```text
//! Lα_ℓ − κ Σ_k sin θ_k ∂_k α_ℓ − Σ_{k≠ℓ} [ (α_ℓ−α_k)/(1−cos(θ_ℓ−θ_k)) + (α_ℓ+α_k)/(1−cos(θ_ℓ+θ_k)) ]
//!     − ε_n α_ℓ/(1 − cos θ_ℓ) + sin θ_ℓ = 0.
//! ```
//!
//! Derivatives here are centered finite differences so that nothing is shared
//! with the Galerkin assembly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::TorusIntegrals;
use crate::error::{Error, Result};
use crate::gci_solver::GciSolution;
use crate::torus::{parity, rank, torus_trace, weyl_density_raw};

pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_FD_STEP: f64 = 1e-4;

fn wrapped_abs(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    y.min(2.0 * PI - y)
}

/// Distance (in the wrapped sense) from `Θ` to the hyperplanes
/// `θ_ℓ = ±θ_k` and `θ_ℓ = 0`.
pub fn distance_to_singular_set(angles: &[f64]) -> f64 {
    let mut d = f64::INFINITY;
    for (l, &a) in angles.iter().enumerate() {
        d = d.min(wrapped_abs(a));
        for &b in &angles[l + 1..] {
            d = d.min(wrapped_abs(a - b)).min(wrapped_abs(a + b));
        }
    }
    d
}

fn check_point(angles: &[f64], delta: f64) -> Result<()> {
    if distance_to_singular_set(angles) <= delta {
        return Err(Error::SingularPoint {
            point: angles.to_vec(),
            delta,
        });
    }
    Ok(())
}

fn drift(angles: &[f64], n: usize, j: usize) -> f64 {
    let cj = angles[j].cos();
    let mut c: f64 = angles
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != j)
        .map(|(_, t)| 2.0 / (t.cos() - cj))
        .sum();
    c += parity(n) / (1.0 - cj);
    c * angles[j].sin()
}

/// `Lφ(Θ)` in sum form with centered differences of step `h`.
pub fn radial_laplacian<F>(phi: F, angles: &[f64], n: usize, h: f64, delta: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    check_point(angles, delta)?;
    let f0 = phi(angles);
    let mut point = angles.to_vec();
    let mut total = 0.0;
    for j in 0..angles.len() {
        point[j] = angles[j] + h;
        let fp = phi(&point);
        point[j] = angles[j] - h;
        let fm = phi(&point);
        point[j] = angles[j];
        total += (fp - 2.0 * f0 + fm) / (h * h) + drift(angles, n, j) * (fp - fm) / (2.0 * h);
    }
    Ok(total)
}

/// `u_n⁻¹ ∇·(u_n ∇φ)` with a conservative centered stencil of step `h`.
pub fn radial_laplacian_divergence<F>(
    phi: F,
    angles: &[f64],
    n: usize,
    h: f64,
    delta: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    check_point(angles, delta)?;
    let u0 = weyl_density_raw(angles, n);
    let f0 = phi(angles);
    let mut point = angles.to_vec();
    let mut total = 0.0;
    for j in 0..angles.len() {
        point[j] = angles[j] + h;
        let fp = phi(&point);
        point[j] = angles[j] + 0.5 * h;
        let up = weyl_density_raw(&point, n);
        point[j] = angles[j] - h;
        let fm = phi(&point);
        point[j] = angles[j] - 0.5 * h;
        let um = weyl_density_raw(&point, n);
        point[j] = angles[j];
        total += (up * (fp - f0) - um * (f0 - fm)) / (h * h);
    }
    Ok(total / u0)
}

/// Chamber-interior sample points for the residual audit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleSet {
    pub points: Vec<Vec<f64>>,
    pub delta: f64,
    pub h: f64,
}

impl SampleSet {
    /// `count` points drawn uniformly in the fundamental chamber, rejecting
    /// those within `delta` of the singular set.
    pub fn chamber(n: usize, count: usize, delta: f64, seed: u64) -> Self {
        let p = rank(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(count);
        while points.len() < count {
            let mut th: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..PI)).collect();
            th.sort_by(|a, b| b.total_cmp(a));
            if n % 2 == 0 && rng.gen::<bool>() {
                th[p - 1] = -th[p - 1];
            }
            if distance_to_singular_set(&th) > delta {
                points.push(th);
            }
        }
        SampleSet {
            points,
            delta,
            h: DEFAULT_FD_STEP,
        }
    }
}

/// Strong-form residual statistics over a [`SampleSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// `sqrt(Σ m r_ℓ² / Σ m)` per equation.
    pub weighted_l2: Vec<f64>,
    pub max_abs: f64,
    pub delta: f64,
    pub h: f64,
    pub samples: usize,
}

impl ResidualReport {
    /// Largest per-equation weighted L² residual.
    pub fn weighted_l2_max(&self) -> f64 {
        self.weighted_l2.iter().copied().fold(0.0, f64::max)
    }
}

/// Strong-form residual vector of an arbitrary profile at one point.
pub fn pointwise_residual<F>(alpha: &F, angles: &[f64], n: usize, kappa: f64, h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let p = angles.len();
    let eps = parity(n);
    let a0 = alpha(angles);
    let mut d1 = vec![vec![0.0; p]; p];
    let mut d2 = vec![vec![0.0; p]; p];
    let mut point = angles.to_vec();
    for j in 0..p {
        point[j] = angles[j] + h;
        let ap = alpha(&point);
        point[j] = angles[j] - h;
        let am = alpha(&point);
        point[j] = angles[j];
        for l in 0..p {
            d1[l][j] = (ap[l] - am[l]) / (2.0 * h);
            d2[l][j] = (ap[l] - 2.0 * a0[l] + am[l]) / (h * h);
        }
    }
    (0..p)
        .map(|l| {
            let th_l = angles[l];
            let mut r = 0.0;
            for j in 0..p {
                r += d2[l][j] + drift(angles, n, j) * d1[l][j];
                r -= kappa * angles[j].sin() * d1[l][j];
            }
            for k in (0..p).filter(|&k| k != l) {
                r -= (a0[l] - a0[k]) / (1.0 - (th_l - angles[k]).cos());
                r -= (a0[l] + a0[k]) / (1.0 - (th_l + angles[k]).cos());
            }
            r -= eps * a0[l] / (1.0 - th_l.cos());
            r + th_l.sin()
        })
        .collect()
}

/// Residual report of an arbitrary profile `α`.
pub fn strong_residual_profile<F>(
    alpha: F,
    n: usize,
    kappa: f64,
    samples: &SampleSet,
) -> Result<ResidualReport>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let p = rank(n);
    for th in &samples.points {
        if th.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: th.len(),
            });
        }
        check_point(th, samples.delta)?;
    }
    let rows: Vec<(f64, Vec<f64>)> = samples
        .points
        .par_iter()
        .map(|th| {
            let m = (0.5 * kappa * (torus_trace(th, n) - n as f64)).exp() * weyl_density_raw(th, n);
            (m, pointwise_residual(&alpha, th, n, kappa, samples.h))
        })
        .collect();
    let mut weight = 0.0;
    let mut sums = vec![0.0; p];
    let mut max_abs: f64 = 0.0;
    for (m, r) in &rows {
        weight += m;
        for (s, v) in sums.iter_mut().zip(r) {
            *s += m * v * v;
            max_abs = max_abs.max(v.abs());
        }
    }
    Ok(ResidualReport {
        weighted_l2: sums.iter().map(|s| (s / weight).sqrt()).collect(),
        max_abs,
        delta: samples.delta,
        h: samples.h,
        samples: rows.len(),
    })
}

/// Residual report of a solved GCI profile.
pub fn strong_residual(sol: &GciSolution, samples: &SampleSet) -> Result<ResidualReport> {
    strong_residual_profile(|th| sol.alpha_at(th), sol.dim(), sol.kappa(), samples)
}

/// Finite-difference solution of the SO(3) profile equation
/// `−(m α')' + m α/(1 − cos θ) = m sin θ` on `[0, π]` with `α(0) = α(π) = 0`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FdProfile {
    pub kappa: f64,
    /// Nodes `θ_j = jπ/N`, `j = 0..=N`.
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
}

fn fd_weight(theta: f64, kappa: f64) -> f64 {
    (kappa * (theta.cos() - 1.0)).exp() * (0.5 * theta).sin().powi(2)
}

/// Second-order conservative finite-difference solve with `intervals` cells on `[0, π]`.
pub fn fd_oracle_n3(kappa: f64, intervals: usize) -> Result<FdProfile> {
    if intervals < 128 {
        return Err(Error::InvalidConfig(format!(
            "finite-difference oracle needs at least 128 intervals, got {intervals}"
        )));
    }
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidConfig(format!("kappa must be finite and >= 0, got {kappa}")));
    }
    let nn = intervals;
    let h = PI / nn as f64;
    let theta: Vec<f64> = (0..=nn).map(|j| j as f64 * h).collect();
    let unknowns = nn - 1;
    let mut lower = vec![0.0; unknowns];
    let mut diag = vec![0.0; unknowns];
    let mut upper = vec![0.0; unknowns];
    let mut rhs = vec![0.0; unknowns];
    for i in 0..unknowns {
        let j = i + 1;
        let t = theta[j];
        let m_left = fd_weight(t - 0.5 * h, kappa);
        let m_right = fd_weight(t + 0.5 * h, kappa);
        let e = (kappa * (t.cos() - 1.0)).exp();
        lower[i] = -m_left / (h * h);
        upper[i] = -m_right / (h * h);
        diag[i] = (m_left + m_right) / (h * h) + 0.5 * e;
        rhs[i] = fd_weight(t, kappa) * t.sin();
    }
    // Thomas algorithm (the matrix is symmetric, diagonally dominant)
    for i in 1..unknowns {
        let w = lower[i] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    let mut inner = vec![0.0; unknowns];
    inner[unknowns - 1] = rhs[unknowns - 1] / diag[unknowns - 1];
    for i in (0..unknowns - 1).rev() {
        inner[i] = (rhs[i] - upper[i] * inner[i + 1]) / diag[i];
    }
    let mut alpha = Vec::with_capacity(nn + 1);
    alpha.push(0.0);
    alpha.extend(inner);
    alpha.push(0.0);
    Ok(FdProfile {
        kappa,
        theta,
        alpha,
    })
}

impl FdProfile {
    pub fn intervals(&self) -> usize {
        self.theta.len() - 1
    }

    /// Values on the periodic grid `θ = −π + jπ/N`, `j = 0..2N`, by odd extension.
    pub fn periodic_grid(&self) -> Vec<(f64, f64)> {
        let nn = self.intervals();
        let mut out = Vec::with_capacity(2 * nn);
        for j in (1..=nn).rev() {
            out.push((-self.theta[j], -self.alpha[j]));
        }
        for j in 0..nn {
            out.push((self.theta[j], self.alpha[j]));
        }
        out
    }

    /// Richardson combination `(4 fine − coarse)/3` on the coarse nodes.
    pub fn richardson(fine: &FdProfile, coarse: &FdProfile) -> Result<FdProfile> {
        if fine.intervals() != 2 * coarse.intervals() || fine.kappa != coarse.kappa {
            return Err(Error::InvalidConfig(
                "Richardson pairing needs the same kappa and a factor-2 refinement".into(),
            ));
        }
        let alpha = coarse
            .alpha
            .iter()
            .enumerate()
            .map(|(j, c)| (4.0 * fine.alpha[2 * j] - c) / 3.0)
            .collect();
        Ok(FdProfile {
            kappa: coarse.kappa,
            theta: coarse.theta.clone(),
            alpha,
        })
    }

    /// Trapezoid rule of `g(θ, α(θ)) m(θ)` over `[0, π]`; `m` carries the `e^{-3κ/2}` shift.
    pub fn integrate<G: Fn(f64, f64) -> f64>(&self, g: G) -> f64 {
        let h = PI / self.intervals() as f64;
        let last = self.intervals();
        let terms: Vec<f64> = self
            .theta
            .iter()
            .zip(&self.alpha)
            .enumerate()
            .map(|(j, (&t, &a))| {
                let w = if j == 0 || j == last { 0.5 } else { 1.0 };
                w * h * g(t, a) * fd_weight(t, self.kappa)
            })
            .collect();
        crate::torus::tree_sum(&terms)
    }

    /// `Z, ∫Tm, I_a, I_b, I_c` of the profile, for the coefficient formulas.
    pub fn torus_integrals(&self) -> TorusIntegrals {
        let tr = |t: f64| 1.0 + 2.0 * t.cos();
        TorusIntegrals {
            z: self.integrate(|_, _| 1.0),
            trace: self.integrate(|t, _| tr(t)),
            ia: self.integrate(|t, a| a * t.sin()),
            ib: self.integrate(|t, a| a * t.sin() * tr(t)),
            ic: self.integrate(|t, a| a * t.sin() * t.cos()),
        }
    }

    /// Relative weighted L² distance `‖α − other‖_m / ‖α‖_m` on the nodes.
    pub fn relative_l2_distance<F: Fn(f64) -> f64>(&self, other: F) -> f64 {
        let num = self.integrate(|t, a| (a - other(t)).powi(2));
        let den = self.integrate(|_, a| a * a);
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gci_solver::{bgk_alpha, SolverOptions};

    #[test]
    fn constant_has_zero_laplacian() {
        for n in 3..=6 {
            let th: Vec<f64> = (0..rank(n)).map(|k| 2.5 - 0.7 * k as f64).collect();
            let v = radial_laplacian(|_| 4.0, &th, n, DEFAULT_FD_STEP, DEFAULT_DELTA).unwrap();
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn laplacian_of_cosine_for_n3() {
        for k in 0..10 {
            let t = 0.2 + 0.28 * k as f64;
            let v = radial_laplacian(|a| a[0].cos(), &[t], 3, DEFAULT_FD_STEP, DEFAULT_DELTA).unwrap();
            let expect = -t.cos() - (1.0 + t.cos());
            assert!((v - expect).abs() < 1e-6, "t={t}: {v} vs {expect}");
        }
    }

    #[test]
    fn sum_and_divergence_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in 3..=7 {
            let samples = SampleSet::chamber(n, 20, 0.1, rng.gen());
            for th in &samples.points {
                let phi = |a: &[f64]| {
                    a.iter().enumerate().map(|(k, t)| ((k + 1) as f64 * t).cos()).sum::<f64>()
                        + a.iter().map(|t| t.cos()).product::<f64>()
                };
                let s = radial_laplacian(phi, th, n, DEFAULT_FD_STEP, 0.1).unwrap();
                let d = radial_laplacian_divergence(phi, th, n, DEFAULT_FD_STEP, 0.1).unwrap();
                assert!((s - d).abs() < 1e-6 * (1.0 + s.abs()), "n={n} {th:?}: {s} vs {d}");
            }
        }
    }

    #[test]
    fn singular_points_are_rejected() {
        assert!(matches!(
            radial_laplacian(|_| 1.0, &[0.01], 3, 1e-4, 0.05),
            Err(Error::SingularPoint { .. })
        ));
        assert!(matches!(
            radial_laplacian(|_| 1.0, &[1.0, 0.98], 4, 1e-4, 0.05),
            Err(Error::SingularPoint { .. })
        ));
        assert!(distance_to_singular_set(&[3.1, -3.1]) < 0.1);
    }

    #[test]
    fn chamber_samples_avoid_singular_set() {
        let s = SampleSet::chamber(6, 200, 0.05, 1);
        assert_eq!(s.points.len(), 200);
        for th in &s.points {
            assert!(crate::torus::in_chamber(th, 6));
            assert!(distance_to_singular_set(th) > 0.05);
        }
    }

    #[test]
    fn bgk_defect_for_n3() {
        // α = −sin θ: Lα = sin θ − sin θ cos θ/(1 − cos θ), which gives a
        // residual of 3 sin θ + κ sin θ cos θ
        let samples = SampleSet::chamber(3, 50, 0.05, 2);
        for kappa in [0.0, 1.5] {
            for th in &samples.points {
                let r = pointwise_residual(&bgk_alpha, th, 3, kappa, DEFAULT_FD_STEP);
                let t = th[0];
                let expect = 3.0 * t.sin() + kappa * t.sin() * t.cos();
                assert!((r[0] - expect).abs() < 1e-6, "{t}: {} vs {expect}", r[0]);
            }
        }
        let rep = strong_residual_profile(bgk_alpha, 3, 0.0, &samples).unwrap();
        assert!(rep.max_abs > 1.0);
    }

    #[test]
    fn fd_profile_is_odd_and_periodic() {
        let prof = fd_oracle_n3(1.0, 256).unwrap();
        assert_eq!(prof.alpha[0], 0.0);
        assert_eq!(*prof.alpha.last().unwrap(), 0.0);
        let grid = prof.periodic_grid();
        assert_eq!(grid.len(), 512);
        assert_eq!(grid[0], (-PI, -0.0));
        for j in 1..256 {
            let (t1, a1) = grid[256 - j];
            let (t2, a2) = grid[256 + j];
            assert_eq!(t1, -t2);
            assert_eq!(a1, -a2);
        }
        assert!(fd_oracle_n3(1.0, 64).is_err());
    }

    #[test]
    fn fd_profile_converges_at_second_order() {
        let c = fd_oracle_n3(1.0, 256).unwrap();
        let m = fd_oracle_n3(1.0, 512).unwrap();
        let f = fd_oracle_n3(1.0, 1024).unwrap();
        let e1 = (0..=256).map(|j| (c.alpha[j] - m.alpha[2 * j]).abs()).fold(0.0, f64::max);
        let e2 = (0..=512).map(|j| (m.alpha[j] - f.alpha[2 * j]).abs()).fold(0.0, f64::max);
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn galerkin_residual_for_n3_is_small() {
        let sol = crate::gci_solver::GciSolution::compute(3, 1.0, SolverOptions { degree: 20, nq: 512 }).unwrap();
        let samples = SampleSet::chamber(3, 200, DEFAULT_DELTA, 3);
        let rep = strong_residual(&sol, &samples).unwrap();
        assert!(rep.max_abs < 1e-5, "{rep:?}");
    }

    #[test]
    fn galerkin_matches_fd_oracle_for_n3() {
        let sol = crate::gci_solver::GciSolution::compute(3, 1.0, SolverOptions { degree: 20, nq: 512 }).unwrap();
        let fine = fd_oracle_n3(1.0, 2048).unwrap();
        let coarse = fd_oracle_n3(1.0, 1024).unwrap();
        let extrap = FdProfile::richardson(&fine, &coarse).unwrap();
        let raw = fine.relative_l2_distance(|t| sol.alpha_at(&[t])[0]);
        let rich = extrap.relative_l2_distance(|t| sol.alpha_at(&[t])[0]);
        eprintln!("raw {raw:.3e}, extrapolated {rich:.3e}");
        assert!(rich < 1e-6);
        let fd = crate::coeffs::coefficients_from_integrals(3, 1.0, &extrap.torus_integrals()).unwrap();
        let gal = crate::coeffs::coefficients_of_solution(&sol).unwrap().values;
        assert!(((fd.c2 - gal.c2) / gal.c2).abs() < 1e-6);
        assert!(((fd.c4 - gal.c4) / gal.c4).abs() < 1e-6);
    }

    #[test]
    fn n4_residual_decreases_under_refinement() {
        let samples = SampleSet::chamber(4, 300, DEFAULT_DELTA, 5);
        for kappa in [1.0, 5.0] {
            let mut prev = f64::INFINITY;
            for (degree, nq) in [(4, 64), (6, 96), (8, 128)] {
                let sol = crate::gci_solver::GciSolution::compute(4, kappa, SolverOptions { degree, nq }).unwrap();
                let r = strong_residual(&sol, &samples).unwrap().weighted_l2_max();
                assert!(r < prev, "kappa {kappa}, degree {degree}: {r} >= {prev}");
                prev = r;
            }
        }
    }
}
