//! Hydrodynamic coefficients `c1..c4` and the intermediates `C2, C3, C4, C4′`.
//!
//! With `S = Σ α_k sin θ_k`, `T = 2Σ cos θ_k + ε_n` and the von Mises weight
//! `m(Θ)`, the coefficients are ratios of the torus integrals
//!
//! ```text
//! Z = ∫ m,   I_a = ∫ S m,   I_b = ∫ S T m,   I_c = ∫ (Σ α_k sin θ_k cos θ_k) m
//! c1 = ∫ T m / (n Z)
//! c2 = (n I_b − 4 I_c) / ((n² − 4) I_a)
//! c4 = (I_b − n I_c) / ((n² − 4) I_a)
//! c3 = 1/κ
//! ```
//!
//! and the intermediates are `C2 = −2 I_a/(n(n−1) Z)`, `C3 = I_b/(n²(n−1) Z)`,
//! `C4′ = 2 I_c/(n(n−1) Z)`, `C4 = 2n(−2 C3 + C4′)/(n² − 4)`.
//! Every integral is evaluated with the factor `e^{-κn/2}` folded into `m`,
//! which cancels from all ratios and keeps large `κ` finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gci_solver::{
    bgk_alpha, check_dimension, shifted_exponential, GciSolution, SolverOptions,
};
use crate::rotgeom::Rotation;
use crate::torus::{torus_trace, QuadratureGrid};

/// Tolerance of the two algebraic routes to `c2` and `c4`.
pub const ROUTE_TOL: f64 = 1e-10;

/// Smallest `|I_a/Z|` accepted as a normalization.
pub const DEGENERATE_TOL: f64 = 1e-14;

/// Torus integrals of a profile, all with the `e^{-κn/2}` shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusIntegrals {
    pub z: f64,
    pub trace: f64,
    pub ia: f64,
    pub ib: f64,
    pub ic: f64,
}

/// The coefficient values without diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientValues {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    #[serde(rename = "C2")]
    pub big_c2: f64,
    #[serde(rename = "C3")]
    pub big_c3: f64,
    #[serde(rename = "C4")]
    pub big_c4: f64,
    #[serde(rename = "C4prime")]
    pub big_c4_prime: f64,
}

/// Discretization and solver diagnostics of a [`CoefficientSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientDiagnostics {
    pub nq: usize,
    /// Galerkin degree; 0 when no solve was involved.
    pub degree: usize,
    pub solver_residual: f64,
    pub condition_number: f64,
    /// `max |value(N_q) − value(N_q/2)|` over `c1, c2, c4` when computed.
    pub err_est: Option<f64>,
}

/// Coefficients at one `(n, κ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub n: usize,
    pub kappa: f64,
    #[serde(flatten)]
    pub values: CoefficientValues,
    pub integrals: TorusIntegrals,
    pub diagnostics: CoefficientDiagnostics,
}

/// The double nearest `1/κ` whose product with `κ` rounds to exactly 1.
///
/// `1.0/κ` alone fails this for some `κ` (e.g. 49), where a neighbouring
/// double succeeds. For a few percent of `κ` no binary64 value has this
/// property; the correctly rounded `1/κ` is returned then.
pub fn exact_reciprocal(kappa: f64) -> f64 {
    let r = 1.0 / kappa;
    if r * kappa == 1.0 {
        return r;
    }
    let mut up = r;
    let mut down = r;
    for _ in 0..4 {
        up = f64::from_bits(up.to_bits() + 1);
        down = f64::from_bits(down.to_bits() - 1);
        if down * kappa == 1.0 {
            return down;
        }
        if up * kappa == 1.0 {
            return up;
        }
    }
    r
}

fn check_kappa_positive(kappa: f64) -> Result<()> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "kappa must be finite and > 0 for c2, c3, c4 (got {kappa})"
        )));
    }
    Ok(())
}

fn check_kappa_nonnegative(kappa: f64) -> Result<()> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "kappa must be finite and >= 0 (got {kappa})"
        )));
    }
    Ok(())
}

fn check_grid(n: usize, grid: &QuadratureGrid) -> Result<()> {
    if grid.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: grid.dim(),
        });
    }
    Ok(())
}

/// `c1 = ⟨T⟩/n` under the weight `m`.
pub fn order_parameter_c1(n: usize, kappa: f64, grid: &QuadratureGrid) -> Result<f64> {
    check_dimension(n)?;
    check_kappa_nonnegative(kappa)?;
    check_grid(n, grid)?;
    let z = grid.integrate_hyperoctahedral(|th| shifted_exponential(th, kappa, n))?;
    let t = grid.integrate_hyperoctahedral(|th| torus_trace(th, n) * shifted_exponential(th, kappa, n))?;
    Ok(t / (n as f64 * z))
}

/// `c1 = E[Tr(A)/n]` under `exp(κ Tr(A)/2)` via the Weyl formula on the full grid.
pub fn order_parameter_c1_haar(n: usize, kappa: f64, grid: &QuadratureGrid) -> Result<f64> {
    check_dimension(n)?;
    check_kappa_nonnegative(kappa)?;
    check_grid(n, grid)?;
    let z = grid.integrate_class(|t| shifted_exponential(t.angles(), kappa, n))?;
    let tr = grid.integrate_class(|t| {
        let a = crate::torus::block_rotation(t, n).expect("rank matches grid");
        a.trace() / n as f64 * shifted_exponential(t.angles(), kappa, n)
    })?;
    Ok(tr / z)
}

/// Von Mises law `∝ exp(κ Tr(ΓᵀA)/2)` with respect to normalized Haar measure.
#[derive(Clone, Debug)]
pub struct VonMisesModel {
    pub n: usize,
    pub kappa: f64,
    pub gamma: Rotation,
    /// `log ∫ exp(κ Tr(A)/2) dA`.
    pub log_z: f64,
}

impl VonMisesModel {
    pub fn new(n: usize, kappa: f64, gamma: Rotation, grid: &QuadratureGrid) -> Result<Self> {
        check_dimension(n)?;
        check_kappa_nonnegative(kappa)?;
        check_grid(n, grid)?;
        if gamma.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: gamma.dim(),
            });
        }
        let shifted = grid.integrate_hyperoctahedral(|th| shifted_exponential(th, kappa, n))?;
        Ok(VonMisesModel {
            n,
            kappa,
            gamma,
            log_z: shifted.ln() + 0.5 * kappa * n as f64,
        })
    }

    /// Density with respect to Haar measure.
    pub fn density(&self, a: &Rotation) -> f64 {
        let tr = (self.gamma.matrix().transpose() * a.matrix()).trace();
        (0.5 * self.kappa * tr - self.log_z).exp()
    }

    /// Acceptance probability of the Haar-proposal rejection sampler,
    /// `∫ exp(κ(Tr(A) − n)/2) dA`.
    pub fn acceptance_rate(&self) -> f64 {
        (self.log_z - 0.5 * self.kappa * self.n as f64).exp()
    }
}

/// Evaluates `Z, ∫Tm, I_a, I_b, I_c` for a Weyl-equivariant profile.
pub fn torus_integrals<F>(n: usize, kappa: f64, alpha: F, grid: &QuadratureGrid) -> Result<TorusIntegrals>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    check_grid(n, grid)?;
    let parts = grid.integrate_hyperoctahedral_vec(5, |th, out| {
        let w = shifted_exponential(th, kappa, n);
        let a = alpha(th);
        let t = torus_trace(th, n);
        let mut s = 0.0;
        let mut sc = 0.0;
        for (ak, tk) in a.iter().zip(th) {
            let (sin, cos) = tk.sin_cos();
            s += ak * sin;
            sc += ak * sin * cos;
        }
        out[0] = w;
        out[1] = t * w;
        out[2] = s * w;
        out[3] = s * t * w;
        out[4] = sc * w;
    })?;
    Ok(TorusIntegrals {
        z: parts[0],
        trace: parts[1],
        ia: parts[2],
        ib: parts[3],
        ic: parts[4],
    })
}

/// Turns integrals into coefficients and cross-checks the two algebraic routes.
pub fn coefficients_from_integrals(n: usize, kappa: f64, ints: &TorusIntegrals) -> Result<CoefficientValues> {
    check_kappa_positive(kappa)?;
    let nf = n as f64;
    let TorusIntegrals { z, trace, ia, ib, ic } = *ints;
    if !(ia / z).is_finite() || (ia / z).abs() < DEGENERATE_TOL {
        return Err(Error::DegenerateDenominator(ia / z));
    }
    let d = nf * nf - 4.0;
    let c1 = trace / (nf * z);
    let c2 = (nf * ib - 4.0 * ic) / (d * ia);
    let c4 = (ib - nf * ic) / (d * ia);
    let big_c2 = -2.0 / (nf * (nf - 1.0)) * ia / z;
    let big_c3 = ib / (nf * nf * (nf - 1.0) * z);
    let big_c4_prime = 2.0 * ic / (nf * (nf - 1.0) * z);
    let big_c4 = 2.0 * nf / d * (-2.0 * big_c3 + big_c4_prime);

    let c2_route = -(2.0 / big_c2) * (big_c3 - big_c4 / nf);
    let c4_route = big_c4 / (2.0 * big_c2);
    let off2 = (c2 - c2_route).abs() / c2.abs().max(1e-300);
    let off4 = (c4 - c4_route).abs() / c4.abs().max(1e-300);
    if !(off2 <= ROUTE_TOL) || !(off4 <= ROUTE_TOL) {
        return Err(Error::IllConditioned(format!(
            "coefficient routes disagree: c2 {c2} vs {c2_route}, c4 {c4} vs {c4_route}"
        )));
    }
    let values = CoefficientValues {
        c1,
        c2,
        c3: exact_reciprocal(kappa),
        c4,
        big_c2,
        big_c3,
        big_c4,
        big_c4_prime,
    };
    let all = [c1, c2, c4, big_c2, big_c3, big_c4, big_c4_prime];
    if !all.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(all.to_vec()));
    }
    Ok(values)
}

/// Options of [`compute_all`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientOptions {
    pub solver: SolverOptions,
    /// Repeat the pipeline at `N_q/2` to fill `err_est`.
    pub error_estimate: bool,
}

impl CoefficientOptions {
    pub fn defaults_for(n: usize) -> Self {
        CoefficientOptions {
            solver: SolverOptions::defaults_for(n),
            error_estimate: true,
        }
    }
}

/// Coefficients of a solved profile on a grid of the solver's resolution.
pub fn coefficients_of_solution(sol: &GciSolution) -> Result<CoefficientSet> {
    let n = sol.dim();
    let kappa = sol.kappa();
    let grid = QuadratureGrid::new(n, sol.diagnostics().nq)?;
    let integrals = torus_integrals(n, kappa, |th| sol.alpha_at(th), &grid)?;
    let values = coefficients_from_integrals(n, kappa, &integrals)?;
    Ok(CoefficientSet {
        n,
        kappa,
        values,
        integrals,
        diagnostics: CoefficientDiagnostics {
            nq: sol.diagnostics().nq,
            degree: sol.diagnostics().degree,
            solver_residual: sol.diagnostics().relative_residual,
            condition_number: sol.diagnostics().condition_number,
            err_est: None,
        },
    })
}

/// Solves for `α` and evaluates every coefficient.
pub fn compute_all(n: usize, kappa: f64, options: CoefficientOptions) -> Result<CoefficientSet> {
    Ok(compute_all_with_solution(n, kappa, options)?.0)
}

/// [`compute_all`] that also returns the solved profile.
pub fn compute_all_with_solution(
    n: usize,
    kappa: f64,
    options: CoefficientOptions,
) -> Result<(CoefficientSet, GciSolution)> {
    check_dimension(n)?;
    check_kappa_positive(kappa)?;
    let sol = GciSolution::compute(n, kappa, options.solver)?;
    let mut set = coefficients_of_solution(&sol)?;
    if options.error_estimate {
        let half = SolverOptions {
            degree: options.solver.degree,
            nq: options.solver.nq / 2,
        };
        let coarse_sol = GciSolution::compute(n, kappa, half)?;
        let coarse = coefficients_of_solution(&coarse_sol)?;
        let a = &set.values;
        let b = &coarse.values;
        let err = [(a.c1, b.c1), (a.c2, b.c2), (a.c4, b.c4)]
            .iter()
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        set.diagnostics.err_est = Some(err);
    }
    Ok((set, sol))
}

/// Coefficients of the jump-process model (`α_k = −sin θ_k`, no solve).
pub fn bgk_coefficients(n: usize, kappa: f64, grid: &QuadratureGrid) -> Result<CoefficientSet> {
    check_dimension(n)?;
    check_kappa_positive(kappa)?;
    let integrals = torus_integrals(n, kappa, bgk_alpha, grid)?;
    let values = coefficients_from_integrals(n, kappa, &integrals)?;
    Ok(CoefficientSet {
        n,
        kappa,
        values,
        integrals,
        diagnostics: CoefficientDiagnostics {
            nq: grid.points_per_dim(),
            degree: 0,
            solver_residual: 0.0,
            condition_number: 1.0,
            err_est: None,
        },
    })
}
