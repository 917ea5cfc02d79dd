//! The `validate` command: every cross-check, one table row each.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::coeffs::{
    bgk_coefficients, coefficients_from_integrals, coefficients_of_solution, order_parameter_c1,
    VonMisesModel,
};
use crate::error::{Error, Result};
use crate::gci_solver::{
    assemble, build_basis, check_dimension, GciSolution, SolverDiagnostics, SolverOptions,
};
use crate::montecarlo::{
    check_b_structure, check_bgk, check_c1, check_l_isotropy, check_von_mises_moments, sample_haar,
    MonteCarloReport, RngStream,
};
use crate::strongform::{fd_oracle_n3, strong_residual, FdProfile, SampleSet, DEFAULT_DELTA};
use crate::torus::{rank, weyl_generators, QuadratureGrid};

use super::{EXIT_OK, EXIT_VALIDATION};

/// Tolerances of the deterministic checks.
pub const HAAR_TOL: f64 = 1e-10;
pub const ORACLE_TOL: f64 = 1e-6;
pub const RESIDUAL_TOL: f64 = 1e-5;
pub const WEYL_TOL: f64 = 1e-13;
pub const CONJUGATION_TOL: f64 = 1e-8;
pub const C1_ZERO_TOL: f64 = 1e-10;

const WEYL_POINTS: usize = 1000;
const CONJUGATION_PAIRS: usize = 100;
const RESIDUAL_SAMPLES: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Fast,
    Full,
}

impl Level {
    pub fn samples(self) -> usize {
        match self {
            Level::Fast => 20_000,
            Level::Full => 100_000,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ValidateArgs {
    /// Dimensions to check.
    #[arg(long, value_delimiter = ',', default_value = "3")]
    pub n: Vec<usize>,
    /// Concentration parameters to check.
    #[arg(long, value_delimiter = ',', default_value = "1", allow_negative_numbers = true)]
    pub kappa: Vec<f64>,
    #[arg(long, value_enum, default_value = "full")]
    pub level: Level,
    /// Monte-Carlo seed.
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// JSON report (the table still goes to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Negates the Galerkin load vector (mutation test fixture).
    #[arg(long, hide = true)]
    pub inject_load_sign_bug: bool,
}

/// One row of the validation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub n: usize,
    pub kappa: Option<f64>,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(check: &str, n: usize, kappa: Option<f64>, pass: bool, detail: String) -> Self {
        CheckResult {
            check: check.to_string(),
            n,
            kappa,
            pass,
            detail,
        }
    }

    fn from_error(check: &str, n: usize, kappa: Option<f64>, e: &Error) -> Self {
        Self::new(check, n, kappa, false, format!("error: {e}"))
    }

    fn from_report(check: &str, r: &MonteCarloReport) -> Self {
        let worst = r
            .comparisons
            .iter()
            .filter_map(|c| c.z_score.map(|z| (z.abs(), &c.name)))
            .fold((0.0, None), |acc, (z, name)| if z > acc.0 { (z, Some(name)) } else { acc });
        let failures: Vec<&str> = r.failures().iter().map(|c| c.name.as_str()).collect();
        let mut detail = format!(
            "{} comparisons, N = {}, max |z| = {:.2}",
            r.comparisons.len(),
            r.samples,
            worst.0
        );
        if let Some(name) = worst.1 {
            let _ = write!(detail, " ({name})");
        }
        if !failures.is_empty() {
            let _ = write!(detail, "; failed: {}", failures.join(", "));
        }
        Self::new(check, r.n, Some(r.kappa), r.all_pass(), detail)
    }
}

/// Full validation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub level: Level,
    pub seed: u64,
    pub samples: usize,
    pub checks: Vec<CheckResult>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub monte_carlo: Vec<MonteCarloReport>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>3} {:>8}  {:<6} detail", "check", "n", "kappa", "result");
        for c in &self.checks {
            let kappa = c.kappa.map_or("-".to_string(), |k| format!("{k}"));
            let verdict = if c.pass { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{:<22} {:>3} {:>8}  {:<6} {}", c.check, c.n, kappa, verdict, c.detail);
        }
        let failed = self.checks.iter().filter(|c| !c.pass).count();
        let _ = writeln!(out, "{} checks, {} failed", self.checks.len(), failed);
        out
    }
}

fn solve(n: usize, kappa: f64, options: SolverOptions, inject_bug: bool) -> Result<GciSolution> {
    let basis = build_basis(n, options.degree)?;
    let grid = QuadratureGrid::new(n, options.nq)?;
    let mut system = assemble(n, kappa, &basis, &grid)?;
    if inject_bug {
        system.load = -system.load;
    }
    GciSolution::from_system(basis, &system)
}

/// `∫ 1 dA` over SO(n) through the Weyl formula.
pub fn haar_normalization(n: usize) -> CheckResult {
    let nq = if n <= 8 { 64 } else { 16 };
    let res = QuadratureGrid::new(n, nq).and_then(|g| g.integrate_class(|_| 1.0));
    match res {
        Ok(v) => CheckResult::new(
            "haar_normalization",
            n,
            None,
            (v - 1.0).abs() <= HAAR_TOL,
            format!("integral = {v:.15}, |err| = {:.1e}, Nq = {nq}", (v - 1.0).abs()),
        ),
        Err(e) => CheckResult::from_error("haar_normalization", n, None, &e),
    }
}

/// `c1(0) = 0`, nondecreasing on κ ∈ {0, 0.5, …, 10}, and `c1 < 1`.
pub fn c1_properties(n: usize) -> CheckResult {
    let run = || -> Result<(f64, bool, bool)> {
        let grid = QuadratureGrid::default_for(n)?;
        let at_zero = order_parameter_c1(n, 0.0, &grid)?;
        let mut prev = f64::NEG_INFINITY;
        let (mut monotone, mut below_one) = (true, true);
        for k in 0..=20 {
            let c1 = order_parameter_c1(n, 0.5 * k as f64, &grid)?;
            monotone &= c1 >= prev;
            below_one &= c1 < 1.0;
            prev = c1;
        }
        Ok((at_zero, monotone, below_one))
    };
    match run() {
        Ok((z, m, b)) => CheckResult::new(
            "c1_properties",
            n,
            None,
            z.abs() <= C1_ZERO_TOL && m && b,
            format!("c1(0) = {z:.1e}, nondecreasing = {m}, below one = {b}"),
        ),
        Err(e) => CheckResult::from_error("c1_properties", n, None, &e),
    }
}

/// Galerkin (d = 20, N_q = 512) against the Richardson-extrapolated
/// finite-difference profile on 2048/1024 intervals.
pub fn n3_oracle(kappa: f64, inject_bug: bool) -> CheckResult {
    let run = || -> Result<(f64, f64, f64)> {
        let sol = solve(3, kappa, SolverOptions { degree: 20, nq: 512 }, inject_bug)?;
        let fine = fd_oracle_n3(kappa, 2048)?;
        let coarse = fd_oracle_n3(kappa, 1024)?;
        let extrap = FdProfile::richardson(&fine, &coarse)?;
        let l2 = extrap.relative_l2_distance(|t| sol.alpha_at(&[t])[0]);
        let fd = coefficients_from_integrals(3, kappa, &extrap.torus_integrals())?;
        let gal = coefficients_of_solution(&sol)?.values;
        let dc2 = ((fd.c2 - gal.c2) / gal.c2).abs();
        let dc4 = ((fd.c4 - gal.c4) / gal.c4).abs();
        Ok((l2, dc2, dc4))
    };
    match run() {
        Ok((l2, dc2, dc4)) => CheckResult::new(
            "n3_oracle",
            3,
            Some(kappa),
            l2 < ORACLE_TOL && dc2 < ORACLE_TOL && dc4 < ORACLE_TOL,
            format!("L2 = {l2:.2e}, rel c2 = {dc2:.2e}, rel c4 = {dc4:.2e} (tol {ORACLE_TOL:.0e})"),
        ),
        Err(e) => CheckResult::from_error("n3_oracle", 3, Some(kappa), &e),
    }
}

/// Degrees and N_q of the refinement sequence used for n ≥ 4.
pub fn refinement_sequence(n: usize) -> [(usize, usize); 3] {
    match rank(n) {
        0..=2 => [(4, 64), (6, 96), (8, 128)],
        3 => [(3, 32), (4, 48), (5, 64)],
        _ => [(2, 16), (3, 24), (4, 32)],
    }
}

/// n = 3: max residual of the converged solution; n ≥ 4: weighted L²
/// residual strictly decreasing along [`refinement_sequence`].
pub fn strong_residual_check(
    n: usize,
    kappa: f64,
    sol: &GciSolution,
    seed: u64,
    inject_bug: bool,
) -> CheckResult {
    let samples = SampleSet::chamber(n, RESIDUAL_SAMPLES, DEFAULT_DELTA, seed);
    if n == 3 {
        return match strong_residual(sol, &samples) {
            Ok(r) => CheckResult::new(
                "strong_residual",
                n,
                Some(kappa),
                r.max_abs < RESIDUAL_TOL,
                format!(
                    "max = {:.2e} (tol {RESIDUAL_TOL:.0e}), degree {}, delta = {}",
                    r.max_abs,
                    sol.diagnostics().degree,
                    r.delta
                ),
            ),
            Err(e) => CheckResult::from_error("strong_residual", n, Some(kappa), &e),
        };
    }
    let run = || -> Result<Vec<(usize, f64)>> {
        refinement_sequence(n)
            .iter()
            .map(|&(degree, nq)| {
                let s = solve(n, kappa, SolverOptions { degree, nq }, inject_bug)?;
                Ok((degree, strong_residual(&s, &samples)?.weighted_l2_max()))
            })
            .collect()
    };
    match run() {
        Ok(seq) => {
            let decreasing = seq.windows(2).all(|w| w[1].1 < w[0].1);
            let detail = seq
                .iter()
                .map(|(d, r)| format!("d{d}: {r:.2e}"))
                .collect::<Vec<_>>()
                .join(", ");
            CheckResult::new("strong_residual", n, Some(kappa), decreasing, format!("decreasing: {detail}"))
        }
        Err(e) => CheckResult::from_error("strong_residual", n, Some(kappa), &e),
    }
}

/// `α(wθ) = wα(θ)` for every Weyl generator on random torus points.
pub fn weyl_equivariance(sol: &GciSolution, seed: u64) -> CheckResult {
    let n = sol.dim();
    let mut rng = RngStream::new(seed, 0);
    let gens = weyl_generators(n);
    let mut worst = 0.0f64;
    for _ in 0..WEYL_POINTS {
        let th: Vec<f64> = (0..rank(n))
            .map(|_| std::f64::consts::PI * (2.0 * rng.uniform() - 1.0))
            .collect();
        let a = sol.alpha_at(&th);
        for w in &gens {
            let lhs = sol.alpha_at(&w.act(&th));
            for (x, y) in lhs.iter().zip(w.act(&a)) {
                worst = worst.max((x - y).abs() / (1.0 + y.abs()));
            }
        }
    }
    CheckResult::new(
        "weyl_equivariance",
        n,
        Some(sol.kappa()),
        worst <= WEYL_TOL,
        format!("max err = {worst:.1e} over {WEYL_POINTS} points, {} generators", gens.len()),
    )
}

/// `μ(gAgᵀ) = g μ(A) gᵀ` on random Haar pairs.
pub fn conjugation_equivariance(sol: &GciSolution, seed: u64) -> CheckResult {
    let n = sol.dim();
    let mut rng = RngStream::new(seed, 1);
    let mut run = || -> Result<f64> {
        let mut worst = 0.0f64;
        for _ in 0..CONJUGATION_PAIRS {
            let g = sample_haar(n, &mut rng);
            let a = sample_haar(n, &mut rng);
            let lhs = sol.eval_mu(&a.conjugate_by(&g))?;
            let rhs = sol.eval_mu(&a)?.conjugate_by(&g);
            worst = worst.max((lhs.matrix() - rhs.matrix()).norm());
        }
        Ok(worst)
    };
    match run() {
        Ok(worst) => CheckResult::new(
            "mu_conjugation",
            n,
            Some(sol.kappa()),
            worst < CONJUGATION_TOL,
            format!("max |mu(gAg^T) - g mu(A) g^T| = {worst:.1e} over {CONJUGATION_PAIRS} pairs"),
        ),
        Err(e) => CheckResult::from_error("mu_conjugation", n, Some(sol.kappa()), &e),
    }
}

/// The generic integrators on the profile `α = −sin θ` equal the
/// jump-process coefficients bit for bit.
pub fn bgk_substitution(n: usize, kappa: f64, grid: &QuadratureGrid) -> CheckResult {
    let run = || -> Result<bool> {
        let basis = build_basis(n, 2)?;
        let mut c = DVector::zeros(basis.len());
        c[0] = -1.0;
        let diag = SolverDiagnostics {
            relative_residual: 0.0,
            condition_number: 1.0,
            nq: grid.points_per_dim(),
            degree: 2,
            basis_size: basis.len(),
        };
        let sol = GciSolution::from_coefficients(basis, kappa, c, diag)?;
        let sub = crate::coeffs::torus_integrals(n, kappa, |t| sol.alpha_at(t), grid)?;
        let sub_values = coefficients_from_integrals(n, kappa, &sub)?;
        let bgk = bgk_coefficients(n, kappa, grid)?;
        Ok(sub == bgk.integrals && sub_values == bgk.values)
    };
    match run() {
        Ok(same) => CheckResult::new(
            "bgk_substitution",
            n,
            Some(kappa),
            same,
            format!("bit-for-bit equal = {same}"),
        ),
        Err(e) => CheckResult::from_error("bgk_substitution", n, Some(kappa), &e),
    }
}

fn push_mc(
    report: &mut ValidationReport,
    check: &str,
    n: usize,
    kappa: f64,
    result: Result<MonteCarloReport>,
) {
    match result {
        Ok(r) => {
            report.checks.push(CheckResult::from_report(check, &r));
            report.monte_carlo.push(r);
        }
        Err(e) => report.checks.push(CheckResult::from_error(check, n, Some(kappa), &e)),
    }
}

/// Runs every check for every `(n, κ)` pair.
pub fn run_validation(args: &ValidateArgs) -> Result<ValidationReport> {
    if args.n.is_empty() || args.kappa.is_empty() {
        return Err(Error::InvalidConfig("validate needs at least one n and one kappa".into()));
    }
    for &n in &args.n {
        check_dimension(n)?;
    }
    for &k in &args.kappa {
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::InvalidConfig(format!("kappa must be finite and > 0 (got {k})")));
        }
    }
    let samples = args.level.samples();
    let seed = args.seed;
    let mut report = ValidationReport {
        level: args.level,
        seed,
        samples,
        checks: Vec::new(),
        monte_carlo: Vec::new(),
    };
    for &n in &args.n {
        report.checks.push(haar_normalization(n));
        report.checks.push(c1_properties(n));
        let grid = QuadratureGrid::default_for(n)?;
        for &kappa in &args.kappa {
            if kappa > 20.0 && n >= 5 {
                log::warn!(
                    "n = {n}, kappa = {kappa}: the weight is sharply peaked; quadrature and rejection sampling may be inaccurate or slow"
                );
            }
            let sol = match solve(n, kappa, SolverOptions::defaults_for(n), args.inject_load_sign_bug) {
                Ok(s) => s,
                Err(e) => {
                    report.checks.push(CheckResult::from_error("galerkin_solve", n, Some(kappa), &e));
                    continue;
                }
            };
            match coefficients_of_solution(&sol) {
                Ok(set) => report.checks.push(CheckResult::new(
                    "c3_exact",
                    n,
                    Some(kappa),
                    set.values.c3 * kappa == 1.0,
                    format!("c3*kappa = {:?}", set.values.c3 * kappa),
                )),
                Err(e) => report.checks.push(CheckResult::from_error("c3_exact", n, Some(kappa), &e)),
            }
            if n == 3 {
                report.checks.push(n3_oracle(kappa, args.inject_load_sign_bug));
            }
            report
                .checks
                .push(strong_residual_check(n, kappa, &sol, seed, args.inject_load_sign_bug));
            report.checks.push(weyl_equivariance(&sol, seed));
            report.checks.push(conjugation_equivariance(&sol, seed));
            report.checks.push(bgk_substitution(n, kappa, &grid));
            push_mc(&mut report, "bgk_monte_carlo", n, kappa, check_bgk(n, kappa, &grid, samples, seed));
            let iso = check_l_isotropy(&sol, samples, seed);
            if let Ok(c) = iso.as_ref().map(|r| r.get("C2'")) {
                if let Some(c) = c {
                    report.checks.push(CheckResult::new(
                        "c2prime_zero",
                        n,
                        Some(kappa),
                        c.pass,
                        format!("C2' = {:.2e} +- {:.1e}", c.estimate, c.stderr),
                    ));
                }
            }
            push_mc(&mut report, "l_isotropy", n, kappa, iso);
            push_mc(&mut report, "b_structure", n, kappa, check_b_structure(&sol, samples, seed));
            let gamma = sample_haar(n, &mut RngStream::new(seed, 2));
            let moments = VonMisesModel::new(n, kappa, gamma, &grid)
                .and_then(|m| check_von_mises_moments(&m, &grid, samples, seed));
            push_mc(&mut report, "von_mises_moments", n, kappa, moments);
            match check_c1(n, kappa, &grid, samples, seed) {
                Ok(c) => report.checks.push(CheckResult::new(
                    "c1_monte_carlo",
                    n,
                    Some(kappa),
                    c.pass,
                    format!(
                        "E[Tr A/n] = {:.6} +- {:.1e}, quadrature {:.6}",
                        c.estimate, c.stderr, c.oracle
                    ),
                )),
                Err(e) => report.checks.push(CheckResult::from_error("c1_monte_carlo", n, Some(kappa), &e)),
            }
        }
    }
    Ok(report)
}

/// Runs the checks; the table is printed, and the JSON report is returned
/// for `--out` (or the table itself when there is no `--out`).
pub(crate) fn cmd_validate(args: &ValidateArgs) -> Result<(String, serde_json::Value, i32)> {
    let report = run_validation(args)?;
    let code = if report.all_pass() { EXIT_OK } else { EXIT_VALIDATION };
    let table = report.table();
    let text = if args.out.is_some() {
        print!("{table}");
        serde_json::to_string_pretty(&report)? + "\n"
    } else {
        table
    };
    Ok((text, serde_json::to_value(args)?, code))
}
