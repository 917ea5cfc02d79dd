//! Haar and von Mises sampling on SO(n) and Monte-Carlo cross-checks.
//!
//! Every estimator splits its samples into fixed chunks of
//! [`CHUNK_SAMPLES`]; chunk `c` draws from stream `c` of a ChaCha8 generator
//! seeded by the caller. Chunks run in parallel and their statistics are
//! merged in chunk order, so results do not depend on the thread count.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{bgk_coefficients, coefficients_of_solution, order_parameter_c1, VonMisesModel};
use crate::error::{Error, Result};
use crate::gci_solver::{check_dimension, GciSolution};
use crate::rotgeom::{skew_index_pairs, Rotation};
use crate::torus::QuadratureGrid;

/// Samples per parallel chunk (one RNG stream each).
pub const CHUNK_SAMPLES: usize = 1000;
/// Empirical acceptance below which the von Mises sampler warns.
pub const LOW_ACCEPTANCE: f64 = 1e-4;
/// Absolute slack added to `3σ` so that components which vanish identically
/// are not failed by round-off.
pub const ROUNDOFF_FLOOR: f64 = 1e-12;
/// Tolerance multiplier in standard errors.
pub const SIGMA_LEVEL: f64 = 3.0;

/// Reproducible random stream identified by `(seed, id)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        RngStream { seed, id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn normal_matrix(&mut self, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                m[(i, j)] = self.normal();
            }
        }
        m
    }
}

/// Haar-distributed rotation: QR of a Gaussian matrix with the signs of
/// `diag R` moved into `Q`, then one column flipped if `det Q = −1`.
pub fn sample_haar(n: usize, rng: &mut RngStream) -> Rotation {
    let g = rng.normal_matrix(n);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    Rotation::from_matrix_unchecked(q)
}

/// One von Mises draw and the number of Haar proposals it consumed.
pub fn sample_von_mises_counted(model: &VonMisesModel, rng: &mut RngStream) -> (Rotation, u64) {
    let n = model.n;
    let gamma_t = model.gamma.matrix().transpose();
    let mut proposals = 0u64;
    loop {
        proposals += 1;
        let a = sample_haar(n, rng);
        if model.kappa == 0.0 {
            return (a, proposals);
        }
        let tr = (&gamma_t * a.matrix()).trace();
        let accept = (0.5 * model.kappa * (tr - n as f64)).exp();
        if rng.uniform() < accept {
            return (a, proposals);
        }
    }
}

/// Exact rejection sampler with Haar proposals.
pub fn sample_von_mises(model: &VonMisesModel, rng: &mut RngStream) -> Rotation {
    sample_von_mises_counted(model, rng).0
}

/// Streaming mean and (co)variance, mergeable in a fixed order.
#[derive(Clone, Debug)]
pub struct Accumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    comoment: Option<Vec<f64>>,
}

impl Accumulator {
    pub fn new(dim: usize) -> Self {
        Accumulator {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            comoment: None,
        }
    }

    /// Also tracks the full covariance.
    pub fn with_covariance(dim: usize) -> Self {
        Accumulator {
            comoment: Some(vec![0.0; dim * dim]),
            ..Self::new(dim)
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim());
        self.count += 1;
        let c = self.count as f64;
        let d = self.dim();
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for i in 0..d {
            self.mean[i] += delta[i] / c;
        }
        for i in 0..d {
            self.m2[i] += delta[i] * (x[i] - self.mean[i]);
        }
        if let Some(cm) = self.comoment.as_mut() {
            for i in 0..d {
                for j in 0..d {
                    cm[i * d + j] += delta[i] * (x[j] - self.mean[j]);
                }
            }
        }
    }

    pub fn merge(&mut self, other: &Accumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let nt = na + nb;
        let d = self.dim();
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..d {
            self.mean[i] += delta[i] * nb / nt;
            self.m2[i] += other.m2[i] + delta[i] * delta[i] * na * nb / nt;
        }
        if let (Some(cm), Some(ocm)) = (self.comoment.as_mut(), other.comoment.as_ref()) {
            for i in 0..d {
                for j in 0..d {
                    cm[i * d + j] += ocm[i * d + j] + delta[i] * delta[j] * na * nb / nt;
                }
            }
        }
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<SampleStats> {
        if self.count < 2 {
            return Err(Error::InvalidConfig(format!(
                "sample statistics need at least 2 samples, got {}",
                self.count
            )));
        }
        let c = self.count as f64;
        let stderr = self
            .m2
            .iter()
            .map(|m2| (m2 / (c - 1.0) / c).sqrt())
            .collect();
        let covariance_of_mean = self
            .comoment
            .as_ref()
            .map(|cm| cm.iter().map(|v| v / (c - 1.0) / c).collect());
        Ok(SampleStats {
            count: self.count,
            mean: self.mean.clone(),
            stderr,
            covariance_of_mean,
        })
    }
}

/// Per-component mean and standard error `s/√count`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub count: usize,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Row-major covariance of the mean vector, when tracked.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub covariance_of_mean: Option<Vec<f64>>,
}

impl SampleStats {
    /// Standard error of `Σ w_i mean_i` (needs the covariance).
    pub fn linear_stderr(&self, w: &[f64]) -> Option<f64> {
        let cov = self.covariance_of_mean.as_ref()?;
        let d = self.mean.len();
        let mut v = 0.0;
        for i in 0..d {
            for j in 0..d {
                v += w[i] * w[j] * cov[i * d + j];
            }
        }
        Some(v.max(0.0).sqrt())
    }
}

/// Runs `draw` on `count` samples split over deterministic streams.
/// `draw` fills one output vector of length `dim` per sample.
pub fn monte_carlo<F>(count: usize, seed: u64, dim: usize, covariance: bool, draw: F) -> Result<SampleStats>
where
    F: Fn(&mut RngStream, &mut [f64]) -> Result<()> + Sync,
{
    let chunks = count.div_ceil(CHUNK_SAMPLES);
    let partials: Vec<Result<Accumulator>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = RngStream::new(seed, c as u64);
            let mut acc = if covariance {
                Accumulator::with_covariance(dim)
            } else {
                Accumulator::new(dim)
            };
            let mut out = vec![0.0; dim];
            let size = CHUNK_SAMPLES.min(count - c * CHUNK_SAMPLES);
            for _ in 0..size {
                draw(&mut rng, &mut out)?;
                acc.push(&out);
            }
            Ok(acc)
        })
        .collect();
    let mut total = if covariance {
        Accumulator::with_covariance(dim)
    } else {
        Accumulator::new(dim)
    };
    for p in partials {
        total.merge(&p?);
    }
    total.finish()
}

/// One Monte-Carlo vs reference comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub estimate: f64,
    pub stderr: f64,
    pub oracle: f64,
    /// `(estimate − oracle)/stderr`; `None` when the standard error is zero.
    pub z_score: Option<f64>,
    pub pass: bool,
}

impl Comparison {
    pub fn new(name: impl Into<String>, estimate: f64, stderr: f64, oracle: f64) -> Self {
        let diff = estimate - oracle;
        let z_score = (stderr > 0.0).then(|| diff / stderr);
        let pass = diff.abs() <= SIGMA_LEVEL * stderr + ROUNDOFF_FLOOR;
        Comparison {
            name: name.into(),
            estimate,
            stderr,
            oracle,
            z_score,
            pass,
        }
    }
}

/// A set of comparisons from one Monte-Carlo run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub check: String,
    pub n: usize,
    pub kappa: f64,
    pub samples: usize,
    pub seed: u64,
    pub comparisons: Vec<Comparison>,
    /// Relative residual of a structural least-squares fit, if any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fit_residual: Option<f64>,
    /// Empirical acceptance of the von Mises sampler, if used.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acceptance: Option<f64>,
}

impl MonteCarloReport {
    pub fn all_pass(&self) -> bool {
        self.comparisons.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Comparison> {
        self.comparisons.iter().filter(|c| !c.pass).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < 2 {
        return Err(Error::InvalidConfig(format!(
            "Monte-Carlo needs at least 2 samples, got {samples}"
        )));
    }
    Ok(())
}

fn warn_acceptance(model: &VonMisesModel, acceptance: f64) {
    if acceptance < LOW_ACCEPTANCE {
        log::warn!(
            "von Mises rejection sampler: empirical acceptance {acceptance:.3e} at n = {}, kappa = {}",
            model.n,
            model.kappa
        );
    }
}

/// `A·F_ij = (A_ij − A_ji)/2`, valid for any ordered `i ≠ j`.
fn pair_component(a: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    0.5 * (a[(i, j)] - a[(j, i)])
}

/// Sign of the permutation `(i, j, k, l)` of `(0, 1, 2, 3)`, zero if not one.
fn levi_civita4(idx: [usize; 4]) -> f64 {
    let mut sign = 1.0;
    for a in 0..4 {
        for b in a + 1..4 {
            if idx[a] == idx[b] {
                return 0.0;
            }
            if idx[a] > idx[b] {
                sign = -sign;
            }
        }
    }
    sign
}

/// Hodge dual on so(4): `β(X)_ij = ½ Σ ε_ijkl X_kl`.
pub fn hodge_star4(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(4, 4);
    for i in 0..4 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..4 {
                for l in 0..4 {
                    s += levi_civita4([i, j, k, l]) * x[(k, l)];
                }
            }
            out[(i, j)] = 0.5 * s;
        }
    }
    out
}

fn solver_grid(sol: &GciSolution) -> Result<QuadratureGrid> {
    QuadratureGrid::new(sol.dim(), sol.diagnostics().nq)
}

/// Von Mises moments: `E[A] = c1 Γ`, `E[Tr(A)/n] = c1`, and the expected
/// number of proposals per draw `e^{κn/2}/Z`.
pub fn check_von_mises_moments(
    model: &VonMisesModel,
    grid: &QuadratureGrid,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloReport> {
    check_samples(samples)?;
    let n = model.n;
    let c1 = order_parameter_c1(n, model.kappa, grid)?;
    let dim = n * n + 2;
    let stats = monte_carlo(samples, seed, dim, false, |rng, out| {
        let (a, proposals) = sample_von_mises_counted(model, rng);
        let m = a.matrix();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = m[(i, j)];
            }
        }
        out[n * n] = m.trace() / n as f64;
        out[n * n + 1] = proposals as f64;
        Ok(())
    })?;
    let acceptance = 1.0 / stats.mean[n * n + 1];
    warn_acceptance(model, acceptance);
    let g = model.gamma.matrix();
    let mut comparisons = Vec::with_capacity(dim);
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            comparisons.push(Comparison::new(
                format!("E[A]_{}{}", i + 1, j + 1),
                stats.mean[k],
                stats.stderr[k],
                c1 * g[(i, j)],
            ));
        }
    }
    if model.gamma == Rotation::identity(n) {
        comparisons.push(Comparison::new(
            "c1",
            stats.mean[n * n],
            stats.stderr[n * n],
            c1,
        ));
    }
    comparisons.push(Comparison::new(
        "proposals_per_draw",
        stats.mean[n * n + 1],
        stats.stderr[n * n + 1],
        1.0 / model.acceptance_rate(),
    ));
    Ok(MonteCarloReport {
        check: "von_mises_moments".into(),
        n,
        kappa: model.kappa,
        samples,
        seed,
        comparisons,
        fit_residual: None,
        acceptance: Some(acceptance),
    })
}

/// Von Mises estimate of `c1 = E[Tr(A)/n]` against quadrature.
pub fn check_c1(n: usize, kappa: f64, grid: &QuadratureGrid, samples: usize, seed: u64) -> Result<Comparison> {
    check_samples(samples)?;
    let model = VonMisesModel::new(n, kappa, Rotation::identity(n), grid)?;
    let c1 = order_parameter_c1(n, kappa, grid)?;
    let stats = monte_carlo(samples, seed, 1, false, |rng, out| {
        out[0] = sample_von_mises(&model, rng).trace() / n as f64;
        Ok(())
    })?;
    Ok(Comparison::new("c1", stats.mean[0], stats.stderr[0], c1))
}

/// Isotropy of `L(P) = ∫(A·P) μ(A) M(A) dA = C2 P` over the basis `F_ij`.
///
/// Component `(p, q)` estimates `E[(A·F_p)(μ(A)·F_q)]`: diagonal ones are
/// compared with `C2`, the rest with zero. The pooled diagonal and each
/// diagonal's deviation from it are reported too. For `n = 4` the pairing
/// of `F12` with `F34 = β(F12)` and the scalar
/// `C2′ = ⅙ E[((A − Aᵀ)/2)·β(μ)]` are compared with zero.
pub fn check_l_isotropy(sol: &GciSolution, samples: usize, seed: u64) -> Result<MonteCarloReport> {
    check_samples(samples)?;
    let n = sol.dim();
    let kappa = sol.kappa();
    let grid = solver_grid(sol)?;
    let oracle = coefficients_of_solution(sol)?.values.big_c2;
    let model = VonMisesModel::new(n, kappa, Rotation::identity(n), &grid)?;
    let pairs = skew_index_pairs(n);
    let d = pairs.len();
    let extra = if n == 4 { 1 } else { 0 };
    let dim = d * d + 1 + d + extra;
    let proposals = std::sync::atomic::AtomicU64::new(0);
    let stats = monte_carlo(samples, seed, dim, false, |rng, out| {
        let (a, k) = sample_von_mises_counted(&model, rng);
        proposals.fetch_add(k, std::sync::atomic::Ordering::Relaxed);
        let mu = sol.eval_mu(&a)?;
        let am = a.matrix();
        let mm = mu.matrix();
        let ap: Vec<f64> = pairs.iter().map(|&(i, j)| pair_component(am, i, j)).collect();
        let mp: Vec<f64> = pairs.iter().map(|&(i, j)| mm[(i, j)]).collect();
        for p in 0..d {
            for q in 0..d {
                out[p * d + q] = ap[p] * mp[q];
            }
        }
        let pooled = (0..d).map(|p| ap[p] * mp[p]).sum::<f64>() / d as f64;
        out[d * d] = pooled;
        for p in 0..d {
            out[d * d + 1 + p] = ap[p] * mp[p] - pooled;
        }
        if n == 4 {
            let w = (am - am.transpose()) * 0.5;
            let b = hodge_star4(mm);
            out[dim - 1] = 0.5 * w.dot(&b) / 6.0;
        }
        Ok(())
    })?;
    let label = |p: usize| format!("F{}{}", pairs[p].0 + 1, pairs[p].1 + 1);
    let mut comparisons = Vec::with_capacity(dim);
    for p in 0..d {
        for q in 0..d {
            let k = p * d + q;
            let target = if p == q { oracle } else { 0.0 };
            comparisons.push(Comparison::new(
                format!("L({})·{}", label(p), label(q)),
                stats.mean[k],
                stats.stderr[k],
                target,
            ));
        }
    }
    comparisons.push(Comparison::new(
        "C2 pooled",
        stats.mean[d * d],
        stats.stderr[d * d],
        oracle,
    ));
    for p in 0..d {
        let k = d * d + 1 + p;
        comparisons.push(Comparison::new(
            format!("L({0})·{0} − pooled", label(p)),
            stats.mean[k],
            stats.stderr[k],
            0.0,
        ));
    }
    if n == 4 {
        let k = pairs.iter().position(|&pq| pq == (0, 1)).expect("F12") * d
            + pairs.iter().position(|&pq| pq == (2, 3)).expect("F34");
        comparisons.push(Comparison::new(
            "beta pairing L(F12)·F34",
            stats.mean[k],
            stats.stderr[k],
            0.0,
        ));
        comparisons.push(Comparison::new(
            "C2'",
            stats.mean[dim - 1],
            stats.stderr[dim - 1],
            0.0,
        ));
    }
    let total = proposals.load(std::sync::atomic::Ordering::Relaxed);
    let acceptance = samples as f64 / total as f64;
    warn_acceptance(&model, acceptance);
    Ok(MonteCarloReport {
        check: "l_isotropy".into(),
        n,
        kappa,
        samples,
        seed,
        comparisons,
        fit_residual: None,
        acceptance: Some(acceptance),
    })
}

/// A pair `(P, Q) = (F_ij, F_ik)` of ordered index pairs.
type IndexPair = ((usize, usize), (usize, usize));

fn structure_pairs(n: usize) -> Vec<IndexPair> {
    let mut out = Vec::new();
    for (i, j) in skew_index_pairs(n) {
        out.push(((i, j), (i, j)));
    }
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if i != j && i != k && j != k {
                    out.push(((i, j), (i, k)));
                }
            }
        }
    }
    out
}

fn f_ordered(n: usize, (i, j): (usize, usize)) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    m[(i, j)] = 1.0;
    m[(j, i)] = -1.0;
    m
}

/// Structural regressors of `B(P,Q)`: `Tr(PQ) I` and `(PQ + QP)/2 − Tr(PQ) I/n`.
fn structure_regressors(n: usize, pq: &IndexPair) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = f_ordered(n, pq.0);
    let q = f_ordered(n, pq.1);
    let prod = &p * &q;
    let tr = prod.trace();
    let id = DMatrix::<f64>::identity(n, n);
    let x3 = &id * tr;
    let x4 = (&prod + &q * &p) * 0.5 - &id * (tr / n as f64);
    (x3, x4)
}

/// Structure of `B(P,Q) = ∫(A·P)(μ·Q)(A + Aᵀ)/2 M dA`.
///
/// Per sample, `C3` and `C4` are fitted by least squares against
/// `C3 Tr(PQ) I + C4((PQ + QP)/2 − Tr(PQ) I/n)` over every pair
/// `(F_ij, F_ij)` and `(F_ij, F_ik)`; the fit is linear in the data, so the
/// mean of the per-sample fits is the fit of the mean. Also compared with
/// zero: `Tr B(F12, F13)`, the entries of `B_a(F12, F13)` and, for `n = 4`,
/// `C6 = (1/48) Σ ε_ijkl B_a(F_ij, F_ik)_il`.
pub fn check_b_structure(sol: &GciSolution, samples: usize, seed: u64) -> Result<MonteCarloReport> {
    check_samples(samples)?;
    let n = sol.dim();
    let kappa = sol.kappa();
    let grid = solver_grid(sol)?;
    let values = coefficients_of_solution(sol)?.values;
    let model = VonMisesModel::new(n, kappa, Rotation::identity(n), &grid)?;
    let pairs = structure_pairs(n);
    let regs: Vec<(DMatrix<f64>, DMatrix<f64>)> =
        pairs.iter().map(|pq| structure_regressors(n, pq)).collect();
    let (mut g11, mut g12, mut g22) = (0.0, 0.0, 0.0);
    for (x3, x4) in &regs {
        g11 += x3.dot(x3);
        g12 += x3.dot(x4);
        g22 += x4.dot(x4);
    }
    let det = g11 * g22 - g12 * g12;
    // rows of (XᵀX)⁻¹Xᵀ, one n×n block per pair
    let w3: Vec<DMatrix<f64>> = regs
        .iter()
        .map(|(x3, x4)| (x3 * g22 - x4 * g12) / det)
        .collect();
    let w4: Vec<DMatrix<f64>> = regs
        .iter()
        .map(|(x3, x4)| (x4 * g11 - x3 * g12) / det)
        .collect();
    let upper: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let np = pairs.len();
    let nb = n * n;
    let extra = if n == 4 { 1 } else { 0 };
    let base = 2 + np * nb;
    let dim = base + 1 + upper.len() + extra;
    let proposals = std::sync::atomic::AtomicU64::new(0);
    let stats = monte_carlo(samples, seed, dim, false, |rng, out| {
        let (a, k) = sample_von_mises_counted(&model, rng);
        proposals.fetch_add(k, std::sync::atomic::Ordering::Relaxed);
        let mu = sol.eval_mu(&a)?;
        let am = a.matrix();
        let mm = mu.matrix();
        let s = (am + am.transpose()) * 0.5;
        let mut c3 = 0.0;
        let mut c4 = 0.0;
        for (idx, (pp, qq)) in pairs.iter().enumerate() {
            let coef = pair_component(am, pp.0, pp.1) * mm[(qq.0, qq.1)];
            c3 += coef * w3[idx].dot(&s);
            c4 += coef * w4[idx].dot(&s);
            for r in 0..n {
                for c in 0..n {
                    out[2 + idx * nb + r * n + c] = coef * s[(r, c)];
                }
            }
        }
        out[0] = c3;
        out[1] = c4;
        let b12_13 = pair_component(am, 0, 1) * mm[(0, 2)];
        let b13_12 = pair_component(am, 0, 2) * mm[(0, 1)];
        out[base] = b12_13 * s.trace();
        for (u, &(r, c)) in upper.iter().enumerate() {
            out[base + 1 + u] = 0.5 * (b12_13 - b13_12) * s[(r, c)];
        }
        if n == 4 {
            let mut c6 = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    for k in 0..4 {
                        for l in 0..4 {
                            let e = levi_civita4([i, j, k, l]);
                            if e == 0.0 {
                                continue;
                            }
                            let ba = 0.5
                                * (pair_component(am, i, j) * mm[(i, k)]
                                    - pair_component(am, i, k) * mm[(i, j)]);
                            c6 += e * ba * s[(i, l)];
                        }
                    }
                }
            }
            out[dim - 1] = c6 / 48.0;
        }
        Ok(())
    })?;

    let mut resid2 = 0.0;
    let mut norm2 = 0.0;
    for (idx, (x3, x4)) in regs.iter().enumerate() {
        let fitted = x3 * stats.mean[0] + x4 * stats.mean[1];
        for r in 0..n {
            for c in 0..n {
                let y = stats.mean[2 + idx * nb + r * n + c];
                resid2 += (y - fitted[(r, c)]).powi(2);
                norm2 += y * y;
            }
        }
    }
    let mut comparisons = vec![
        Comparison::new("C3 fit", stats.mean[0], stats.stderr[0], values.big_c3),
        Comparison::new("C4 fit", stats.mean[1], stats.stderr[1], values.big_c4),
        Comparison::new("Tr B(F12,F13)", stats.mean[base], stats.stderr[base], 0.0),
    ];
    for (u, &(r, c)) in upper.iter().enumerate() {
        let k = base + 1 + u;
        comparisons.push(Comparison::new(
            format!("B_a(F12,F13)_{}{}", r + 1, c + 1),
            stats.mean[k],
            stats.stderr[k],
            0.0,
        ));
    }
    if n == 4 {
        comparisons.push(Comparison::new(
            "C6",
            stats.mean[dim - 1],
            stats.stderr[dim - 1],
            0.0,
        ));
    }
    let total = proposals.load(std::sync::atomic::Ordering::Relaxed);
    let acceptance = samples as f64 / total as f64;
    warn_acceptance(&model, acceptance);
    Ok(MonteCarloReport {
        check: "b_structure".into(),
        n,
        kappa,
        samples,
        seed,
        comparisons,
        fit_residual: Some((resid2 / norm2.max(f64::MIN_POSITIVE)).sqrt()),
        acceptance: Some(acceptance),
    })
}

/// Jump-process coefficients by von Mises sampling with `μ(A) = (A − Aᵀ)/2`.
///
/// Uses `Σ α_k sin θ_k = −μ·A` and `Σ α_k sin θ_k cos θ_k = −½ μ·A²`, so
/// no torus reduction is involved. Compares `I_a/Z`, `I_b/Z`, `I_c/Z` and,
/// by linearization, `c2` and `c4` with quadrature.
pub fn check_bgk(n: usize, kappa: f64, grid: &QuadratureGrid, samples: usize, seed: u64) -> Result<MonteCarloReport> {
    check_dimension(n)?;
    check_samples(samples)?;
    let quad = bgk_coefficients(n, kappa, grid)?;
    let model = VonMisesModel::new(n, kappa, Rotation::identity(n), grid)?;
    let proposals = std::sync::atomic::AtomicU64::new(0);
    let stats = monte_carlo(samples, seed, 3, true, |rng, out| {
        let (a, k) = sample_von_mises_counted(&model, rng);
        proposals.fetch_add(k, std::sync::atomic::Ordering::Relaxed);
        let am = a.matrix();
        let mu = (am - am.transpose()) * 0.5;
        let s = -0.5 * mu.dot(am);
        let sc = -0.25 * mu.dot(&(am * am));
        out[0] = s;
        out[1] = s * am.trace();
        out[2] = sc;
        Ok(())
    })?;
    let ints = &quad.integrals;
    let nf = n as f64;
    let d = nf * nf - 4.0;
    let (ma, mb, mc) = (stats.mean[0], stats.mean[1], stats.mean[2]);
    let c2 = (nf * mb - 4.0 * mc) / (d * ma);
    let c4 = (mb - nf * mc) / (d * ma);
    let grad2 = [-c2 / ma, nf / (d * ma), -4.0 / (d * ma)];
    let grad4 = [-c4 / ma, 1.0 / (d * ma), -nf / (d * ma)];
    let se2 = stats.linear_stderr(&grad2).expect("covariance tracked");
    let se4 = stats.linear_stderr(&grad4).expect("covariance tracked");
    let comparisons = vec![
        Comparison::new("I_a/Z", ma, stats.stderr[0], ints.ia / ints.z),
        Comparison::new("I_b/Z", mb, stats.stderr[1], ints.ib / ints.z),
        Comparison::new("I_c/Z", mc, stats.stderr[2], ints.ic / ints.z),
        Comparison::new("c2", c2, se2, quad.values.c2),
        Comparison::new("c4", c4, se4, quad.values.c4),
    ];
    let total = proposals.load(std::sync::atomic::Ordering::Relaxed);
    let acceptance = samples as f64 / total as f64;
    warn_acceptance(&model, acceptance);
    Ok(MonteCarloReport {
        check: "bgk".into(),
        n,
        kappa,
        samples,
        seed,
        comparisons,
        fit_residual: None,
        acceptance: Some(acceptance),
    })
}

/// Bin probabilities of `Tr(A) = 1 + 2cos θ` on SO(3) under von Mises(κ),
/// for `bins` equal bins of `[−1, 3]`. The angle density on `[0, π]` is
/// `∝ e^{κ cos θ}(1 − cos θ)`; each bin is integrated by composite Simpson.
pub fn so3_trace_bin_probabilities(kappa: f64, bins: usize) -> Vec<f64> {
    let density = |t: f64| (kappa * (t.cos() - 1.0)).exp() * (1.0 - t.cos());
    let panels = 256;
    let simpson = |a: f64, b: f64| {
        let h = (b - a) / panels as f64;
        let mut s = density(a) + density(b);
        for k in 1..panels {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * density(a + k as f64 * h);
        }
        s * h / 3.0
    };
    // Tr decreasing in θ: bin b covers Tr ∈ [−1 + 4b/bins, −1 + 4(b+1)/bins]
    let theta_of = |tr: f64| (((tr - 1.0) / 2.0).clamp(-1.0, 1.0)).acos();
    let mut probs: Vec<f64> = (0..bins)
        .map(|b| {
            let lo = -1.0 + 4.0 * b as f64 / bins as f64;
            let hi = -1.0 + 4.0 * (b + 1) as f64 / bins as f64;
            simpson(theta_of(hi), theta_of(lo))
        })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
    probs
}

/// Pearson chi-square statistic and its upper-tail p-value.
pub fn chi_square_test(counts: &[u64], probs: &[f64]) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let total: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut dof = 0usize;
    for (&c, &p) in counts.iter().zip(probs) {
        let e = p * total as f64;
        if e > 0.0 {
            stat += (c as f64 - e).powi(2) / e;
            dof += 1;
        }
    }
    let dist = ChiSquared::new((dof.max(2) - 1) as f64).expect("positive degrees of freedom");
    (stat, 1.0 - dist.cdf(stat))
}

/// Histogram of `Tr(A)` over `bins` equal bins of `[lo, hi]`; values
/// outside are clamped into the end bins.
pub fn trace_histogram<'a, I>(rotations: I, lo: f64, hi: f64, bins: usize) -> Vec<u64>
where
    I: IntoIterator<Item = &'a Rotation>,
{
    let mut counts = vec![0u64; bins];
    for a in rotations {
        let x = (a.trace() - lo) / (hi - lo);
        let b = ((x * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[b] += 1;
    }
    counts
}
