//! Galerkin solution of the torus-reduced GCI problem `𝒜(α, τ) = ℒ(τ)`.
//!
//! The trial space is spanned by Weyl-equivariant tuples
//!
//! ```text
//! τ_ℓ(Θ) = sin((a+1) θ_ℓ) · S_λ(θ_k : k ≠ ℓ)
//! ```
//!
//! where `S_λ` is the symmetrized product `Σ Π_k cos(λ_σ(k) θ_k)` over the
//! distinct arrangements of the partition `λ` and `a + |λ| ≤ d`. Since
//! `sin((a+1)θ) = sin θ · U_a(cos θ)` and `cos(jθ) = T_j(cos θ)`, this spans
//! the same space as `sin θ_ℓ` times polynomials of degree `≤ d` in `cos θ_ℓ`
//! and the symmetric functions of the other cosines, with much better
//! conditioning than the monomial form.
//!
//! Every quotient of `𝒜` is paired with the factor of `u_n` that cancels its
//! denominator, so all assembled integrands are smooth trigonometric
//! expressions and no regularization is needed.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotgeom::{mat_inner, Rotation, SkewSymmetric};
use crate::torus::{
    canonical_angles, rank, torus_trace, weyl_generators, QuadratureGrid, SymmetricNode,
};

/// Version tag of the serialized [`GciSolution`] document.
pub const SOLUTION_FORMAT_VERSION: u32 = 1;

const EQUIVARIANCE_TOL: f64 = 1e-13;

/// Default Galerkin degree for dimension `n`.
pub fn default_degree(n: usize) -> usize {
    match rank(n) {
        0..=2 => 16,
        3 => 8,
        4 => 5,
        _ => 4,
    }
}

/// Default quadrature points per torus dimension for the solver.
pub fn default_nq(n: usize) -> usize {
    match rank(n) {
        1 => 512,
        2 => 128,
        _ => 64,
    }
}

/// Rejects dimensions outside `[3, MAX_DIMENSION]`.
pub fn check_dimension(n: usize) -> Result<()> {
    if !(3..=crate::MAX_DIMENSION).contains(&n) {
        return Err(Error::UnsupportedDimension(n));
    }
    Ok(())
}

/// One basis tuple `τ_ℓ = sin((a+1)θ_ℓ) S_λ(others)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisFunction {
    /// `a`: the `θ_ℓ` factor is `sin((a+1)θ_ℓ)`.
    pub sine_order: usize,
    /// `λ` padded with zeros to length `p − 1`, non-increasing.
    pub partition: Vec<usize>,
    #[serde(skip)]
    arrangements: Vec<Vec<usize>>,
}

impl BasisFunction {
    fn new(sine_order: usize, partition: Vec<usize>) -> Self {
        let arrangements = distinct_permutations(&partition);
        BasisFunction {
            sine_order,
            partition,
            arrangements,
        }
    }

    /// Total trigonometric degree `a + |λ|`.
    pub fn degree(&self) -> usize {
        self.sine_order + self.partition.iter().sum::<usize>()
    }
}

fn distinct_permutations(items: &[usize]) -> Vec<Vec<usize>> {
    let mut sorted = items.to_vec();
    sorted.sort_unstable();
    let mut out = Vec::new();
    let mut used = vec![false; sorted.len()];
    let mut current = Vec::with_capacity(sorted.len());
    fn rec(
        sorted: &[usize],
        used: &mut [bool],
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if current.len() == sorted.len() {
            out.push(current.clone());
            return;
        }
        for i in 0..sorted.len() {
            if used[i] || (i > 0 && sorted[i] == sorted[i - 1] && !used[i - 1]) {
                continue;
            }
            used[i] = true;
            current.push(sorted[i]);
            rec(sorted, used, current, out);
            current.pop();
            used[i] = false;
        }
    }
    rec(&sorted, &mut used, &mut current, &mut out);
    out
}

/// Non-increasing sequences of the given length with entries summing to at most `budget`.
fn partitions_up_to(len: usize, budget: usize) -> Vec<Vec<usize>> {
    fn rec(len: usize, budget: usize, cap: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == len {
            out.push(prefix.clone());
            return;
        }
        for v in 0..=cap.min(budget) {
            prefix.push(v);
            rec(len, budget - v, v, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(len, budget, budget, &mut Vec::new(), &mut out);
    out.sort();
    out
}

/// The discrete trial/test space.
#[derive(Clone, Debug)]
pub struct EquivariantBasis {
    n: usize,
    p: usize,
    degree: usize,
    functions: Vec<BasisFunction>,
}

/// Values and first derivatives of all basis tuples at one torus point.
#[derive(Clone, Debug)]
pub struct BasisValues {
    p: usize,
    /// `values[m·p + ℓ] = τ^(m)_ℓ`.
    pub values: Vec<f64>,
    /// `grads[(m·p + ℓ)·p + k] = ∂τ^(m)_ℓ/∂θ_k`.
    pub grads: Vec<f64>,
}

impl BasisValues {
    pub fn value(&self, m: usize, l: usize) -> f64 {
        self.values[m * self.p + l]
    }

    pub fn grad(&self, m: usize, l: usize, k: usize) -> f64 {
        self.grads[(m * self.p + l) * self.p + k]
    }
}

/// Enumerates the basis for `(n, d)` and checks its Weyl equivariance.
pub fn build_basis(n: usize, degree: usize) -> Result<EquivariantBasis> {
    check_dimension(n)?;
    if degree == 0 {
        return Err(Error::InvalidConfig("Galerkin degree must be at least 1".into()));
    }
    let p = rank(n);
    let mut functions = Vec::new();
    for a in 0..=degree {
        for lambda in partitions_up_to(p - 1, degree - a) {
            functions.push(BasisFunction::new(a, lambda));
        }
    }
    let basis = EquivariantBasis {
        n,
        p,
        degree,
        functions,
    };
    basis.verify_equivariance()?;
    Ok(basis)
}

impl EquivariantBasis {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.p
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    /// Evaluates every basis tuple (and optionally its Jacobian) at `angles`.
    pub fn evaluate(&self, angles: &[f64], with_grad: bool) -> BasisValues {
        let p = self.p;
        let top = self.degree + 1;
        let stride = top + 1;
        let mut cos_t = vec![0.0; p * stride];
        let mut sin_t = vec![0.0; p * stride];
        for (j, &t) in angles.iter().enumerate() {
            for k in 0..=top {
                let (s, c) = (k as f64 * t).sin_cos();
                sin_t[j * stride + k] = s;
                cos_t[j * stride + k] = c;
            }
        }
        let nb = self.functions.len();
        let mut values = vec![0.0; nb * p];
        let mut grads = if with_grad { vec![0.0; nb * p * p] } else { Vec::new() };
        let mut others = Vec::with_capacity(p);
        let mut sym_grad = vec![0.0; p];
        for (m, f) in self.functions.iter().enumerate() {
            let a1 = f.sine_order + 1;
            for l in 0..p {
                others.clear();
                others.extend((0..p).filter(|&k| k != l));
                let mut sym = 0.0;
                sym_grad.iter_mut().for_each(|g| *g = 0.0);
                for arr in &f.arrangements {
                    let mut prod = 1.0;
                    for (s, &k) in others.iter().enumerate() {
                        prod *= cos_t[k * stride + arr[s]];
                    }
                    sym += prod;
                    if with_grad {
                        for (s, &k) in others.iter().enumerate() {
                            let order = arr[s];
                            if order == 0 {
                                continue;
                            }
                            let mut partial = -(order as f64) * sin_t[k * stride + order];
                            for (t, &kk) in others.iter().enumerate() {
                                if t != s {
                                    partial *= cos_t[kk * stride + arr[t]];
                                }
                            }
                            sym_grad[k] += partial;
                        }
                    }
                }
                let s_l = sin_t[l * stride + a1];
                values[m * p + l] = s_l * sym;
                if with_grad {
                    let row = (m * p + l) * p;
                    for &k in &others {
                        grads[row + k] = s_l * sym_grad[k];
                    }
                    grads[row + l] = a1 as f64 * cos_t[l * stride + a1] * sym;
                }
            }
        }
        BasisValues { p, values, grads }
    }

    /// `Σ_m c_m τ^(m)(Θ)`.
    pub fn combine(&self, coefficients: &[f64], angles: &[f64]) -> Vec<f64> {
        let vals = self.evaluate(angles, false);
        let mut out = vec![0.0; self.p];
        for (m, &c) in coefficients.iter().enumerate() {
            for (l, o) in out.iter_mut().enumerate() {
                *o += c * vals.value(m, l);
            }
        }
        out
    }

    fn verify_equivariance(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ba51);
        let gens = weyl_generators(self.n);
        for _ in 0..3 {
            let theta: Vec<f64> = (0..self.p).map(|_| rng.gen_range(-PI..PI)).collect();
            let base = self.evaluate(&theta, false);
            for w in &gens {
                let moved = self.evaluate(&w.act(&theta), false);
                for m in 0..self.len() {
                    let tau: Vec<f64> = (0..self.p).map(|l| base.value(m, l)).collect();
                    let expect = w.act(&tau);
                    for (l, e) in expect.iter().enumerate() {
                        let err = (moved.value(m, l) - e).abs();
                        if err > EQUIVARIANCE_TOL * (1.0 + e.abs()) * self.arrangement_scale(m) {
                            return Err(Error::IllConditioned(format!(
                                "basis function {m} breaks Weyl equivariance by {err:.3e}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn arrangement_scale(&self, m: usize) -> f64 {
        self.functions[m].arrangements.len() as f64
    }

    fn descriptor(&self) -> Vec<(usize, Vec<usize>)> {
        self.functions
            .iter()
            .map(|f| (f.sine_order, f.partition.clone()))
            .collect()
    }
}

/// Stiffness matrix, load vector and a spectral condition estimate.
#[derive(Clone, Debug)]
pub struct GalerkinSystem {
    pub n: usize,
    pub kappa: f64,
    pub nq: usize,
    pub stiffness: DMatrix<f64>,
    pub load: DVector<f64>,
    /// 2-norm condition number of the Jacobi-scaled stiffness matrix.
    pub condition: f64,
}

/// Smooth weight factors of one quadrature node.
pub(crate) struct NodeWeights {
    /// `m(Θ)` with the `e^{κn/2}` shift removed, times the cell weight.
    pub full: f64,
    /// Weights of `(τ_i − τ_j)²`-type terms, `i < j`, lexicographic.
    pub minus: Vec<f64>,
    /// Weights of `(τ_i + τ_j)²`-type terms.
    pub plus: Vec<f64>,
    /// Weights of the `τ_ℓ²/(1 − cos θ_ℓ)` terms (odd `n`).
    pub eps: Vec<f64>,
}

/// `e^{κ(Tr A_Θ − n)/2}`: the von Mises factor shifted so its maximum is 1.
pub fn shifted_exponential(angles: &[f64], kappa: f64, n: usize) -> f64 {
    (0.5 * kappa * (torus_trace(angles, n) - n as f64)).exp()
}

pub(crate) fn node_weights(angles: &[f64], kappa: f64, n: usize, cell: f64) -> NodeWeights {
    let p = angles.len();
    let odd = n % 2 == 1;
    let base = cell * shifted_exponential(angles, kappa, n);
    let cosines: Vec<f64> = angles.iter().map(|t| t.cos()).collect();
    let half_sin2: Vec<f64> = angles.iter().map(|t| (0.5 * t).sin().powi(2)).collect();
    let pair_sq = |i: usize, j: usize| (cosines[i] - cosines[j]).powi(2);

    let mut pair_product = 1.0;
    for i in 0..p {
        for j in i + 1..p {
            pair_product *= pair_sq(i, j);
        }
    }
    let half_product: f64 = if odd { half_sin2.iter().product() } else { 1.0 };
    let full = base * pair_product * half_product;

    let mut minus = Vec::with_capacity(p * p.saturating_sub(1) / 2);
    let mut plus = Vec::with_capacity(minus.capacity());
    for i in 0..p {
        for j in i + 1..p {
            let mut without = 1.0;
            for a in 0..p {
                for b in a + 1..p {
                    if (a, b) != (i, j) {
                        without *= pair_sq(a, b);
                    }
                }
            }
            let rest = base * without * half_product;
            minus.push(rest * 2.0 * (0.5 * (angles[i] + angles[j])).sin().powi(2));
            plus.push(rest * 2.0 * (0.5 * (angles[i] - angles[j])).sin().powi(2));
        }
    }
    let eps = if odd {
        (0..p)
            .map(|l| {
                let others: f64 = (0..p).filter(|&k| k != l).map(|k| half_sin2[k]).product();
                0.5 * base * pair_product * others
            })
            .collect()
    } else {
        Vec::new()
    };
    NodeWeights {
        full,
        minus,
        plus,
        eps,
    }
}

const NODE_CHUNK: usize = 128;

fn assemble_nodes(
    n: usize,
    kappa: f64,
    basis: &EquivariantBasis,
    nodes: &[SymmetricNode],
    cell: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p = basis.rank();
    let nb = basis.len();
    let rows_per_node = p * p + p * (p - 1) + if n % 2 == 1 { p } else { 0 };
    let partials: Vec<Result<(DMatrix<f64>, DVector<f64>)>> = nodes
        .par_chunks(NODE_CHUNK)
        .map(|chunk| {
            let mut g = DMatrix::<f64>::zeros(chunk.len() * rows_per_node, nb);
            let mut load = DVector::<f64>::zeros(nb);
            for (c, node) in chunk.iter().enumerate() {
                let th = &node.angles;
                let w = node_weights(th, kappa, n, cell * node.multiplicity);
                if !w.full.is_finite() {
                    return Err(Error::NonFinite(th.clone()));
                }
                let vals = basis.evaluate(th, true);
                let mut r = c * rows_per_node;
                let sf = w.full.sqrt();
                for i in 0..p {
                    for j in 0..p {
                        for m in 0..nb {
                            g[(r, m)] = sf * vals.grad(m, i, j);
                        }
                        r += 1;
                    }
                }
                let mut pair = 0;
                for i in 0..p {
                    for j in i + 1..p {
                        let sm = w.minus[pair].sqrt();
                        let sp = w.plus[pair].sqrt();
                        for m in 0..nb {
                            let (ti, tj) = (vals.value(m, i), vals.value(m, j));
                            g[(r, m)] = sm * (ti - tj);
                            g[(r + 1, m)] = sp * (ti + tj);
                        }
                        r += 2;
                        pair += 1;
                    }
                }
                for (l, &we) in w.eps.iter().enumerate() {
                    let se = we.sqrt();
                    for m in 0..nb {
                        g[(r, m)] = se * vals.value(m, l);
                    }
                    r += 1;
                }
                let sines: Vec<f64> = th.iter().map(|t| t.sin()).collect();
                for m in 0..nb {
                    let s: f64 = (0..p).map(|l| sines[l] * vals.value(m, l)).sum();
                    load[m] += w.full * s;
                }
            }
            Ok((g.tr_mul(&g), load))
        })
        .collect();
    let partials = partials.into_iter().collect::<Result<Vec<_>>>()?;
    let (mut a, b) = tree_reduce(&partials).unwrap_or_else(|| {
        (DMatrix::zeros(nb, nb), DVector::zeros(nb))
    });
    // GᵀG is symmetric up to rounding; make it exact
    for i in 0..nb {
        for j in i + 1..nb {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    Ok((a, b))
}

fn tree_reduce(items: &[(DMatrix<f64>, DVector<f64>)]) -> Option<(DMatrix<f64>, DVector<f64>)> {
    match items.len() {
        0 => None,
        1 => Some(items[0].clone()),
        len => {
            let (l, r) = items.split_at(len / 2);
            let (a1, b1) = tree_reduce(l)?;
            let (a2, b2) = tree_reduce(r)?;
            Some((a1 + a2, b1 + b2))
        }
    }
}

/// Assembles `𝒜(τ^(i), τ^(j))` and `ℒ(τ^(j))` on the symmetric nodes of `grid`.
///
/// Both forms carry the common factor `e^{-κn/2}`, which leaves `α` unchanged.
pub fn assemble(
    n: usize,
    kappa: f64,
    basis: &EquivariantBasis,
    grid: &QuadratureGrid,
) -> Result<GalerkinSystem> {
    check_dimension(n)?;
    if basis.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: basis.dim(),
        });
    }
    if grid.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: grid.dim(),
        });
    }
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidConfig(format!("kappa must be finite and >= 0, got {kappa}")));
    }
    let nodes = grid.symmetric_nodes();
    let (stiffness, load) = assemble_nodes(n, kappa, basis, &nodes, grid.cell_norm())?;
    let condition = scaled_condition(&stiffness)?;
    Ok(GalerkinSystem {
        n,
        kappa,
        nq: grid.points_per_dim(),
        stiffness,
        load,
        condition,
    })
}

/// Same as [`assemble`] but sums over every node of the full grid.
pub fn assemble_full_grid(
    n: usize,
    kappa: f64,
    basis: &EquivariantBasis,
    grid: &QuadratureGrid,
) -> Result<GalerkinSystem> {
    let nodes = grid.full_nodes();
    let (stiffness, load) = assemble_nodes(n, kappa, basis, &nodes, grid.cell_norm())?;
    let condition = scaled_condition(&stiffness)?;
    Ok(GalerkinSystem {
        n,
        kappa,
        nq: grid.points_per_dim(),
        stiffness,
        load,
        condition,
    })
}

fn jacobi_scaling(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    let mut s = DVector::zeros(a.nrows());
    for i in 0..a.nrows() {
        let d = a[(i, i)];
        if !(d > 0.0) {
            return Err(Error::PositiveDefinitenessFailure);
        }
        s[i] = 1.0 / d.sqrt();
    }
    Ok(s)
}

fn scaled_condition(a: &DMatrix<f64>) -> Result<f64> {
    let s = jacobi_scaling(a)?;
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| s[i] * a[(i, j)] * s[j]);
    let eig = scaled.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(min > 0.0) {
        return Err(Error::PositiveDefinitenessFailure);
    }
    Ok(max / min)
}

/// Diagnostics of a linear solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub relative_residual: f64,
    pub refinement_steps: usize,
}

/// Jacobi-scaled Cholesky solve with iterative refinement.
pub fn solve(system: &GalerkinSystem) -> Result<(DVector<f64>, SolveReport)> {
    solve_dense(&system.stiffness, &system.load)
}

/// [`solve`] for a bare symmetric positive definite pair.
pub fn solve_dense(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, SolveReport)> {
    let nb = a.nrows();
    if a.ncols() != nb || b.len() != nb {
        return Err(Error::DimensionMismatch {
            expected: nb,
            got: b.len(),
        });
    }
    let s = jacobi_scaling(a)?;
    let scaled = DMatrix::from_fn(nb, nb, |i, j| s[i] * a[(i, j)] * s[j]);
    let chol = scaled
        .cholesky()
        .ok_or(Error::PositiveDefinitenessFailure)?;
    let apply = |rhs: &DVector<f64>| -> DVector<f64> {
        let y = chol.solve(&rhs.component_mul(&s));
        y.component_mul(&s)
    };
    let b_norm = b.norm();
    let mut x = apply(b);
    let residual = |x: &DVector<f64>| b - a * x;
    let mut r = residual(&x);
    let mut steps = 0;
    while steps < 3 && r.norm() > 1e-15 * b_norm {
        let candidate = &x + apply(&r);
        let r_next = residual(&candidate);
        if r_next.norm() >= r.norm() {
            break;
        }
        x = candidate;
        r = r_next;
        steps += 1;
    }
    let relative_residual = if b_norm > 0.0 { r.norm() / b_norm } else { r.norm() };
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(x.iter().copied().collect()));
    }
    Ok((
        x,
        SolveReport {
            relative_residual,
            refinement_steps: steps,
        },
    ))
}

/// Discretization parameters of the GCI solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub degree: usize,
    pub nq: usize,
}

impl SolverOptions {
    pub fn defaults_for(n: usize) -> Self {
        SolverOptions {
            degree: default_degree(n),
            nq: default_nq(n),
        }
    }
}

/// Solver diagnostics carried by a [`GciSolution`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub relative_residual: f64,
    pub condition_number: f64,
    pub nq: usize,
    pub degree: usize,
    pub basis_size: usize,
}

/// The solved profile `α` and its evaluators.
#[derive(Clone, Debug)]
pub struct GciSolution {
    n: usize,
    kappa: f64,
    basis: EquivariantBasis,
    coefficients: DVector<f64>,
    diagnostics: SolverDiagnostics,
}

#[derive(Serialize, Deserialize)]
struct SolutionDocument {
    format_version: u32,
    n: usize,
    kappa: f64,
    degree: usize,
    basis: BasisDescriptor,
    coefficients: Vec<f64>,
    diagnostics: SolverDiagnostics,
}

#[derive(Serialize, Deserialize)]
struct BasisDescriptor {
    family: String,
    /// `(a, λ)` per basis tuple, in coefficient order.
    functions: Vec<(usize, Vec<usize>)>,
}

const BASIS_FAMILY: &str = "sin((a+1)t_l)*sym_cos(lambda)";

impl GciSolution {
    /// Builds the basis and grid, assembles and solves.
    pub fn compute(n: usize, kappa: f64, options: SolverOptions) -> Result<Self> {
        let basis = build_basis(n, options.degree)?;
        let grid = QuadratureGrid::new(n, options.nq)?;
        let system = assemble(n, kappa, &basis, &grid)?;
        Self::from_system(basis, &system)
    }

    /// Solves an assembled system built on `basis`.
    pub fn from_system(basis: EquivariantBasis, system: &GalerkinSystem) -> Result<Self> {
        let (coefficients, report) = solve(system)?;
        let diagnostics = SolverDiagnostics {
            relative_residual: report.relative_residual,
            condition_number: system.condition,
            nq: system.nq,
            degree: basis.degree(),
            basis_size: basis.len(),
        };
        Ok(GciSolution {
            n: system.n,
            kappa: system.kappa,
            basis,
            coefficients,
            diagnostics,
        })
    }

    /// Wraps a fixed coefficient vector (no solve).
    pub fn from_coefficients(
        basis: EquivariantBasis,
        kappa: f64,
        coefficients: DVector<f64>,
        diagnostics: SolverDiagnostics,
    ) -> Result<Self> {
        if coefficients.len() != basis.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.len(),
                got: coefficients.len(),
            });
        }
        Ok(GciSolution {
            n: basis.dim(),
            kappa,
            basis,
            coefficients,
            diagnostics,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn basis(&self) -> &EquivariantBasis {
        &self.basis
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.coefficients
    }

    pub fn diagnostics(&self) -> &SolverDiagnostics {
        &self.diagnostics
    }

    /// `α(Θ)` for raw angles (no wrapping needed: every term is 2π-periodic).
    pub fn alpha_at(&self, angles: &[f64]) -> Vec<f64> {
        self.basis.combine(self.coefficients.as_slice(), angles)
    }

    pub fn eval_alpha(&self, theta: &crate::torus::TorusPoint) -> Result<Vec<f64>> {
        if theta.rank() != rank(self.n) {
            return Err(Error::DimensionMismatch {
                expected: rank(self.n),
                got: theta.rank(),
            });
        }
        Ok(self.alpha_at(theta.angles()))
    }

    /// `μ(A) = Σ_k α_k(Θ) g F_{2k−1,2k} gᵀ` for `A = g A_Θ gᵀ`.
    pub fn eval_mu(&self, a: &Rotation) -> Result<SkewSymmetric> {
        if a.dim() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: a.dim(),
            });
        }
        let cf = canonical_angles(a)?;
        let alpha = self.alpha_at(cf.theta.angles());
        Ok(skew_from_planes(cf.g.matrix(), &alpha))
    }

    /// `ψ_X^Γ(A) = μ(ΓᵀA)·X`.
    pub fn eval_gci(&self, gamma: &Rotation, x: &SkewSymmetric, a: &Rotation) -> Result<f64> {
        let rel = gamma.transpose().compose(a);
        let mu = self.eval_mu(&rel)?;
        mat_inner(mu.matrix(), x.matrix())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SolutionDocument {
            format_version: SOLUTION_FORMAT_VERSION,
            n: self.n,
            kappa: self.kappa,
            degree: self.basis.degree(),
            basis: BasisDescriptor {
                family: BASIS_FAMILY.into(),
                functions: self.basis.descriptor(),
            },
            coefficients: self.coefficients.iter().copied().collect(),
            diagnostics: self.diagnostics.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SolutionDocument = serde_json::from_str(text)?;
        if doc.format_version != SOLUTION_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported solution format version {}",
                doc.format_version
            )));
        }
        if doc.basis.family != BASIS_FAMILY {
            return Err(Error::InvalidConfig(format!(
                "unknown basis family {:?}",
                doc.basis.family
            )));
        }
        let basis = build_basis(doc.n, doc.degree)?;
        if basis.descriptor() != doc.basis.functions {
            return Err(Error::InvalidConfig(
                "basis descriptor does not match the rebuilt basis".into(),
            ));
        }
        Self::from_coefficients(
            basis,
            doc.kappa,
            DVector::from_vec(doc.coefficients),
            doc.diagnostics,
        )
    }
}

/// `Σ_k α_k (u_k v_kᵀ − v_k u_kᵀ)` with `u_k, v_k` the columns `2k, 2k+1` of `g`.
pub fn skew_from_planes(g: &DMatrix<f64>, alpha: &[f64]) -> SkewSymmetric {
    let n = g.nrows();
    let mut m = DMatrix::zeros(n, n);
    for (k, &ak) in alpha.iter().enumerate() {
        let u = g.column(2 * k);
        let v = g.column(2 * k + 1);
        m += (u * v.transpose() - v * u.transpose()) * ak;
    }
    SkewSymmetric::from_skew_part(&m).expect("square by construction")
}

/// The profile `α_k = −sin θ_k` of the jump-process model.
pub fn bgk_alpha(angles: &[f64]) -> Vec<f64> {
    angles.iter().map(|t| -t.sin()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotgeom::{exp_skew, f_ij};
    use crate::torus::{block_rotation, weyl_group, TorusPoint};
    use rand_distr::{Distribution, StandardNormal};

    fn random_rotation(n: usize, rng: &mut ChaCha8Rng) -> Rotation {
        let m = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        exp_skew(&SkewSymmetric::from_skew_part(&m).unwrap())
    }

    #[test]
    fn basis_enumeration_small_cases() {
        let b = build_basis(3, 1).unwrap();
        assert_eq!(b.len(), 2);
        let v = b.evaluate(&[0.7], false);
        assert!((v.value(0, 0) - 0.7f64.sin()).abs() < 1e-15);
        // sin 2θ = 2 sin θ cos θ
        assert!((v.value(1, 0) - 2.0 * 0.7f64.sin() * 0.7f64.cos()).abs() < 1e-15);

        let b = build_basis(4, 1).unwrap();
        assert_eq!(b.len(), 3);
        let th = [0.4, -1.3];
        let v = b.evaluate(&th, false);
        let expect = [
            [th[0].sin(), th[1].sin()],
            [th[0].sin() * th[1].cos(), th[1].sin() * th[0].cos()],
            [(2.0 * th[0]).sin(), (2.0 * th[1]).sin()],
        ];
        for (m, e) in expect.iter().enumerate() {
            for l in 0..2 {
                assert!((v.value(m, l) - e[l]).abs() < 1e-15, "m={m} l={l}");
            }
        }
    }

    #[test]
    fn basis_is_lexicographic_and_reproducible() {
        let b = build_basis(7, 4).unwrap();
        let desc = b.descriptor();
        let mut sorted = desc.clone();
        sorted.sort();
        assert_eq!(desc, sorted);
        assert_eq!(desc, build_basis(7, 4).unwrap().descriptor());
    }

    #[test]
    fn bgk_profile_lies_in_span() {
        for n in 3..=7 {
            let b = build_basis(n, 1).unwrap();
            let mut c = vec![0.0; b.len()];
            c[0] = -1.0;
            let th: Vec<f64> = (0..rank(n)).map(|k| 0.3 + 0.5 * k as f64).collect();
            assert_eq!(b.combine(&c, &th), bgk_alpha(&th));
        }
    }

    #[test]
    fn basis_gradients_match_finite_differences() {
        let b = build_basis(6, 3).unwrap();
        let th = [0.9, -0.4, 2.1];
        let v = b.evaluate(&th, true);
        let h = 1e-6;
        for k in 0..3 {
            let mut tp = th;
            let mut tm = th;
            tp[k] += h;
            tm[k] -= h;
            let vp = b.evaluate(&tp, false);
            let vm = b.evaluate(&tm, false);
            for m in 0..b.len() {
                for l in 0..3 {
                    let fd = (vp.value(m, l) - vm.value(m, l)) / (2.0 * h);
                    assert!((fd - v.grad(m, l, k)).abs() < 1e-7, "m={m} l={l} k={k}");
                }
            }
        }
    }

    #[test]
    fn degree_zero_is_rejected() {
        assert!(matches!(build_basis(3, 0), Err(Error::InvalidConfig(_))));
        assert!(matches!(build_basis(12, 2), Err(Error::UnsupportedDimension(12))));
    }

    #[test]
    fn one_function_system_is_positive_definite() {
        for n in 3..=6 {
            let b = build_basis(n, 1).unwrap();
            let grid = QuadratureGrid::new(n, 32).unwrap();
            let sys = assemble(n, 1.5, &b, &grid).unwrap();
            let a00 = sys.stiffness[(0, 0)];
            assert!(a00.is_finite() && a00 > 0.0);
            assert!(sys.load[0].is_finite());
        }
    }

    #[test]
    fn assembled_matrix_is_symmetric() {
        let b = build_basis(5, 4).unwrap();
        let grid = QuadratureGrid::new(5, 32).unwrap();
        let sys = assemble(5, 2.0, &b, &grid).unwrap();
        let asym = (&sys.stiffness - sys.stiffness.transpose()).amax();
        assert!(asym <= 1e-13 * sys.stiffness.amax());
    }

    #[test]
    fn symmetric_nodes_reproduce_full_grid_assembly() {
        for n in [3, 4, 5, 6] {
            let b = build_basis(n, 3).unwrap();
            let grid = QuadratureGrid::new(n, 16).unwrap();
            let reduced = assemble(n, 1.0, &b, &grid).unwrap();
            let full = assemble_full_grid(n, 1.0, &b, &grid).unwrap();
            let scale = full.stiffness.amax();
            assert!((reduced.stiffness - full.stiffness).amax() < 1e-12 * scale, "n={n}");
            assert!((reduced.load - full.load).amax() < 1e-12 * scale, "n={n}");
        }
    }

    /// Brute-force evaluation of the bilinear form with the raw quotients,
    /// at nodes that avoid the singular set.
    fn raw_form(n: usize, kappa: f64, alpha: &dyn Fn(&[f64]) -> (Vec<f64>, Vec<Vec<f64>>), nq: usize) -> (f64, f64) {
        let grid = QuadratureGrid::new(n, nq).unwrap();
        let p = rank(n);
        let mut a = 0.0;
        let mut l = 0.0;
        for node in grid.full_nodes() {
            let th = &node.angles;
            let m = (0.5 * kappa * torus_trace(th, n)).exp() * grid.weight(th);
            if m == 0.0 {
                // node on a root hyperplane: every term carries the vanishing factor
                continue;
            }
            let (v, g) = alpha(th);
            let mut s = 0.0;
            for i in 0..p {
                for j in 0..p {
                    s += g[i][j] * g[i][j];
                }
            }
            for i in 0..p {
                for j in i + 1..p {
                    // a vanishing denominator comes with a vanishing numerator
                    let dm = 1.0 - (th[i] - th[j]).cos();
                    let dp = 1.0 - (th[i] + th[j]).cos();
                    if dm != 0.0 {
                        s += (v[i] - v[j]).powi(2) / dm;
                    }
                    if dp != 0.0 {
                        s += (v[i] + v[j]).powi(2) / dp;
                    }
                }
                if n % 2 == 1 {
                    s += v[i] * v[i] / (1.0 - th[i].cos());
                }
            }
            a += s * m;
            l += (0..p).map(|i| th[i].sin() * v[i]).sum::<f64>() * m;
        }
        (a, l)
    }

    #[test]
    fn cancelled_quotients_match_raw_quotients() {
        for n in [3, 4, 5] {
            let kappa = 0.8;
            let bgk = |th: &[f64]| {
                let v = bgk_alpha(th);
                let g = (0..th.len())
                    .map(|i| (0..th.len()).map(|j| if i == j { -th[i].cos() } else { 0.0 }).collect())
                    .collect();
                (v, g)
            };
            let (a_raw, l_raw) = raw_form(n, kappa, &bgk, 64);
            let b = build_basis(n, 1).unwrap();
            let grid = QuadratureGrid::new(n, 64).unwrap();
            let sys = assemble(n, kappa, &b, &grid).unwrap();
            let shift = (0.5 * kappa * n as f64).exp();
            // the BGK profile is −τ^(0)
            assert!((sys.stiffness[(0, 0)] * shift - a_raw).abs() < 1e-10 * a_raw.abs(), "n={n}");
            assert!((-sys.load[0] * shift - l_raw).abs() < 1e-10 * l_raw.abs(), "n={n}");
        }
    }

    #[test]
    fn identity_system_solves_to_load() {
        let a = DMatrix::identity(4, 4);
        let b = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let (x, rep) = solve_dense(&a, &b).unwrap();
        assert_eq!(x, b);
        assert_eq!(rep.relative_residual, 0.0);
    }

    #[test]
    fn indefinite_system_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(solve_dense(&a, &b), Err(Error::PositiveDefinitenessFailure)));
    }

    #[test]
    fn solve_meets_residual_bound() {
        let sol = GciSolution::compute(4, 2.0, SolverOptions { degree: 8, nq: 64 }).unwrap();
        assert!(sol.diagnostics().relative_residual <= 1e-12);
        assert!(sol.diagnostics().condition_number.is_finite());
    }

    #[test]
    fn alpha_is_weyl_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in 3..=6 {
            let sol = GciSolution::compute(n, 1.0, SolverOptions { degree: 4, nq: 32 }).unwrap();
            for _ in 0..50 {
                let th: Vec<f64> = (0..rank(n)).map(|_| rng.gen_range(-PI..PI)).collect();
                let a = sol.alpha_at(&th);
                for w in weyl_group(n) {
                    let lhs = sol.alpha_at(&w.act(&th));
                    let rhs = w.act(&a);
                    for (x, y) in lhs.iter().zip(&rhs) {
                        assert!((x - y).abs() < 1e-13 * (1.0 + y.abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn alpha_examples() {
        let sol = GciSolution::compute(3, 1.0, SolverOptions { degree: 10, nq: 128 }).unwrap();
        assert_eq!(sol.alpha_at(&[0.0]), vec![0.0]);
        for k in 0..20 {
            let t = -PI + 0.3 * k as f64;
            let a = sol.alpha_at(&[t])[0];
            let b = sol.alpha_at(&[-t])[0];
            assert!((a + b).abs() < 1e-13);
        }
        let sol = GciSolution::compute(4, 1.0, SolverOptions { degree: 6, nq: 64 }).unwrap();
        for k in 0..20 {
            let (t1, t2) = (0.31 * k as f64 - 3.0, 1.0 - 0.17 * k as f64);
            let a = sol.alpha_at(&[t1, t2]);
            let b = sol.alpha_at(&[t2, t1]);
            assert!((a[0] - b[1]).abs() < 1e-13);
            let c = sol.alpha_at(&[-t1, t2]);
            assert!((c[0] + a[0]).abs() < 1e-13);
        }
    }

    #[test]
    fn solution_has_positive_normalization() {
        // 𝒜(α, α) = ℒ(α) > 0
        for n in [3, 4, 5] {
            let sol = GciSolution::compute(n, 1.0, SolverOptions { degree: 4, nq: 32 }).unwrap();
            let grid = QuadratureGrid::new(n, 32).unwrap();
            let ia = grid
                .integrate_hyperoctahedral(|th| {
                    let a = sol.alpha_at(th);
                    shifted_exponential(th, 1.0, n)
                        * a.iter().zip(th).map(|(x, t)| x * t.sin()).sum::<f64>()
                })
                .unwrap();
            assert!(ia > 0.0);
        }
    }

    #[test]
    fn class_reduced_mean_vanishes() {
        let sol = GciSolution::compute(4, 1.0, SolverOptions { degree: 6, nq: 32 }).unwrap();
        let grid = QuadratureGrid::new(4, 32).unwrap();
        let v = grid
            .integrate_class(|t| shifted_exponential(t.angles(), 1.0, 4) * sol.alpha_at(t.angles())[0])
            .unwrap();
        assert!(v.abs() < 1e-8);
    }

    #[test]
    fn mu_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for n in 3..=6 {
            let sol = GciSolution::compute(n, 1.0, SolverOptions { degree: 4, nq: 32 }).unwrap();
            assert_eq!(sol.eval_mu(&Rotation::identity(n)).unwrap().matrix().amax(), 0.0);
            for _ in 0..10 {
                let a = random_rotation(n, &mut rng);
                let g = random_rotation(n, &mut rng);
                let mu = sol.eval_mu(&a).unwrap();
                let conj = sol.eval_mu(&a.conjugate_by(&g)).unwrap();
                let expect = mu.conjugate_by(&g);
                assert!((conj.matrix() - expect.matrix()).amax() < 1e-8);
                let inv = sol.eval_mu(&a.transpose()).unwrap();
                assert!((inv.matrix() + mu.matrix()).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn mu_on_torus_is_cartan_valued() {
        let sol = GciSolution::compute(5, 1.0, SolverOptions { degree: 4, nq: 32 }).unwrap();
        let th = TorusPoint::from_raw(vec![2.0, 0.7]);
        let a = block_rotation(&th, 5).unwrap();
        let mu = sol.eval_mu(&a).unwrap();
        let alpha = sol.alpha_at(th.angles());
        let expect = f_ij(5, 0, 1).scale(alpha[0]).add(&f_ij(5, 2, 3).scale(alpha[1]));
        assert!((mu.matrix() - expect.matrix()).amax() < 1e-12);
    }

    #[test]
    fn gci_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let sol = GciSolution::compute(4, 1.0, SolverOptions { degree: 4, nq: 32 }).unwrap();
        let gamma = random_rotation(4, &mut rng);
        let x = SkewSymmetric::from_skew_part(&DMatrix::from_fn(4, 4, |_, _| StandardNormal.sample(&mut rng))).unwrap();
        let y = SkewSymmetric::from_skew_part(&DMatrix::from_fn(4, 4, |_, _| StandardNormal.sample(&mut rng))).unwrap();
        assert!(sol.eval_gci(&gamma, &x, &gamma).unwrap().abs() < 1e-14);
        let a = random_rotation(4, &mut rng);
        let lin = sol.eval_gci(&gamma, &x.scale(2.0).add(&y.scale(-3.0)), &a).unwrap();
        let sep = 2.0 * sol.eval_gci(&gamma, &x, &a).unwrap() - 3.0 * sol.eval_gci(&gamma, &y, &a).unwrap();
        assert!((lin - sep).abs() < 1e-12);
        let g = random_rotation(4, &mut rng);
        let id = Rotation::identity(4);
        let lhs = sol.eval_gci(&id, &x, &a.conjugate_by(&g)).unwrap();
        let rhs = sol.eval_gci(&id, &x.conjugate_by(&g.transpose()), &a).unwrap();
        assert!((lhs - rhs).abs() < 1e-8);
    }

    #[test]
    fn json_roundtrip() {
        let sol = GciSolution::compute(5, 1.5, SolverOptions { degree: 3, nq: 16 }).unwrap();
        let text = sol.to_json().unwrap();
        let back = GciSolution::from_json(&text).unwrap();
        assert_eq!(back.coefficients(), sol.coefficients());
        assert_eq!(back.diagnostics(), sol.diagnostics());
        assert_eq!(back.alpha_at(&[0.3, 1.1]), sol.alpha_at(&[0.3, 1.1]));
        let bad = text.replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(GciSolution::from_json(&bad).is_err());
    }
}
