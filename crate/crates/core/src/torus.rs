//! Maximal torus of SO(n), its Weyl group and class-function quadrature.
//!
//! A class function `f` integrates over SO(n) (normalized Haar measure) as
//!
//! ```text
//! ∫ f(A) dA = γ_n (2π)^{-p} ∫_{[-π,π)^p} f(A_Θ) u_n(Θ) dΘ
//! ```
//!
//! with `p = ⌊n/2⌋`. The torus integral is evaluated with the offset
//! (midpoint) uniform rule, which is exact for trigonometric polynomials of
//! degree below the node count and spectrally accurate for smooth periodic
//! integrands.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotgeom::{orthogonality_defect, Rotation};

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(x: f64) -> f64 {
    let y = x - 2.0 * PI * ((x + PI) / (2.0 * PI)).floor();
    if y >= PI {
        y - 2.0 * PI
    } else {
        y
    }
}

/// `p = ⌊n/2⌋`.
pub fn rank(n: usize) -> usize {
    n / 2
}

/// `ε_n`: 1 for odd `n`, 0 for even `n`.
pub fn parity(n: usize) -> f64 {
    (n % 2) as f64
}

/// `γ_n` of the Weyl integration formula.
pub fn weyl_constant(n: usize) -> f64 {
    let p = rank(n) as i32;
    let exponent = if n % 2 == 0 { (p - 1) * (p - 1) } else { p * p };
    let factorial: f64 = (1..=p).map(f64::from).product();
    2f64.powi(exponent) / factorial
}

/// A point `Θ` of the torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    angles: Vec<f64>,
}

impl TorusPoint {
    /// Wraps every angle into `[-π, π)`.
    pub fn new(angles: Vec<f64>) -> Self {
        TorusPoint {
            angles: angles.into_iter().map(wrap_angle).collect(),
        }
    }

    /// Keeps the angles as given (chamber representatives may carry `θ = π`).
    pub fn from_raw(angles: Vec<f64>) -> Self {
        TorusPoint { angles }
    }

    pub fn zeros(p: usize) -> Self {
        TorusPoint {
            angles: vec![0.0; p],
        }
    }

    pub fn rank(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }
}

fn check_rank(theta: &TorusPoint, n: usize) -> Result<()> {
    if theta.rank() != rank(n) {
        return Err(Error::DimensionMismatch {
            expected: rank(n),
            got: theta.rank(),
        });
    }
    Ok(())
}

/// `A_Θ`: block diagonal with `R_θ = [[cos θ, −sin θ], [sin θ, cos θ]]` blocks
/// and a trailing 1 when `n` is odd.
pub fn block_rotation(theta: &TorusPoint, n: usize) -> Result<Rotation> {
    check_rank(theta, n)?;
    let mut a = DMatrix::identity(n, n);
    for (k, &t) in theta.angles().iter().enumerate() {
        let (s, c) = t.sin_cos();
        a[(2 * k, 2 * k)] = c;
        a[(2 * k, 2 * k + 1)] = -s;
        a[(2 * k + 1, 2 * k)] = s;
        a[(2 * k + 1, 2 * k + 1)] = c;
    }
    Ok(Rotation::from_matrix_unchecked(a))
}

/// `Tr(A_Θ) = 2 Σ cos θ_k + ε_n`.
pub fn torus_trace(angles: &[f64], n: usize) -> f64 {
    2.0 * angles.iter().map(|t| t.cos()).sum::<f64>() + parity(n)
}

/// Weyl density `u_n(Θ)`.
pub fn weyl_density(theta: &TorusPoint, n: usize) -> f64 {
    weyl_density_raw(theta.angles(), n)
}

pub(crate) fn weyl_density_raw(angles: &[f64], n: usize) -> f64 {
    let p = angles.len();
    let mut u = 1.0;
    for j in 0..p {
        let cj = angles[j].cos();
        for k in j + 1..p {
            let d = cj - angles[k].cos();
            u *= d * d;
        }
    }
    if n % 2 == 1 {
        for &t in angles {
            let s = (0.5 * t).sin();
            u *= s * s;
        }
    }
    u
}

/// `m(Θ) = exp(κ/2 (2Σcos θ_k + ε_n)) u_n(Θ)`.
pub fn gci_weight(theta: &TorusPoint, kappa: f64, n: usize) -> f64 {
    (0.5 * kappa * torus_trace(theta.angles(), n)).exp() * weyl_density(theta, n)
}

/// A signed permutation acting on torus angles: `(WΘ)_i = sign_i θ_{perm_i}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeylElement {
    perm: Vec<usize>,
    signs: Vec<i8>,
}

impl WeylElement {
    pub fn identity(p: usize) -> Self {
        WeylElement {
            perm: (0..p).collect(),
            signs: vec![1; p],
        }
    }

    pub fn new(perm: Vec<usize>, signs: Vec<i8>) -> Self {
        assert_eq!(perm.len(), signs.len());
        WeylElement { perm, signs }
    }

    /// `C_ij`: exchanges `θ_i` and `θ_j`.
    pub fn exchange(p: usize, i: usize, j: usize) -> Self {
        let mut w = Self::identity(p);
        w.perm.swap(i, j);
        w
    }

    /// `D_ij`: flips the signs of `θ_i` and `θ_j`.
    pub fn double_flip(p: usize, i: usize, j: usize) -> Self {
        let mut w = Self::identity(p);
        w.signs[i] = -1;
        w.signs[j] = -1;
        w
    }

    /// `D_i`: flips the sign of `θ_i` (odd `n` only).
    pub fn flip(p: usize, i: usize) -> Self {
        let mut w = Self::identity(p);
        w.signs[i] = -1;
        w
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &k)| i == k) && self.signs.iter().all(|&s| s == 1)
    }

    pub fn negative_count(&self) -> usize {
        self.signs.iter().filter(|&&s| s < 0).count()
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &WeylElement) -> WeylElement {
        let perm = self.perm.iter().map(|&k| other.perm[k]).collect();
        let signs = self
            .perm
            .iter()
            .zip(&self.signs)
            .map(|(&k, &s)| s * other.signs[k])
            .collect();
        WeylElement { perm, signs }
    }

    /// Applies the element to a vector of `ℝ^p` without wrapping.
    pub fn act(&self, v: &[f64]) -> Vec<f64> {
        self.perm
            .iter()
            .zip(&self.signs)
            .map(|(&k, &s)| f64::from(s) * v[k])
            .collect()
    }
}

/// Generators `C_ij` plus `D_ij` (even `n`) or `D_i` (odd `n`).
pub fn weyl_generators(n: usize) -> Vec<WeylElement> {
    let p = rank(n);
    let mut gens = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            gens.push(WeylElement::exchange(p, i, j));
        }
    }
    if n % 2 == 0 {
        for i in 0..p {
            for j in i + 1..p {
                gens.push(WeylElement::double_flip(p, i, j));
            }
        }
    } else {
        for i in 0..p {
            gens.push(WeylElement::flip(p, i));
        }
    }
    gens
}

/// Closure of the generators: the whole Weyl group, of order `2^{p-1} p!`
/// (even `n`) or `2^p p!` (odd `n`).
pub fn weyl_group(n: usize) -> Vec<WeylElement> {
    let p = rank(n);
    let gens = weyl_generators(n);
    let mut seen = std::collections::HashSet::new();
    let mut group = vec![WeylElement::identity(p)];
    seen.insert(group[0].clone());
    let mut frontier = 0;
    while frontier < group.len() {
        let w = group[frontier].clone();
        frontier += 1;
        for g in &gens {
            let next = g.compose(&w);
            if seen.insert(next.clone()) {
                group.push(next);
            }
        }
    }
    group
}

/// Applies `W` to `Θ` and wraps the result.
pub fn weyl_apply(w: &WeylElement, theta: &TorusPoint) -> TorusPoint {
    TorusPoint::new(w.act(theta.angles()))
}

/// Returns `(W, Θ₀)` with `Θ₀` in the closed fundamental chamber
/// (`θ₁ ≥ … ≥ θ_{p−1} ≥ |θ_p|` for even `n`, `θ₁ ≥ … ≥ θ_p ≥ 0` for odd `n`)
/// and `W(Θ₀) = Θ`.
pub fn canonical_chamber(theta: &TorusPoint, n: usize) -> (WeylElement, TorusPoint) {
    let angles = theta.angles();
    let p = angles.len();
    let mut order: Vec<usize> = (0..p).collect();
    // stable sort keeps already-ordered inputs mapped to the identity
    order.sort_by(|&a, &b| angles[b].abs().total_cmp(&angles[a].abs()));
    let mut reduced: Vec<f64> = order.iter().map(|&k| angles[k].abs()).collect();
    let negatives = angles.iter().filter(|t| t.is_sign_negative() && **t != 0.0).count();
    let flip_last = n % 2 == 0 && p > 0 && negatives % 2 == 1;
    if flip_last {
        reduced[p - 1] = -reduced[p - 1];
    }
    let mut perm = vec![0; p];
    let mut signs = vec![1i8; p];
    for (r, &k) in order.iter().enumerate() {
        perm[k] = r;
        let orig_neg = angles[k] < 0.0;
        let red_neg = flip_last && r == p - 1;
        signs[k] = if orig_neg != red_neg { -1 } else { 1 };
    }
    if n % 2 == 0 && signs.iter().filter(|&&s| s < 0).count() % 2 == 1 {
        // only reachable when the flipped entry is an exact zero
        signs[order[p - 1]] = -signs[order[p - 1]];
    }
    (WeylElement { perm, signs }, TorusPoint::from_raw(reduced))
}

/// True when `Θ` lies in the closed fundamental chamber.
pub fn in_chamber(angles: &[f64], n: usize) -> bool {
    let p = angles.len();
    if p == 0 {
        return true;
    }
    for k in 0..p.saturating_sub(1) {
        let next = if k + 1 == p - 1 && n % 2 == 0 {
            angles[k + 1].abs()
        } else {
            angles[k + 1]
        };
        if angles[k] < next {
            return false;
        }
    }
    n % 2 == 0 || angles[p - 1] >= 0.0
}

/// Midpoint grid on the torus carrying the Weyl-formula weights.
#[derive(Clone, Debug)]
pub struct QuadratureGrid {
    n: usize,
    p: usize,
    nq: usize,
    nodes: Vec<f64>,
    cell_norm: f64,
}

/// Nodes per chunk of the deterministic reduction.
const CHUNK: usize = 2048;

/// Pairwise summation; the tree depends only on the slice length.
pub fn tree_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        len => {
            let (a, b) = values.split_at(len / 2);
            tree_sum(a) + tree_sum(b)
        }
    }
}

impl QuadratureGrid {
    pub fn new(n: usize, nq: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::UnsupportedDimension(n));
        }
        if nq < 2 || nq % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "quadrature points per dimension must be even and >= 2, got {nq}"
            )));
        }
        let p = rank(n);
        let h = 2.0 * PI / nq as f64;
        let nodes = (0..nq).map(|j| -PI + (j as f64 + 0.5) * h).collect();
        let cell_norm = weyl_constant(n) * (h / (2.0 * PI)).powi(p as i32);
        Ok(QuadratureGrid {
            n,
            p,
            nq,
            nodes,
            cell_norm,
        })
    }

    /// Default points per dimension: 64 for `n ≤ 6`, 32 above.
    pub fn default_for(n: usize) -> Result<Self> {
        Self::new(n, if n <= 6 { 64 } else { 32 })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.p
    }

    pub fn points_per_dim(&self) -> usize {
        self.nq
    }

    pub fn node_count(&self) -> usize {
        self.nq.pow(self.p as u32)
    }

    /// 1-D node coordinates.
    pub fn nodes_1d(&self) -> &[f64] {
        &self.nodes
    }

    /// `γ_n (h/2π)^p`: the Haar weight of one cell before `u_n`.
    pub fn cell_norm(&self) -> f64 {
        self.cell_norm
    }

    fn fill_node(&self, mut index: usize, out: &mut [f64]) {
        for slot in out.iter_mut() {
            *slot = self.nodes[index % self.nq];
            index /= self.nq;
        }
    }

    /// Weight of the node at `angles`: `u_n(Θ) γ_n (h/2π)^p`.
    pub fn weight(&self, angles: &[f64]) -> f64 {
        weyl_density_raw(angles, self.n) * self.cell_norm
    }

    /// `∫_{SO(n)} f dA` for a class function given by its torus restriction.
    pub fn integrate_class<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(&TorusPoint) -> f64 + Sync,
    {
        let total = self.node_count();
        let chunks = total.div_ceil(CHUNK);
        let partials: Vec<Result<f64>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut buf = vec![0.0; self.p];
                let mut acc = Vec::with_capacity(CHUNK);
                for idx in c * CHUNK..((c + 1) * CHUNK).min(total) {
                    self.fill_node(idx, &mut buf);
                    let point = TorusPoint::from_raw(buf.clone());
                    let v = f(&point);
                    if !v.is_finite() {
                        return Err(Error::NonFinite(buf.clone()));
                    }
                    acc.push(v * self.weight(&buf));
                }
                Ok(tree_sum(&acc))
            })
            .collect();
        let partials = partials.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(tree_sum(&partials))
    }

    /// Node set of the positive sorted sector `θ₁ ≥ … ≥ θ_p > 0` with the
    /// multiplicity of each node's orbit under all signed permutations.
    pub fn symmetric_nodes(&self) -> Vec<SymmetricNode> {
        let half: Vec<f64> = self.nodes[self.nq / 2..].to_vec();
        let mut out = Vec::new();
        let mut idx = vec![0usize; self.p];
        let base = 2f64.powi(self.p as i32) * (1..=self.p).map(|k| k as f64).product::<f64>();
        loop {
            // idx is non-increasing; count ties for the multinomial factor
            let mut denom = 1.0;
            let mut run = 1;
            for k in 1..=self.p {
                if k < self.p && idx[k] == idx[k - 1] {
                    run += 1;
                } else {
                    denom *= (1..=run).map(|r| r as f64).product::<f64>();
                    run = 1;
                }
            }
            let angles: Vec<f64> = idx.iter().map(|&i| half[i]).collect();
            out.push(SymmetricNode {
                multiplicity: base / denom,
                angles,
            });
            // next non-increasing tuple, last index fastest
            let mut k = self.p;
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                let cap = if k == 0 { half.len() - 1 } else { idx[k - 1] };
                if idx[k] < cap {
                    idx[k] += 1;
                    for slot in idx.iter_mut().skip(k + 1) {
                        *slot = 0;
                    }
                    break;
                }
            }
        }
    }

    /// Every node of the grid with multiplicity 1.
    pub fn full_nodes(&self) -> Vec<SymmetricNode> {
        let mut buf = vec![0.0; self.p];
        (0..self.node_count())
            .map(|idx| {
                self.fill_node(idx, &mut buf);
                SymmetricNode {
                    angles: buf.clone(),
                    multiplicity: 1.0,
                }
            })
            .collect()
    }

    /// `∫ f dA` for an integrand invariant under every signed permutation of
    /// the angles (a stronger symmetry than Weyl invariance for even `n`).
    pub fn integrate_hyperoctahedral<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let nodes = self.symmetric_nodes();
        let partials: Vec<Result<f64>> = nodes
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = Vec::with_capacity(chunk.len());
                for node in chunk {
                    let v = f(&node.angles);
                    if !v.is_finite() {
                        return Err(Error::NonFinite(node.angles.clone()));
                    }
                    acc.push(v * node.multiplicity * self.weight(&node.angles));
                }
                Ok(tree_sum(&acc))
            })
            .collect();
        let partials = partials.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(tree_sum(&partials))
    }
}

impl QuadratureGrid {
    /// Vector-valued [`QuadratureGrid::integrate_hyperoctahedral`]: `f` writes
    /// `dim` integrand values per node.
    pub fn integrate_hyperoctahedral_vec<F>(&self, dim: usize, f: F) -> Result<Vec<f64>>
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let nodes = self.symmetric_nodes();
        let partials: Vec<Result<Vec<f64>>> = nodes
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut cols = vec![Vec::with_capacity(chunk.len()); dim];
                let mut buf = vec![0.0; dim];
                for node in chunk {
                    f(&node.angles, &mut buf);
                    if !buf.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite(node.angles.clone()));
                    }
                    let w = node.multiplicity * self.weight(&node.angles);
                    for (col, v) in cols.iter_mut().zip(&buf) {
                        col.push(v * w);
                    }
                }
                Ok(cols.iter().map(|c| tree_sum(c)).collect())
            })
            .collect();
        let partials = partials.into_iter().collect::<Result<Vec<_>>>()?;
        Ok((0..dim)
            .map(|d| {
                let col: Vec<f64> = partials.iter().map(|p| p[d]).collect();
                tree_sum(&col)
            })
            .collect())
    }
}

/// A node of [`QuadratureGrid::symmetric_nodes`].
#[derive(Clone, Debug)]
pub struct SymmetricNode {
    pub angles: Vec<f64>,
    pub multiplicity: f64,
}

/// Result of [`canonical_angles`]: `A = g A_Θ gᵀ` with `Θ` in the chamber.
#[derive(Clone, Debug)]
pub struct CanonicalForm {
    pub g: Rotation,
    pub theta: TorusPoint,
    pub reconstruction_error: f64,
}

/// Tolerance on the reconstruction `‖g A_Θ gᵀ − A‖_max`.
pub const RECONSTRUCTION_TOL: f64 = 1e-10;

struct Plane {
    u: DVector<f64>,
    v: DVector<f64>,
    angle: f64,
}

fn plane_angle(a: &DMatrix<f64>, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let au = a * u;
    let av = a * v;
    let c = 0.5 * (u.dot(&au) + v.dot(&av));
    let s = 0.5 * (v.dot(&au) - u.dot(&av));
    s.atan2(c)
}

/// Conjugates `A` into the maximal torus: `A = g A_Θ gᵀ`, `g ∈ SO(n)`,
/// `Θ` in the fundamental chamber.
pub fn canonical_angles(a: &Rotation) -> Result<CanonicalForm> {
    let n = a.dim();
    let p = rank(n);
    let am = a.matrix();
    let schur = nalgebra::linalg::Schur::try_new(am.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::IllConditioned("real Schur iteration did not converge".into()))?;
    let (q, t) = schur.unpack();

    let mut planes: Vec<Plane> = Vec::with_capacity(p);
    let mut plus: Vec<DVector<f64>> = Vec::new();
    let mut minus: Vec<DVector<f64>> = Vec::new();
    let push_real = |vec: DVector<f64>, plus: &mut Vec<_>, minus: &mut Vec<_>| {
        if vec.dot(&(am * &vec)) >= 0.0 {
            plus.push(vec);
        } else {
            minus.push(vec);
        }
    };

    let mut i = 0;
    while i < n {
        let two_block = i + 1 < n && t[(i + 1, i)] != 0.0;
        if two_block {
            let u = q.column(i).into_owned();
            let v = q.column(i + 1).into_owned();
            let b = t.view((i, i), (2, 2));
            if b.determinant() > 0.0 {
                let angle = plane_angle(am, &u, &v);
                planes.push(Plane { u, v, angle });
            } else {
                // a reflection block: split into its ±1 eigenvectors
                let sym = (b + b.transpose()) * 0.5;
                let eig = nalgebra::SymmetricEigen::new(sym.into_owned());
                for k in 0..2 {
                    let w = eig.eigenvectors.column(k);
                    let vec = &u * w[0] + &v * w[1];
                    push_real(vec, &mut plus, &mut minus);
                }
            }
            i += 2;
        } else {
            push_real(q.column(i).into_owned(), &mut plus, &mut minus);
            i += 1;
        }
    }

    if minus.len() % 2 != 0 || plus.len() % 2 != n % 2 {
        return Err(Error::IllConditioned(format!(
            "cannot pair real eigenvectors ({} near +1, {} near -1)",
            plus.len(),
            minus.len()
        )));
    }
    for pair in minus.chunks(2) {
        planes.push(Plane {
            u: pair[0].clone(),
            v: pair[1].clone(),
            angle: PI,
        });
    }
    let axis = if n % 2 == 1 { plus.pop() } else { None };
    for pair in plus.chunks(2) {
        planes.push(Plane {
            u: pair[0].clone(),
            v: pair[1].clone(),
            angle: 0.0,
        });
    }
    if planes.len() != p {
        return Err(Error::IllConditioned(format!(
            "found {} invariant planes, expected {p}",
            planes.len()
        )));
    }

    for plane in planes.iter_mut() {
        if plane.angle < 0.0 {
            std::mem::swap(&mut plane.u, &mut plane.v);
            plane.angle = -plane.angle;
        }
    }
    planes.sort_by(|x, y| y.angle.total_cmp(&x.angle));

    let build = |planes: &[Plane], axis: &Option<DVector<f64>>| {
        let mut g = DMatrix::zeros(n, n);
        for (k, plane) in planes.iter().enumerate() {
            g.set_column(2 * k, &plane.u);
            g.set_column(2 * k + 1, &plane.v);
        }
        if let Some(ax) = axis {
            g.set_column(n - 1, ax);
        }
        g
    };
    let mut g = build(&planes, &axis);
    if g.determinant() < 0.0 {
        if n % 2 == 1 {
            let col = -g.column(n - 1);
            g.set_column(n - 1, &col);
        } else {
            let last = planes.last_mut().expect("p >= 1");
            std::mem::swap(&mut last.u, &mut last.v);
            last.angle = -last.angle;
            g = build(&planes, &axis);
        }
    }

    let theta = TorusPoint::from_raw(planes.iter().map(|pl| pl.angle).collect());
    let a_theta = block_rotation(&theta, n)?;
    let recon = (&g * a_theta.matrix() * g.transpose() - am).amax();
    let defect = orthogonality_defect(&g);
    if !(recon <= RECONSTRUCTION_TOL) || !(defect <= RECONSTRUCTION_TOL) {
        return Err(Error::IllConditioned(format!(
            "reconstruction error {recon:.3e}, frame orthogonality defect {defect:.3e}"
        )));
    }
    Ok(CanonicalForm {
        g: Rotation::from_matrix_unchecked(g),
        theta,
        reconstruction_error: recon,
    })
}
