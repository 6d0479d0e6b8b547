//! Linear systems `Y = ξ + ∫(αY + AZ + β) dt − ∫ Z dB` on the tree.
//!
//! The discrete equation at a node `u` with children `c` reads
//! `Y_u = Y_c + (α_u Y_u + A_u Z_u + β_u) dt − Z_u·ΔB_c`. Averaging over the
//! children and testing against `ΔB` gives
//! `Z_u = E_u[Y_c ΔB] / dt` and `(I − α_u dt) Y_u = E_u[Y_c] + (A_u Z_u + β_u) dt`,
//! which [`solve_backward_exact`] applies level by level. Every other solver
//! in this module solves the same discrete equation by a different route and is
//! tested against it.

mod cascade;
mod exponential;
mod girsanov;
mod outer;
mod picard;
pub mod random;

pub use cascade::{solve_triangular_cascade, CascadeMethod};
pub use exponential::{
    inverse_defect, mp_norm, representation_solve, reverse_hoelder_probe, rp_ratio, rp_tilde, stochastic_exponential,
    MatrixExponential, ReverseHoelder,
};
pub use girsanov::solve_1d_girsanov;
pub use outer::{solve_outer_product, FactoredCoefficients};
pub use picard::{contraction_threshold, solve_sliced_picard, PicardOptions};

use nalgebra::{DMatrix, DVector};

use crate::error::{LabError, Result};
use crate::norms::NormReport;
use crate::tree::{matvec_into, AdaptedProcess, EntryKind, LeafValues, NodeRef, Shape, TreeModel};

/// The coefficients `(α, A, β)` on the step levels `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoefficients {
    pub alpha: AdaptedProcess,
    pub a: AdaptedProcess,
    pub beta: AdaptedProcess,
}

impl LinearCoefficients {
    pub fn new(tree: &TreeModel, alpha: AdaptedProcess, a: AdaptedProcess, beta: AdaptedProcess) -> Result<Self> {
        let n = beta.shape().n();
        alpha.expect(Shape::Matrix(n), EntryKind::Real, "alpha")?;
        a.expect(Shape::Matrix(n), EntryKind::VecD, "A")?;
        beta.expect(Shape::Vector(n), EntryKind::Real, "beta")?;
        for p in [&alpha, &a, &beta] {
            if p.includes_terminal() {
                return Err(LabError::ShapeMismatch("coefficients live on levels 0..N-1".into()));
            }
            p.check_on(tree)?;
        }
        Ok(Self { alpha, a, beta })
    }

    pub fn zeros(tree: &TreeModel, n: usize) -> Self {
        Self {
            alpha: AdaptedProcess::zeros(tree, Shape::Matrix(n), EntryKind::Real, false),
            a: AdaptedProcess::zeros(tree, Shape::Matrix(n), EntryKind::VecD, false),
            beta: AdaptedProcess::zeros(tree, Shape::Vector(n), EntryKind::Real, false),
        }
    }

    pub fn n(&self) -> usize {
        self.beta.shape().n()
    }

    fn is_zero(p: &AdaptedProcess) -> bool {
        (0..p.num_levels()).all(|k| p.level(k).iter().all(|&v| v == 0.0))
    }

    pub fn alpha_is_zero(&self) -> bool {
        Self::is_zero(&self.alpha)
    }

    pub fn beta_is_zero(&self) -> bool {
        Self::is_zero(&self.beta)
    }

    pub fn a_is_zero(&self) -> bool {
        Self::is_zero(&self.a)
    }

    /// Drift `α_u y + A_u z + β_u` at one node.
    pub fn drift_at(&self, u: NodeRef, y: &[f64], z: &[f64], out: &mut [f64]) {
        let n = self.n();
        let d = self.a.entry_width();
        let mut az = vec![0.0; n];
        matvec_into(self.a.node(u), z, n, d, &mut az);
        let mut ay = vec![0.0; n];
        matvec_into(self.alpha.node(u), y, n, 1, &mut ay);
        let beta = self.beta.node(u);
        for i in 0..n {
            out[i] = ay[i] + az[i] + beta[i];
        }
    }

    /// The drift process `α Y + A Z + β` of a candidate pair.
    pub fn drift(&self, y: &AdaptedProcess, z: &AdaptedProcess) -> AdaptedProcess {
        let n = self.n();
        let tree = self.beta.tree();
        AdaptedProcess::from_fn(&tree, Shape::Vector(n), EntryKind::Real, false, |u, out| {
            self.drift_at(u, y.node(u), z.node(u), out)
        })
    }
}

/// Contraction record of one slice of [`solve_sliced_picard`].
#[derive(Debug, Clone, PartialEq)]
pub struct SliceDiagnostics {
    pub slice: usize,
    pub iterations: usize,
    /// Largest ratio of successive iterate differences observed.
    pub contraction: f64,
    /// The slice contains a step that alone exceeds the budget.
    pub oversized: bool,
}

/// Solver diagnostics attached to every [`Solution`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub solver: String,
    /// Largest one-step defect of the discrete equation.
    pub residual_sup: f64,
    pub iterations: usize,
    pub norms_y: NormReport,
    pub norms_z: NormReport,
    /// Per-slice records (sliced Picard only).
    pub slices: Vec<SliceDiagnostics>,
    /// Accepted truncation level (quadratic solver only).
    pub accepted_k: Option<f64>,
}

/// A solution pair with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// Vector-valued, terminal-inclusive.
    pub y: AdaptedProcess,
    /// Vector-valued with `R^d` entries, levels `0..N`.
    pub z: AdaptedProcess,
    pub diagnostics: Diagnostics,
}

impl Solution {
    /// Packs `(Y, Z)`, measuring the residual against `drift` (levels `0..N`).
    pub fn assemble(solver: &str, y: AdaptedProcess, z: AdaptedProcess, drift: &AdaptedProcess) -> Result<Self> {
        let residual_sup = residual(&y, &z, drift)?;
        let diagnostics = Diagnostics {
            solver: solver.to_string(),
            residual_sup,
            iterations: 1,
            norms_y: NormReport::of(&y),
            norms_z: NormReport::of(&z),
            ..Diagnostics::default()
        };
        Ok(Self { y, z, diagnostics })
    }

    /// Sup distance to another solution over `Y` and `Z`.
    pub fn distance(&self, other: &Solution) -> f64 {
        self.y.max_abs_diff(&other.y).max(self.z.max_abs_diff(&other.z))
    }

    pub fn y0(&self) -> &[f64] {
        self.y.node(NodeRef::ROOT)
    }
}

/// Sup over nodes and children of `|Y_u − Y_c − f_u dt + Z_u·ΔB_c|`.
///
/// For `d = 2` the component of the per-child defect along the orthogonal
/// direction `ΔB¹ΔB²` is removed first (no integrand can produce it).
pub fn residual(y: &AdaptedProcess, z: &AdaptedProcess, drift: &AdaptedProcess) -> Result<f64> {
    let tree = y.tree();
    y.check_on(&tree)?;
    z.check_on(&tree)?;
    drift.check_on(&tree)?;
    let n = y.width();
    if z.width() != n * tree.dim() || drift.width() != n || !y.includes_terminal() {
        return Err(LabError::ShapeMismatch(
            "residual needs Y (terminal-inclusive), Z and drift of matching width".into(),
        ));
    }
    let b = tree.branching();
    let d = tree.dim();
    let dt = tree.dt();
    let mut worst = 0.0f64;
    let mut defects = vec![0.0; b * n];
    for level in 0..tree.depth() {
        for idx in 0..tree.level_len(level) {
            let u = NodeRef::new(level, idx);
            let (yu, zu, fu) = (y.node(u), z.node(u), drift.node(u));
            for j in 0..b {
                let yc = y.node(u.child(b, j));
                let inc = tree.increment(j);
                for i in 0..n {
                    let zdb: f64 = (0..d).map(|k| zu[i * d + k] * inc[k]).sum();
                    defects[j * n + i] = yu[i] - yc[i] - fu[i] * dt + zdb;
                }
            }
            tree.remove_orthogonal(&mut defects, n);
            for chunk in defects.chunks(n) {
                worst = worst.max(chunk.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
    }
    Ok(worst)
}

/// Mean and integrand of the children of `u` for a terminal-inclusive `Y` being filled backward.
pub(crate) fn child_stats(tree: &TreeModel, y: &AdaptedProcess, u: NodeRef) -> (Vec<f64>, Vec<f64>) {
    let n = y.width();
    let next = y.level(u.level + 1);
    let mut mean = vec![0.0; n];
    let mut z = vec![0.0; n * tree.dim()];
    tree.mean_children(next, n, u.index, &mut mean);
    tree.project_children(next, n, u.index, &mut z);
    (mean, z)
}

fn check_terminal(tree: &TreeModel, xi: &LeafValues, n: usize) -> Result<()> {
    if xi.width() != n || xi.values().len() != tree.num_leaves() * n {
        return Err(LabError::ShapeMismatch(format!(
            "terminal condition of width {} for a system of size {n}",
            xi.width()
        )));
    }
    Ok(())
}

/// Terminal-inclusive `Y` with `ξ` on the leaves and zeros elsewhere.
pub(crate) fn y_with_terminal(tree: &TreeModel, xi: &LeafValues, n: usize) -> Result<AdaptedProcess> {
    check_terminal(tree, xi, n)?;
    let mut y = AdaptedProcess::zeros(tree, Shape::Vector(n), EntryKind::Real, true);
    y.level_mut(tree.depth()).copy_from_slice(xi.values());
    Ok(y)
}

/// Solves `(I − α dt) y = rhs` at one node.
pub(crate) fn solve_step(alpha: &[f64], rhs: &[f64], dt: f64, u: NodeRef) -> Result<Vec<f64>> {
    let n = rhs.len();
    if alpha.iter().all(|&a| a == 0.0) {
        return Ok(rhs.to_vec());
    }
    if n == 1 {
        let pivot = 1.0 - alpha[0] * dt;
        if pivot.abs() < 1e-14 {
            return Err(LabError::SingularStep(u));
        }
        return Ok(vec![rhs[0] / pivot]);
    }
    let m = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - alpha[i * n + j] * dt);
    m.lu()
        .solve(&DVector::from_column_slice(rhs))
        .map(|v| v.as_slice().to_vec())
        .ok_or(LabError::SingularStep(u))
}

/// The exact backward recursion. Unique solution of the discrete equation.
pub fn solve_backward_exact(xi: &LeafValues, coeffs: &LinearCoefficients) -> Result<Solution> {
    let tree = coeffs.beta.tree();
    let n = coeffs.n();
    let d = tree.dim();
    let dt = tree.dt();
    let mut y = y_with_terminal(&tree, xi, n)?;
    let mut z = AdaptedProcess::zeros(&tree, Shape::Vector(n), EntryKind::VecD, false);
    let mut az = vec![0.0; n];
    for level in (0..tree.depth()).rev() {
        for idx in 0..tree.level_len(level) {
            let u = NodeRef::new(level, idx);
            let (mean, zu) = child_stats(&tree, &y, u);
            matvec_into(coeffs.a.node(u), &zu, n, d, &mut az);
            let rhs: Vec<f64> = (0..n)
                .map(|i| mean[i] + (az[i] + coeffs.beta.node(u)[i]) * dt)
                .collect();
            let yu = solve_step(coeffs.alpha.node(u), &rhs, dt, u)?;
            y.node_mut(u).copy_from_slice(&yu);
            z.node_mut(u).copy_from_slice(&zu);
        }
    }
    let drift = coeffs.drift(&y, &z);
    Solution::assemble("backward_exact", y, z, &drift)
}

/// Ratio `(‖Y‖_{S^∞} + ‖Z‖_bmo) / (‖ξ‖_∞ + ‖β‖_{bmo½})` of a solution with `α = A = 0`.
///
/// The a-priori estimate for representation-type equations says this ratio is
/// bounded by a universal constant; returned as a diagnostic.
pub fn model_estimate_ratio(solution: &Solution, xi: &LeafValues, beta: &AdaptedProcess) -> f64 {
    let lhs = solution.diagnostics.norms_y.s_inf + solution.diagnostics.norms_z.bmo;
    let rhs = xi.sup_norm() + crate::norms::bmo_half_norm(beta);
    if rhs == 0.0 {
        if lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        lhs / rhs
    }
}
