//! Systems whose coefficient is an outer product `A = a bᵀ`.
//!
//! Then `(AZ)^i = a^i·(bᵀZ)`, and `U = bᵀY` solves the scalar equation
//! `U = bᵀξ + ∫((bᵀa)·V + bᵀβ) dt − ∫ V dB`. Given `V`, the full system is a
//! representation-type equation `Y = ξ + ∫(aV + β) dt − ∫ Z dB`.

use crate::error::{LabError, Result};
use crate::tree::{AdaptedProcess, EntryKind, LeafValues, NodeRef, Shape, TreeModel};

use super::{solve_1d_girsanov, solve_backward_exact, LinearCoefficients, Solution};

const V_TOLERANCE: f64 = 1e-9;

/// `A^i_j = a^i b_j` with adapted `a` (vector of `R^d` entries) and constant `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredCoefficients {
    pub a: AdaptedProcess,
    pub b: Vec<f64>,
    pub beta: AdaptedProcess,
}

impl FactoredCoefficients {
    pub fn new(a: AdaptedProcess, b: Vec<f64>, beta: AdaptedProcess) -> Result<Self> {
        let n = b.len();
        a.expect(Shape::Vector(n), EntryKind::VecD, "a")?;
        beta.expect(Shape::Vector(n), EntryKind::Real, "beta")?;
        Ok(Self { a, b, beta })
    }

    pub fn n(&self) -> usize {
        self.b.len()
    }

    /// The unfactored coefficients `(0, a bᵀ, β)`.
    pub fn to_coefficients(&self, tree: &TreeModel) -> LinearCoefficients {
        let n = self.n();
        let d = tree.dim();
        let a = AdaptedProcess::from_fn(tree, Shape::Matrix(n), EntryKind::VecD, false, |u, v| {
            let au = self.a.node(u);
            for i in 0..n {
                for j in 0..n {
                    for k in 0..d {
                        v[(i * n + j) * d + k] = au[i * d + k] * self.b[j];
                    }
                }
            }
        });
        LinearCoefficients {
            alpha: AdaptedProcess::zeros(tree, Shape::Matrix(n), EntryKind::Real, false),
            a,
            beta: self.beta.clone(),
        }
    }
}

/// Solves the scalar equation for `U = bᵀY`, then the representation-type system.
pub fn solve_outer_product(xi: &LeafValues, factored: &FactoredCoefficients) -> Result<Solution> {
    let tree = factored.a.tree();
    let n = factored.n();
    let d = tree.dim();
    let b = &factored.b;

    let scalar = LinearCoefficients {
        alpha: AdaptedProcess::zeros(&tree, Shape::Matrix(1), EntryKind::Real, false),
        a: AdaptedProcess::from_fn(&tree, Shape::Matrix(1), EntryKind::VecD, false, |u, v| {
            let au = factored.a.node(u);
            for (k, vk) in v.iter_mut().enumerate() {
                *vk = (0..n).map(|i| b[i] * au[i * d + k]).sum();
            }
        }),
        beta: AdaptedProcess::from_fn(&tree, Shape::Vector(1), EntryKind::Real, false, |u, v| {
            v[0] = factored.beta.node(u).iter().zip(b).map(|(x, y)| x * y).sum();
        }),
    };
    let uv = solve_1d_girsanov(&xi.dot(b), &scalar)?;

    let mut rep = LinearCoefficients::zeros(&tree, n);
    rep.beta = AdaptedProcess::from_fn(&tree, Shape::Vector(n), EntryKind::Real, false, |u, out| {
        let (au, v) = (factored.a.node(u), uv.z.node(u));
        for i in 0..n {
            out[i] = factored.beta.node(u)[i] + (0..d).map(|k| au[i * d + k] * v[k]).sum::<f64>();
        }
    });
    let solved = solve_backward_exact(xi, &rep)?;

    for level in 0..tree.depth() {
        for idx in 0..tree.level_len(level) {
            let u = NodeRef::new(level, idx);
            let (z, v) = (solved.z.node(u), uv.z.node(u));
            for k in 0..d {
                let btz: f64 = (0..n).map(|i| b[i] * z[i * d + k]).sum();
                if (btz - v[k]).abs() > V_TOLERANCE * (1.0 + v[k].abs()) {
                    return Err(LabError::InvariantViolated(format!(
                        "bᵀZ = {btz} differs from V = {} at {u}",
                        v[k]
                    )));
                }
            }
        }
    }
    let coeffs = factored.to_coefficients(&tree);
    let drift = coeffs.drift(&solved.y, &solved.z);
    Solution::assemble("outer_product", solved.y, solved.z, &drift)
}
