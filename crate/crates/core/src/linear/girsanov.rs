//! Scalar solver by discrete change of measure.
//!
//! Under `Q` with density `W_N = Π (1 + A·ΔB)` the drift `A·Z` disappears.
//! With the discount `D_k = Π_{j<k} (1 − α_j dt)^{-1}` and
//! `P_l = Σ_{k<l} D_{k+1} β_k dt`, the process `W_l (D_l Y_l + P_l)` is a
//! `P`-martingale, hence
//! `Y_l = (E_l[W_N (D_N ξ + P_N)] / W_l − P_l) / D_l`.

use crate::error::{LabError, Result};
use crate::tree::{AdaptedProcess, EntryKind, LeafValues, NodeRef, Shape};

use super::{check_terminal, LinearCoefficients, Solution};

/// Solves a scalar (`n = 1`) linear equation through the discrete Girsanov weights.
pub fn solve_1d_girsanov(xi: &LeafValues, coeffs: &LinearCoefficients) -> Result<Solution> {
    if coeffs.n() != 1 {
        return Err(LabError::InvalidArgument(format!(
            "change of measure solver needs n = 1, got n = {}",
            coeffs.n()
        )));
    }
    let tree = coeffs.beta.tree();
    check_terminal(&tree, xi, 1)?;
    let b = tree.branching();
    let dt = tree.dt();
    let depth = tree.depth();

    // Forward pass: weight W, discount D and accumulated inhomogeneity P at every node.
    let mut w = vec![vec![1.0]];
    let mut disc = vec![vec![1.0]];
    let mut acc = vec![vec![0.0]];
    for level in 0..depth {
        let len = tree.level_len(level);
        let mut nw = vec![0.0; len * b];
        let mut nd = vec![0.0; len * b];
        let mut np = vec![0.0; len * b];
        for idx in 0..len {
            let u = NodeRef::new(level, idx);
            let pivot = 1.0 - coeffs.alpha.node(u)[0] * dt;
            if pivot.abs() < 1e-14 {
                return Err(LabError::SingularStep(u));
            }
            let d_next = disc[level][idx] / pivot;
            let p_next = acc[level][idx] + d_next * coeffs.beta.node(u)[0] * dt;
            let a = coeffs.a.node(u);
            for j in 0..b {
                let weight = 1.0 + a.iter().zip(tree.increment(j)).map(|(x, y)| x * y).sum::<f64>();
                if weight <= 0.0 {
                    return Err(LabError::MeasureNotEquivalent { node: u, weight });
                }
                nw[idx * b + j] = w[level][idx] * weight;
                nd[idx * b + j] = d_next;
                np[idx * b + j] = p_next;
            }
        }
        w.push(nw);
        disc.push(nd);
        acc.push(np);
    }

    let g: Vec<f64> = (0..tree.num_leaves())
        .map(|leaf| w[depth][leaf] * (disc[depth][leaf] * xi.leaf(leaf)[0] + acc[depth][leaf]))
        .collect();
    let eg = tree.conditional_expectations(&LeafValues::new(&tree, Shape::Scalar, g)?)?;

    let mut y = AdaptedProcess::zeros(&tree, Shape::Vector(1), EntryKind::Real, true);
    for level in 0..=depth {
        for idx in 0..tree.level_len(level) {
            let u = NodeRef::new(level, idx);
            let value = if level == depth {
                xi.leaf(idx)[0]
            } else {
                (eg.node(u)[0] / w[level][idx] - acc[level][idx]) / disc[level][idx]
            };
            y.node_mut(u)[0] = value;
        }
    }
    let z = tree.integrand_of(&y)?;
    let drift = coeffs.drift(&y, &z);
    Solution::assemble("girsanov_1d", y, z, &drift)
}
