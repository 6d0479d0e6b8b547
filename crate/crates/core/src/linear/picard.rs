//! Picard iteration on time slices where the coefficients are small.
//!
//! Time is cut by stopping times into slices on which `‖A 1_slice‖_bmo ≤ δ`
//! and `‖α 1_slice‖_{bmo½} ≤ δ`. Slices are solved from last to first; on a
//! slice the map `Φ(R, V) = (Y, Z)` solves the frozen equation
//! `Y = Y_end + ∫(αR + AV + β) dt − ∫ Z dB` whose terminal values are the
//! already computed start values of the later slice.
//!
//! For the difference of two iterates on the tree,
//! `‖ΔY‖_{S^∞} ≤ ‖g‖_{bmo½}` and `‖ΔZ‖_bmo ≤ √2 ‖g‖_{bmo½}` where
//! `g = αΔR + AΔV`, and `‖g‖_{bmo½} ≤ δ (‖ΔR‖_{S^∞} + ‖ΔV‖_bmo)`. So `Φ` is
//! ½-Lipschitz in `S^∞ + bmo` as soon as `δ ≤ 1 / (2(1 + √2))`, the default.
//!
//! A single step whose cost alone exceeds the budget cannot be sliced further.
//! Such steps are isolated; on them `Z` is fixed by the known children, so the
//! iteration still terminates, but the slice carries no contraction certificate.

use crate::error::{LabError, Result};
use crate::norms::{conditional_tails, partition_by_cost, CostChannel, SliceMode};
use crate::tree::{matvec_into, AdaptedProcess, EntryKind, LeafValues, NodeRef, Shape};

use super::{y_with_terminal, LinearCoefficients, SliceDiagnostics, Solution};

/// `δ* = 1 / (2(1 + √2)) ≈ 0.2071`, the slice size with a ½-Lipschitz map.
pub fn contraction_threshold() -> f64 {
    1.0 / (2.0 * (1.0 + std::f64::consts::SQRT_2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub delta: f64,
    pub mode: SliceMode,
    /// Stop once successive iterates differ by less than this in `S^∞ + bmo`.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            delta: contraction_threshold(),
            mode: SliceMode::NodeGreedy,
            tolerance: 1e-10,
            max_iterations: 60,
        }
    }
}

impl PicardOptions {
    pub fn with_delta(delta: f64) -> Self {
        Self {
            delta,
            ..Self::default()
        }
    }
}

/// Consecutive non-contracting iterations tolerated before giving up.
const PATIENCE: usize = 3;

/// Solves the linear system by sliced Picard iteration.
///
/// `diagnostics.iterations` counts the iterations that changed the iterate;
/// the final confirming application of the map is not counted.
pub fn solve_sliced_picard(xi: &LeafValues, coeffs: &LinearCoefficients, options: &PicardOptions) -> Result<Solution> {
    if !(options.delta > 0.0) {
        return Err(LabError::InvalidArgument(format!(
            "delta = {} must be positive",
            options.delta
        )));
    }
    let tree = coeffs.beta.tree();
    let n = coeffs.n();
    let d = tree.dim();
    let dt = tree.dt();
    let b = tree.branching();
    let depth = tree.depth();
    let channels = [
        CostChannel::bmo(&coeffs.a, options.delta),
        CostChannel::bmo_half(&coeffs.alpha, options.delta),
    ];
    let sliced = partition_by_cost(&tree, &channels, options.mode, true)?;
    let partition = &sliced.partition;
    let m = partition.len();

    let slice_of: Vec<Vec<usize>> = (0..depth)
        .map(|level| {
            (0..tree.level_len(level))
                .map(|idx| partition.slice_of(NodeRef::new(level, idx)))
                .collect()
        })
        .collect();
    let mut oversized = vec![false; m + 1];
    for u in &sliced.oversized {
        oversized[slice_of[u.level][u.index]] = true;
    }

    let mut y = y_with_terminal(&tree, xi, n)?;
    let mut z = AdaptedProcess::zeros(&tree, Shape::Vector(n), EntryKind::VecD, false);
    let mut reports = Vec::with_capacity(m);
    let mut total = 0;
    let mut az = vec![0.0; n];
    let mut ay = vec![0.0; n];

    for k in (1..=m).rev() {
        let nodes: Vec<NodeRef> = (0..depth)
            .rev()
            .flat_map(|level| {
                let row = &slice_of[level];
                (0..row.len())
                    .filter(move |&idx| row[idx] == k)
                    .map(move |idx| NodeRef::new(level, idx))
            })
            .collect();
        if nodes.is_empty() {
            continue;
        }
        let mut previous_diff = f64::INFINITY;
        let mut worst_ratio = 0.0f64;
        let mut stalled = 0;
        let mut iterations = 0;
        loop {
            if iterations > options.max_iterations {
                return Err(LabError::MaxIterations(options.max_iterations));
            }
            let r = y.clone();
            let v = z.clone();
            let mut dy = 0.0f64;
            let mut dz_rates: Vec<Vec<f64>> = (0..depth).map(|l| vec![0.0; tree.level_len(l)]).collect();
            for &u in &nodes {
                let (mean, zu) = super::child_stats(&tree, &y, u);
                matvec_into(coeffs.a.node(u), v.node(u), n, d, &mut az);
                matvec_into(coeffs.alpha.node(u), r.node(u), n, 1, &mut ay);
                let beta = coeffs.beta.node(u);
                let yu: Vec<f64> = (0..n).map(|i| mean[i] + (ay[i] + az[i] + beta[i]) * dt).collect();
                dy = dy.max(
                    yu.iter()
                        .zip(r.node(u))
                        .map(|(a, c)| (a - c) * (a - c))
                        .sum::<f64>()
                        .sqrt(),
                );
                dz_rates[u.level][u.index] = zu.iter().zip(v.node(u)).map(|(a, c)| (a - c) * (a - c)).sum();
                y.node_mut(u).copy_from_slice(&yu);
                z.node_mut(u).copy_from_slice(&zu);
            }
            let dz = conditional_tails(&dz_rates, b, dt)
                .iter()
                .flatten()
                .fold(0.0f64, |acc, &t| acc.max(t))
                .sqrt();
            let diff = dy + dz;
            if diff < options.tolerance {
                break;
            }
            iterations += 1;
            if previous_diff.is_finite() && previous_diff >= options.tolerance {
                let ratio = diff / previous_diff;
                worst_ratio = worst_ratio.max(ratio);
                stalled = if ratio >= 1.0 { stalled + 1 } else { 0 };
                if stalled >= PATIENCE {
                    return Err(LabError::NoContraction {
                        slice: k,
                        factor: ratio,
                    });
                }
            }
            previous_diff = diff;
        }
        total += iterations;
        reports.push(SliceDiagnostics {
            slice: k,
            iterations,
            contraction: worst_ratio,
            oversized: oversized[k],
        });
    }
    reports.reverse();

    let drift = coeffs.drift(&y, &z);
    let mut solution = Solution::assemble("sliced_picard", y, z, &drift)?;
    solution.diagnostics.iterations = total;
    solution.diagnostics.slices = reports;
    Ok(solution)
}
