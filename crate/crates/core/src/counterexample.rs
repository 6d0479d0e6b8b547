//! A candidate nontrivial solution of a homogeneous linear system with zero terminal value.
//!
//! Take `η = π` where `B_T ≥ 0` and `η = −π` otherwise, its martingale
//! `M_t = E_t[η]` with integrand `H`, and `Y = (cos M, sin M) + (1, 0)`, which
//! runs on the circle of radius one around `(1, 0)` and ends at the origin.
//! Reading `Y` in the stereographic chart of the unit sphere in `R³`, the
//! martingale condition `dY = −½ Γ(Y)(Z, Z) dt + Z dB` becomes the linear
//! equation `Y = ∫ A Z dt − ∫ Z dB` with `A` built from the Christoffel symbols
//! `Γ` evaluated along `Y`. Since `Y_T = 0`, the pair `(0, 0)` solves the same
//! equation, which is the non-uniqueness phenomenon. On the tree the discrete
//! equation is uniquely solvable, and [`residual`] measures how far the
//! continuous-time pair is from solving it.
//!
//! The event `B_T = 0` has positive probability on even-depth trees and counts
//! as `B_T ≥ 0`.
//!
//! `M` is computed in units of `π` and the trigonometric functions are
//! evaluated with exact reduction, so `Y` vanishes exactly on the leaves.

use crate::error::{LabError, Result};
use crate::linear::{mp_norm, residual as one_step_residual, rp_ratio, stochastic_exponential};
use crate::norms::{bmo_norm, sup_norm};
use crate::tree::{AdaptedProcess, EntryKind, LeafValues, NodeRef, Shape, TreeModel};

/// Christoffel symbols `Γ^k_{ij}` of the round sphere in the stereographic chart,
/// indexed `[k][i][j]`.
pub fn christoffel(x: [f64; 2]) -> [[[f64; 2]; 2]; 2] {
    let factor = -2.0 / (1.0 + x[0] * x[0] + x[1] * x[1]);
    let delta = |a: usize, b: usize| f64::from(u8::from(a == b));
    let mut g = [[[0.0; 2]; 2]; 2];
    for (k, gk) in g.iter_mut().enumerate() {
        for (i, gki) in gk.iter_mut().enumerate() {
            for (j, gkij) in gki.iter_mut().enumerate() {
                *gkij = factor * (x[j] * delta(i, k) + x[i] * delta(j, k) - x[k] * delta(i, j));
            }
        }
    }
    g
}

/// Stereographic projection from the north pole `(0, 0, 1)` of the unit sphere in `R³`.
pub fn stereographic(p: [f64; 3]) -> Result<[f64; 2]> {
    if p[2] == 1.0 {
        return Err(LabError::NorthPole);
    }
    Ok([p[0] / (1.0 - p[2]), p[1] / (1.0 - p[2])])
}

/// Inverse of [`stereographic`].
pub fn inverse_stereographic(x: [f64; 2]) -> [f64; 3] {
    let r2 = x[0] * x[0] + x[1] * x[1];
    [
        2.0 * x[0] / (1.0 + r2),
        2.0 * x[1] / (1.0 + r2),
        (r2 - 1.0) / (r2 + 1.0),
    ]
}

/// `sin(π x)`, exact at integers and half-integers.
fn sin_pi(x: f64) -> f64 {
    let r = x.rem_euclid(2.0);
    match r {
        r if r == 0.0 || r == 1.0 => 0.0,
        0.5 => 1.0,
        1.5 => -1.0,
        r => (std::f64::consts::PI * r).sin(),
    }
}

/// `cos(π x)`, exact at integers and half-integers.
fn cos_pi(x: f64) -> f64 {
    sin_pi(x + 0.5)
}

/// The reconstructed instance on a tree with `d = 1`, `n = 2`, `T = 1`.
#[derive(Debug, Clone)]
pub struct SphereInstance {
    pub tree: TreeModel,
    pub eta: LeafValues,
    /// The martingale `E_t[η]`, scalar, terminal-inclusive.
    pub m: AdaptedProcess,
    /// Integrand of `M`.
    pub h: AdaptedProcess,
    pub y: AdaptedProcess,
    pub z: AdaptedProcess,
    pub a: AdaptedProcess,
}

pub fn build_instance(depth: usize) -> Result<SphereInstance> {
    if depth < 2 {
        return Err(LabError::InvalidArgument(format!(
            "the sphere instance needs N >= 2, got {depth}"
        )));
    }
    let tree = TreeModel::new(depth, 1.0, 1)?;
    let units = LeafValues::from_fn(&tree, Shape::Scalar, |b, out| {
        out[0] = if b[0] >= 0.0 { 1.0 } else { -1.0 }
    });
    let (m_units, h_units) = tree.martingale_represent(&units)?;
    let pi = std::f64::consts::PI;
    let eta = units.map(Shape::Scalar, |x, out| out[0] = pi * x[0]);
    let m = m_units.scaled(pi);
    let h = h_units.scaled(pi);

    let y = AdaptedProcess::from_fn(&tree, Shape::Vector(2), EntryKind::Real, true, |u, out| {
        let theta = m_units.node(u)[0];
        out[0] = cos_pi(theta) + 1.0;
        out[1] = sin_pi(theta);
    });
    let z = AdaptedProcess::from_fn(&tree, Shape::Vector(2), EntryKind::VecD, false, |u, out| {
        let theta = m_units.node(u)[0];
        let hu = h.node(u)[0];
        out[0] = -sin_pi(theta) * hu;
        out[1] = cos_pi(theta) * hu;
    });
    let a = AdaptedProcess::from_fn(&tree, Shape::Matrix(2), EntryKind::VecD, false, |u, out| {
        let yu = y.node(u);
        let zu = z.node(u);
        let g = christoffel([yu[0], yu[1]]);
        out[0] = -0.5 * (g[0][0][0] * zu[0] + 2.0 * g[0][0][1] * zu[1]);
        out[1] = -0.5 * g[0][1][1] * zu[1];
        out[2] = -0.5 * (g[1][0][0] * zu[0] + 2.0 * g[1][0][1] * zu[1]);
        out[3] = -0.5 * g[1][1][1] * zu[1];
    });
    Ok(SphereInstance {
        tree,
        eta,
        m,
        h,
        y,
        z,
        a,
    })
}

impl SphereInstance {
    /// The drift `A Z` of the pair `(Y, Z)`.
    pub fn drift(&self) -> AdaptedProcess {
        AdaptedProcess::matvec(&self.a, &self.z).expect("A and Z share the tree")
    }

    /// Sup of the one-step defects of the nontrivial pair in `Y = ∫ AZ dt − ∫ Z dB`.
    pub fn residual(&self) -> f64 {
        residual(self)
    }
}

/// Sup over nodes and children of `|Y_u − Y_c − (A_u Z_u) dt + Z_u ΔB_c|`.
pub fn residual(inst: &SphereInstance) -> f64 {
    one_step_residual(&inst.y, &inst.z, &inst.drift()).expect("instance processes share the tree")
}

/// One row of [`non_uniqueness_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub depth: usize,
    pub residual: f64,
    pub sup_y: f64,
    pub bmo_z: f64,
    pub bmo_a: f64,
    /// `(p, rp_ratio)` for `p ∈ {1.25, 1.5, 2, 3}`.
    pub rp: Vec<(f64, f64)>,
    pub mp_2: f64,
}

/// Exponents probed by the report.
pub const REPORT_EXPONENTS: [f64; 4] = [1.25, 1.5, 2.0, 3.0];

impl ReportRow {
    pub fn csv_header() -> Vec<String> {
        let mut h: Vec<String> = ["N", "residual", "sup_Y", "bmo_Z", "bmo_A"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(REPORT_EXPONENTS.iter().map(|p| format!("rp_{p}")));
        h.push("mp_2".into());
        h
    }

    pub fn csv_values(&self) -> Vec<String> {
        let mut v = vec![
            self.depth.to_string(),
            self.residual.to_string(),
            self.sup_y.to_string(),
            self.bmo_z.to_string(),
            self.bmo_a.to_string(),
        ];
        v.extend(self.rp.iter().map(|(_, r)| r.to_string()));
        v.push(self.mp_2.to_string());
        v
    }
}

pub fn report_row(depth: usize) -> Result<ReportRow> {
    let inst = build_instance(depth)?;
    let exp = stochastic_exponential(&inst.a)?;
    Ok(ReportRow {
        depth,
        residual: inst.residual(),
        sup_y: sup_norm(&inst.y),
        bmo_z: bmo_norm(&inst.z),
        bmo_a: bmo_norm(&inst.a),
        rp: REPORT_EXPONENTS.iter().map(|&p| (p, rp_ratio(&exp, p))).collect(),
        mp_2: mp_norm(&exp, 2.0),
    })
}

/// Residual, size of the nontrivial solution and reverse-Hölder growth per depth.
pub fn non_uniqueness_report(depths: &[usize]) -> Result<Vec<ReportRow>> {
    depths.iter().map(|&n| report_row(n)).collect()
}

/// The node with the largest one-step defect, with its defect.
pub fn worst_defect_node(inst: &SphereInstance) -> (NodeRef, f64) {
    let tree = &inst.tree;
    let drift = inst.drift();
    let dt = tree.dt();
    let mut worst = (NodeRef::ROOT, 0.0);
    for level in 0..tree.depth() {
        for idx in 0..tree.level_len(level) {
            let u = NodeRef::new(level, idx);
            for j in 0..2 {
                let c = u.child(2, j);
                let inc = tree.increment(j)[0];
                let defect: f64 = (0..2)
                    .map(|i| {
                        let e = inst.y.node(u)[i] - inst.y.node(c)[i] - drift.node(u)[i] * dt + inst.z.node(u)[i] * inc;
                        e * e
                    })
                    .sum::<f64>()
                    .sqrt();
                if defect > worst.1 {
                    worst = (u, defect);
                }
            }
        }
    }
    worst
}
