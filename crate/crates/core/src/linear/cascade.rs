//! Row-by-row solution of lower-triangular systems.
//!
//! With `A^i_j = 0` (and `α^i_j = 0`) for `j > i`, row `i` only involves
//! `(Y^j, Z^j)` for `j ≤ i`. Once rows `1..i` are known, row `i` is a scalar
//! equation with drift `α^i_i Y^i + A^i_i·Z^i` and the known inhomogeneity
//! `β̂^i = β^i + Σ_{j<i} (A^i_j·Z^j + α^i_j Y^j)`.

use crate::error::{LabError, Result};
use crate::tree::{AdaptedProcess, EntryKind, LeafValues, NodeRef, Shape};

use super::{check_terminal, solve_1d_girsanov, solve_backward_exact, LinearCoefficients, Solution};

const UPPER_TOLERANCE: f64 = 1e-14;

/// Scalar solver used for each row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CascadeMethod {
    #[default]
    Girsanov,
    Backward,
}

fn check_lower(coeffs: &LinearCoefficients) -> Result<()> {
    let n = coeffs.n();
    for (p, m) in [(&coeffs.a, coeffs.a.entry_width()), (&coeffs.alpha, 1)] {
        for level in 0..p.num_levels() {
            for (idx, node) in p.level(level).chunks(n * n * m).enumerate() {
                for i in 0..n {
                    for j in i + 1..n {
                        for &value in &node[(i * n + j) * m..(i * n + j + 1) * m] {
                            if value.abs() > UPPER_TOLERANCE {
                                return Err(LabError::NotTriangular {
                                    node: NodeRef::new(level, idx),
                                    value,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Solves a lower-triangular system one row at a time.
pub fn solve_triangular_cascade(
    xi: &LeafValues,
    coeffs: &LinearCoefficients,
    method: CascadeMethod,
) -> Result<Solution> {
    check_lower(coeffs)?;
    let tree = coeffs.beta.tree();
    let n = coeffs.n();
    let d = tree.dim();
    check_terminal(&tree, xi, n)?;
    let mut y = AdaptedProcess::zeros(&tree, Shape::Vector(n), EntryKind::Real, true);
    let mut z = AdaptedProcess::zeros(&tree, Shape::Vector(n), EntryKind::VecD, false);

    for i in 0..n {
        let alpha = AdaptedProcess::from_fn(&tree, Shape::Matrix(1), EntryKind::Real, false, |u, v| {
            v[0] = coeffs.alpha.node(u)[i * n + i]
        });
        let a = AdaptedProcess::from_fn(&tree, Shape::Matrix(1), EntryKind::VecD, false, |u, v| {
            v.copy_from_slice(&coeffs.a.node(u)[(i * n + i) * d..(i * n + i + 1) * d])
        });
        let beta = AdaptedProcess::from_fn(&tree, Shape::Vector(1), EntryKind::Real, false, |u, v| {
            let (an, al) = (coeffs.a.node(u), coeffs.alpha.node(u));
            let (yu, zu) = (y.node(u), z.node(u));
            let mut hat = coeffs.beta.node(u)[i];
            for j in 0..i {
                hat += al[i * n + j] * yu[j];
                hat += (0..d).map(|k| an[(i * n + j) * d + k] * zu[j * d + k]).sum::<f64>();
            }
            v[0] = hat;
        });
        let row = LinearCoefficients { alpha, a, beta };
        let xi_i = xi.component(i);
        let scalar = match method {
            CascadeMethod::Girsanov => solve_1d_girsanov(&xi_i, &row)?,
            CascadeMethod::Backward => solve_backward_exact(&xi_i, &row)?,
        };
        for level in 0..=tree.depth() {
            for idx in 0..tree.level_len(level) {
                let u = NodeRef::new(level, idx);
                y.node_mut(u)[i] = scalar.y.node(u)[0];
                if level < tree.depth() {
                    z.node_mut(u)[i * d..(i + 1) * d].copy_from_slice(scalar.z.node(u));
                }
            }
        }
    }
    let drift = coeffs.drift(&y, &z);
    let name = match method {
        CascadeMethod::Girsanov => "triangular_cascade_girsanov",
        CascadeMethod::Backward => "triangular_cascade_backward",
    };
    Solution::assemble(name, y, z, &drift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::TreeModel;

    fn matrix_a(t: &TreeModel, entries: [f64; 4]) -> AdaptedProcess {
        AdaptedProcess::from_fn(t, Shape::Matrix(2), EntryKind::VecD, false, |_, v| {
            v.copy_from_slice(&entries)
        })
    }

    #[test]
    fn strictly_lower_matches_backward() {
        let t = TreeModel::new(2, 1.0, 1).unwrap();
        let mut c = LinearCoefficients::zeros(&t, 2);
        c.a = matrix_a(&t, [0.0, 0.0, 0.6, 0.0]);
        let xi = LeafValues::from_fn(&t, Shape::Vector(2), |b, out| {
            out[0] = b[0];
            out[1] = b[0];
        });
        let exact = solve_backward_exact(&xi, &c).unwrap();
        for method in [CascadeMethod::Girsanov, CascadeMethod::Backward] {
            let sol = solve_triangular_cascade(&xi, &c, method).unwrap();
            assert!(sol.distance(&exact) < 1e-10);
        }
        // row 2 picks up ∫ A²₁ Z¹ dt = 0.6 · 1 · T
        assert!((exact.y0()[1] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn diagonal_rows_decouple() {
        let t = TreeModel::new(4, 1.0, 1).unwrap();
        let mut c = LinearCoefficients::zeros(&t, 2);
        c.a = matrix_a(&t, [0.3, 0.0, 0.0, -0.2]);
        let xi = LeafValues::from_fn(&t, Shape::Vector(2), |b, out| {
            out[0] = b[0].sin();
            out[1] = b[0].cos();
        });
        let sol = solve_triangular_cascade(&xi, &c, CascadeMethod::Girsanov).unwrap();
        let mut c1 = LinearCoefficients::zeros(&t, 1);
        c1.a = AdaptedProcess::from_fn(&t, Shape::Matrix(1), EntryKind::VecD, false, |_, v| v[0] = -0.2);
        let second = solve_backward_exact(&xi.component(1), &c1).unwrap();
        assert!((sol.y0()[1] - second.y0()[0]).abs() < 1e-13);
    }

    #[test]
    fn constant_terminal_stays_constant() {
        let t = TreeModel::new(3, 1.0, 2).unwrap();
        let mut c = LinearCoefficients::zeros(&t, 2);
        c.a = AdaptedProcess::from_fn(&t, Shape::Matrix(2), EntryKind::VecD, false, |u, v| {
            v.copy_from_slice(&[0.1, 0.2, 0.0, 0.0, 0.3 * u.level as f64, -0.1, 0.2, 0.1])
        });
        let sol =
            solve_triangular_cascade(&LeafValues::constant(&t, &[1.0, -1.0]), &c, CascadeMethod::Girsanov).unwrap();
        assert!(sol.z.level(0).iter().all(|v| v.abs() < 1e-13));
        assert!((sol.y0()[0] - 1.0).abs() < 1e-13 && (sol.y0()[1] + 1.0).abs() < 1e-13);
    }

    #[test]
    fn upper_entry_is_rejected() {
        let t = TreeModel::new(2, 1.0, 1).unwrap();
        let mut c = LinearCoefficients::zeros(&t, 2);
        c.a = matrix_a(&t, [0.0, 1e-9, 0.0, 0.0]);
        let err = solve_triangular_cascade(&LeafValues::constant(&t, &[0.0, 0.0]), &c, CascadeMethod::Backward);
        assert!(matches!(err, Err(LabError::NotTriangular { .. })));
    }
}
