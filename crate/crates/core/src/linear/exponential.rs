//! Matrix stochastic exponential `dS = S dM`, `M = ∫ A dB`, and its uses.
//!
//! On the tree `S_{k+1} = S_k (I + A_k ΔB)` with `(AΔB)^i_j = A^i_j·ΔB`, and the
//! inverse process obeys `X_{k+1} = (I + A_k ΔB)^{-1} X_k`. Because
//! `Y_u = E_u[(I + A_u ΔB) Y_c]` for the homogeneous equation, `S Y` is a
//! martingale and `Y_u = X_u E_u[S_T ξ]`, exactly, in both dimensions.

use nalgebra::DMatrix;

use crate::error::{LabError, Result};
use crate::tree::{AdaptedProcess, EntryKind, LeafValues, NodeRef, Shape, TreeModel};

use super::{LinearCoefficients, Solution};

/// `S`, its inverse process `X`, and the nodes where a factor was singular.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixExponential {
    pub s: AdaptedProcess,
    pub x_inv: AdaptedProcess,
    /// Nodes `u` at which some `I + A_u ΔB` is singular; `X` is invalid below them.
    pub singular: Vec<NodeRef>,
    valid: Vec<Vec<bool>>,
}

impl MatrixExponential {
    pub fn n(&self) -> usize {
        self.s.shape().n()
    }

    /// Whether `X` is a genuine inverse of `S` at `u`.
    pub fn inverse_valid(&self, u: NodeRef) -> bool {
        self.valid[u.level][u.index]
    }

    fn require_invertible(&self) -> Result<()> {
        match self.singular.first() {
            Some(&u) => Err(LabError::SingularFactor(u)),
            None => Ok(()),
        }
    }
}

fn to_matrix(values: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, values)
}

fn store(m: &DMatrix<f64>, out: &mut [f64]) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = m[(i, j)];
        }
    }
}

/// Inverse of a step factor, `None` when it is singular up to rounding.
fn invert(factor: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = factor.nrows() as i32;
    let scale = factor.norm().max(1.0).powi(n);
    if factor.determinant().abs() <= SINGULAR_TOLERANCE * scale {
        return None;
    }
    factor.clone().try_inverse()
}

const SINGULAR_TOLERANCE: f64 = 1e-12;

/// Builds `S` and `X` along every path.
pub fn stochastic_exponential(a: &AdaptedProcess) -> Result<MatrixExponential> {
    let n = a.shape().n();
    a.expect(Shape::Matrix(n), EntryKind::VecD, "A")?;
    let tree = a.tree();
    let b = tree.branching();
    let d = tree.dim();
    let mut s = AdaptedProcess::zeros(&tree, Shape::Matrix(n), EntryKind::Real, true);
    let mut x = AdaptedProcess::zeros(&tree, Shape::Matrix(n), EntryKind::Real, true);
    let identity = DMatrix::<f64>::identity(n, n);
    store(&identity, s.node_mut(NodeRef::ROOT));
    store(&identity, x.node_mut(NodeRef::ROOT));
    let mut valid: Vec<Vec<bool>> = (0..=tree.depth()).map(|k| vec![true; tree.level_len(k)]).collect();
    let mut singular = Vec::new();

    for level in 0..tree.depth() {
        for idx in 0..tree.level_len(level) {
            let u = NodeRef::new(level, idx);
            let su = to_matrix(s.node(u), n);
            let xu = to_matrix(x.node(u), n);
            let au = a.node(u);
            let mut flagged = false;
            for j in 0..b {
                let inc = tree.increment(j);
                let factor = DMatrix::from_fn(n, n, |r, c| {
                    let e = &au[(r * n + c) * d..(r * n + c + 1) * d];
                    f64::from(u8::from(r == c)) + e.iter().zip(inc).map(|(p, q)| p * q).sum::<f64>()
                });
                let child = u.child(b, j);
                store(&(&su * &factor), s.node_mut(child));
                let inverse = valid[level][idx].then(|| invert(&factor)).flatten();
                match inverse {
                    Some(inv) => store(&(inv * &xu), x.node_mut(child)),
                    None => {
                        valid[child.level][child.index] = false;
                        x.node_mut(child).iter_mut().for_each(|v| *v = f64::NAN);
                        if valid[level][idx] && !flagged {
                            singular.push(u);
                            flagged = true;
                        }
                    }
                }
            }
        }
    }
    Ok(MatrixExponential {
        s,
        x_inv: x,
        singular,
        valid,
    })
}

/// `Y_u = X_u E_u[S_T ξ]`, the solution of `Y = ξ + ∫ AZ dt − ∫ Z dB`.
pub fn representation_solve(xi: &LeafValues, a: &AdaptedProcess) -> Result<Solution> {
    let exp = stochastic_exponential(a)?;
    exp.require_invertible()?;
    let tree = a.tree();
    let n = exp.n();
    super::check_terminal(&tree, xi, n)?;
    let depth = tree.depth();
    let mut values = vec![0.0; tree.num_leaves() * n];
    for leaf in 0..tree.num_leaves() {
        let st = to_matrix(exp.s.node(NodeRef::new(depth, leaf)), n);
        let v = st * nalgebra::DVector::from_column_slice(xi.leaf(leaf));
        values[leaf * n..(leaf + 1) * n].copy_from_slice(v.as_slice());
    }
    let martingale = tree.conditional_expectations(&LeafValues::new(&tree, Shape::Vector(n), values)?)?;
    let mut y = AdaptedProcess::zeros(&tree, Shape::Vector(n), EntryKind::Real, true);
    for level in 0..=depth {
        for idx in 0..tree.level_len(level) {
            let u = NodeRef::new(level, idx);
            let value = if level == depth {
                xi.leaf(idx).to_vec()
            } else {
                let xu = to_matrix(exp.x_inv.node(u), n);
                (xu * nalgebra::DVector::from_column_slice(martingale.node(u)))
                    .as_slice()
                    .to_vec()
            };
            y.node_mut(u).copy_from_slice(&value);
        }
    }
    let z = tree.integrand_of(&y)?;
    let mut coeffs = LinearCoefficients::zeros(&tree, n);
    coeffs.a = a.clone();
    let drift = coeffs.drift(&y, &z);
    Solution::assemble("representation", y, z, &drift)
}

/// Reverse-Hölder diagnostics of a stochastic exponential (Frobenius norm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseHoelder {
    /// `max_u E_u[|S_T|^p] / |S_u|^p`.
    pub rp_ratio: f64,
    /// `max_u E_u[max_{t ≥ u} |X_u S_t|^p] / |I|^p`, normalized to 1 for `S ≡ I`.
    pub rp_tilde: f64,
    /// `E[max_t |S_t|^p]^{1/p}`.
    pub mp_norm: f64,
}

fn frobenius(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `max_u E_u[|S_T|^p] / |S_u|^p`.
pub fn rp_ratio(exp: &MatrixExponential, p: f64) -> f64 {
    let tree = exp.s.tree();
    let depth = tree.depth();
    let leaves: Vec<f64> = (0..tree.num_leaves())
        .map(|leaf| frobenius(exp.s.node(NodeRef::new(depth, leaf))).powf(p))
        .collect();
    let cond = tree
        .conditional_expectations(&LeafValues::new(&tree, Shape::Scalar, leaves).expect("one value per leaf"))
        .expect("leaf field on its own tree");
    let mut worst = 0.0f64;
    for level in 0..=depth {
        for idx in 0..tree.level_len(level) {
            let u = NodeRef::new(level, idx);
            let numerator = cond.node(u)[0];
            let denominator = frobenius(exp.s.node(u)).powf(p);
            let ratio = if denominator > 0.0 {
                numerator / denominator
            } else if numerator > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            worst = worst.max(ratio);
        }
    }
    worst
}

/// `max_u E_u[max_{t ≥ level(u)} |X_u S_t|^p] / |I|^p`, one subtree sweep per node.
///
/// Since `|S_T| ≤ |S_u| |X_u S_T|`, the reverse-Hölder ratio is at most
/// `n^{p/2}` times this quantity.
pub fn rp_tilde(exp: &MatrixExponential, p: f64) -> Result<f64> {
    exp.require_invertible()?;
    let tree = exp.s.tree();
    let n = exp.n();
    let b = tree.branching();
    let depth = tree.depth();
    let mut worst = 0.0f64;
    for level in 0..=depth {
        for idx in 0..tree.level_len(level) {
            let u = NodeRef::new(level, idx);
            let xu = to_matrix(exp.x_inv.node(u), n);
            let mut running = vec![frobenius((&xu * to_matrix(exp.s.node(u), n)).as_slice()).powf(p)];
            let mut first = idx;
            for l in level + 1..=depth {
                first *= b;
                running = (0..running.len() * b)
                    .map(|offset| {
                        let v = NodeRef::new(l, first + offset);
                        let value = frobenius((&xu * to_matrix(exp.s.node(v), n)).as_slice()).powf(p);
                        value.max(running[offset / b])
                    })
                    .collect();
            }
            let mean = running.iter().sum::<f64>() / running.len() as f64;
            worst = worst.max(mean);
        }
    }
    Ok(worst / (n as f64).powf(p / 2.0))
}

/// `E[max_t |S_t|^p]^{1/p}`.
pub fn mp_norm(exp: &MatrixExponential, p: f64) -> f64 {
    crate::norms::sq_norm(&exp.s, p)
}

/// All three reverse-Hölder diagnostics.
pub fn reverse_hoelder_probe(exp: &MatrixExponential, p: f64) -> Result<ReverseHoelder> {
    if !(p > 1.0) {
        return Err(LabError::InvalidArgument(format!(
            "reverse Hölder exponent p = {p} must exceed 1"
        )));
    }
    Ok(ReverseHoelder {
        rp_ratio: rp_ratio(exp, p),
        rp_tilde: rp_tilde(exp, p)?,
        mp_norm: mp_norm(exp, p),
    })
}

/// Largest `|X_u S_u − I|` and `|S_u X_u − I|` over nodes with a valid inverse.
pub fn inverse_defect(exp: &MatrixExponential) -> f64 {
    let tree: TreeModel = exp.s.tree();
    let n = exp.n();
    let identity = DMatrix::<f64>::identity(n, n);
    let mut worst = 0.0f64;
    for level in 0..=tree.depth() {
        for idx in 0..tree.level_len(level) {
            let u = NodeRef::new(level, idx);
            if !exp.inverse_valid(u) {
                continue;
            }
            let s = to_matrix(exp.s.node(u), n);
            let x = to_matrix(exp.x_inv.node(u), n);
            worst = worst
                .max((&x * &s - &identity).norm())
                .max((&s * &x - &identity).norm());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::solve_backward_exact;

    fn constant_a(t: &TreeModel, n: usize, entries: &[f64]) -> AdaptedProcess {
        AdaptedProcess::from_fn(t, Shape::Matrix(n), EntryKind::VecD, false, |_, v| {
            v.copy_from_slice(entries)
        })
    }

    #[test]
    fn zero_coefficient_is_identity() {
        let t = TreeModel::new(3, 1.0, 2).unwrap();
        let e = stochastic_exponential(&constant_a(&t, 2, &[0.0; 8])).unwrap();
        assert!((0..=3).all(|k| e.s.level(k).chunks(4).all(|m| m == [1.0, 0.0, 0.0, 1.0])));
        let r = reverse_hoelder_probe(&e, 2.0).unwrap();
        assert!((r.rp_ratio - 1.0).abs() < 1e-14 && (r.rp_tilde - 1.0).abs() < 1e-14);
        assert!((r.mp_norm - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn scalar_one_step() {
        let t = TreeModel::new(1, 1.0, 1).unwrap();
        let e = stochastic_exponential(&constant_a(&t, 1, &[0.3])).unwrap();
        let leaves = e.s.level(1);
        assert!((leaves[0] - 1.3).abs() < 1e-15 && (leaves[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn nilpotent_telescopes() {
        let t = TreeModel::new(6, 1.0, 1).unwrap();
        let e = stochastic_exponential(&constant_a(&t, 2, &[0.0, 0.0, 0.7, 0.0])).unwrap();
        let b = t.brownian();
        for leaf in 0..t.num_leaves() {
            let u = NodeRef::new(6, leaf);
            let bt = b.node(u)[0];
            let s = e.s.node(u);
            assert!((s[0] - 1.0).abs() < 1e-14 && s[1].abs() < 1e-14);
            assert!((s[2] - 0.7 * bt).abs() < 1e-13 && (s[3] - 1.0).abs() < 1e-14);
        }
        assert!(inverse_defect(&e) < 1e-12);
    }

    #[test]
    fn singular_factor_is_recorded() {
        // step 1/2, so 1 + 2·ΔB vanishes on the down move
        let t = TreeModel::new(4, 1.0, 1).unwrap();
        let a = AdaptedProcess::from_fn(&t, Shape::Matrix(1), EntryKind::VecD, false, |u, v| {
            v[0] = if u.level == 1 && u.index == 0 { 2.0 } else { 0.1 }
        });
        let e = stochastic_exponential(&a).unwrap();
        assert_eq!(e.singular, vec![NodeRef::new(1, 0)]);
        assert!(!e.inverse_valid(NodeRef::new(2, 1)));
        assert!(!e.inverse_valid(NodeRef::new(4, 5)));
        assert!(e.inverse_valid(NodeRef::new(2, 0)));
        assert!(e.inverse_valid(NodeRef::new(2, 2)));
        assert!(matches!(rp_tilde(&e, 2.0), Err(LabError::SingularFactor(_))));
        assert!(rp_ratio(&e, 2.0).is_finite());
    }

    #[test]
    fn representation_matches_backward() {
        for dim in [1, 2] {
            let t = TreeModel::new(4, 1.0, dim).unwrap();
            let a = AdaptedProcess::from_fn(&t, Shape::Matrix(2), EntryKind::VecD, false, |u, v| {
                for (i, x) in v.iter_mut().enumerate() {
                    *x = 0.3 * (((u.index + 3 * i + u.level) % 7) as f64 / 3.0 - 1.0);
                }
            });
            let xi = LeafValues::from_fn(&t, Shape::Vector(2), |b, out| {
                out[0] = b[0].sin();
                out[1] = b.iter().sum::<f64>().abs();
            });
            let sol = representation_solve(&xi, &a).unwrap();
            let mut c = LinearCoefficients::zeros(&t, 2);
            c.a = a.clone();
            let exact = solve_backward_exact(&xi, &c).unwrap();
            assert!(sol.distance(&exact) < 1e-12);
            assert!(sol.diagnostics.residual_sup < 1e-12);
        }
    }
}
