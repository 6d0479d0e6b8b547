//! Structural checks for drivers and solutions: positive spanning, condition
//! (AB) on a grid, the triangular growth class on random probes, and the
//! submartingale consequence of (AB) on a computed solution.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};
use crate::linear::Solution;
use crate::tree::{NodeRef, TreeModel};

use super::{AbData, Driver};

/// Residual tolerance for positive spanning.
const SPAN_TOL: f64 = 1e-9;

/// Lawson–Hanson nonnegative least squares: `argmin_{x ≥ 0} |A x − b|`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let m = a.ncols();
    let tol = 1e-12 * (1.0 + a.amax() * b.amax()) * m.max(1) as f64;
    let mut x = DVector::zeros(m);
    let mut passive = vec![false; m];
    let gradient = |x: &DVector<f64>| a.transpose() * (b - a * x);
    let mut w = gradient(&x);
    for _ in 0..3 * m + 10 {
        let next = (0..m)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = next else { break };
        passive[j] = true;
        loop {
            let s = passive_solve(a, b, &passive);
            if (0..m).filter(|&i| passive[i]).all(|i| s[i] > 0.0) {
                x = s;
                break;
            }
            let step = (0..m)
                .filter(|&i| passive[i] && s[i] <= 0.0)
                .map(|i| x[i] / (x[i] - s[i]))
                .fold(f64::INFINITY, f64::min);
            x += (&s - &x) * step;
            for i in 0..m {
                if passive[i] && x[i] <= tol {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        w = gradient(&x);
    }
    x
}

/// Unconstrained least squares on the passive columns, zero elsewhere.
fn passive_solve(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..a.ncols()).filter(|&j| passive[j]).collect();
    let sub = DMatrix::from_fn(a.nrows(), cols.len(), |i, k| a[(i, cols[k])]);
    let sol = sub
        .svd(true, true)
        .solve(b, 1e-14)
        .unwrap_or_else(|_| DVector::zeros(cols.len()));
    let mut s = DVector::zeros(a.ncols());
    for (k, &j) in cols.iter().enumerate() {
        s[j] = sol[k];
    }
    s
}

/// Whether the nonnegative cone of `vecs` is all of `ℝⁿ`: each `±e_i` is a
/// nonnegative combination up to residual `1e−9`.
pub fn positively_spans(vecs: &[Vec<f64>]) -> bool {
    let Some(n) = vecs.first().map(Vec::len) else {
        return false;
    };
    if n == 0 || vecs.iter().any(|v| v.len() != n) {
        return false;
    }
    let a = DMatrix::from_fn(n, vecs.len(), |i, j| vecs[j][i]);
    (0..2 * n).all(|t| {
        let mut target = DVector::zeros(n);
        target[t / 2] = if t % 2 == 0 { 1.0 } else { -1.0 };
        let c = nnls(&a, &target);
        (&a * c - target).norm() <= SPAN_TOL
    })
}

/// Grid for [`check_ab`]: every coordinate of `y` and `z` ranges over
/// `points` equispaced values in `[−half_width, half_width]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbGrid {
    pub y_half_width: f64,
    pub z_half_width: f64,
    pub points: usize,
    /// Nodes visited, spread evenly over the tree.
    pub max_nodes: usize,
}

impl Default for AbGrid {
    fn default() -> Self {
        Self {
            y_half_width: 2.0,
            z_half_width: 3.0,
            points: 5,
            max_nodes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbReport {
    pub spans: bool,
    /// `min (ρ + ½|a_mᵀz|² − a_mᵀf)` over the grid, nodes and vectors.
    pub worst_margin: f64,
    pub worst_node: Option<NodeRef>,
    pub evaluations: usize,
    pub pass: bool,
}

fn sample_nodes(tree: &TreeModel, max_nodes: usize) -> Vec<NodeRef> {
    let all: Vec<NodeRef> = (0..tree.depth())
        .flat_map(|l| (0..tree.level_len(l)).map(move |i| NodeRef::new(l, i)))
        .collect();
    if all.len() <= max_nodes.max(1) {
        return all;
    }
    let stride = all.len() as f64 / max_nodes.max(1) as f64;
    (0..max_nodes.max(1))
        .map(|k| all[(k as f64 * stride) as usize])
        .collect()
}

fn grid_value(k: usize, points: usize, half_width: f64) -> f64 {
    if points <= 1 {
        0.0
    } else {
        -half_width + 2.0 * half_width * k as f64 / (points - 1) as f64
    }
}

/// Checks `a_mᵀ f(y, z) ≤ ρ + ½|a_mᵀ z|²` on a product grid, and positive spanning of `{a_m}`.
pub fn check_ab(driver: &dyn Driver, tree: &TreeModel, grid: &AbGrid) -> Result<AbReport> {
    let ab =
        driver.meta().ab.as_ref().ok_or_else(|| {
            LabError::StructureCheckFailed(format!("driver '{}' declares no (AB) data", driver.name()))
        })?;
    let n = driver.n();
    let d = tree.dim();
    if ab.a_vecs.iter().any(|a| a.len() != n) {
        return Err(LabError::ShapeMismatch("(AB) vectors must have length n".into()));
    }
    let axes = n + n * d;
    let total = grid
        .points
        .max(1)
        .checked_pow(axes as u32)
        .filter(|&t| t <= 50_000_000)
        .ok_or_else(|| {
            LabError::InvalidArgument(format!(
                "(AB) grid of {} points on {axes} axes is too large",
                grid.points
            ))
        })?;
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n * d];
    let mut f = vec![0.0; n];
    let mut worst = f64::INFINITY;
    let mut worst_node = None;
    let mut evaluations = 0;
    for u in sample_nodes(tree, grid.max_nodes) {
        let rho = ab.rho.at(u);
        for flat in 0..total {
            let mut rest = flat;
            for (c, slot) in y.iter_mut().chain(z.iter_mut()).enumerate() {
                let k = rest % grid.points.max(1);
                rest /= grid.points.max(1);
                let hw = if c < n { grid.y_half_width } else { grid.z_half_width };
                *slot = grid_value(k, grid.points, hw);
            }
            driver.eval(u, &y, &z, &mut f);
            evaluations += 1;
            for a in &ab.a_vecs {
                let af: f64 = a.iter().zip(&f).map(|(x, y)| x * y).sum();
                let az2: f64 = (0..d)
                    .map(|k| (0..n).map(|i| a[i] * z[i * d + k]).sum::<f64>().powi(2))
                    .sum();
                let margin = rho + 0.5 * az2 - af;
                if margin < worst {
                    worst = margin;
                    worst_node = Some(u);
                }
            }
        }
    }
    let spans = positively_spans(&ab.a_vecs);
    Ok(AbReport {
        spans,
        worst_margin: worst,
        worst_node,
        evaluations,
        pass: spans && worst >= -1e-9,
    })
}

/// Random probing of the triangular growth condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangularProbe {
    pub samples: usize,
    /// Largest magnitude of `y` entries.
    pub y_scale: f64,
    /// Largest magnitude of `z` entries; magnitudes are drawn log-uniformly up to it.
    pub z_scale: f64,
    pub seed: u64,
}

impl Default for TriangularProbe {
    fn default() -> Self {
        Self {
            samples: 2000,
            y_scale: 10.0,
            z_scale: 1e4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangularReport {
    /// Largest `|f^i(y', z') − f^i(y, z)| / bound` seen.
    pub worst_ratio: f64,
    /// Component and varied block (`None` for `y`) of the worst probe.
    pub worst_at: Option<(usize, Option<usize>)>,
    pub pass: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn log_uniform(rng: &mut ChaCha8Rng, top: f64) -> f64 {
    let lo = 1e-2f64.min(top);
    (rng.gen_range(lo.ln()..=top.ln().max(lo.ln()))).exp()
}

/// Probes `|f^i(y',z') − f^i(y,z)| ≤ L|Δy| + L Σ_{j≤i} (1+|y|+|y'|+|z|+|z'|)|Δz^j|
/// + L Σ_{j>i} (1+|y|+|y'|+κ(|z|)+κ(|z'|))|Δz^j|`, with `L` and `κ` from the
/// driver metadata, varying `y` or a single row of `z` at a time.
pub fn check_triangular(driver: &dyn Driver, tree: &TreeModel, probe: &TriangularProbe) -> TriangularReport {
    let n = driver.n();
    let d = tree.dim();
    let meta = driver.meta();
    let (l, kappa) = (meta.lipschitz, meta.kappa);
    let nodes = sample_nodes(tree, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut worst = 0.0f64;
    let mut worst_at = None;
    let (mut f0, mut f1) = (vec![0.0; n], vec![0.0; n]);
    for s in 0..probe.samples {
        let u = nodes[s % nodes.len()];
        let ys = rng.gen_range(0.0..=probe.y_scale);
        let zs = log_uniform(&mut rng, probe.z_scale);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0) * ys).collect();
        let z: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..=1.0) * zs).collect();
        driver.eval(u, &y, &z, &mut f0);
        for block in std::iter::once(None).chain((0..n).map(Some)) {
            let (mut y2, mut z2) = (y.clone(), z.clone());
            match block {
                None => y2
                    .iter_mut()
                    .for_each(|v| *v += rng.gen_range(-1.0..=1.0) * ys.max(1e-3)),
                Some(j) => {
                    let scale = log_uniform(&mut rng, probe.z_scale);
                    z2[j * d..(j + 1) * d]
                        .iter_mut()
                        .for_each(|v| *v += rng.gen_range(-1.0..=1.0) * scale);
                }
            }
            driver.eval(u, &y2, &z2, &mut f1);
            let dy: Vec<f64> = y.iter().zip(&y2).map(|(a, b)| b - a).collect();
            let (ny, ny2, nz, nz2) = (norm(&y), norm(&y2), norm(&z), norm(&z2));
            for i in 0..n {
                let mut bound = l * norm(&dy);
                for j in 0..n {
                    let dzj: Vec<f64> = (0..d).map(|k| z2[j * d + k] - z[j * d + k]).collect();
                    let weight = if j <= i {
                        1.0 + ny + ny2 + nz + nz2
                    } else {
                        1.0 + ny + ny2 + kappa(nz) + kappa(nz2)
                    };
                    bound += l * weight * norm(&dzj);
                }
                let lhs = (f1[i] - f0[i]).abs();
                let ratio = if bound > 0.0 {
                    lhs / bound
                } else if lhs > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                if ratio > worst {
                    worst = ratio;
                    worst_at = Some((i, block));
                }
            }
        }
    }
    TriangularReport {
        worst_ratio: worst,
        worst_at,
        pass: worst <= 1.0 + 1e-6,
    }
}

/// Result of [`ab_submartingale_check`], one entry per vector `a_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbCheckReport {
    /// `min_u (E_u[R_c] − R_u) / dt`.
    pub plain_slack: Vec<f64>,
    /// `min_u (E_u[R_c] − R_u − ½ R_u |a_mᵀ Z_u|² dt) / dt`.
    pub strengthened_slack: Vec<f64>,
    /// `10 (1 + ‖R‖_∞) dt`.
    pub tolerance: Vec<f64>,
    pub pass: bool,
}

/// Checks that `R = exp(2 a_mᵀ Y + 2 ∫ ρ dt)` is a discrete submartingale along
/// a computed solution, also in the strengthened form with drift `½ R |a_mᵀ Z|²`.
pub fn ab_submartingale_check(solution: &Solution, ab: &AbData) -> Result<AbCheckReport> {
    let y = &solution.y;
    let z = &solution.z;
    let tree = y.tree();
    let n = y.width();
    let d = tree.dim();
    let b = tree.branching();
    let dt = tree.dt();
    if !y.includes_terminal() || ab.a_vecs.iter().any(|a| a.len() != n) {
        return Err(LabError::ShapeMismatch(
            "(AB) check needs a terminal-inclusive Y and vectors of length n".into(),
        ));
    }
    // Σ_{s < t} ρ_s dt along the path to each node
    let mut acc: Vec<Vec<f64>> = vec![vec![0.0]];
    for level in 0..tree.depth() {
        let prev = &acc[level];
        let next = (0..tree.level_len(level + 1))
            .map(|i| {
                let parent = NodeRef::new(level, i / b);
                prev[i / b] + ab.rho.at(parent) * dt
            })
            .collect();
        acc.push(next);
    }
    let mut report = AbCheckReport {
        plain_slack: vec![],
        strengthened_slack: vec![],
        tolerance: vec![],
        pass: true,
    };
    for a in &ab.a_vecs {
        let r: Vec<Vec<f64>> = (0..=tree.depth())
            .map(|level| {
                (0..tree.level_len(level))
                    .map(|i| {
                        let yu = y.node(NodeRef::new(level, i));
                        let ay: f64 = a.iter().zip(yu).map(|(x, y)| x * y).sum();
                        (2.0 * ay + 2.0 * acc[level][i]).exp()
                    })
                    .collect()
            })
            .collect();
        let r_sup = r.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = 10.0 * (1.0 + r_sup) * dt;
        let (mut plain, mut strong) = (f64::INFINITY, f64::INFINITY);
        for level in 0..tree.depth() {
            for i in 0..tree.level_len(level) {
                let u = NodeRef::new(level, i);
                let mean = (0..b).map(|j| r[level + 1][i * b + j]).sum::<f64>() / b as f64;
                let zu = z.node(u);
                let az2: f64 = (0..d)
                    .map(|k| (0..n).map(|c| a[c] * zu[c * d + k]).sum::<f64>().powi(2))
                    .sum();
                let ru = r[level][i];
                plain = plain.min((mean - ru) / dt);
                strong = strong.min((mean - ru - 0.5 * ru * az2 * dt) / dt);
            }
        }
        report.pass &= plain >= -tol && strong >= -tol;
        report.plain_slack.push(plain);
        report.strengthened_slack.push(strong);
        report.tolerance.push(tol);
    }
    Ok(report)
}
