//! Linear solvers against an independent dense solve of the whole discrete system.

use bsde_core::linear::random::{random_instance, random_instance_with, run_oracle_suite, InstanceScale, Structure};
use bsde_core::linear::{
    contraction_threshold, model_estimate_ratio, representation_solve, rp_ratio, rp_tilde, solve_backward_exact,
    solve_sliced_picard, stochastic_exponential, LinearCoefficients, PicardOptions,
};
use bsde_core::tree::{AdaptedProcess, EntryKind, LeafValues, NodeRef, Shape, TreeModel};
use nalgebra::{DMatrix, DVector};

/// Assembles the projected one-step equations of every node into one square
/// system in the unknowns `(Y_u, Z_u)` and solves it by LU.
fn dense_solve(xi: &LeafValues, c: &LinearCoefficients) -> (AdaptedProcess, AdaptedProcess) {
    let tree = c.beta.tree();
    let (n, d, b, dt) = (c.n(), tree.dim(), tree.branching(), tree.dt());
    let nodes: Vec<NodeRef> = (0..tree.depth())
        .flat_map(|l| (0..tree.level_len(l)).map(move |i| NodeRef::new(l, i)))
        .collect();
    let offset_of = |u: NodeRef| -> usize { (b.pow(u.level as u32) - 1) / (b - 1) + u.index };
    let block = n + n * d;
    let size = nodes.len() * block;
    let mut m = DMatrix::<f64>::zeros(size, size);
    let mut rhs = DVector::<f64>::zeros(size);
    for &u in &nodes {
        let base = offset_of(u) * block;
        let (alpha, a, beta) = (c.alpha.node(u), c.a.node(u), c.beta.node(u));
        for (w_idx, weight) in
            (0..=d).map(|w| (w, move |j: usize| if w == 0 { 1.0 } else { tree_inc(j, w - 1, d, dt) }))
        {
            for i in 0..n {
                let row = base + w_idx * n + i;
                for j in 0..b {
                    let wj = weight(j);
                    let inc = tree.increment(j);
                    for l in 0..n {
                        let delta = if i == l { 1.0 } else { 0.0 };
                        m[(row, base + l)] += wj * (delta - alpha[i * n + l] * dt);
                        for k in 0..d {
                            m[(row, base + n + l * d + k)] += wj * (-a[(i * n + l) * d + k] * dt + delta * inc[k]);
                        }
                    }
                    let child = u.child(b, j);
                    if child.level == tree.depth() {
                        rhs[row] += wj * xi.leaf(child.index)[i];
                    } else {
                        m[(row, offset_of(child) * block + i)] -= wj;
                    }
                    rhs[row] += wj * beta[i] * dt;
                }
            }
        }
    }
    let sol = m.lu().solve(&rhs).expect("dense system is regular");
    let mut y = AdaptedProcess::zeros(&tree, Shape::Vector(n), EntryKind::Real, true);
    let mut z = AdaptedProcess::zeros(&tree, Shape::Vector(n), EntryKind::VecD, false);
    for &u in &nodes {
        let base = offset_of(u) * block;
        y.node_mut(u).copy_from_slice(&sol.as_slice()[base..base + n]);
        z.node_mut(u).copy_from_slice(&sol.as_slice()[base + n..base + block]);
    }
    y.level_mut(tree.depth()).copy_from_slice(xi.values());
    (y, z)
}

fn tree_inc(j: usize, k: usize, d: usize, dt: f64) -> f64 {
    // bit k of j set means a down move in coordinate k
    let _ = d;
    if (j >> k) & 1 == 1 {
        -dt.sqrt()
    } else {
        dt.sqrt()
    }
}

#[test]
fn backward_recursion_matches_dense_solve() {
    let mut checked = 0;
    for seed in 0..100 {
        let inst = random_instance(seed).unwrap();
        let unknowns = inst.tree.total_nodes() * inst.coeffs.n() * (1 + inst.tree.dim());
        if unknowns > 700 {
            continue;
        }
        let (y, z) = dense_solve(&inst.xi, &inst.coeffs);
        let exact = solve_backward_exact(&inst.xi, &inst.coeffs).unwrap();
        let scale = 1.0
            + exact.y.max_abs_diff(&AdaptedProcess::zeros(
                &inst.tree,
                Shape::Vector(inst.coeffs.n()),
                EntryKind::Real,
                true,
            ));
        assert!(exact.y.max_abs_diff(&y) < 1e-10 * scale, "seed {seed}: Y differs");
        assert!(exact.z.max_abs_diff(&z) < 1e-9 * scale, "seed {seed}: Z differs");
        checked += 1;
    }
    assert!(checked >= 15, "only {checked} instances small enough");
}

#[test]
fn dense_increment_convention_matches_tree() {
    for d in 1..=2 {
        let tree = TreeModel::new(2, 1.0, d).unwrap();
        for j in 0..tree.branching() {
            for k in 0..d {
                assert_eq!(tree.increment(j)[k], tree_inc(j, k, d, tree.dt()));
            }
        }
    }
}

#[test]
fn oracle_suite_on_first_seeds() {
    let picard = PicardOptions::default();
    for seed in 0..25 {
        let inst = random_instance(seed).unwrap();
        let (exact, runs) = run_oracle_suite(&inst, &picard).unwrap();
        assert!(exact.diagnostics.residual_sup < 1e-12);
        for run in runs {
            assert!(run.deviation <= 1e-8, "seed {seed} {}: {}", run.solver, run.deviation);
        }
    }
}

#[test]
fn contraction_certificate_on_sliceable_instances() {
    let delta = contraction_threshold();
    let options = PicardOptions::with_delta(delta);
    for seed in 0..40 {
        let inst = random_instance_with(seed, InstanceScale::sliceable(delta)).unwrap();
        let sol = solve_sliced_picard(&inst.xi, &inst.coeffs, &options).unwrap();
        for s in &sol.diagnostics.slices {
            assert!(!s.oversized);
            assert!(s.contraction <= 0.5, "seed {seed} slice {}: {}", s.slice, s.contraction);
        }
    }
}

#[test]
fn reverse_hoelder_tilde_dominates() {
    let mut checked = 0;
    for seed in 0..40 {
        let inst = random_instance(seed).unwrap();
        if inst.structure != Structure::Homogeneous && inst.structure != Structure::General {
            continue;
        }
        let exp = stochastic_exponential(&inst.coeffs.a).unwrap();
        if !exp.singular.is_empty() {
            continue;
        }
        let n = exp.n() as f64;
        for p in [1.25, 2.0, 3.0] {
            let lhs = rp_ratio(&exp, p);
            let rhs = n.powf(p / 2.0) * rp_tilde(&exp, p).unwrap();
            assert!(lhs <= rhs * (1.0 + 1e-12), "seed {seed} p={p}: {lhs} > {rhs}");
        }
        checked += 1;
    }
    assert!(checked > 5);
}

#[test]
fn scalar_bounded_coefficient_has_stable_reverse_hoelder_ratio() {
    let ratios: Vec<f64> = [6, 8, 10, 12, 14]
        .iter()
        .map(|&depth| {
            let tree = TreeModel::new(depth, 1.0, 1).unwrap();
            let a = AdaptedProcess::from_fn(&tree, Shape::Matrix(1), EntryKind::VecD, false, |u, v| {
                v[0] = 0.5 * (tree.brownian_at(u)[0]).cos()
            });
            rp_ratio(&stochastic_exponential(&a).unwrap(), 1.25)
        })
        .collect();
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(l, h), &r| (l.min(r), h.max(r)));
    assert!(hi / lo <= 1.1, "{ratios:?}");
}

#[test]
fn model_estimate_scales_with_inputs() {
    let tree = TreeModel::new(6, 1.0, 1).unwrap();
    let xi = LeafValues::from_fn(&tree, Shape::Scalar, |b, o| o[0] = b[0].tanh());
    let mut coeffs = LinearCoefficients::zeros(&tree, 1);
    coeffs.beta = AdaptedProcess::from_fn(&tree, Shape::Vector(1), EntryKind::Real, false, |u, v| {
        v[0] = (tree.brownian_at(u)[0] + u.level as f64).sin()
    });
    let base = solve_backward_exact(&xi, &coeffs).unwrap();
    let r1 = model_estimate_ratio(&base, &xi, &coeffs.beta);
    assert!(r1.is_finite() && r1 > 0.0);
    let lhs = |s: &bsde_core::linear::Solution| s.diagnostics.norms_y.s_inf + s.diagnostics.norms_z.bmo;
    let mut prev = lhs(&base);
    for c in [2.0, 3.0, 5.0] {
        let xi_c = xi.map(Shape::Scalar, |v, o| o[0] = c * v[0]);
        let mut coeffs_c = coeffs.clone();
        coeffs_c.beta = coeffs.beta.scaled(c);
        let sol = solve_backward_exact(&xi_c, &coeffs_c).unwrap();
        assert!(lhs(&sol) > prev);
        prev = lhs(&sol);
        let r = model_estimate_ratio(&sol, &xi_c, &coeffs_c.beta);
        assert!((r - r1).abs() < 1e-9 * r1);
    }
}

#[test]
fn representation_handles_two_dimensional_noise() {
    let tree = TreeModel::new(4, 1.0, 2).unwrap();
    let xi = LeafValues::from_fn(&tree, Shape::Vector(2), |b, o| {
        o[0] = b[0] - b[1];
        o[1] = (b[0] * b[1]).sin();
    });
    let a = AdaptedProcess::from_fn(&tree, Shape::Matrix(2), EntryKind::VecD, false, |u, v| {
        let s = tree.brownian_at(u);
        for (e, x) in v.iter_mut().enumerate() {
            *x = 0.2 * ((e as f64) + s[0] - 0.5 * s[1]).cos();
        }
    });
    let mut coeffs = LinearCoefficients::zeros(&tree, 2);
    coeffs.a = a.clone();
    let exact = solve_backward_exact(&xi, &coeffs).unwrap();
    let rep = representation_solve(&xi, &a).unwrap();
    assert!(rep.distance(&exact) < 1e-10);
}
