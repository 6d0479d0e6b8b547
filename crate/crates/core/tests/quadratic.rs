//! Quadratic drivers: truncation, structural checks and the truncation solver.

use std::sync::Arc;

use bsde_core::linear::random::random_instance;
use bsde_core::linear::{solve_1d_girsanov, solve_backward_exact, LinearCoefficients};
use bsde_core::norms::{bmo_norm, sup_norm};
use bsde_core::quadratic::{
    ab_submartingale_check, check_ab, check_triangular, default_k_schedule, kappa, psi, psi_prime, solve_lipschitz,
    solve_quadratic, solve_quadratic_with_history, stability_experiment, stability_pair, truncate, AbData, AbGrid,
    ColeHopf, Driver, DriverMeta, FnDriver, LinearDriver, Perturbation, Rho, Tri2, TriangularProbe, TruncatedDriver,
    ZeroDriver,
};
use bsde_core::tree::{AdaptedProcess, EntryKind, LeafValues, NodeRef, Shape, TreeModel};
use bsde_core::LabError;
use proptest::prelude::*;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn tri2_terminal(tree: &TreeModel) -> LeafValues {
    LeafValues::from_fn(tree, Shape::Vector(2), |b, o| {
        o[0] = (1.5 * b[0]).sin();
        o[1] = (b[0] - 0.3).cos();
    })
}

proptest! {
    #[test]
    fn psi_shape(x in 0.0..10.0f64, y in 0.0..10.0f64) {
        prop_assert!(psi(x) <= x + 1e-15);
        prop_assert!((0.0..=1.0).contains(&psi_prime(x)));
        prop_assert!(psi(x) <= 2.0);
        let (lo, hi) = if x < y { (x, y) } else { (y, x) };
        prop_assert!(psi(lo) <= psi(hi));
        // concavity: chord below the graph at the midpoint
        prop_assert!(psi(0.5 * (lo + hi)) >= 0.5 * (psi(lo) + psi(hi)) - 1e-15);
    }

    #[test]
    fn truncation_identity_and_bound(z in prop::collection::vec(-20.0..20.0f64, 1..5), k in 0.1..10.0f64,
                                     y in prop::collection::vec(-3.0..3.0f64, 2)) {
        let t = truncate(&z, k);
        prop_assert!(norm(&t) <= 2.0 * k * (1.0 + 1e-15));
        if norm(&z) <= k {
            prop_assert_eq!(&t, &z);
        }
        if z.len() == 2 {
            let base = Tri2::new();
            let trunc = TruncatedDriver::new(&base, k);
            let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
            trunc.eval(NodeRef::ROOT, &y, &z, &mut a);
            base.eval(NodeRef::ROOT, &y, &t, &mut b);
            prop_assert_eq!(a, b);
            if norm(&z) <= k {
                base.eval(NodeRef::ROOT, &y, &z, &mut b);
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn truncation_preserves_lipschitz_constant(z in prop::collection::vec(-60.0..60.0f64, 1),
                                               w in prop::collection::vec(-60.0..60.0f64, 1), k in 0.5..8.0f64) {
        prop_assume!(z != w);
        let base = ColeHopf::new();
        let trunc = TruncatedDriver::new(&base, k);
        let eval = |d: &dyn Driver, z: &[f64]| { let mut o = [0.0]; d.eval(NodeRef::ROOT, &[0.0], z, &mut o); o[0] };
        let ratio = (eval(&trunc, &z) - eval(&trunc, &w)).abs() / (z[0] - w[0]).abs();
        let (tz, tw) = (truncate(&z, k), truncate(&w, k));
        // both truncated points lie in the ball of radius 2k, where ½z² is 2k-Lipschitz
        prop_assert!(ratio <= 2.0 * k * (1.0 + 1e-12));
        if tz != tw {
            let base_ratio = (eval(&base, &tz) - eval(&base, &tw)).abs() / (tz[0] - tw[0]).abs();
            prop_assert!(ratio <= base_ratio * (1.0 + 1e-12) + 1e-12);
        }
    }
}

#[test]
fn kappa_is_sublinear() {
    assert_eq!(kappa(0.0), 0.0);
    assert!((kappa(3.0) - 1.0).abs() < 1e-15);
    assert!(kappa(1e8) / 1e8 < 1e-3);
}

#[test]
fn ab_holds_for_builtins() {
    let tree = TreeModel::new(3, 1.0, 1).unwrap();
    let tree2 = TreeModel::new(2, 1.0, 2).unwrap();
    for (driver, t) in [
        (Box::new(ZeroDriver::new(2)) as Box<dyn Driver>, &tree),
        (Box::new(ColeHopf::new()), &tree),
        (Box::new(ColeHopf::new()), &tree2),
        (Box::new(Tri2::new()), &tree),
        (Box::new(Tri2::new()), &tree2),
    ] {
        let report = check_ab(driver.as_ref(), t, &AbGrid::default()).unwrap();
        assert!(report.pass && report.spans, "{}: {report:?}", driver.name());
        assert!(report.worst_margin >= -1e-9);
    }
}

#[test]
fn ab_carries_over_to_truncation() {
    let tree = TreeModel::new(3, 1.0, 1).unwrap();
    let base = Tri2::new();
    for k in [0.5, 1.0, 2.0] {
        let trunc = TruncatedDriver::new(&base, k);
        assert!(check_ab(&trunc, &tree, &AbGrid::default()).unwrap().pass);
        let doubled = trunc.doubled_ab().unwrap();
        let meta = DriverMeta {
            ab: Some(doubled),
            ..DriverMeta::default()
        };
        let relabeled = FnDriver::new("tri2-doubled", 2, meta, move |u, y, z, out| trunc_eval(k, u, y, z, out));
        assert!(check_ab(&relabeled, &tree, &AbGrid::default()).unwrap().pass);
    }
}

fn trunc_eval(k: f64, u: NodeRef, y: &[f64], z: &[f64], out: &mut [f64]) {
    let base = Tri2::new();
    TruncatedDriver::new(&base, k).eval(u, y, z, out)
}

#[test]
fn ab_flags_violations() {
    let tree = TreeModel::new(2, 1.0, 1).unwrap();
    let ab = Some(AbData {
        rho: Rho::Constant(0.0),
        a_vecs: vec![vec![1.0], vec![-1.0]],
    });
    let steep = FnDriver::new(
        "z^2",
        1,
        DriverMeta {
            ab,
            ..DriverMeta::default()
        },
        |_, _, z, o| o[0] = z[0] * z[0],
    );
    let report = check_ab(&steep, &tree, &AbGrid::default()).unwrap();
    assert!(!report.pass && report.worst_margin < 0.0);

    let ab = Some(AbData {
        rho: Rho::Constant(0.0),
        a_vecs: vec![vec![1.0]],
    });
    let one_sided = FnDriver::new(
        "half",
        1,
        DriverMeta {
            ab,
            ..DriverMeta::default()
        },
        |_, _, z, o| o[0] = 0.5 * z[0] * z[0],
    );
    let report = check_ab(&one_sided, &tree, &AbGrid::default()).unwrap();
    assert!(!report.spans && !report.pass);

    assert!(matches!(
        check_ab(
            &FnDriver::new("bare", 1, DriverMeta::default(), |_, _, _, o| o[0] = 0.0),
            &tree,
            &AbGrid::default()
        ),
        Err(LabError::StructureCheckFailed(_))
    ));
}

#[test]
fn triangular_class_membership() {
    let tree = TreeModel::new(4, 1.0, 1).unwrap();
    let probe = TriangularProbe::default();
    assert!(check_triangular(&Tri2::new(), &tree, &probe).pass);
    assert!(check_triangular(&ColeHopf::new(), &tree, &probe).pass);
    assert!(check_triangular(&ZeroDriver::new(3), &tree, &probe).pass);

    let inst = random_instance(3).unwrap();
    let linear = LinearDriver::new(inst.coeffs.clone());
    let report = check_triangular(&linear, &inst.tree, &probe);
    assert!(report.pass, "{report:?}");

    let upper = FnDriver::new("upper", 2, DriverMeta::default(), |_, _, z, o| {
        o[0] = 0.5 * z[1] * z[1];
        o[1] = 0.0;
    });
    let report = check_triangular(&upper, &tree, &probe);
    assert!(!report.pass, "{report:?}");
    assert_eq!(report.worst_at.map(|(i, _)| i), Some(0));
}

#[test]
fn one_step_hand_recursion() {
    let tree = TreeModel::new(1, 1.0, 1).unwrap();
    let xi = LeafValues::from_fn(&tree, Shape::Scalar, |b, o| o[0] = b[0]);
    let base = ColeHopf::new();
    let sol = solve_lipschitz(&tree, &xi, &TruncatedDriver::new(&base, 10.0)).unwrap();
    assert!((sol.z.node(NodeRef::ROOT)[0] - 1.0).abs() < 1e-15);
    assert!((sol.y0()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn cole_hopf_scheme_on_the_walk() {
    // Z ≡ 1 and Y = B + (T − t)/2 solve the scheme exactly
    for depth in [4, 12, 16] {
        let tree = TreeModel::new(depth, 1.0, 1).unwrap();
        let xi = LeafValues::from_fn(&tree, Shape::Scalar, |b, o| o[0] = b[0]);
        let sol = solve_quadratic(&tree, &xi, &ColeHopf::new(), &default_k_schedule()).unwrap();
        assert!((sol.y0()[0] - 0.5).abs() < 1e-12);
        // sup|Y| = sup|B_T| decides the level once it exceeds 2
        assert!(sol.diagnostics.accepted_k.unwrap() <= 4.0);
        assert!(sol.diagnostics.residual_sup <= 1e-10);
    }
}

#[test]
fn step_too_coarse_is_refused() {
    let tree = TreeModel::new(1, 1.0, 1).unwrap();
    let mut coeffs = LinearCoefficients::zeros(&tree, 1);
    coeffs.alpha = AdaptedProcess::from_fn(&tree, Shape::Matrix(1), EntryKind::Real, false, |_, v| v[0] = 2.0);
    let xi = LeafValues::constant(&tree, &[1.0]);
    assert!(
        matches!(solve_lipschitz(&tree, &xi, &LinearDriver::new(coeffs)), Err(LabError::StepTooCoarse(c)) if c == 2.0)
    );
}

#[test]
fn linear_driver_matches_backward_recursion() {
    for seed in 0..30 {
        let inst = random_instance(seed).unwrap();
        let exact = solve_backward_exact(&inst.xi, &inst.coeffs).unwrap();
        let sol = solve_quadratic(
            &inst.tree,
            &inst.xi,
            &LinearDriver::new(inst.coeffs.clone()),
            &default_k_schedule(),
        )
        .unwrap();
        assert!(sol.distance(&exact) <= 1e-9, "seed {seed}: {}", sol.distance(&exact));
    }
}

#[test]
fn triangular_system_matches_cascade() {
    let tree = TreeModel::new(8, 1.0, 1).unwrap();
    let xi = tri2_terminal(&tree);
    let sol = solve_quadratic(&tree, &xi, &Tri2::new(), &default_k_schedule()).unwrap();
    assert!(sol.diagnostics.residual_sup <= 1e-10);

    let first = solve_quadratic(&tree, &xi.component(0), &ColeHopf::new(), &default_k_schedule()).unwrap();
    let mut coeffs = LinearCoefficients::zeros(&tree, 1);
    coeffs.a = AdaptedProcess::from_fn(&tree, Shape::Matrix(1), EntryKind::VecD, false, |u, v| {
        v.copy_from_slice(first.z.node(u))
    });
    let second = solve_1d_girsanov(&xi.component(1), &coeffs).unwrap();
    for level in 0..=tree.depth() {
        for idx in 0..tree.level_len(level) {
            let u = NodeRef::new(level, idx);
            assert!((sol.y.node(u)[0] - first.y.node(u)[0]).abs() < 1e-12);
            assert!((sol.y.node(u)[1] - second.y.node(u)[0]).abs() < 1e-9);
        }
    }
}

#[test]
fn truncation_cascade_does_not_inflate_norms() {
    let tree = TreeModel::new(8, 1.0, 1).unwrap();
    let cases: Vec<(Box<dyn Driver>, LeafValues)> = vec![
        (
            Box::new(ColeHopf::new()),
            LeafValues::from_fn(&tree, Shape::Scalar, |b, o| o[0] = 3.0 * (2.0 * b[0]).sin()),
        ),
        (
            Box::new(Tri2::new()),
            tri2_terminal(&tree).map(Shape::Vector(2), |v, o| {
                o[0] = 3.0 * v[0];
                o[1] = 2.0 * v[1];
            }),
        ),
    ];
    for (driver, xi) in cases {
        let (sol, history) = solve_quadratic_with_history(&tree, &xi, driver.as_ref(), &default_k_schedule()).unwrap();
        assert!(
            history.len() >= 2,
            "{}: accepted too early to exercise the cascade",
            driver.name()
        );
        let accepted = sol.diagnostics.norms_y.s_inf + sol.diagnostics.norms_z.bmo;
        for k in default_k_schedule() {
            let s = solve_lipschitz(&tree, &xi, &TruncatedDriver::new(driver.as_ref(), k)).unwrap();
            let value = sup_norm(&s.y) + bmo_norm(&s.z);
            assert!(
                value <= 1.1 * accepted,
                "{} k={k}: {value} vs {accepted}",
                driver.name()
            );
        }
    }
}

#[test]
fn ab_submartingale_on_solutions() {
    let tree = TreeModel::new(10, 1.0, 1).unwrap();
    let xi = LeafValues::from_fn(&tree, Shape::Scalar, |b, o| o[0] = b[0].sin());
    let ch = ColeHopf::new();
    let sol = solve_quadratic(&tree, &xi, &ch, &default_k_schedule()).unwrap();
    assert!(
        ab_submartingale_check(&sol, ch.meta().ab.as_ref().unwrap())
            .unwrap()
            .pass
    );

    let tri = Tri2::new();
    let sol = solve_quadratic(&tree, &tri2_terminal(&tree), &tri, &default_k_schedule()).unwrap();
    assert!(
        ab_submartingale_check(&sol, tri.meta().ab.as_ref().unwrap())
            .unwrap()
            .pass
    );

    // the one-step tolerance is 20 dt here, so the control needs a fine grid
    let tree = TreeModel::new(16, 1.0, 1).unwrap();
    let zero = ZeroDriver::new(1);
    let xi0 = LeafValues::constant(&tree, &[0.0]);
    let mut sol = solve_quadratic(&tree, &xi0, &zero, &default_k_schedule()).unwrap();
    let ab = zero.meta().ab.clone().unwrap();
    let report = ab_submartingale_check(&sol, &ab).unwrap();
    assert!(report.pass && report.plain_slack.iter().all(|&s| s == 0.0));
    // negative control: Y shifted by +t no longer solves the equation
    for level in 0..=tree.depth() {
        let t = tree.time(level);
        sol.y.level_mut(level).iter_mut().for_each(|v| *v += t);
    }
    assert!(!ab_submartingale_check(&sol, &ab).unwrap().pass);
}

#[test]
fn stability_estimates() {
    let tree = TreeModel::new(8, 1.0, 1).unwrap();
    let xi = LeafValues::from_fn(&tree, Shape::Scalar, |b, o| o[0] = b[0].tanh());
    let driver: Arc<dyn Driver> = Arc::new(ColeHopf::new());
    let schedule = default_k_schedule();
    let (lhs, rhs) = stability_pair(&tree, (&xi, driver.as_ref()), (&xi, driver.as_ref()), &schedule).unwrap();
    assert_eq!((lhs, rhs), (0.0, 0.0));

    let eps: Vec<f64> = (0..8).map(|i| 0.5f64.powi(i)).collect();
    let eta = LeafValues::constant(&tree, &[1.0]);
    for perturbation in [Perturbation::Terminal(eta), Perturbation::DriverShift(vec![1.0])] {
        let rows = stability_experiment(&tree, &xi, driver.clone(), &perturbation, &eps, &schedule).unwrap();
        let ratios: Vec<f64> = rows.iter().map(|r| r.ratio()).collect();
        assert!(ratios.iter().all(|r| r.is_finite() && *r <= 10.0), "{ratios:?}");
        for pair in rows.windows(2) {
            assert!(pair[1].lhs < pair[0].lhs);
        }
    }
}
