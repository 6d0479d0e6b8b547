//! One runner per subcommand. Each reads its parameters first, rejects unknown
//! keys, then computes a [`Table`].

use std::sync::Arc;

use bsde_core::counterexample::{build_instance, non_uniqueness_report, ReportRow};
use bsde_core::linear::random::{random_instance, run_oracle_suite};
use bsde_core::linear::{contraction_threshold, mp_norm, rp_ratio, rp_tilde, stochastic_exponential, PicardOptions};
use bsde_core::norms::{slice_index, NormReport, SliceMode};
use bsde_core::quadratic::{
    check_ab, check_triangular, default_k_schedule, solve_quadratic_with_history, stability_experiment, AbGrid, Driver,
    DriverMeta, DriverRegistry, FnDriver, Perturbation, TriangularProbe,
};
use bsde_core::tree::{AdaptedProcess, EntryKind, Shape, TreeModel};
use bsde_core::LabError;

use crate::config::Config;
use crate::error::{setup, CliError, CliResult};
use crate::expr::Expr;
use crate::output::{num, Table};

/// Largest acceptable deviation from the backward oracle in the linear suite.
const ORACLE_TOLERANCE: f64 = 1e-8;

/// A finished table, and an error to report after it has been written.
pub struct Outcome {
    pub table: Table,
    pub failure: Option<CliError>,
}

impl From<Table> for Outcome {
    fn from(table: Table) -> Self {
        Self { table, failure: None }
    }
}

pub fn run(command: &str, cfg: &Config, seed: u64) -> CliResult<Outcome> {
    match command {
        "norms" => norms(cfg).map(Into::into),
        "linear" => linear(cfg, seed),
        "counterexample" => counterexample(cfg).map(Into::into),
        "reverse-holder" => reverse_holder(cfg).map(Into::into),
        "quadratic" => quadratic(cfg).map(Into::into),
        "stability" => stability(cfg).map(Into::into),
        other => Err(CliError::Config(format!("unknown command '{other}'"))),
    }
}

fn tree_from(cfg: &Config, default_n: usize) -> CliResult<TreeModel> {
    let depth = cfg.parsed("N", default_n)?;
    let horizon = cfg.parsed("T", 1.0)?;
    let dim = cfg.parsed("d", 1usize)?;
    setup(TreeModel::new(depth, horizon, dim))
}

fn slice_mode(cfg: &Config) -> CliResult<SliceMode> {
    match cfg.string("mode", "greedy").as_str() {
        "greedy" | "node_greedy" => Ok(SliceMode::NodeGreedy),
        "deterministic" => Ok(SliceMode::Deterministic),
        other => Err(CliError::Config(format!(
            "mode: expected greedy or deterministic, got '{other}'"
        ))),
    }
}

fn norms(cfg: &Config) -> CliResult<Table> {
    let tree = tree_from(cfg, 10)?;
    let gamma = Expr::parse(&cfg.string("gamma", "1 + sin(b)"))?;
    let deltas = cfg.list("delta", &[0.25, 0.5, 1.0])?;
    let mode = slice_mode(cfg)?;
    cfg.check_unused()?;

    let gamma = gamma.process(&tree, Shape::Scalar, EntryKind::Real)?;
    let report = NormReport::of(&gamma);
    let mut header = vec!["N".to_string(), "d".into(), "T".into(), "delta".into()];
    header.extend(report.csv_header());
    header.push("slices".into());
    let mut table = Table::new(header);
    for delta in deltas {
        let slices = match slice_index(&gamma, delta, mode) {
            Ok((m, _)) => m.to_string(),
            Err(e @ LabError::Unsliceable { .. }) => e.name().to_string(),
            Err(e) => return Err(e.into()),
        };
        let mut row = vec![
            tree.depth().to_string(),
            tree.dim().to_string(),
            num(tree.horizon()),
            num(delta),
        ];
        row.extend(report.csv_values().into_iter().map(num));
        row.push(slices);
        table.push(row);
    }
    Ok(table)
}

fn linear(cfg: &Config, seed: u64) -> CliResult<Outcome> {
    let suite = cfg.flag("oracle_suite")?;
    let count = if suite { cfg.parsed("seeds", 100u64)? } else { 1 };
    let delta = cfg.parsed("delta", contraction_threshold())?;
    let mode = slice_mode(cfg)?;
    cfg.check_unused()?;
    let picard = PicardOptions {
        delta,
        mode,
        ..PicardOptions::default()
    };

    if !suite {
        let inst = setup(random_instance(seed))?;
        let (exact, runs) = run_oracle_suite(&inst, &picard)?;
        let mut header: Vec<String> = [
            "solver",
            "seed",
            "structure",
            "n",
            "d",
            "N",
            "residual",
            "deviation",
            "iterations",
        ]
        .map(String::from)
        .into();
        header.extend(
            exact
                .diagnostics
                .norms_y
                .csv_header()
                .into_iter()
                .map(|h| format!("Y_{h}")),
        );
        header.extend(
            exact
                .diagnostics
                .norms_z
                .csv_header()
                .into_iter()
                .map(|h| format!("Z_{h}")),
        );
        let mut table = Table::new(header);
        let all = std::iter::once(("backward_exact", &exact, 0.0))
            .chain(runs.iter().map(|r| (r.solver, &r.solution, r.deviation)));
        for (solver, sol, deviation) in all {
            let diag = &sol.diagnostics;
            let mut row = vec![
                solver.to_string(),
                seed.to_string(),
                inst.structure.name().to_string(),
                inst.coeffs.n().to_string(),
                inst.tree.dim().to_string(),
                inst.tree.depth().to_string(),
                num(diag.residual_sup),
                num(deviation),
                diag.iterations.to_string(),
            ];
            row.extend(diag.norms_y.csv_values().into_iter().map(num));
            row.extend(diag.norms_z.csv_values().into_iter().map(num));
            table.push(row);
        }
        return Ok(table.into());
    }

    let mut table = Table::new([
        "seed",
        "structure",
        "n",
        "d",
        "N",
        "solvers",
        "max_deviation",
        "max_residual",
        "picard_iterations",
        "picard_contraction",
        "oversized_slices",
    ]);
    let mut worst = (0.0f64, seed);
    for s in seed..seed + count {
        let inst = setup(random_instance(s))?;
        let (exact, runs) = run_oracle_suite(&inst, &picard)?;
        let max_dev = runs.iter().map(|r| r.deviation).fold(0.0, f64::max);
        let max_res = runs
            .iter()
            .map(|r| r.solution.diagnostics.residual_sup)
            .fold(exact.diagnostics.residual_sup, f64::max);
        let picard_run = runs
            .iter()
            .find(|r| r.solver == "sliced_picard")
            .expect("picard always runs");
        let slices = &picard_run.solution.diagnostics.slices;
        let contraction = slices
            .iter()
            .filter(|s| !s.oversized)
            .map(|s| s.contraction)
            .fold(0.0, f64::max);
        let oversized = slices.iter().filter(|s| s.oversized).count();
        if max_dev.max(max_res) > worst.0 {
            worst = (max_dev.max(max_res), s);
        }
        table.push(vec![
            s.to_string(),
            inst.structure.name().to_string(),
            inst.coeffs.n().to_string(),
            inst.tree.dim().to_string(),
            inst.tree.depth().to_string(),
            runs.iter().map(|r| r.solver).collect::<Vec<_>>().join(";"),
            num(max_dev),
            num(max_res),
            picard_run.solution.diagnostics.iterations.to_string(),
            num(contraction),
            oversized.to_string(),
        ]);
    }
    let failure = (worst.0 > ORACLE_TOLERANCE).then(|| {
        CliError::Mismatch(format!(
            "seed {} deviates from the backward oracle by {} > {ORACLE_TOLERANCE}",
            worst.1, worst.0
        ))
    });
    Ok(Outcome { table, failure })
}

fn counterexample(cfg: &Config) -> CliResult<Table> {
    let depths = cfg.list("depths", &[8usize, 10, 12, 14])?;
    cfg.check_unused()?;
    if let Some(&bad) = depths.iter().find(|&&n| n < 2) {
        return Err(CliError::Config(format!(
            "depths: the sphere instance needs N >= 2, got {bad}"
        )));
    }
    for &n in &depths {
        setup(TreeModel::new(n, 1.0, 1))?;
    }
    let mut table = Table::new(ReportRow::csv_header());
    for row in non_uniqueness_report(&depths)? {
        table.push(row.csv_values());
    }
    Ok(table)
}

fn reverse_holder(cfg: &Config) -> CliResult<Table> {
    let depths = cfg.list("depths", &[8usize, 10, 12, 14, 16])?;
    let exponents = cfg.list("p", &[1.25, 1.5, 2.0, 3.0])?;
    let source = cfg.string("source", "counterexample");
    let coefficient = match source.as_str() {
        "counterexample" => None,
        "scalar" => Some(Expr::parse(&cfg.string("coefficient", "0.5 * cos(b)"))?),
        other => {
            return Err(CliError::Config(format!(
                "source: expected counterexample or scalar, got '{other}'"
            )))
        }
    };
    let horizon = if coefficient.is_some() {
        cfg.parsed("T", 1.0)?
    } else {
        1.0
    };
    cfg.check_unused()?;
    if let Some(&p) = exponents.iter().find(|&&p| !(p > 1.0)) {
        return Err(CliError::Config(format!("p: exponents must exceed 1, got {p}")));
    }

    let mut table = Table::new(["source", "N", "p", "rp_ratio", "rp_tilde", "mp_p", "singular_nodes"]);
    for &depth in &depths {
        let a: AdaptedProcess = match &coefficient {
            None => {
                setup(TreeModel::new(depth.max(2), 1.0, 1))?;
                build_instance(depth).map_err(|e| CliError::Config(e.to_string()))?.a
            }
            Some(expr) => {
                let tree = setup(TreeModel::new(depth, horizon, 1))?;
                expr.process(&tree, Shape::Matrix(1), EntryKind::VecD)?
            }
        };
        let exp = stochastic_exponential(&a)?;
        for &p in &exponents {
            let tilde = match rp_tilde(&exp, p) {
                Ok(v) => num(v),
                Err(LabError::SingularFactor(_)) => num(f64::NAN),
                Err(e) => return Err(e.into()),
            };
            table.push(vec![
                source.clone(),
                depth.to_string(),
                num(p),
                num(rp_ratio(&exp, p)),
                tilde,
                num(mp_norm(&exp, p)),
                exp.singular.len().to_string(),
            ]);
        }
    }
    Ok(table)
}

/// Builtin drivers plus the CLI's plug-ins.
pub fn registry() -> DriverRegistry {
    let mut r = DriverRegistry::with_builtins();
    // quadratic dependence above the diagonal: outside the triangular class
    r.register("upper", |n| {
        if n != 2 {
            return Err(LabError::InvalidArgument(format!(
                "driver 'upper' needs n = 2, got n = {n}"
            )));
        }
        Ok(Box::new(FnDriver::new(
            "upper",
            2,
            DriverMeta::default(),
            |_, _, z, out| {
                let d = z.len() / 2;
                out[0] = 0.5 * z[d..].iter().map(|v| v * v).sum::<f64>();
                out[1] = 0.0;
            },
        )))
    });
    r
}

fn default_n(driver: &str) -> usize {
    match driver {
        "tri2" | "upper" => 2,
        _ => 1,
    }
}

fn default_terminal(n: usize) -> String {
    if n == 1 {
        "b".into()
    } else {
        format!(
            "({})",
            (1..=n).map(|i| format!("sin({i} * b)")).collect::<Vec<_>>().join(", ")
        )
    }
}

struct QuadraticSetup {
    tree: TreeModel,
    driver: Box<dyn Driver>,
    name: String,
    n: usize,
    terminal: Expr,
    schedule: Vec<f64>,
}

fn quadratic_setup(cfg: &Config) -> CliResult<QuadraticSetup> {
    let name = cfg.string("driver", "colehopf");
    let n = cfg.parsed("n", default_n(&name))?;
    let tree = tree_from(cfg, 12)?;
    let terminal = Expr::parse(&cfg.string("terminal", &default_terminal(n)))?;
    let schedule = cfg.list("k_schedule", &default_k_schedule())?;
    let driver = setup(registry().create(&name, n))?;
    Ok(QuadraticSetup {
        tree,
        driver,
        name,
        n,
        terminal,
        schedule,
    })
}

fn quadratic(cfg: &Config) -> CliResult<Table> {
    let q = quadratic_setup(cfg)?;
    cfg.check_unused()?;
    let xi = q.terminal.leaf_values(&q.tree, q.n)?;
    let triangular = check_triangular(q.driver.as_ref(), &q.tree, &TriangularProbe::default());
    let ab = match q.driver.meta().ab {
        Some(_) => check_ab(q.driver.as_ref(), &q.tree, &AbGrid::default())?
            .pass
            .to_string(),
        None => "none".into(),
    };
    let (sol, history) = solve_quadratic_with_history(&q.tree, &xi, q.driver.as_ref(), &q.schedule)?;

    let mut header: Vec<String> = ["driver", "n", "d", "N", "T", "accepted_k"].map(String::from).into();
    if q.n == 1 {
        header.push("Y0".into());
    } else {
        header.extend((1..=q.n).map(|i| format!("Y0_{i}")));
    }
    header.extend(["residual", "sup_Y", "bmo_Z", "attempts", "triangular", "ab"].map(String::from));
    let mut table = Table::new(header);
    let diag = &sol.diagnostics;
    let mut row = vec![
        q.name.clone(),
        q.n.to_string(),
        q.tree.dim().to_string(),
        q.tree.depth().to_string(),
        num(q.tree.horizon()),
        num(diag.accepted_k.unwrap_or(f64::NAN)),
    ];
    row.extend(sol.y0().iter().map(|&v| num(v)));
    row.extend([
        num(diag.residual_sup),
        num(diag.norms_y.s_inf),
        num(diag.norms_z.bmo),
        history.len().to_string(),
        triangular.pass.to_string(),
        ab,
    ]);
    table.push(row);
    Ok(table)
}

fn stability(cfg: &Config) -> CliResult<Table> {
    let q = quadratic_setup(cfg)?;
    let kind = cfg.string("perturbation", "terminal");
    let eps = cfg.list("eps", &(0..8).map(|i| 0.5f64.powi(i)).collect::<Vec<_>>())?;
    let perturbation = match kind.as_str() {
        "terminal" => {
            let ones = if q.n == 1 {
                "1".to_string()
            } else {
                format!("({})", vec!["1"; q.n].join(", "))
            };
            let direction = Expr::parse(&cfg.string("direction", &ones))?;
            cfg.check_unused()?;
            Perturbation::Terminal(direction.leaf_values(&q.tree, q.n)?)
        }
        "shift" => {
            let shift = cfg.list("shift", &vec![1.0; q.n])?;
            cfg.check_unused()?;
            if shift.len() != q.n {
                return Err(CliError::Config(format!(
                    "shift: expected {} values, got {}",
                    q.n,
                    shift.len()
                )));
            }
            Perturbation::DriverShift(shift)
        }
        other => {
            return Err(CliError::Config(format!(
                "perturbation: expected terminal or shift, got '{other}'"
            )))
        }
    };
    let xi = q.terminal.leaf_values(&q.tree, q.n)?;
    let driver: Arc<dyn Driver> = Arc::from(q.driver);
    let rows = stability_experiment(&q.tree, &xi, driver, &perturbation, &eps, &q.schedule)?;
    let mut table = Table::new(["eps", "lhs", "rhs", "ratio"]);
    for r in rows {
        table.push(vec![num(r.eps), num(r.lhs), num(r.rhs), num(r.ratio())]);
    }
    Ok(table)
}
