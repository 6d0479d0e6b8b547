//! Seeded random linear instances for the oracle-equivalence suite.
//!
//! Every instance is drawn from `ChaCha8Rng::seed_from_u64(seed)`, so a seed
//! fixes the instance completely. The structure decides which solvers apply.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tree::{AdaptedProcess, EntryKind, LeafValues, Shape, TreeModel};

use super::{
    representation_solve, solve_1d_girsanov, solve_backward_exact, solve_outer_product, solve_sliced_picard,
    solve_triangular_cascade, CascadeMethod, FactoredCoefficients, LinearCoefficients, PicardOptions, Solution,
};

/// Which special structure an instance carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Structure {
    General,
    Scalar,
    Triangular,
    Factored,
    Homogeneous,
}

impl Structure {
    pub fn name(self) -> &'static str {
        match self {
            Structure::General => "general",
            Structure::Scalar => "scalar",
            Structure::Triangular => "triangular",
            Structure::Factored => "factored",
            Structure::Homogeneous => "homogeneous",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub seed: u64,
    pub structure: Structure,
    pub tree: TreeModel,
    pub xi: LeafValues,
    pub coeffs: LinearCoefficients,
    pub factored: Option<FactoredCoefficients>,
}

/// Bounds for the random coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceScale {
    /// Entries of `A` are uniform in `[−a, a]`.
    pub a: f64,
    /// Entries of `α` are uniform in `[−alpha, alpha]`.
    pub alpha: f64,
    /// Entries of `β` are uniform in `[−beta, beta]`.
    pub beta: f64,
    /// Entries of the factor `a` of `A = a bᵀ`.
    pub factor: f64,
}

impl Default for InstanceScale {
    fn default() -> Self {
        Self {
            a: 0.5,
            alpha: 0.5,
            beta: 1.0,
            factor: 0.15,
        }
    }
}

impl InstanceScale {
    /// Small enough that every step of every instance fits a slice of size
    /// `delta` on its own, so sliced Picard runs without isolated steps.
    pub fn sliceable(delta: f64) -> Self {
        // worst case: n = 3, d = 2, dt = 1/2; |A|_F ≤ 3√2·a and |α|_F ≤ 3·alpha
        let dt_max: f64 = 0.5;
        let a = 0.9 * delta / (3.0 * 2f64.sqrt() * dt_max.sqrt());
        let alpha = 0.9 * delta / (3.0 * dt_max);
        Self {
            a,
            alpha,
            beta: 1.0,
            factor: a / 3.0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.gen_range(-bound..=bound)
    }
}

fn random_process(
    tree: &TreeModel,
    rng: &mut ChaCha8Rng,
    shape: Shape,
    entry: EntryKind,
    bound: f64,
    keep: impl Fn(usize) -> bool,
) -> AdaptedProcess {
    AdaptedProcess::from_fn(tree, shape, entry, false, |_, v| {
        let m = v.len() / shape.len();
        for (i, x) in v.iter_mut().enumerate() {
            *x = if keep(i / m) { uniform(rng, bound) } else { 0.0 };
        }
    })
}

/// Draws the instance for `seed` with the default scale.
pub fn random_instance(seed: u64) -> Result<RandomInstance> {
    random_instance_with(seed, InstanceScale::default())
}

/// Draws an instance: `n ≤ 3`, `d ≤ 2`, `2 ≤ N ≤ 8` for `d = 1` (`≤ 6` for `d = 2`), `T = 1`.
pub fn random_instance_with(seed: u64, scale: InstanceScale) -> Result<RandomInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let structure = match rng.gen_range(0..5) {
        0 => Structure::General,
        1 => Structure::Scalar,
        2 => Structure::Triangular,
        3 => Structure::Factored,
        _ => Structure::Homogeneous,
    };
    let n = if structure == Structure::Scalar {
        1
    } else {
        rng.gen_range(2..=3)
    };
    let dim = rng.gen_range(1..=2);
    let depth = if dim == 1 {
        rng.gen_range(2..=8)
    } else {
        rng.gen_range(2..=6)
    };
    let tree = TreeModel::new(depth, 1.0, dim)?;

    let xi_values: Vec<f64> = (0..tree.num_leaves() * n).map(|_| uniform(&mut rng, 1.0)).collect();
    let xi = LeafValues::new(&tree, if n == 1 { Shape::Scalar } else { Shape::Vector(n) }, xi_values)?;

    let lower = move |e: usize| e % n <= e / n;
    let (coeffs, factored) = match structure {
        Structure::General | Structure::Scalar => {
            let coeffs = LinearCoefficients {
                alpha: random_process(&tree, &mut rng, Shape::Matrix(n), EntryKind::Real, scale.alpha, |_| {
                    true
                }),
                a: random_process(&tree, &mut rng, Shape::Matrix(n), EntryKind::VecD, scale.a, |_| true),
                beta: random_process(&tree, &mut rng, Shape::Vector(n), EntryKind::Real, scale.beta, |_| true),
            };
            (coeffs, None)
        }
        Structure::Triangular => {
            let coeffs = LinearCoefficients {
                alpha: random_process(&tree, &mut rng, Shape::Matrix(n), EntryKind::Real, scale.alpha, lower),
                a: random_process(&tree, &mut rng, Shape::Matrix(n), EntryKind::VecD, scale.a, lower),
                beta: random_process(&tree, &mut rng, Shape::Vector(n), EntryKind::Real, scale.beta, |_| true),
            };
            (coeffs, None)
        }
        Structure::Factored => {
            let a = random_process(&tree, &mut rng, Shape::Vector(n), EntryKind::VecD, scale.factor, |_| {
                true
            });
            let b: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 1.0)).collect();
            let beta = random_process(&tree, &mut rng, Shape::Vector(n), EntryKind::Real, scale.beta, |_| true);
            let factored = FactoredCoefficients::new(a, b, beta)?;
            (factored.to_coefficients(&tree), Some(factored))
        }
        Structure::Homogeneous => {
            let mut coeffs = LinearCoefficients::zeros(&tree, n);
            coeffs.a = random_process(&tree, &mut rng, Shape::Matrix(n), EntryKind::VecD, scale.a, |_| true);
            (coeffs, None)
        }
    };
    Ok(RandomInstance {
        seed,
        structure,
        tree,
        xi,
        coeffs,
        factored,
    })
}

/// Outcome of one solver on one instance.
#[derive(Debug, Clone)]
pub struct SolverRun {
    pub solver: &'static str,
    pub solution: Solution,
    /// Sup distance to the backward oracle.
    pub deviation: f64,
}

/// Runs the backward oracle and every applicable solver.
pub fn run_oracle_suite(instance: &RandomInstance, picard: &PicardOptions) -> Result<(Solution, Vec<SolverRun>)> {
    let exact = solve_backward_exact(&instance.xi, &instance.coeffs)?;
    let mut runs = Vec::new();
    let mut record = |solver: &'static str, solution: Solution| {
        let deviation = solution.distance(&exact);
        runs.push(SolverRun {
            solver,
            solution,
            deviation,
        });
    };
    let c = &instance.coeffs;
    if c.n() == 1 {
        record("girsanov_1d", solve_1d_girsanov(&instance.xi, c)?);
    }
    if matches!(instance.structure, Structure::Triangular | Structure::Scalar) {
        record(
            "triangular_cascade",
            solve_triangular_cascade(&instance.xi, c, CascadeMethod::Girsanov)?,
        );
    }
    if let Some(f) = &instance.factored {
        record("outer_product", solve_outer_product(&instance.xi, f)?);
    }
    if c.alpha_is_zero() && c.beta_is_zero() {
        record("representation", representation_solve(&instance.xi, &c.a)?);
    }
    record("sliced_picard", solve_sliced_picard(&instance.xi, c, picard)?);
    Ok((exact, runs))
}
