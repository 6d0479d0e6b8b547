//! Triangular quadratic systems: drivers, truncation and the truncation solver.
//!
//! A driver `f(t, ω, y, z)` is evaluated per node. Quadratic drivers are made
//! Lipschitz in `z` by composing with the radial truncation
//! `π^k(z) = (k/|z|) ψ(|z|/k) z`, solved exactly on the tree, and the first
//! truncation level `k` whose solution never leaves the identity region of
//! `π^k` solves the untruncated equation.

mod checks;
mod solve;

pub use checks::{
    ab_submartingale_check, check_ab, check_triangular, nnls, positively_spans, AbCheckReport, AbGrid, AbReport,
    TriangularProbe, TriangularReport,
};
pub use solve::{
    default_k_schedule, solve_lipschitz, solve_quadratic, solve_quadratic_with_history, stability_experiment,
    stability_pair, Perturbation, StabilityRow, TruncationStep,
};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{LabError, Result};
use crate::linear::LinearCoefficients;
use crate::tree::{matvec_into, AdaptedProcess, NodeRef};

/// Smoothing profile: `x` on `[0, 1]`, `1 + (x − 1) − (x − 1)²/4` on `[1, 3]`, `2` from `3` on.
///
/// `C¹`, concave, nondecreasing, `ψ(x) ≤ x` and `ψ' ∈ [0, 1]`.
pub fn psi(x: f64) -> f64 {
    if x <= 1.0 {
        x
    } else if x <= 3.0 {
        let s = x - 1.0;
        1.0 + s - 0.25 * s * s
    } else {
        2.0
    }
}

/// Derivative of [`psi`].
pub fn psi_prime(x: f64) -> f64 {
    if x <= 1.0 {
        1.0
    } else if x <= 3.0 {
        1.0 - 0.5 * (x - 1.0)
    } else {
        0.0
    }
}

/// Default sublinear function `κ(x) = √(1 + x) − 1`.
pub fn kappa(x: f64) -> f64 {
    (1.0 + x).sqrt() - 1.0
}

/// The radial truncation `π^k(z) = (k/|z|) ψ(|z|/k) z` (Frobenius norm over all of `z`).
pub fn truncate(z: &[f64], k: f64) -> Vec<f64> {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= k {
        return z.to_vec();
    }
    let scale = k / norm * psi(norm / k);
    z.iter().map(|v| v * scale).collect()
}

/// The nonnegative weight `ρ` of condition (AB).
#[derive(Debug, Clone, PartialEq)]
pub enum Rho {
    Constant(f64),
    /// Scalar real process on the step levels.
    Process(AdaptedProcess),
}

impl Rho {
    pub fn at(&self, u: NodeRef) -> f64 {
        match self {
            Rho::Constant(r) => *r,
            Rho::Process(p) => p.node(u)[0],
        }
    }
}

/// Data `(ρ, {a_m})` of condition (AB): `a_mᵀ f ≤ ρ + ½|a_mᵀ z|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbData {
    pub rho: Rho,
    pub a_vecs: Vec<Vec<f64>>,
}

/// Structural metadata of a driver.
#[derive(Clone)]
pub struct DriverMeta {
    /// Lipschitz constant in `y`; the implicit node solve contracts with factor `lipschitz_y · dt`.
    pub lipschitz_y: f64,
    /// The constant `L` of the triangular class.
    pub lipschitz: f64,
    pub kappa: fn(f64) -> f64,
    pub ab: Option<AbData>,
}

impl fmt::Debug for DriverMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriverMeta")
            .field("lipschitz_y", &self.lipschitz_y)
            .field("lipschitz", &self.lipschitz)
            .field("ab", &self.ab)
            .finish_non_exhaustive()
    }
}

impl Default for DriverMeta {
    fn default() -> Self {
        Self {
            lipschitz_y: 0.0,
            lipschitz: 1.0,
            kappa,
            ab: None,
        }
    }
}

/// A random field `f(t, ω, y, z)` on the tree. Evaluation must be pure.
///
/// `z` is laid out row by row: `z[i·d + k]` is coordinate `k` of row `i`.
pub trait Driver: Send + Sync {
    fn name(&self) -> &str;
    fn n(&self) -> usize;
    fn meta(&self) -> &DriverMeta;
    fn eval(&self, u: NodeRef, y: &[f64], z: &[f64], out: &mut [f64]);
}

/// `f ≡ 0`.
#[derive(Debug, Clone)]
pub struct ZeroDriver {
    n: usize,
    meta: DriverMeta,
}

impl ZeroDriver {
    pub fn new(n: usize) -> Self {
        let a_vecs = (0..2 * n)
            .map(|m| {
                let mut v = vec![0.0; n];
                v[m / 2] = if m % 2 == 0 { 1.0 } else { -1.0 };
                v
            })
            .collect();
        let ab = Some(AbData {
            rho: Rho::Constant(0.0),
            a_vecs,
        });
        Self {
            n,
            meta: DriverMeta {
                lipschitz: 0.0,
                ab,
                ..DriverMeta::default()
            },
        }
    }
}

impl Driver for ZeroDriver {
    fn name(&self) -> &str {
        "zero"
    }
    fn n(&self) -> usize {
        self.n
    }
    fn meta(&self) -> &DriverMeta {
        &self.meta
    }
    fn eval(&self, _: NodeRef, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// Scalar `f(z) = ½|z|²`, solvable in closed form by `Y = log E[exp ξ]`.
#[derive(Debug, Clone)]
pub struct ColeHopf {
    meta: DriverMeta,
}

impl ColeHopf {
    pub fn new() -> Self {
        let ab = Some(AbData {
            rho: Rho::Constant(0.0),
            a_vecs: vec![vec![1.0], vec![-1.0]],
        });
        Self {
            meta: DriverMeta {
                ab,
                ..DriverMeta::default()
            },
        }
    }
}

impl Default for ColeHopf {
    fn default() -> Self {
        Self::new()
    }
}

impl Driver for ColeHopf {
    fn name(&self) -> &str {
        "colehopf"
    }
    fn n(&self) -> usize {
        1
    }
    fn meta(&self) -> &DriverMeta {
        &self.meta
    }
    fn eval(&self, _: NodeRef, _: &[f64], z: &[f64], out: &mut [f64]) {
        out[0] = 0.5 * z.iter().map(|v| v * v).sum::<f64>();
    }
}

/// Two-dimensional triangular system `f¹ = ½|z¹|²`, `f² = z¹·z²`.
#[derive(Debug, Clone)]
pub struct Tri2 {
    meta: DriverMeta,
}

impl Tri2 {
    pub fn new() -> Self {
        // (1,1)ᵀf = ½|z¹ + z²|² − ½|z²|², (1,−1)ᵀf = ½|z¹ − z²|² − ½|z²|², (−1,0)ᵀf = −½|z¹|²
        let a_vecs = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 0.0]];
        let ab = Some(AbData {
            rho: Rho::Constant(0.0),
            a_vecs,
        });
        Self {
            meta: DriverMeta {
                ab,
                ..DriverMeta::default()
            },
        }
    }
}

impl Default for Tri2 {
    fn default() -> Self {
        Self::new()
    }
}

impl Driver for Tri2 {
    fn name(&self) -> &str {
        "tri2"
    }
    fn n(&self) -> usize {
        2
    }
    fn meta(&self) -> &DriverMeta {
        &self.meta
    }
    fn eval(&self, _: NodeRef, _: &[f64], z: &[f64], out: &mut [f64]) {
        let d = z.len() / 2;
        let (z1, z2) = z.split_at(d);
        out[0] = 0.5 * z1.iter().map(|v| v * v).sum::<f64>();
        out[1] = z1.iter().zip(z2).map(|(a, b)| a * b).sum();
    }
}

/// The linear driver `α y + A z + β`.
#[derive(Debug, Clone)]
pub struct LinearDriver {
    coeffs: LinearCoefficients,
    meta: DriverMeta,
}

impl LinearDriver {
    pub fn new(coeffs: LinearCoefficients) -> Self {
        let alpha = crate::norms::sup_norm(&coeffs.alpha);
        let a = crate::norms::sup_norm(&coeffs.a);
        let meta = DriverMeta {
            lipschitz_y: alpha,
            lipschitz: alpha.max(a),
            ..DriverMeta::default()
        };
        Self { coeffs, meta }
    }
}

impl Driver for LinearDriver {
    fn name(&self) -> &str {
        "linear"
    }
    fn n(&self) -> usize {
        self.coeffs.n()
    }
    fn meta(&self) -> &DriverMeta {
        &self.meta
    }
    fn eval(&self, u: NodeRef, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.coeffs.drift_at(u, y, z, out)
    }
}

/// `f + shift` for a constant vector `shift`.
#[derive(Clone)]
pub struct ShiftedDriver {
    base: Arc<dyn Driver>,
    shift: Vec<f64>,
    name: String,
    meta: DriverMeta,
}

impl ShiftedDriver {
    pub fn new(base: Arc<dyn Driver>, shift: Vec<f64>) -> Self {
        let name = format!("{}+shift", base.name());
        let mut meta = base.meta().clone();
        meta.ab = meta.ab.take().map(|ab| {
            // a_mᵀ(f + s) ≤ (ρ + max_m a_mᵀ s) + ½|a_mᵀ z|²
            let extra = ab
                .a_vecs
                .iter()
                .map(|a| a.iter().zip(&shift).map(|(x, y)| x * y).sum::<f64>())
                .fold(0.0, f64::max);
            let rho = match ab.rho {
                Rho::Constant(r) => Rho::Constant(r + extra),
                Rho::Process(p) => {
                    let tree = p.tree();
                    Rho::Process(AdaptedProcess::from_fn(&tree, p.shape(), p.entry(), false, |u, v| {
                        v[0] = p.node(u)[0] + extra
                    }))
                }
            };
            AbData { rho, a_vecs: ab.a_vecs }
        });
        Self {
            base,
            shift,
            name,
            meta,
        }
    }
}

impl Driver for ShiftedDriver {
    fn name(&self) -> &str {
        &self.name
    }
    fn n(&self) -> usize {
        self.base.n()
    }
    fn meta(&self) -> &DriverMeta {
        &self.meta
    }
    fn eval(&self, u: NodeRef, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.base.eval(u, y, z, out);
        for (o, s) in out.iter_mut().zip(&self.shift) {
            *o += s;
        }
    }
}

type DriverFn = dyn Fn(NodeRef, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// A driver given by a closure, for custom experiments.
pub struct FnDriver {
    name: String,
    n: usize,
    f: Box<DriverFn>,
    meta: DriverMeta,
}

impl FnDriver {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        meta: DriverMeta,
        f: impl Fn(NodeRef, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            n,
            f: Box::new(f),
            meta,
        }
    }
}

impl Driver for FnDriver {
    fn name(&self) -> &str {
        &self.name
    }
    fn n(&self) -> usize {
        self.n
    }
    fn meta(&self) -> &DriverMeta {
        &self.meta
    }
    fn eval(&self, u: NodeRef, y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.f)(u, y, z, out)
    }
}

/// `f^{(k)}(y, z) = f(y, π^k(z))`.
///
/// Since `π^k(z)` is a multiple `c z` with `c ∈ [0, 1]`, the truncated driver
/// satisfies (AB) with the same data as the base driver.
pub struct TruncatedDriver<'a> {
    base: &'a dyn Driver,
    k: f64,
    name: String,
}

impl<'a> TruncatedDriver<'a> {
    pub fn new(base: &'a dyn Driver, k: f64) -> Self {
        Self {
            base,
            k,
            name: format!("{}@k={k}", base.name()),
        }
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// The weaker (AB) data `(ρ + max_m |a_m|², {2 a_m})`, valid when `ρ ≤ min_m |a_m|²`.
    pub fn doubled_ab(&self) -> Option<AbData> {
        self.base.meta().ab.as_ref().map(|ab| {
            let extra = ab
                .a_vecs
                .iter()
                .map(|a| a.iter().map(|v| v * v).sum::<f64>())
                .fold(0.0, f64::max);
            let rho = match &ab.rho {
                Rho::Constant(r) => Rho::Constant(r + extra),
                Rho::Process(p) => {
                    let tree = p.tree();
                    Rho::Process(AdaptedProcess::from_fn(&tree, p.shape(), p.entry(), false, |u, v| {
                        v[0] = p.node(u)[0] + extra
                    }))
                }
            };
            AbData {
                rho,
                a_vecs: ab.a_vecs.iter().map(|a| a.iter().map(|v| 2.0 * v).collect()).collect(),
            }
        })
    }
}

impl Driver for TruncatedDriver<'_> {
    fn name(&self) -> &str {
        &self.name
    }
    fn n(&self) -> usize {
        self.base.n()
    }
    fn meta(&self) -> &DriverMeta {
        self.base.meta()
    }
    fn eval(&self, u: NodeRef, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.base.eval(u, y, &truncate(z, self.k), out)
    }
}

/// The drift process `f(u, Y_u, Z_u)` of a candidate pair.
pub fn drift_process(driver: &dyn Driver, y: &AdaptedProcess, z: &AdaptedProcess) -> AdaptedProcess {
    let tree = z.tree();
    AdaptedProcess::from_fn(&tree, y.shape(), y.entry(), false, |u, out| {
        driver.eval(u, y.node(u), z.node(u), out)
    })
}

type Constructor = Box<dyn Fn(usize) -> Result<Box<dyn Driver>> + Send + Sync>;

/// Drivers addressable by name (builtins plus registered plug-ins).
pub struct DriverRegistry {
    entries: BTreeMap<String, Constructor>,
}

impl DriverRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// `zero`, `colehopf` (n = 1) and `tri2` (n = 2).
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("zero", |n| Ok(Box::new(ZeroDriver::new(n))));
        r.register("colehopf", |n| {
            expect_n("colehopf", n, 1)?;
            Ok(Box::new(ColeHopf::new()))
        });
        r.register("tri2", |n| {
            expect_n("tri2", n, 2)?;
            Ok(Box::new(Tri2::new()))
        });
        r
    }

    pub fn register(&mut self, id: &str, make: impl Fn(usize) -> Result<Box<dyn Driver>> + Send + Sync + 'static) {
        self.entries.insert(id.to_string(), Box::new(make));
    }

    pub fn create(&self, id: &str, n: usize) -> Result<Box<dyn Driver>> {
        let make = self.entries.get(id).ok_or_else(|| {
            LabError::InvalidArgument(format!("unknown driver '{id}' (known: {})", self.names().join(", ")))
        })?;
        make(n)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

fn expect_n(id: &str, n: usize, expected: usize) -> Result<()> {
    if n != expected {
        return Err(LabError::InvalidArgument(format!(
            "driver '{id}' needs n = {expected}, got n = {n}"
        )));
    }
    Ok(())
}

/// `(AZ)` helper for drivers that wrap matrices, re-exported for plug-ins.
pub fn apply_matrix(a: &[f64], z: &[f64], n: usize, d: usize, out: &mut [f64]) {
    matvec_into(a, z, n, d, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_values() {
        assert_eq!(psi(0.5), 0.5);
        assert_eq!(psi(2.0), 1.75);
        assert_eq!(psi(3.0), 2.0);
        assert_eq!(psi(10.0), 2.0);
        assert_eq!(psi_prime(3.0), 0.0);
        assert_eq!(psi_prime(1.0), 1.0);
    }

    #[test]
    fn truncation_regions() {
        let z = [0.3, -0.4];
        assert_eq!(truncate(&z, 1.0), z.to_vec());
        let big = [30.0, 40.0];
        let t = truncate(&big, 2.0);
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 4.0).abs() < 1e-12);
        assert!((t[0] / t[1] - 0.75).abs() < 1e-12);
        assert_eq!(truncate(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn registry_builds_builtins() {
        let r = DriverRegistry::with_builtins();
        assert_eq!(r.create("tri2", 2).unwrap().n(), 2);
        assert!(r.create("colehopf", 2).is_err());
        assert!(r.create("nope", 1).is_err());
    }

    #[test]
    fn shifted_driver_adds() {
        let base: Arc<dyn Driver> = Arc::new(ColeHopf::new());
        let s = ShiftedDriver::new(base, vec![0.25]);
        let mut out = [0.0];
        s.eval(NodeRef::ROOT, &[0.0], &[2.0], &mut out);
        assert_eq!(out[0], 2.25);
    }
}
