//! Exact discrete model of the Brownian filtration.
//!
//! A [`TreeModel`] is the non-recombining Rademacher walk with `N` steps of
//! length `dt = T / N` in dimension `d ∈ {1, 2}`. Each node has `2^d` children,
//! one per sign pattern of the increment `ΔB ∈ {−√dt, +√dt}^d`. Nodes are stored
//! level by level in flat arrays: the children of node `i` at level `k` are the
//! nodes `i·2^d .. i·2^d + 2^d` at level `k + 1`.
//!
//! Conditional expectations are exact leaf averages, so every identity below
//! (tower property, martingale representation) holds up to floating rounding.
//!
//! For `d = 2` the filtration is *incomplete*: the four children span
//! `{1, ΔB¹, ΔB², ΔB¹ΔB²}` and only the first three directions are reachable by
//! a stochastic integral. The integrand of a martingale is therefore defined as
//! the projection `Z_u = E_u[M_child ΔB] / dt`, and the leftover
//! `ΔB¹ΔB²`-component is reported as the orthogonal part of the increment.

use std::fmt;

use crate::error::{LabError, Result};

/// Leaves allowed when no explicit budget is given.
pub const DEFAULT_MAX_LEAVES: u128 = 1 << 26;

/// Environment variable overriding [`DEFAULT_MAX_LEAVES`].
pub const MAX_NODES_ENV: &str = "BSDE_LAB_MAX_NODES";

/// Position of a node: its level `0..=N` and its index within the level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub level: usize,
    pub index: usize,
}

impl NodeRef {
    pub const ROOT: NodeRef = NodeRef { level: 0, index: 0 };

    pub fn new(level: usize, index: usize) -> Self {
        Self { level, index }
    }

    pub fn child(self, branching: usize, j: usize) -> NodeRef {
        debug_assert!(j < branching);
        NodeRef {
            level: self.level + 1,
            index: self.index * branching + j,
        }
    }

    pub fn parent(self, branching: usize) -> Option<NodeRef> {
        (self.level > 0).then(|| NodeRef {
            level: self.level - 1,
            index: self.index / branching,
        })
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node(level {}, index {})", self.level, self.index)
    }
}

/// The discrete `2^d`-ary Brownian filtration.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeModel {
    depth: usize,
    horizon: f64,
    dim: usize,
    dt: f64,
    step: f64,
    branching: usize,
    /// `branching × dim` increments; child `j` moves coordinate `k` down iff bit `k` of `j` is set.
    increments: Vec<f64>,
}

fn leaf_budget_from_env() -> u128 {
    std::env::var(MAX_NODES_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<u128>().ok())
        .unwrap_or(DEFAULT_MAX_LEAVES)
}

impl TreeModel {
    /// Builds a tree with the default leaf budget (`2^26`, or `BSDE_LAB_MAX_NODES`).
    pub fn new(depth: usize, horizon: f64, dim: usize) -> Result<Self> {
        Self::with_budget(depth, horizon, dim, leaf_budget_from_env())
    }

    pub fn with_budget(depth: usize, horizon: f64, dim: usize, max_leaves: u128) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(LabError::InvalidDim(dim));
        }
        if depth == 0 {
            return Err(LabError::InvalidArgument("depth N must be at least 1".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(LabError::InvalidArgument(format!(
                "horizon T = {horizon} must be positive"
            )));
        }
        let branching = 1usize << dim;
        let leaves = (branching as u128).checked_pow(depth as u32).unwrap_or(u128::MAX);
        if leaves > max_leaves {
            return Err(LabError::BudgetExceeded {
                leaves,
                budget: max_leaves,
            });
        }
        let dt = horizon / depth as f64;
        let step = dt.sqrt();
        let mut increments = Vec::with_capacity(branching * dim);
        for j in 0..branching {
            for k in 0..dim {
                increments.push(if (j >> k) & 1 == 0 { step } else { -step });
            }
        }
        Ok(Self {
            depth,
            horizon,
            dim,
            dt,
            step,
            branching,
            increments,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    /// Number of nodes at `level`, i.e. `branching^level`.
    pub fn level_len(&self, level: usize) -> usize {
        self.branching.pow(level as u32)
    }

    pub fn num_leaves(&self) -> usize {
        self.level_len(self.depth)
    }

    pub fn total_nodes(&self) -> usize {
        (0..=self.depth).map(|k| self.level_len(k)).sum()
    }

    /// Increment `ΔB` carried by the edge into child `j`.
    pub fn increment(&self, j: usize) -> &[f64] {
        &self.increments[j * self.dim..(j + 1) * self.dim]
    }

    /// Range of leaf indices descending from `u`.
    pub fn leaf_range(&self, u: NodeRef) -> std::ops::Range<usize> {
        let width = self.level_len(self.depth - u.level);
        u.index * width..(u.index + 1) * width
    }

    /// Value of the walk `B` at `u`.
    ///
    /// Computed as `step · (ups − downs)` per coordinate, so balanced paths
    /// sit exactly at zero.
    pub fn brownian_at(&self, u: NodeRef) -> Vec<f64> {
        let mut net = vec![0i64; self.dim];
        let mut index = u.index;
        for _ in 0..u.level {
            let j = index % self.branching;
            index /= self.branching;
            for (k, n) in net.iter_mut().enumerate() {
                *n += if (j >> k) & 1 == 1 { -1 } else { 1 };
            }
        }
        net.into_iter().map(|n| n as f64 * self.step()).collect()
    }

    /// The walk `B` as a terminal-inclusive process.
    pub fn brownian(&self) -> AdaptedProcess {
        let mut process = AdaptedProcess::zeros(self, Shape::Scalar, EntryKind::VecD, true);
        let mut net = vec![vec![0i64; self.dim]];
        for level in 1..=self.depth {
            net = (0..self.level_len(level))
                .map(|idx| {
                    let j = idx % self.branching;
                    let parent = &net[idx / self.branching];
                    (0..self.dim)
                        .map(|k| parent[k] + if (j >> k) & 1 == 1 { -1 } else { 1 })
                        .collect()
                })
                .collect();
            for (idx, counts) in net.iter().enumerate() {
                for (v, &c) in process.node_mut(NodeRef::new(level, idx)).iter_mut().zip(counts) {
                    *v = c as f64 * self.step();
                }
            }
        }
        process
    }

    /// Average over the children of node `idx` of a level-`k+1` array with `width` entries per node.
    pub fn mean_children(&self, next: &[f64], width: usize, idx: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let base = idx * self.branching;
        for j in 0..self.branching {
            let child = &next[(base + j) * width..(base + j + 1) * width];
            for (o, c) in out.iter_mut().zip(child) {
                *o += c;
            }
        }
        let inv = 1.0 / self.branching as f64;
        out.iter_mut().for_each(|o| *o *= inv);
    }

    /// Integrand of the children of node `idx`: `z[c·d + k] = E[next_c · ΔB^k] / dt`.
    pub fn project_children(&self, next: &[f64], width: usize, idx: usize, z: &mut [f64]) {
        debug_assert_eq!(z.len(), width * self.dim);
        z.iter_mut().for_each(|v| *v = 0.0);
        let base = idx * self.branching;
        for j in 0..self.branching {
            let child = &next[(base + j) * width..(base + j + 1) * width];
            let inc = self.increment(j);
            for (c, value) in child.iter().enumerate() {
                for (k, dbk) in inc.iter().enumerate() {
                    z[c * self.dim + k] += value * dbk;
                }
            }
        }
        let scale = 1.0 / (self.branching as f64 * self.dt);
        z.iter_mut().for_each(|v| *v *= scale);
    }

    /// Weight of child `j` along the orthogonal (non-representable) direction,
    /// normalized so that its mean square over the children is one. `None` for `d = 1`.
    pub fn orthogonal_weight(&self, j: usize) -> Option<f64> {
        (self.dim == 2).then(|| {
            let inc = self.increment(j);
            (inc[0] * inc[1]).signum()
        })
    }

    /// Removes the orthogonal component from per-child defects (`branching × width`, in place).
    pub fn remove_orthogonal(&self, defects: &mut [f64], width: usize) {
        if self.dim < 2 {
            return;
        }
        let inv = 1.0 / self.branching as f64;
        for c in 0..width {
            let coeff: f64 = (0..self.branching)
                .map(|j| defects[j * width + c] * self.orthogonal_weight(j).unwrap_or(0.0))
                .sum::<f64>()
                * inv;
            for j in 0..self.branching {
                defects[j * width + c] -= coeff * self.orthogonal_weight(j).unwrap_or(0.0);
            }
        }
    }

    /// `E_u[X]` for leaf values `X`: the uniform average over the leaves below `u`.
    pub fn conditional_expectation(&self, x: &LeafValues, u: NodeRef) -> Result<Vec<f64>> {
        x.check_on(self)?;
        if u.level > self.depth || u.index >= self.level_len(u.level) {
            return Err(LabError::ShapeMismatch(format!("{u} is not a node of this tree")));
        }
        let width = x.width();
        let range = self.leaf_range(u);
        let count = range.len() as f64;
        let mut out = vec![0.0; width];
        for leaf in range {
            for (o, v) in out.iter_mut().zip(x.leaf(leaf)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= count);
        Ok(out)
    }

    /// The whole martingale `u ↦ E_u[X]`, computed by exact level averaging.
    pub fn conditional_expectations(&self, x: &LeafValues) -> Result<AdaptedProcess> {
        x.check_on(self)?;
        let width = x.width();
        let mut levels = vec![Vec::new(); self.depth + 1];
        levels[self.depth] = x.values.clone();
        for level in (0..self.depth).rev() {
            let len = self.level_len(level);
            let mut current = vec![0.0; len * width];
            for idx in 0..len {
                self.mean_children(
                    &levels[level + 1],
                    width,
                    idx,
                    &mut current[idx * width..(idx + 1) * width],
                );
            }
            levels[level] = current;
        }
        Ok(AdaptedProcess::from_levels(
            self,
            x.shape,
            EntryKind::Real,
            true,
            levels,
        ))
    }

    /// Martingale representation `M = E[ξ | F]`, `M_child = M_u + Z_u · ΔB (+ orthogonal part for d = 2)`.
    pub fn martingale_represent(&self, xi: &LeafValues) -> Result<(AdaptedProcess, AdaptedProcess)> {
        let m = self.conditional_expectations(xi)?;
        let z = self.integrand_of(&m)?;
        Ok((m, z))
    }

    /// Integrand `Z_u = E_u[Y_child ΔB] / dt` of a terminal-inclusive real process, on levels `0..N`.
    pub fn integrand_of(&self, y: &AdaptedProcess) -> Result<AdaptedProcess> {
        y.check_on(self)?;
        if !y.includes_terminal() || y.entry() != EntryKind::Real {
            return Err(LabError::ShapeMismatch(
                "integrand needs a terminal-inclusive real-valued process".into(),
            ));
        }
        let width = y.width();
        let mut z = AdaptedProcess::zeros(self, y.shape(), EntryKind::VecD, false);
        for level in 0..self.depth {
            let next = y.level(level + 1).to_vec();
            let zl = z.level_mut(level);
            for idx in 0..self.level_len(level) {
                let zw = width * self.dim;
                self.project_children(&next, width, idx, &mut zl[idx * zw..(idx + 1) * zw]);
            }
        }
        Ok(z)
    }
}

/// Algebraic shape of the values of a process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize),
}

impl Shape {
    /// Number of (real or `R^d`) entries.
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(n) => n * n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `n` of the shape (1 for scalars).
    pub fn n(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) | Shape::Matrix(n) => n,
        }
    }
}

/// Whether each entry is a real number or a vector in `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Real,
    VecD,
}

/// Node-indexed values with a uniform shape.
///
/// Layout of one node: entry `e` (row-major for matrices) occupies
/// `e·m .. (e+1)·m` where `m = d` for [`EntryKind::VecD`] and `m = 1` otherwise.
/// Processes indexed by step start live on levels `0..N`; terminal-inclusive
/// ones (such as `Y`) on `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    shape: Shape,
    entry: EntryKind,
    dim: usize,
    branching: usize,
    horizon: f64,
    includes_terminal: bool,
    levels: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn zeros(tree: &TreeModel, shape: Shape, entry: EntryKind, includes_terminal: bool) -> Self {
        let width = shape.len() * if entry == EntryKind::VecD { tree.dim } else { 1 };
        let count = tree.depth + usize::from(includes_terminal);
        let levels = (0..count).map(|k| vec![0.0; tree.level_len(k) * width]).collect();
        Self {
            shape,
            entry,
            dim: tree.dim,
            branching: tree.branching,
            horizon: tree.horizon,
            includes_terminal,
            levels,
        }
    }

    pub fn from_fn(
        tree: &TreeModel,
        shape: Shape,
        entry: EntryKind,
        includes_terminal: bool,
        mut f: impl FnMut(NodeRef, &mut [f64]),
    ) -> Self {
        let mut p = Self::zeros(tree, shape, entry, includes_terminal);
        let width = p.width();
        for (level, values) in p.levels.iter_mut().enumerate() {
            for (idx, chunk) in values.chunks_mut(width).enumerate() {
                f(NodeRef::new(level, idx), chunk);
            }
        }
        p
    }

    pub(crate) fn from_levels(
        tree: &TreeModel,
        shape: Shape,
        entry: EntryKind,
        includes_terminal: bool,
        levels: Vec<Vec<f64>>,
    ) -> Self {
        Self {
            shape,
            entry,
            dim: tree.dim,
            branching: tree.branching,
            horizon: tree.horizon,
            includes_terminal,
            levels,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn entry(&self) -> EntryKind {
        self.entry
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Time step of the underlying tree.
    pub fn dt(&self) -> f64 {
        self.horizon / self.depth() as f64
    }

    /// The tree this process lives on (rebuilt from its parameters, no budget check).
    pub fn tree(&self) -> TreeModel {
        TreeModel::with_budget(self.depth(), self.horizon, self.dim, u128::MAX)
            .expect("process parameters describe a valid tree")
    }

    /// Width of the `R^d` (or `R`) entries.
    pub fn entry_width(&self) -> usize {
        match self.entry {
            EntryKind::Real => 1,
            EntryKind::VecD => self.dim,
        }
    }

    /// Number of reals stored per node.
    pub fn width(&self) -> usize {
        self.shape.len() * self.entry_width()
    }

    pub fn includes_terminal(&self) -> bool {
        self.includes_terminal
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Number of time steps `N` of the underlying tree.
    pub fn depth(&self) -> usize {
        self.levels.len() - usize::from(self.includes_terminal)
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.levels[k]
    }

    pub fn node(&self, u: NodeRef) -> &[f64] {
        let w = self.width();
        &self.levels[u.level][u.index * w..(u.index + 1) * w]
    }

    pub fn node_mut(&mut self, u: NodeRef) -> &mut [f64] {
        let w = self.width();
        &mut self.levels[u.level][u.index * w..(u.index + 1) * w]
    }

    /// Euclidean (Frobenius) norm of the value at `u`.
    pub fn norm_at(&self, u: NodeRef) -> f64 {
        self.node(u).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Verifies that the process lives on `tree`.
    pub fn check_on(&self, tree: &TreeModel) -> Result<()> {
        let expected = tree.depth + usize::from(self.includes_terminal);
        if self.dim != tree.dim
            || self.branching != tree.branching
            || self.levels.len() != expected
            || self.horizon != tree.horizon
        {
            return Err(LabError::ShapeMismatch(format!(
                "process (d = {}, {} levels) does not live on tree (d = {}, N = {})",
                self.dim,
                self.levels.len(),
                tree.dim,
                tree.depth
            )));
        }
        Ok(())
    }

    pub fn expect(&self, shape: Shape, entry: EntryKind, what: &str) -> Result<()> {
        if self.shape != shape || self.entry != entry {
            return Err(LabError::ShapeMismatch(format!(
                "{what}: expected {shape:?}/{entry:?}, found {:?}/{:?}",
                self.shape, self.entry
            )));
        }
        Ok(())
    }

    /// Leaf values of a terminal-inclusive real process.
    pub fn terminal(&self) -> Option<LeafValues> {
        (self.includes_terminal && self.entry == EntryKind::Real).then(|| LeafValues {
            shape: self.shape,
            values: self.levels.last().cloned().unwrap_or_default(),
        })
    }

    /// Copy restricted to the step levels `0..N`.
    pub fn without_terminal(&self) -> AdaptedProcess {
        let mut p = self.clone();
        if p.includes_terminal {
            p.levels.pop();
            p.includes_terminal = false;
        }
        p
    }

    /// The scalar process `|γ|`.
    pub fn norms(&self) -> AdaptedProcess {
        let w = self.width();
        let levels = self
            .levels
            .iter()
            .map(|l| {
                l.chunks(w)
                    .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect()
            })
            .collect();
        AdaptedProcess {
            shape: Shape::Scalar,
            entry: EntryKind::Real,
            dim: self.dim,
            branching: self.branching,
            horizon: self.horizon,
            includes_terminal: self.includes_terminal,
            levels,
        }
    }

    /// Entrywise `self − other` on common levels.
    pub fn sub(&self, other: &AdaptedProcess) -> Result<AdaptedProcess> {
        if self.width() != other.width() || self.dim != other.dim {
            return Err(LabError::ShapeMismatch(
                "difference of processes with different shapes".into(),
            ));
        }
        let count = self.levels.len().min(other.levels.len());
        let levels = (0..count)
            .map(|k| {
                self.levels[k]
                    .iter()
                    .zip(&other.levels[k])
                    .map(|(a, b)| a - b)
                    .collect()
            })
            .collect();
        Ok(AdaptedProcess {
            shape: self.shape,
            entry: self.entry,
            dim: self.dim,
            branching: self.branching,
            horizon: self.horizon,
            includes_terminal: self.includes_terminal && other.includes_terminal,
            levels,
        })
    }

    pub fn scaled(&self, c: f64) -> AdaptedProcess {
        let mut p = self.clone();
        p.levels.iter_mut().flatten().for_each(|v| *v *= c);
        p
    }

    /// Largest entrywise distance to `other` over common levels.
    pub fn max_abs_diff(&self, other: &AdaptedProcess) -> f64 {
        self.levels
            .iter()
            .zip(&other.levels)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Product `A Z` with `(AZ)^i = Σ_j A^i_j · Z^j` (`·` the `R^d` inner product when entries are vectors).
    pub fn matvec(a: &AdaptedProcess, z: &AdaptedProcess) -> Result<AdaptedProcess> {
        let n = match a.shape {
            Shape::Matrix(n) => n,
            _ => return Err(LabError::ShapeMismatch("left factor must be a matrix".into())),
        };
        if z.shape != Shape::Vector(n) || a.entry != z.entry || a.dim != z.dim {
            return Err(LabError::ShapeMismatch(
                "matrix/vector product with incompatible shapes".into(),
            ));
        }
        let m = a.entry_width();
        let count = a.levels.len().min(z.levels.len());
        let levels = (0..count)
            .map(|k| {
                a.levels[k]
                    .chunks(n * n * m)
                    .zip(z.levels[k].chunks(n * m))
                    .flat_map(|(ak, zk)| {
                        let mut out = vec![0.0; n];
                        matvec_into(ak, zk, n, m, &mut out);
                        out
                    })
                    .collect()
            })
            .collect();
        Ok(AdaptedProcess {
            shape: Shape::Vector(n),
            entry: EntryKind::Real,
            dim: a.dim,
            branching: a.branching,
            horizon: a.horizon,
            includes_terminal: a.includes_terminal && z.includes_terminal,
            levels,
        })
    }
}

/// `out^i = Σ_j a^i_j · z^j` for one node, entries of width `m`.
pub fn matvec_into(a: &[f64], z: &[f64], n: usize, m: usize, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate().take(n) {
        let mut acc = 0.0;
        for j in 0..n {
            let aij = &a[(i * n + j) * m..(i * n + j + 1) * m];
            let zj = &z[j * m..(j + 1) * m];
            acc += aij.iter().zip(zj).map(|(x, y)| x * y).sum::<f64>();
        }
        *o = acc;
    }
}

/// Real values on the leaves, e.g. a terminal condition `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafValues {
    shape: Shape,
    values: Vec<f64>,
}

impl LeafValues {
    pub fn new(tree: &TreeModel, shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != tree.num_leaves() * shape.len() {
            return Err(LabError::ShapeMismatch(format!(
                "{} leaf values for {} leaves of width {}",
                values.len(),
                tree.num_leaves(),
                shape.len()
            )));
        }
        Ok(Self { shape, values })
    }

    /// Builds leaf values from the terminal walk `B_T` of each leaf.
    pub fn from_fn(tree: &TreeModel, shape: Shape, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let b = tree.brownian();
        let w = shape.len();
        let mut values = vec![0.0; tree.num_leaves() * w];
        for (leaf, out) in values.chunks_mut(w).enumerate() {
            f(b.node(NodeRef::new(tree.depth, leaf)), out);
        }
        Self { shape, values }
    }

    pub fn constant(tree: &TreeModel, value: &[f64]) -> Self {
        let shape = if value.len() == 1 {
            Shape::Scalar
        } else {
            Shape::Vector(value.len())
        };
        Self {
            shape,
            values: value.repeat(tree.num_leaves()),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn width(&self) -> usize {
        self.shape.len()
    }

    pub fn leaf(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values
            .chunks(self.width())
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Component `i` as a scalar leaf field.
    pub fn component(&self, i: usize) -> LeafValues {
        let w = self.width();
        LeafValues {
            shape: Shape::Scalar,
            values: self.values.chunks(w).map(|c| c[i]).collect(),
        }
    }

    /// `Σ_i b_i ξ^i`.
    pub fn dot(&self, b: &[f64]) -> LeafValues {
        let w = self.width();
        LeafValues {
            shape: Shape::Scalar,
            values: self
                .values
                .chunks(w)
                .map(|c| c.iter().zip(b).map(|(x, y)| x * y).sum())
                .collect(),
        }
    }

    pub fn map(&self, shape: Shape, mut f: impl FnMut(&[f64], &mut [f64])) -> LeafValues {
        let w = self.width();
        let mut values = vec![0.0; self.values.len() / w * shape.len()];
        for (src, dst) in self.values.chunks(w).zip(values.chunks_mut(shape.len())) {
            f(src, dst);
        }
        LeafValues { shape, values }
    }

    pub(crate) fn check_on(&self, tree: &TreeModel) -> Result<()> {
        if self.values.len() != tree.num_leaves() * self.width() {
            return Err(LabError::ShapeMismatch(format!(
                "leaf field with {} values does not fit {} leaves",
                self.values.len(),
                tree.num_leaves()
            )));
        }
        Ok(())
    }
}

/// Stopping time given by hereditary flags: `τ` is the level of the first flagged node on a path.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingTime {
    flags: Vec<Vec<bool>>,
}

impl StoppingTime {
    pub fn new(tree: &TreeModel, flags: Vec<Vec<bool>>) -> Result<Self> {
        if flags.len() != tree.depth + 1 || flags.iter().enumerate().any(|(k, f)| f.len() != tree.level_len(k)) {
            return Err(LabError::ShapeMismatch("stopping flags must cover levels 0..=N".into()));
        }
        if !flags[tree.depth].iter().all(|&f| f) {
            return Err(LabError::InvalidArgument("every path must stop by level N".into()));
        }
        for level in 0..tree.depth {
            for (idx, &f) in flags[level].iter().enumerate() {
                if f && !(0..tree.branching).all(|j| flags[level + 1][idx * tree.branching + j]) {
                    return Err(LabError::InvalidArgument(format!(
                        "stopping flags are not hereditary at {}",
                        NodeRef::new(level, idx)
                    )));
                }
            }
        }
        Ok(Self { flags })
    }

    /// The deterministic time `τ ≡ level`.
    pub fn at_level(tree: &TreeModel, level: usize) -> Self {
        let flags = (0..=tree.depth).map(|k| vec![k >= level; tree.level_len(k)]).collect();
        Self { flags }
    }

    /// Whether `τ ≤ level(u)`, which is `F_u`-measurable.
    pub fn stopped(&self, u: NodeRef) -> bool {
        self.flags[u.level][u.index]
    }

    /// `τ` along the path ending at `leaf`.
    pub fn level_on_path(&self, tree: &TreeModel, leaf: usize) -> usize {
        (0..=tree.depth)
            .find(|&k| self.flags[k][leaf / tree.level_len(tree.depth - k)])
            .unwrap_or(tree.depth)
    }

    pub fn flags(&self) -> &[Vec<bool>] {
        &self.flags
    }
}

/// `0 = τ_0 ≤ τ_1 ≤ … ≤ τ_m = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomPartition {
    times: Vec<StoppingTime>,
}

impl RandomPartition {
    pub fn new(tree: &TreeModel, times: Vec<StoppingTime>) -> Result<Self> {
        if times.len() < 2 {
            return Err(LabError::InvalidArgument("a partition needs at least two times".into()));
        }
        if !times[0].flags.iter().flatten().all(|&f| f) {
            return Err(LabError::InvalidArgument("τ_0 must be identically 0".into()));
        }
        let last = &times[times.len() - 1];
        if (0..tree.depth).any(|k| last.flags[k].iter().any(|&f| f)) {
            return Err(LabError::InvalidArgument("τ_m must be identically T".into()));
        }
        for pair in times.windows(2) {
            let monotone = pair[0]
                .flags
                .iter()
                .flatten()
                .zip(pair[1].flags.iter().flatten())
                .all(|(&early, &late)| !late || early);
            if !monotone {
                return Err(LabError::InvalidArgument("partition is not pathwise monotone".into()));
            }
        }
        Ok(Self { times })
    }

    /// Uniform partition with the given interior levels.
    pub fn deterministic(tree: &TreeModel, levels: &[usize]) -> Result<Self> {
        let mut all = vec![0];
        all.extend(levels.iter().copied().filter(|&l| l > 0 && l < tree.depth));
        all.push(tree.depth);
        all.sort_unstable();
        all.dedup();
        Self::new(tree, all.into_iter().map(|l| StoppingTime::at_level(tree, l)).collect())
    }

    /// Number of slices `m`.
    pub fn len(&self) -> usize {
        self.times.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.times.len() < 2
    }

    pub fn times(&self) -> &[StoppingTime] {
        &self.times
    }

    /// Whether the step starting at `u` lies in slice `k ∈ 1..=m`, i.e. `τ_{k−1} ≤ level(u) < τ_k`.
    pub fn in_slice(&self, k: usize, u: NodeRef) -> bool {
        self.times[k - 1].stopped(u) && !self.times[k].stopped(u)
    }

    /// Slice containing the step starting at `u` (level `< N`).
    pub fn slice_of(&self, u: NodeRef) -> usize {
        (1..self.times.len())
            .find(|&k| !self.times[k].stopped(u))
            .unwrap_or(self.times.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn smallest_tree() {
        let t = TreeModel::new(1, 1.0, 1).unwrap();
        assert_eq!(t.total_nodes(), 3);
        assert_eq!(t.num_leaves(), 2);
        assert_eq!(t.step(), 1.0);
    }

    #[test]
    fn two_step_tree() {
        let t = TreeModel::new(2, 1.0, 1).unwrap();
        assert_eq!(t.total_nodes(), 7);
        assert!((t.step() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn two_dimensional_tree() {
        let t = TreeModel::new(3, 1.0, 2).unwrap();
        assert_eq!(t.branching(), 4);
        assert_eq!(t.num_leaves(), 64);
        let mut patterns: Vec<Vec<i32>> = (0..4)
            .map(|j| t.increment(j).iter().map(|v| v.signum() as i32).collect())
            .collect();
        patterns.sort();
        patterns.dedup();
        assert_eq!(patterns.len(), 4);
    }

    #[test]
    fn horizon_is_recovered() {
        for &(n, horizon) in &[(3usize, 1.0), (7, 0.3), (11, 2.5)] {
            let t = TreeModel::new(n, horizon, 1).unwrap();
            assert!((t.dt() * n as f64 - horizon).abs() <= f64::EPSILON * horizon);
        }
    }

    #[test]
    fn budget_and_dimension_errors() {
        assert!(matches!(
            TreeModel::with_budget(10, 1.0, 1, 512),
            Err(LabError::BudgetExceeded { .. })
        ));
        assert!(matches!(TreeModel::new(3, 1.0, 3), Err(LabError::InvalidDim(3))));
        assert!(TreeModel::new(0, 1.0, 1).is_err());
    }

    #[test]
    fn node_navigation() {
        let u = NodeRef::new(2, 3);
        let c = u.child(4, 2);
        assert_eq!(c, NodeRef::new(3, 14));
        assert_eq!(c.parent(4), Some(u));
        assert_eq!(NodeRef::ROOT.parent(2), None);
    }

    #[test]
    fn conditional_expectation_of_constant() {
        let t = TreeModel::new(4, 1.0, 2).unwrap();
        let x = LeafValues::constant(&t, &[2.5]);
        assert_eq!(t.conditional_expectation(&x, NodeRef::new(2, 5)).unwrap(), vec![2.5]);
    }

    #[test]
    fn balanced_paths_end_exactly_at_zero() {
        for depth in [2, 8, 10, 12] {
            let tree = TreeModel::new(depth, 1.0, 1).unwrap();
            let b = tree.brownian();
            for leaf in 0..tree.num_leaves() {
                let downs = leaf.count_ones() as usize;
                let v = b.node(NodeRef::new(depth, leaf))[0];
                if 2 * downs == depth {
                    assert_eq!(v, 0.0);
                }
                assert_eq!(v, tree.brownian_at(NodeRef::new(depth, leaf))[0]);
            }
        }
    }

    #[test]
    fn terminal_walk_has_zero_mean() {
        let t = TreeModel::new(1, 1.0, 1).unwrap();
        let x = LeafValues::from_fn(&t, Shape::Scalar, |b, out| out[0] = b[0]);
        assert_eq!(t.conditional_expectation(&x, NodeRef::ROOT).unwrap(), vec![0.0]);
    }

    fn eta(t: &TreeModel) -> LeafValues {
        LeafValues::from_fn(t, Shape::Scalar, |b, out| out[0] = if b[0] >= 0.0 { PI } else { -PI })
    }

    #[test]
    fn sign_terminal_on_two_steps() {
        // leaves (+h,+h), (+h,-h), (-h,+h), (-h,-h) have sums 2h, 0, 0, -2h
        let t = TreeModel::new(2, 1.0, 1).unwrap();
        let x = eta(&t);
        assert_eq!(x.values(), &[PI, PI, PI, -PI]);
        let root = t.conditional_expectation(&x, NodeRef::ROOT).unwrap()[0];
        assert!((root - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn represent_constant_and_walk() {
        let t = TreeModel::new(3, 1.0, 2).unwrap();
        let (m, z) = t.martingale_represent(&LeafValues::constant(&t, &[1.5, -2.0])).unwrap();
        assert!(m.level(0).iter().zip([1.5, -2.0]).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(z.level(0).iter().all(|v| v.abs() < 1e-15));

        let t = TreeModel::new(1, 1.0, 1).unwrap();
        let x = LeafValues::from_fn(&t, Shape::Scalar, |b, out| out[0] = b[0]);
        let (m, z) = t.martingale_represent(&x).unwrap();
        assert_eq!(m.node(NodeRef::ROOT), &[0.0]);
        assert!((z.node(NodeRef::ROOT)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn represent_sign_terminal() {
        let t = TreeModel::new(2, 1.0, 1).unwrap();
        let (m, z) = t.martingale_represent(&eta(&t)).unwrap();
        assert!((m.node(NodeRef::ROOT)[0] - PI / 2.0).abs() < 1e-15);
        // (M_up − M_down) / (2h) with M_up = π, M_down = 0 and 2h = √2
        assert!((z.node(NodeRef::ROOT)[0] - PI / 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn stopping_time_validation() {
        let t = TreeModel::new(2, 1.0, 1).unwrap();
        let mut flags = vec![vec![false], vec![true, false], vec![true; 4]];
        let tau = StoppingTime::new(&t, flags.clone()).unwrap();
        assert_eq!(tau.level_on_path(&t, 0), 1);
        assert_eq!(tau.level_on_path(&t, 3), 2);
        flags[2][0] = false;
        assert!(StoppingTime::new(&t, flags).is_err());
    }

    #[test]
    fn partition_validation() {
        let t = TreeModel::new(3, 1.0, 1).unwrap();
        let p = RandomPartition::deterministic(&t, &[1, 2]).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.in_slice(2, NodeRef::new(1, 1)));
        assert_eq!(p.slice_of(NodeRef::new(2, 0)), 3);
        let bad = vec![
            StoppingTime::at_level(&t, 0),
            StoppingTime::at_level(&t, 2),
            StoppingTime::at_level(&t, 1),
        ];
        assert!(RandomPartition::new(&t, bad).is_err());
    }
}
