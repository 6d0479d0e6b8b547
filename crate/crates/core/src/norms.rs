//! Process-space norms and the sliceability index, computed exactly on the tree.
//!
//! Essential suprema over stopping times become maxima over nodes. This is no
//! loss: for any node `u` the first-hitting time of `u` (level of `u` on paths
//! through `u`, `T` elsewhere) is a stopping time whose conditional tail at `u`
//! is the node tail, and conversely the tail after any stopping time is, on each
//! atom, the tail after some node. So `sup_τ ‖E_τ[…]‖_∞ = max_u E_u[…]`.
//!
//! All magnitudes use the Euclidean (Frobenius) norm of the node value.

use crate::error::{LabError, Result};
use crate::tree::{AdaptedProcess, NodeRef, RandomPartition, StoppingTime, TreeModel};

/// Norms of one process.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormReport {
    pub s_inf: f64,
    /// `(q, ‖·‖_{S^q})`.
    pub s_q: Vec<(f64, f64)>,
    pub bmo: f64,
    pub bmo_half: f64,
    /// `((q, p), ‖·‖_{L^{q,p}})`.
    pub l_qp: Vec<((f64, f64), f64)>,
}

impl NormReport {
    /// Default report: `S^∞`, `S^2`, bmo, bmo½ and `L^{2,2}`.
    pub fn of(gamma: &AdaptedProcess) -> Self {
        Self::with(gamma, &[2.0], &[(2.0, 2.0)])
    }

    pub fn with(gamma: &AdaptedProcess, qs: &[f64], qps: &[(f64, f64)]) -> Self {
        Self {
            s_inf: sup_norm(gamma),
            s_q: qs.iter().map(|&q| (q, sq_norm(gamma, q))).collect(),
            bmo: bmo_norm(gamma),
            bmo_half: bmo_half_norm(gamma),
            l_qp: qps.iter().map(|&(q, p)| ((q, p), lqp_norm(gamma, q, p))).collect(),
        }
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["s_inf".to_string(), "bmo".into(), "bmo_half".into()];
        h.extend(self.s_q.iter().map(|(q, _)| format!("s_{q}")));
        h.extend(self.l_qp.iter().map(|((q, p), _)| format!("l_{q}_{p}")));
        h
    }

    pub fn csv_values(&self) -> Vec<f64> {
        let mut v = vec![self.s_inf, self.bmo, self.bmo_half];
        v.extend(self.s_q.iter().map(|(_, x)| *x));
        v.extend(self.l_qp.iter().map(|(_, x)| *x));
        v
    }
}

/// Per-node magnitudes `|γ_u|^power` on the step levels `0..N`.
fn magnitudes(gamma: &AdaptedProcess, power: f64) -> Vec<Vec<f64>> {
    let norms = gamma.norms();
    (0..gamma.depth())
        .map(|k| norms.level(k).iter().map(|v| v.powf(power)).collect())
        .collect()
}

/// `E_u[Σ_{k ≥ level(u)} c_k dt]` for every node, levels `0..N` (the last entry is the zero tail at the leaves).
pub fn conditional_tails(rates: &[Vec<f64>], branching: usize, dt: f64) -> Vec<Vec<f64>> {
    let depth = rates.len();
    let mut tails = vec![Vec::new(); depth + 1];
    tails[depth] = vec![0.0; branching.pow(depth as u32)];
    for level in (0..depth).rev() {
        let next = &tails[level + 1];
        let current = rates[level]
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let mean = next[idx * branching..(idx + 1) * branching].iter().sum::<f64>() / branching as f64;
                c * dt + mean
            })
            .collect();
        tails[level] = current;
    }
    tails
}

fn max_tail(rates: &[Vec<f64>], branching: usize, dt: f64) -> f64 {
    conditional_tails(rates, branching, dt)
        .iter()
        .flatten()
        .fold(0.0, |m, &v| f64::max(m, v))
}

/// `max_u sqrt(E_u[Σ_{k ≥ level(u)} |γ_k|² dt])`.
pub fn bmo_norm(gamma: &AdaptedProcess) -> f64 {
    max_tail(&magnitudes(gamma, 2.0), gamma.branching(), gamma.dt()).sqrt()
}

/// `max_u E_u[Σ_{k ≥ level(u)} |γ_k| dt]`.
pub fn bmo_half_norm(gamma: &AdaptedProcess) -> f64 {
    max_tail(&magnitudes(gamma, 1.0), gamma.branching(), gamma.dt())
}

/// Largest `|γ_u|` over every stored node (terminal level included when present).
pub fn sup_norm(gamma: &AdaptedProcess) -> f64 {
    let norms = gamma.norms();
    (0..norms.num_levels())
        .flat_map(|k| norms.level(k).to_vec())
        .fold(0.0, f64::max)
}

/// `E[max_t |γ_t|^q]^{1/q}` over every stored level.
pub fn sq_norm(gamma: &AdaptedProcess, q: f64) -> f64 {
    let norms = gamma.norms();
    let b = gamma.branching();
    let mut running = norms.level(0).to_vec();
    for k in 1..norms.num_levels() {
        running = norms
            .level(k)
            .iter()
            .enumerate()
            .map(|(idx, v)| v.max(running[idx / b]))
            .collect();
    }
    let mean = running.iter().map(|m| m.powf(q)).sum::<f64>() / running.len() as f64;
    mean.powf(1.0 / q)
}

/// `E[(Σ_k |γ_k|^p dt)^{q/p}]^{1/q}` over the step levels.
pub fn lqp_norm(gamma: &AdaptedProcess, q: f64, p: f64) -> f64 {
    let rates = magnitudes(gamma, p);
    let b = gamma.branching();
    let dt = gamma.dt();
    let mut acc = vec![0.0];
    for level in &rates {
        acc = level.iter().enumerate().map(|(idx, c)| acc[idx / b] + c * dt).collect();
    }
    let mean = acc.iter().map(|s: &f64| s.powf(q / p)).sum::<f64>() / acc.len() as f64;
    mean.powf(1.0 / q)
}

/// How [`slice_index`] searches for a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SliceMode {
    /// Deterministic levels, greedy from left to right.
    Deterministic,
    /// Per-path greedy stopping times.
    #[default]
    NodeGreedy,
}

/// One constraint on a slice: per-node cost rates (multiplied by `dt`) and the admissible tail budget.
#[derive(Debug, Clone)]
pub(crate) struct CostChannel {
    pub rates: Vec<Vec<f64>>,
    pub budget: f64,
}

impl CostChannel {
    /// Slices with `‖γ 1_slice‖_bmo ≤ δ`.
    pub fn bmo(gamma: &AdaptedProcess, delta: f64) -> Self {
        Self {
            rates: magnitudes(gamma, 2.0),
            budget: delta * delta,
        }
    }

    /// Slices with `‖γ 1_slice‖_{bmo½} ≤ δ`.
    pub fn bmo_half(gamma: &AdaptedProcess, delta: f64) -> Self {
        Self {
            rates: magnitudes(gamma, 1.0),
            budget: delta,
        }
    }
}

/// A partition together with the steps that had to be isolated.
#[derive(Debug, Clone)]
pub(crate) struct SlicedPartition {
    pub partition: RandomPartition,
    /// Nodes whose single step alone exceeds a budget.
    pub oversized: Vec<NodeRef>,
}

fn step_excess(channels: &[CostChannel], dt: f64, level: usize, idx: usize) -> Option<(f64, f64)> {
    channels
        .iter()
        .map(|c| (c.rates[level][idx] * dt, c.budget))
        .find(|(cost, budget)| cost > budget)
}

/// Builds a partition in which every slice satisfies every channel, except for
/// single steps that exceed a budget on their own. Those are isolated (or
/// rejected with [`LabError::Unsliceable`] when `allow_oversized` is false).
pub(crate) fn partition_by_cost(
    tree: &TreeModel,
    channels: &[CostChannel],
    mode: SliceMode,
    allow_oversized: bool,
) -> Result<SlicedPartition> {
    let dt = tree.dt();
    let mut oversized = Vec::new();
    for level in 0..tree.depth() {
        for idx in 0..tree.level_len(level) {
            if let Some((cost, budget)) = step_excess(channels, dt, level, idx) {
                if !allow_oversized {
                    return Err(LabError::Unsliceable {
                        delta: budget.sqrt(),
                        step_cost: cost.sqrt(),
                    });
                }
                oversized.push(NodeRef::new(level, idx));
            }
        }
    }
    let partition = match mode {
        SliceMode::Deterministic => deterministic_partition(tree, channels)?,
        SliceMode::NodeGreedy => greedy_partition(tree, channels)?,
    };
    Ok(SlicedPartition { partition, oversized })
}

/// Max over levels `a..b` of the conditional tail restricted to `[level(u), b)`.
fn window_cost(tree: &TreeModel, channel: &CostChannel, a: usize, b: usize) -> f64 {
    let branching = tree.branching();
    let dt = tree.dt();
    let mut tail = vec![0.0; tree.level_len(b)];
    let mut worst = 0.0f64;
    for level in (a..b).rev() {
        tail = channel.rates[level]
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                c * dt + tail[idx * branching..(idx + 1) * branching].iter().sum::<f64>() / branching as f64
            })
            .collect();
        worst = tail.iter().fold(worst, |m, &v| m.max(v));
    }
    worst
}

fn deterministic_partition(tree: &TreeModel, channels: &[CostChannel]) -> Result<RandomPartition> {
    let depth = tree.depth();
    let fits = |a: usize, b: usize| channels.iter().all(|c| window_cost(tree, c, a, b) <= c.budget);
    let mut cuts = Vec::new();
    let mut start = 0;
    while start < depth {
        let mut end = start + 1;
        while end < depth && fits(start, end + 1) {
            end += 1;
        }
        if end < depth {
            cuts.push(end);
        }
        start = end;
    }
    RandomPartition::deterministic(tree, &cuts)
}

fn greedy_partition(tree: &TreeModel, channels: &[CostChannel]) -> Result<RandomPartition> {
    let depth = tree.depth();
    let branching = tree.branching();
    let dt = tree.dt();
    let mut times = vec![StoppingTime::at_level(tree, 0)];
    loop {
        let previous = times.last().expect("at least τ_0").flags().to_vec();
        if (0..depth).all(|k| previous[k].iter().all(|&f| !f)) {
            break;
        }
        // Pathwise accumulation: a slice stops before the step that would overflow a budget.
        let mut flags: Vec<Vec<bool>> = (0..=depth).map(|k| vec![k == depth; tree.level_len(k)]).collect();
        let mut acc: Vec<Vec<f64>> = vec![vec![0.0; channels.len()]];
        let mut force: Vec<bool> = vec![false];
        for level in 0..depth {
            let len = tree.level_len(level);
            let mut next_acc = vec![vec![0.0; channels.len()]; len * branching];
            let mut next_force = vec![false; len * branching];
            for idx in 0..len {
                let parent_stopped = level > 0 && flags[level - 1][idx / branching];
                if parent_stopped || force[idx] {
                    flags[level][idx] = true;
                    continue;
                }
                let mut here = acc[idx].clone();
                let mut forced_after = false;
                if previous[level][idx] {
                    let costs: Vec<f64> = channels.iter().map(|c| c.rates[level][idx] * dt).collect();
                    let started = here.iter().any(|&v| v > 0.0);
                    let overflow = channels
                        .iter()
                        .zip(&here)
                        .zip(&costs)
                        .any(|((c, h), cost)| h + cost > c.budget);
                    if started && overflow {
                        flags[level][idx] = true;
                        continue;
                    }
                    forced_after = overflow;
                    for (h, cost) in here.iter_mut().zip(&costs) {
                        *h += cost;
                    }
                }
                for j in 0..branching {
                    next_acc[idx * branching + j] = here.clone();
                    next_force[idx * branching + j] = forced_after;
                }
            }
            acc = next_acc;
            force = next_force;
        }
        times.push(StoppingTime::new(tree, flags)?);
    }
    RandomPartition::new(tree, times)
}

/// Upper bound `m` for the index of sliceability `N_γ(δ)` and a partition attaining it.
///
/// Every slice of the returned partition satisfies `‖γ 1_slice‖_bmo ≤ δ`.
pub fn slice_index(gamma: &AdaptedProcess, delta: f64, mode: SliceMode) -> Result<(usize, RandomPartition)> {
    if !(delta > 0.0) {
        return Err(LabError::InvalidArgument(format!("delta = {delta} must be positive")));
    }
    let tree = gamma.tree();
    let sliced = partition_by_cost(&tree, &[CostChannel::bmo(gamma, delta)], mode, false)?;
    Ok((sliced.partition.len(), sliced.partition))
}

/// The process `γ 1_{slice k}` (zero outside the slice; terminal level, if any, zeroed).
pub fn restrict_to_slice(gamma: &AdaptedProcess, partition: &RandomPartition, k: usize) -> AdaptedProcess {
    let mut out = gamma.clone();
    let depth = gamma.depth();
    for level in 0..out.num_levels() {
        let len = gamma.branching().pow(level as u32);
        for idx in 0..len {
            let u = NodeRef::new(level, idx);
            if level >= depth || !partition.in_slice(k, u) {
                out.node_mut(u).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    out
}
