use thiserror::Error;

use crate::tree::NodeRef;

/// Every failure the laboratory can report.
///
/// The variant name doubles as the machine-readable error name printed by the
/// CLI, see [`LabError::name`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("tree with {leaves} leaves exceeds the node budget of {budget} leaves")]
    BudgetExceeded { leaves: u128, budget: u128 },

    #[error("Brownian dimension {0} is not supported (expected 1 or 2)")]
    InvalidDim(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("process is not sliceable at delta = {delta}: a single step costs {step_cost}")]
    Unsliceable { delta: f64, step_cost: f64 },

    #[error("(I - alpha dt) is singular at {0}")]
    SingularStep(NodeRef),

    #[error("discrete Girsanov weight {weight} is not positive at {node}")]
    MeasureNotEquivalent { node: NodeRef, weight: f64 },

    #[error("coefficient has an upper-triangular entry of size {value} at {node}")]
    NotTriangular { node: NodeRef, value: f64 },

    #[error("no contraction on slice {slice}: observed factor {factor}")]
    NoContraction { slice: usize, factor: f64 },

    #[error("no convergence after {0} iterations")]
    MaxIterations(usize),

    #[error("stochastic exponential factor (I + A dB) is singular at {0}")]
    SingularFactor(NodeRef),

    #[error("the north pole has no stereographic image")]
    NorthPole,

    #[error("step too coarse: y-Lipschitz constant times dt is {0} >= 1")]
    StepTooCoarse(f64),

    #[error("truncation did not stabilize; sup |Z| per level k: {sup_z:?}")]
    TruncationNotStabilized { sup_z: Vec<(f64, f64)> },

    #[error("driver failed a structural check: {0}")]
    StructureCheckFailed(String),

    #[error("invariant violated: {0}")]
    InvariantViolated(String),
}

impl LabError {
    pub fn name(&self) -> &'static str {
        match self {
            LabError::BudgetExceeded { .. } => "BudgetExceeded",
            LabError::InvalidDim(_) => "InvalidDim",
            LabError::InvalidArgument(_) => "InvalidArgument",
            LabError::ShapeMismatch(_) => "ShapeMismatch",
            LabError::Unsliceable { .. } => "Unsliceable",
            LabError::SingularStep(_) => "SingularStep",
            LabError::MeasureNotEquivalent { .. } => "MeasureNotEquivalent",
            LabError::NotTriangular { .. } => "NotTriangular",
            LabError::NoContraction { .. } => "NoContraction",
            LabError::MaxIterations(_) => "MaxIterations",
            LabError::SingularFactor(_) => "SingularFactor",
            LabError::NorthPole => "NorthPole",
            LabError::StepTooCoarse(_) => "StepTooCoarse",
            LabError::TruncationNotStabilized { .. } => "TruncationNotStabilized",
            LabError::StructureCheckFailed(_) => "StructureCheckFailed",
            LabError::InvariantViolated(_) => "InvariantViolated",
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
