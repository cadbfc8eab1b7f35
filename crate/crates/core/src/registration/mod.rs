//! Scan-to-map registration: NDT (the default) and point-to-point ICP.

mod icp;
mod ndt;

pub use icp::{icp_align, rigid_transform_svd, IcpOptions, PointMap};
pub use ndt::{ndt_align, ndt_align_points, ndt_insert, ndt_score, NdtCell, NdtMap, NdtOptions, ScoreTerms};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("no scan point falls in a valid map cell")]
    ZeroOverlap,
    #[error("only {0} correspondences found, at least 3 are needed")]
    InsufficientCorrespondences(usize),
    #[error("optimizer produced a non-finite step")]
    SingularStep,
    #[error("invalid registration options: {0}")]
    InvalidOptions(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub pose: Pose,
    /// Objective at `pose`, higher is better: the NDT likelihood sum, or the
    /// negated mean squared correspondence distance for ICP.
    pub score: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Fraction of scan points that contributed to the objective.
    pub match_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Ndt,
    Icp,
}
