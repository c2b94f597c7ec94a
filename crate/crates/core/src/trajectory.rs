//! The record of an IMP run: one entry per round, round 0 being the trained
//! dense model.

use serde::{Deserialize, Serialize};

use crate::imp::{PruneSchedule, RefinePolicy};
use crate::nn::{MaskState, NetworkSpec, TrainConfig};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub prunable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub train: u64,
    pub split: u64,
}

/// Run metadata carried alongside the rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model_name: String,
    pub groups: Vec<GroupEntry>,
    pub network: Option<NetworkSpec>,
    pub schedule: Option<PruneSchedule>,
    pub oneshot_target_density: Option<f64>,
    pub train: Option<TrainConfig>,
    pub refine_policy: Option<RefinePolicy>,
    pub holdout_fraction: f64,
    pub seeds: Seeds,
    /// Set when a layer collapse ended the run before the scheduled round count.
    pub truncated: bool,
    pub notes: Vec<String>,
}

impl RunManifest {
    /// Bare manifest for trajectories that did not come from the engine.
    pub fn external(model_name: impl Into<String>, groups: Vec<GroupEntry>) -> Self {
        RunManifest {
            model_name: model_name.into(),
            groups,
            network: None,
            schedule: None,
            oneshot_target_density: None,
            train: None,
            refine_policy: None,
            holdout_fraction: 0.0,
            seeds: Seeds::default(),
            truncated: false,
            notes: Vec::new(),
        }
    }

    pub fn group_names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round_index: usize,
    pub mask: MaskState,
    /// Full weight arrays; pruned positions hold 0.0.
    pub weights: Vec<Tensor2>,
    pub density: f64,
    /// Fraction of the previously kept weights removed to reach this round
    /// (0 for round 0).
    pub x_n: f64,
    pub eval_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpTrajectory {
    pub manifest: RunManifest,
    pub rounds: Vec<RoundRecord>,
}

impl ImpTrajectory {
    pub fn densities(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.density).collect()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.eval_error).collect()
    }

    /// Per-transition sparsification fractions, `x` of rounds `1..`.
    pub fn transition_x(&self) -> Vec<f64> {
        self.rounds.iter().skip(1).map(|r| r.x_n).collect()
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.rounds.iter().map(|r| r.mask.kept_total()).collect()
    }
}
