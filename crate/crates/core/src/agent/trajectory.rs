use serde::{Deserialize, Serialize};

use super::{ActionModel, AgentStatus, Observation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub prompt_digest: String,
    pub action: ActionModel,
    pub observation: Observation,
}

/// The record of one rollout.
///
/// `elapsed` is the modelled tool latency summed over the steps, not wall
/// time, so identical seeds give byte-identical trajectories. Wall-clock
/// latency is kept in the trace store's metrics instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub rollout_index: u32,
    pub steps: Vec<TrajectoryStep>,
    pub final_answer: Option<String>,
    pub status: AgentStatus,
    pub reward: Option<u8>,
    pub policy_version: u64,
    pub elapsed: f64,
}

impl Trajectory {
    pub fn is_terminal(&self) -> bool {
        self.status.is_terminal()
    }

    /// Canonical JSON text.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trajectory serialization is infallible")
    }
}
