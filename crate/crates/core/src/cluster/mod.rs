//! The distributed executor: a coordinator with a priority ready queue hands
//! rollouts to worker processes over a framed TCP protocol, detects dead
//! workers by heartbeat, and records every state transition in an
//! append-only trace from which it can be rebuilt after a crash.

mod coordinator;
mod local;
mod state;
mod trace;
pub mod wire;
mod worker;

pub use coordinator::{Coordinator, CoordinatorConfig, CoordinatorError, HeartbeatConfig};
pub use local::{ClusterRun, LocalCluster, LocalClusterConfig};
pub use state::{
    Assignment, CompletionOutcome, CoordinatorState, GroupStatus, RolloutKey, StateError,
    Transition, WorkerNode, WorkerStatus, DEFAULT_MAX_ATTEMPTS,
};
pub use trace::{
    check_trace, decode_trace, read_trace, Corruption, TraceError, TraceEvent, TraceKind,
    TraceStore,
};
pub use worker::{run_worker, ChaosConfig, ChaosMode, WorkerConfig, WorkerError, WorkerExit};

use serde::{Deserialize, Serialize};

/// One rollout to execute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskItem {
    pub task_id: String,
    pub query: String,
    /// Kept on the coordinator; stripped before a task is sent to a worker.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default)]
    pub rollout_index: u32,
    /// 0 means the agent's own budget.
    #[serde(default)]
    pub max_steps: u32,
    #[serde(default)]
    pub priority: i64,
    #[serde(default)]
    pub seed: u64,
}

impl TaskItem {
    pub fn new(task_id: &str, query: &str, rollout_index: u32) -> Self {
        TaskItem {
            task_id: task_id.to_string(),
            query: query.to_string(),
            ground_truth: None,
            rollout_index,
            max_steps: 0,
            priority: 0,
            seed: 0,
        }
    }

    pub fn with_truth(mut self, truth: &str) -> Self {
        self.ground_truth = Some(truth.to_string());
        self
    }

    pub fn with_priority(mut self, priority: i64) -> Self {
        self.priority = priority;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn key(&self) -> RolloutKey {
        RolloutKey::new(&self.task_id, self.rollout_index)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.task_id.is_empty() {
            return Err("task_id must not be empty".into());
        }
        if self.query.trim().is_empty() {
            return Err(format!("task `{}` has an empty query", self.task_id));
        }
        Ok(())
    }

    /// The copy sent to workers.
    pub fn without_truth(&self) -> TaskItem {
        TaskItem { ground_truth: None, ..self.clone() }
    }
}
