use std::path::PathBuf;

use thiserror::Error;

use super::{compute_reward, expand_group, RolloutGroup, TrainError};
use crate::agent::{run_task, RuntimeConfig, Trajectory};
use crate::cluster::TaskItem;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ExecutorError {
    #[error("executor unavailable: {0}")]
    Unavailable(String),
    #[error("task rejected: {0}")]
    Rejected(String),
}

/// Something that turns tasks into scored trajectories.
pub trait Executor {
    /// Runs every task and returns the trajectories that finished, rewards
    /// set. Rollouts that could not be completed are simply absent.
    fn execute(&self, tasks: &[TaskItem]) -> Result<Vec<Trajectory>, ExecutorError>;
}

/// Runs rollouts strictly one after another in the calling thread.
pub struct SequentialExecutor {
    profile: RuntimeConfig,
    sandbox_root: PathBuf,
    version: u64,
}

impl SequentialExecutor {
    pub fn new(profile: RuntimeConfig, sandbox_root: impl Into<PathBuf>) -> Self {
        SequentialExecutor { profile, sandbox_root: sandbox_root.into(), version: 0 }
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }
}

impl Executor for SequentialExecutor {
    fn execute(&self, tasks: &[TaskItem]) -> Result<Vec<Trajectory>, ExecutorError> {
        let mut out = Vec::with_capacity(tasks.len());
        for task in tasks {
            task.validate().map_err(ExecutorError::Rejected)?;
            let inst = self
                .profile
                .instantiate(&self.sandbox_root, self.version)
                .map_err(|e| ExecutorError::Unavailable(e.to_string()))?;
            let mut traj = run_task(&inst.entry, &task.without_truth(), inst.policy.as_ref(), &inst.env);
            traj.reward = Some(task.ground_truth.as_deref().map_or(0, |truth| compute_reward(&traj, truth)));
            out.push(traj);
        }
        Ok(out)
    }
}

/// Runs k rollouts of `task` (indices 0..k, seeds derived from the task
/// seed) and scores them as a group.
pub fn run_rollout_group(task: &TaskItem, k: usize, executor: &dyn Executor) -> Result<RolloutGroup, TrainError> {
    if k < 2 {
        return Err(TrainError::GroupTooSmall(k));
    }
    let tasks = expand_group(task, 0..k as u32);
    let trajectories = executor.execute(&tasks)?;
    Ok(RolloutGroup::assemble(&task.task_id, k, trajectories))
}
