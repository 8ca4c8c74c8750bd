//! Rewards, group-relative advantages, rollout groups and training-batch
//! files. Gradient updates are out of scope; an external trainer consumes
//! the batch and reports back a new parameter digest.

mod batch;
mod executor;

pub use batch::{emit_training_batch, render_training_batch, BatchHeader, BatchRecord, FORMAT_VERSION};
pub use executor::{run_rollout_group, Executor, ExecutorError, SequentialExecutor};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentStatus, Trajectory};
use crate::cluster::TaskItem;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TrainError {
    #[error("a group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("group for `{task_id}` is incomplete, missing rollouts {missing:?}")]
    Incomplete { task_id: String, missing: Vec<u32> },
    #[error("groups disagree on k ({0} vs {1})")]
    MixedK(usize, usize),
    #[error("no groups to emit")]
    Empty,
    #[error("cannot write batch: {0}")]
    Io(String),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
}

/// Trims the ends and collapses inner whitespace runs to one space. Case
/// is preserved.
pub fn normalize_answer(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1 iff the answered text matches the ground truth after normalization.
pub fn compute_reward(traj: &Trajectory, ground_truth: &str) -> u8 {
    match (&traj.status, &traj.final_answer) {
        (AgentStatus::Answered, Some(answer)) => u8::from(normalize_answer(answer) == normalize_answer(ground_truth)),
        _ => 0,
    }
}

/// `(r_i - mean) / std` with the population standard deviation. A constant
/// vector gives all zeros.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>, TrainError> {
    let k = rewards.len();
    if k < 2 {
        return Err(TrainError::GroupTooSmall(k));
    }
    let mean = rewards.iter().sum::<f64>() / k as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k as f64;
    let std = var.sqrt();
    if std == 0.0 || rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; k]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Expands a task into one item per rollout index, each with its own seed.
pub fn expand_group(task: &TaskItem, indices: impl IntoIterator<Item = u32>) -> Vec<TaskItem> {
    indices
        .into_iter()
        .map(|i| TaskItem { rollout_index: i, seed: derive_seed(task.seed, i as u64), ..task.clone() })
        .collect()
}

/// Monotone policy counter plus a digest of the parameters it names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyVersion {
    pub version: u64,
    pub params_digest: String,
}

/// The k rollouts of one task with their advantages. `advantages` lines up
/// with `trajectories`; rollouts that never came back are listed in
/// `missing` rather than dropped silently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task_id: String,
    pub k: usize,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
    #[serde(default)]
    pub missing: Vec<u32>,
}

impl RolloutGroup {
    /// Orders the trajectories by rollout index, notes missing indices and
    /// computes advantages over what is present.
    pub fn assemble(task_id: &str, k: usize, mut trajectories: Vec<Trajectory>) -> Self {
        trajectories.retain(|t| t.task_id == task_id);
        trajectories.sort_by_key(|t| t.rollout_index);
        trajectories.dedup_by_key(|t| t.rollout_index);
        let missing: Vec<u32> = (0..k as u32)
            .filter(|i| !trajectories.iter().any(|t| t.rollout_index == *i))
            .collect();
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward.unwrap_or(0) as f64).collect();
        let advantages = grpo_advantages(&rewards).unwrap_or_else(|_| vec![0.0; rewards.len()]);
        RolloutGroup { task_id: task_id.to_string(), k, trajectories, advantages, missing }
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty() && self.trajectories.len() == self.k
    }

    pub fn rewards(&self) -> Vec<u8> {
        self.trajectories.iter().map(|t| t.reward.unwrap_or(0)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: two-pass textbook formula in plain arithmetic.
    fn oracle(rewards: &[f64]) -> Vec<f64> {
        let n = rewards.len() as f64;
        let mut sum = 0.0;
        for r in rewards {
            sum += r;
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for r in rewards {
            sq += (r - mean) * (r - mean);
        }
        let sd = (sq / n).sqrt();
        rewards.iter().map(|r| if sd == 0.0 { 0.0 } else { (r - mean) / sd }).collect()
    }

    #[test]
    fn fixtures() {
        assert_eq!(grpo_advantages(&[1.0, 1.0, 1.0, 1.0]).unwrap(), vec![0.0; 4]);
        // mean 0.25, variance 0.1875, std 0.4330127
        let a = grpo_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = [1.7320508, -0.5773503, -0.5773503, -0.5773503];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 1e-6);
        }
        for (x, o) in a.iter().zip(oracle(&[1.0, 0.0, 0.0, 0.0])) {
            assert!((x - o).abs() < 1e-12);
        }
        assert_eq!(grpo_advantages(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(grpo_advantages(&[1.0]), Err(TrainError::GroupTooSmall(1)));
    }

    #[test]
    fn normalization_table() {
        let cases = [
            ("20", "20", 1),
            (" 20 ", "20", 1),
            ("Paris\n", "Paris", 1),
            ("New   York", "New York", 1),
            ("new york", "New York", 0),
            ("20.0", "20", 0),
            ("", "", 1),
            ("2 0", "20", 0),
        ];
        for (answer, truth, expected) in cases {
            let t = Trajectory {
                task_id: "t".into(),
                rollout_index: 0,
                steps: vec![],
                final_answer: Some(answer.into()),
                status: AgentStatus::Answered,
                reward: None,
                policy_version: 0,
                elapsed: 0.0,
            };
            assert_eq!(compute_reward(&t, truth), expected, "{answer:?} vs {truth:?}");
            let mut exhausted = t.clone();
            exhausted.status = AgentStatus::StepBudgetExhausted;
            exhausted.final_answer = None;
            assert_eq!(compute_reward(&exhausted, truth), 0);
        }
    }

    #[test]
    fn group_assembly_flags_missing() {
        let mk = |i: u32, r: u8| Trajectory {
            task_id: "t".into(),
            rollout_index: i,
            steps: vec![],
            final_answer: None,
            status: AgentStatus::Answered,
            reward: Some(r),
            policy_version: 0,
            elapsed: 0.0,
        };
        let g = RolloutGroup::assemble("t", 4, vec![mk(3, 0), mk(0, 1), mk(2, 0)]);
        assert_eq!(g.missing, vec![1]);
        assert!(!g.is_complete());
        assert_eq!(g.trajectories.iter().map(|t| t.rollout_index).collect::<Vec<_>>(), vec![0, 2, 3]);
        assert_eq!(g.advantages.len(), 3);
        let full = RolloutGroup::assemble("t", 2, vec![mk(1, 0), mk(0, 1)]);
        assert!(full.is_complete());
        assert_eq!(full.advantages, vec![1.0, -1.0]);
    }

    #[test]
    fn expanded_seeds_are_distinct() {
        let base = TaskItem::new("t", "q", 0).with_seed(7);
        let items = expand_group(&base, 0..32);
        let mut seeds: Vec<u64> = items.iter().map(|t| t.seed).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 32);
        assert_eq!(items[5].rollout_index, 5);
    }
}
