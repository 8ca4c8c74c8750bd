use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RolloutGroup, TrainError};
use crate::agent::TrajectoryStep;

pub const FORMAT_VERSION: u32 = 1;

/// First line of a batch file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchHeader {
    pub format_version: u32,
    pub k: usize,
    pub std_convention: String,
    pub normalization: String,
}

/// One trajectory line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub task_id: String,
    pub rollout_index: u32,
    pub steps: Vec<TrajectoryStep>,
    pub reward: u8,
    pub advantage: f64,
    pub policy_version: u64,
}

/// The batch as text: a header line, then one record per trajectory in
/// (task_id, rollout_index) order. Every group must be complete and share
/// the same k.
pub fn render_training_batch(groups: &[RolloutGroup]) -> Result<String, TrainError> {
    let first = groups.first().ok_or(TrainError::Empty)?;
    for g in groups {
        if !g.is_complete() {
            return Err(TrainError::Incomplete { task_id: g.task_id.clone(), missing: g.missing.clone() });
        }
        if g.k != first.k {
            return Err(TrainError::MixedK(first.k, g.k));
        }
    }
    let header = BatchHeader {
        format_version: FORMAT_VERSION,
        k: first.k,
        std_convention: "population".into(),
        normalization: "trim+collapse".into(),
    };
    let mut records: Vec<BatchRecord> = groups
        .iter()
        .flat_map(|g| {
            g.trajectories.iter().zip(&g.advantages).map(|(t, a)| BatchRecord {
                task_id: t.task_id.clone(),
                rollout_index: t.rollout_index,
                steps: t.steps.clone(),
                reward: t.reward.unwrap_or(0),
                advantage: *a,
                policy_version: t.policy_version,
            })
        })
        .collect();
    records.sort_by(|a, b| (&a.task_id, a.rollout_index).cmp(&(&b.task_id, b.rollout_index)));

    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in &records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_training_batch(groups: &[RolloutGroup], path: &Path) -> Result<(), TrainError> {
    let text = render_training_batch(groups)?;
    std::fs::write(path, text).map_err(|e| TrainError::Io(e.to_string()))
}
