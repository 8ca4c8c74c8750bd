//! Coordinator bookkeeping, kept event-sourced: every mutation is first
//! appended to the trace and then applied through [`CoordinatorState::apply`],
//! which is also what recovery replays.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::trace::{TraceError, TraceEvent, TraceKind, TraceStore};
use super::TaskItem;
use crate::agent::{ActionKind, AgentStatus, Trajectory, TrajectoryStep};

/// A rollout gets this many attempts before it is failed for good.
pub const DEFAULT_MAX_ATTEMPTS: u32 = 16;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RolloutKey {
    pub task_id: String,
    pub rollout_index: u32,
}

impl RolloutKey {
    pub fn new(task_id: &str, rollout_index: u32) -> Self {
        RolloutKey { task_id: task_id.to_string(), rollout_index }
    }
}

impl fmt::Display for RolloutKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.task_id, self.rollout_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorkerStatus {
    Idle,
    Busy,
    Suspect,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerNode {
    pub worker_id: String,
    pub capacity: u32,
    pub status: WorkerStatus,
    pub last_heartbeat: f64,
    pub assigned: BTreeSet<RolloutKey>,
}

impl WorkerNode {
    fn available(&self) -> bool {
        matches!(self.status, WorkerStatus::Idle | WorkerStatus::Busy) && (self.assigned.len() as u32) < self.capacity
    }

    fn settle(&mut self) {
        if matches!(self.status, WorkerStatus::Idle | WorkerStatus::Busy) {
            self.status = if self.assigned.is_empty() { WorkerStatus::Idle } else { WorkerStatus::Busy };
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("rollout {0} was already submitted")]
    Duplicate(RolloutKey),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("worker `{0}` is already registered")]
    WorkerExists(String),
    #[error("unknown worker `{0}`")]
    UnknownWorker(String),
    #[error("suspect_after must be below dead_after")]
    BadThresholds,
    #[error("trace is inconsistent at seq {seq}: {reason}")]
    Inconsistent { seq: u64, reason: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub task: TaskItem,
    pub worker_id: String,
    pub attempt: u32,
    pub policy_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub worker_id: String,
    pub from: WorkerStatus,
    pub to: WorkerStatus,
    /// Rollouts sent back to the ready queue because the worker died.
    pub requeued: Vec<RolloutKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionOutcome {
    Accepted,
    /// The rollout is no longer in flight on that worker under that attempt
    /// (it was reassigned or already finished); the report is dropped.
    Stale,
}

/// What `collect` returns for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStatus {
    pub task_id: String,
    pub trajectories: Vec<Trajectory>,
    pub submitted: Vec<u32>,
    pub missing: Vec<u32>,
}

impl GroupStatus {
    pub fn is_complete(&self) -> bool {
        !self.submitted.is_empty() && self.missing.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    task: TaskItem,
    submit_seq: u64,
    attempt: u32,
}

#[derive(Debug, Clone, PartialEq)]
struct InFlight {
    worker_id: String,
    attempt: u32,
}

type ReadyKey = (Reverse<i64>, u64, RolloutKey);

#[derive(Debug, Clone)]
pub struct CoordinatorState {
    entries: BTreeMap<RolloutKey, Entry>,
    ready: BTreeSet<ReadyKey>,
    in_flight: BTreeMap<RolloutKey, InFlight>,
    done: BTreeMap<RolloutKey, Trajectory>,
    workers: BTreeMap<String, WorkerNode>,
    policy_version: u64,
    policy_digest: Option<String>,
    max_attempts: u32,
    /// Rollouts found in flight by `recover` whose requeue is not logged yet.
    orphans: Vec<RolloutKey>,
}

impl Default for CoordinatorState {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_ATTEMPTS)
    }
}

fn inconsistent(event: &TraceEvent, reason: impl Into<String>) -> StateError {
    StateError::Inconsistent { seq: event.seq, reason: reason.into() }
}

fn failed_trajectory(key: &RolloutKey, policy_version: u64) -> Trajectory {
    Trajectory {
        task_id: key.task_id.clone(),
        rollout_index: key.rollout_index,
        steps: Vec::new(),
        final_answer: None,
        status: AgentStatus::Failed,
        reward: Some(0),
        policy_version,
        elapsed: 0.0,
    }
}

impl CoordinatorState {
    pub fn new(max_attempts: u32) -> Self {
        CoordinatorState {
            entries: BTreeMap::new(),
            ready: BTreeSet::new(),
            in_flight: BTreeMap::new(),
            done: BTreeMap::new(),
            workers: BTreeMap::new(),
            policy_version: 0,
            policy_digest: None,
            max_attempts: max_attempts.max(1),
            orphans: Vec::new(),
        }
    }

    fn commit(
        &mut self,
        trace: &TraceStore,
        kind: TraceKind,
        key: Option<&RolloutKey>,
        worker: Option<&str>,
        payload: Value,
    ) -> Result<TraceEvent, StateError> {
        let event = trace.record(kind, key, worker, payload)?;
        self.apply(&event)?;
        // Cheap form of check_partition; the full walk is quadratic over a run.
        debug_assert_eq!(self.ready.len() + self.in_flight.len() + self.done.len(), self.entries.len());
        Ok(event)
    }

    pub fn submit(&mut self, trace: &TraceStore, task: TaskItem) -> Result<(), StateError> {
        task.validate().map_err(StateError::InvalidTask)?;
        let key = task.key();
        if self.entries.contains_key(&key) {
            return Err(StateError::Duplicate(key));
        }
        self.commit(trace, TraceKind::Submitted, Some(&key), None, json!({ "task": task }))?;
        Ok(())
    }

    pub fn register_worker(&mut self, worker_id: &str, capacity: u32, now: f64) -> Result<(), StateError> {
        if self.workers.contains_key(worker_id) {
            return Err(StateError::WorkerExists(worker_id.to_string()));
        }
        self.workers.insert(
            worker_id.to_string(),
            WorkerNode {
                worker_id: worker_id.to_string(),
                capacity: capacity.max(1),
                status: WorkerStatus::Idle,
                last_heartbeat: now,
                assigned: BTreeSet::new(),
            },
        );
        Ok(())
    }

    /// Greedily hands the highest-priority ready rollouts to workers with a
    /// free slot. Never preempts running work.
    pub fn schedule(&mut self, trace: &TraceStore) -> Result<Vec<Assignment>, StateError> {
        let mut out = Vec::new();
        while let Some((_, _, key)) = self.ready.first().cloned() {
            let Some(worker_id) = self
                .workers
                .values()
                .filter(|w| w.available())
                .min_by_key(|w| (w.assigned.len(), w.worker_id.clone()))
                .map(|w| w.worker_id.clone())
            else {
                break;
            };
            let attempt = self.entries[&key].attempt;
            let version = self.policy_version;
            self.commit(
                trace,
                TraceKind::Assigned,
                Some(&key),
                Some(&worker_id),
                json!({ "attempt": attempt, "policy_version": version }),
            )?;
            out.push(Assignment {
                task: self.entries[&key].task.clone(),
                worker_id,
                attempt,
                policy_version: version,
            });
        }
        Ok(out)
    }

    /// A heartbeat from a live worker; a suspect worker goes back to work.
    pub fn heartbeat(&mut self, worker_id: &str, now: f64) -> Result<Option<Transition>, StateError> {
        let worker = self.workers.get_mut(worker_id).ok_or_else(|| StateError::UnknownWorker(worker_id.to_string()))?;
        if worker.status == WorkerStatus::Dead {
            return Ok(None);
        }
        worker.last_heartbeat = worker.last_heartbeat.max(now);
        if worker.status == WorkerStatus::Suspect {
            worker.status = WorkerStatus::Busy;
            worker.settle();
            return Ok(Some(Transition {
                worker_id: worker_id.to_string(),
                from: WorkerStatus::Suspect,
                to: worker.status,
                requeued: Vec::new(),
            }));
        }
        Ok(None)
    }

    /// Marks silent workers Suspect, then Dead; a dead worker's rollouts are
    /// requeued at their original priority with the attempt incremented.
    pub fn heartbeat_scan(
        &mut self,
        trace: &TraceStore,
        now: f64,
        suspect_after: f64,
        dead_after: f64,
    ) -> Result<Vec<Transition>, StateError> {
        if suspect_after >= dead_after {
            return Err(StateError::BadThresholds);
        }
        let mut transitions = Vec::new();
        let ids: Vec<String> = self.workers.keys().cloned().collect();
        for id in ids {
            let worker = &self.workers[&id];
            let from = worker.status;
            let silent = now - worker.last_heartbeat;
            if from == WorkerStatus::Dead {
                continue;
            }
            if silent > dead_after {
                let requeued = self.kill_worker(trace, &id, json!({ "status": "dead", "silent_secs": silent }))?;
                transitions.push(Transition { worker_id: id, from, to: WorkerStatus::Dead, requeued });
            } else if silent > suspect_after && from != WorkerStatus::Suspect {
                self.commit(
                    trace,
                    TraceKind::HeartbeatMissed,
                    None,
                    Some(&id),
                    json!({ "status": "suspect", "silent_secs": silent }),
                )?;
                transitions.push(Transition { worker_id: id, from, to: WorkerStatus::Suspect, requeued: Vec::new() });
            }
        }
        Ok(transitions)
    }

    /// The worker's connection is gone: dead at once.
    pub fn worker_lost(&mut self, trace: &TraceStore, worker_id: &str, reason: &str) -> Result<Vec<RolloutKey>, StateError> {
        match self.workers.get(worker_id) {
            None => Err(StateError::UnknownWorker(worker_id.to_string())),
            Some(w) if w.status == WorkerStatus::Dead => Ok(Vec::new()),
            Some(_) => self.kill_worker(trace, worker_id, json!({ "status": "dead", "reason": reason })),
        }
    }

    fn kill_worker(&mut self, trace: &TraceStore, worker_id: &str, payload: Value) -> Result<Vec<RolloutKey>, StateError> {
        self.commit(trace, TraceKind::HeartbeatMissed, None, Some(worker_id), payload)?;
        let orphaned: Vec<RolloutKey> = self
            .in_flight
            .iter()
            .filter(|(_, f)| f.worker_id == worker_id)
            .map(|(k, _)| k.clone())
            .collect();
        for key in &orphaned {
            self.requeue(trace, key, worker_id, "worker dead")?;
        }
        Ok(orphaned)
    }

    fn requeue(&mut self, trace: &TraceStore, key: &RolloutKey, worker_id: &str, reason: &str) -> Result<(), StateError> {
        let attempt = self.entries[key].attempt + 1;
        if attempt > self.max_attempts {
            let trajectory = failed_trajectory(key, self.policy_version);
            self.commit(
                trace,
                TraceKind::Failed,
                Some(key),
                Some(worker_id),
                json!({ "reason": format!("{reason}; {} attempts used", self.max_attempts), "trajectory": trajectory }),
            )?;
        } else {
            self.commit(
                trace,
                TraceKind::Reassigned,
                Some(key),
                Some(worker_id),
                json!({ "attempt": attempt, "reason": reason }),
            )?;
        }
        Ok(())
    }

    fn in_flight_on(&self, worker_id: &str, key: &RolloutKey, attempt: u32) -> bool {
        self.in_flight.get(key).is_some_and(|f| f.worker_id == worker_id && f.attempt == attempt)
    }

    /// Accepts a finished trajectory only from the worker currently holding
    /// that attempt; anything else is stale and leaves no trace.
    pub fn complete(
        &mut self,
        trace: &TraceStore,
        worker_id: &str,
        key: &RolloutKey,
        attempt: u32,
        trajectory: Trajectory,
        metrics: Value,
    ) -> Result<CompletionOutcome, StateError> {
        if !self.in_flight_on(worker_id, key, attempt) {
            return Ok(CompletionOutcome::Stale);
        }
        self.commit(
            trace,
            TraceKind::Completed,
            Some(key),
            Some(worker_id),
            json!({ "attempt": attempt, "trajectory": trajectory, "metrics": metrics }),
        )?;
        Ok(CompletionOutcome::Accepted)
    }

    /// Streams one step of an in-flight rollout into the trace. Tool calls
    /// get an extra `ToolExecuted` record. Reports from stale attempts are
    /// dropped.
    pub fn record_step(
        &mut self,
        trace: &TraceStore,
        worker_id: &str,
        key: &RolloutKey,
        attempt: u32,
        step_index: u32,
        step: &TrajectoryStep,
    ) -> Result<bool, StateError> {
        if !self.in_flight_on(worker_id, key, attempt) {
            return Ok(false);
        }
        self.commit(
            trace,
            TraceKind::StepCompleted,
            Some(key),
            Some(worker_id),
            json!({ "attempt": attempt, "step_index": step_index, "step": step }),
        )?;
        if step.action.kind == ActionKind::ToolCall {
            self.commit(
                trace,
                TraceKind::ToolExecuted,
                Some(key),
                Some(worker_id),
                json!({
                    "attempt": attempt,
                    "step_index": step_index,
                    "tool": step.action.tool,
                    "is_error": step.observation.is_error,
                }),
            )?;
        }
        Ok(true)
    }

    /// Bumps the policy version by one. An unchanged digest still bumps it;
    /// the event records that it was unchanged.
    pub fn sync_policy(&mut self, trace: &TraceStore, digest: &str) -> Result<u64, StateError> {
        let unchanged = self.policy_digest.as_deref() == Some(digest);
        let version = self.policy_version + 1;
        self.commit(
            trace,
            TraceKind::PolicySync,
            None,
            None,
            json!({ "version": version, "digest": digest, "unchanged_digest": unchanged }),
        )?;
        Ok(version)
    }

    /// Applies one logged event.
    pub fn apply(&mut self, event: &TraceEvent) -> Result<(), StateError> {
        match event.kind {
            TraceKind::Submitted => {
                let task: TaskItem = serde_json::from_value(event.payload["task"].clone())
                    .map_err(|e| inconsistent(event, format!("bad task: {e}")))?;
                let key = task.key();
                if self.entries.contains_key(&key) {
                    return Err(inconsistent(event, format!("{key} submitted twice")));
                }
                self.ready.insert((Reverse(task.priority), event.seq, key.clone()));
                self.entries.insert(key, Entry { task, submit_seq: event.seq, attempt: 1 });
            }
            TraceKind::Assigned => {
                let key = self.event_key(event)?;
                let worker_id = event.worker_id.clone().ok_or_else(|| inconsistent(event, "no worker"))?;
                let attempt = event.payload["attempt"].as_u64().unwrap_or(1) as u32;
                let entry = self.entries.get_mut(&key).ok_or_else(|| inconsistent(event, format!("{key} unknown")))?;
                let ready_key = (Reverse(entry.task.priority), entry.submit_seq, key.clone());
                if !self.ready.remove(&ready_key) {
                    return Err(inconsistent(event, format!("{key} assigned while not ready")));
                }
                entry.attempt = attempt;
                if let Some(w) = self.workers.get_mut(&worker_id) {
                    w.assigned.insert(key.clone());
                    w.settle();
                }
                self.in_flight.insert(key, InFlight { worker_id, attempt });
            }
            TraceKind::Completed => {
                let key = self.event_key(event)?;
                let trajectory: Trajectory = serde_json::from_value(event.payload["trajectory"].clone())
                    .map_err(|e| inconsistent(event, format!("bad trajectory: {e}")))?;
                let flight = self
                    .in_flight
                    .remove(&key)
                    .ok_or_else(|| inconsistent(event, format!("{key} completed while not in flight")))?;
                self.release(&flight.worker_id, &key);
                self.done.insert(key, trajectory);
            }
            TraceKind::Failed => {
                let key = self.event_key(event)?;
                let trajectory: Trajectory = serde_json::from_value(event.payload["trajectory"].clone())
                    .map_err(|e| inconsistent(event, format!("bad trajectory: {e}")))?;
                if let Some(flight) = self.in_flight.remove(&key) {
                    self.release(&flight.worker_id, &key);
                } else {
                    let entry = &self.entries[&key];
                    self.ready.remove(&(Reverse(entry.task.priority), entry.submit_seq, key.clone()));
                }
                self.done.insert(key, trajectory);
            }
            TraceKind::Reassigned => {
                let key = self.event_key(event)?;
                let flight = self
                    .in_flight
                    .remove(&key)
                    .ok_or_else(|| inconsistent(event, format!("{key} reassigned while not in flight")))?;
                self.release(&flight.worker_id, &key);
                let entry = self.entries.get_mut(&key).expect("in-flight rollouts are submitted");
                entry.attempt = event.payload["attempt"].as_u64().unwrap_or(entry.attempt as u64 + 1) as u32;
                self.ready.insert((Reverse(entry.task.priority), entry.submit_seq, key));
            }
            TraceKind::HeartbeatMissed => {
                if let Some(w) = event.worker_id.as_ref().and_then(|id| self.workers.get_mut(id)) {
                    w.status = match event.payload["status"].as_str() {
                        Some("dead") => WorkerStatus::Dead,
                        _ => WorkerStatus::Suspect,
                    };
                }
            }
            TraceKind::PolicySync => {
                self.policy_version = event.payload["version"].as_u64().unwrap_or(self.policy_version + 1);
                self.policy_digest = event.payload["digest"].as_str().map(str::to_string);
            }
            TraceKind::StepCompleted | TraceKind::ToolExecuted => {}
        }
        Ok(())
    }

    fn event_key(&self, event: &TraceEvent) -> Result<RolloutKey, StateError> {
        let key = event.key().ok_or_else(|| inconsistent(event, "event lacks a rollout"))?;
        if !self.entries.contains_key(&key) {
            return Err(inconsistent(event, format!("{key} was never submitted")));
        }
        Ok(key)
    }

    fn release(&mut self, worker_id: &str, key: &RolloutKey) {
        if let Some(w) = self.workers.get_mut(worker_id) {
            w.assigned.remove(key);
            w.settle();
        }
    }

    /// Rebuilds state from a log. Workers are not carried over (they
    /// re-register), so rollouts that were in flight go back to the ready
    /// queue to be re-run; call [`log_recovery`](Self::log_recovery) once a
    /// trace store is open to record those requeues.
    pub fn recover(events: &[TraceEvent], max_attempts: u32) -> Result<Self, StateError> {
        let mut state = CoordinatorState::new(max_attempts);
        for event in events {
            state.apply(event)?;
        }
        state.orphans = state.in_flight.keys().cloned().collect();
        for key in state.orphans.clone() {
            state.in_flight.remove(&key);
            let entry = state.entries.get_mut(&key).expect("in-flight rollouts are submitted");
            entry.attempt += 1;
            state.ready.insert((Reverse(entry.task.priority), entry.submit_seq, key));
        }
        Ok(state)
    }

    /// Logs a `Reassigned` event for every rollout `recover` requeued.
    pub fn log_recovery(&mut self, trace: &TraceStore) -> Result<usize, StateError> {
        let orphans = std::mem::take(&mut self.orphans);
        for key in &orphans {
            let attempt = self.entries[key].attempt;
            // Apply is bypassed: the requeue already happened in `recover`.
            trace.record(
                TraceKind::Reassigned,
                Some(key),
                None,
                json!({ "attempt": attempt, "reason": "coordinator restart" }),
            )?;
        }
        Ok(orphans.len())
    }

    /// Ready, in-flight and done must partition the submitted rollouts.
    pub fn check_partition(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (_, _, key) in &self.ready {
            if !seen.insert(key) {
                return Err(format!("{key} queued twice"));
            }
        }
        for key in self.in_flight.keys().chain(self.done.keys()) {
            if !seen.insert(key) {
                return Err(format!("{key} is in more than one set"));
            }
        }
        if seen.len() != self.entries.len() || self.entries.keys().any(|k| !seen.contains(k)) {
            return Err(format!("{} tracked, {} submitted", seen.len(), self.entries.len()));
        }
        Ok(())
    }

    pub fn collect(&self, task_id: &str) -> GroupStatus {
        let submitted: Vec<u32> = self
            .entries
            .keys()
            .filter(|k| k.task_id == task_id)
            .map(|k| k.rollout_index)
            .collect();
        let mut trajectories = Vec::new();
        let mut missing = Vec::new();
        for &index in &submitted {
            match self.done.get(&RolloutKey::new(task_id, index)) {
                Some(t) => trajectories.push(t.clone()),
                None => missing.push(index),
            }
        }
        GroupStatus { task_id: task_id.to_string(), trajectories, submitted, missing }
    }

    /// Every finished trajectory, ordered by (task_id, rollout_index).
    pub fn collect_all(&self) -> Vec<Trajectory> {
        self.done.values().cloned().collect()
    }

    pub fn is_submitted(&self, key: &RolloutKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn task(&self, key: &RolloutKey) -> Option<&TaskItem> {
        self.entries.get(key).map(|e| &e.task)
    }

    pub fn ready_keys(&self) -> Vec<RolloutKey> {
        self.ready.iter().map(|(_, _, k)| k.clone()).collect()
    }

    pub fn in_flight_keys(&self) -> Vec<RolloutKey> {
        self.in_flight.keys().cloned().collect()
    }

    pub fn done_keys(&self) -> Vec<RolloutKey> {
        self.done.keys().cloned().collect()
    }

    pub fn attempt(&self, key: &RolloutKey) -> Option<u32> {
        self.entries.get(key).map(|e| e.attempt)
    }

    pub fn submitted_count(&self) -> usize {
        self.entries.len()
    }

    /// Nothing is queued or running.
    pub fn is_drained(&self) -> bool {
        self.ready.is_empty() && self.in_flight.is_empty()
    }

    pub fn worker(&self, worker_id: &str) -> Option<&WorkerNode> {
        self.workers.get(worker_id)
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerNode> {
        self.workers.values()
    }

    pub fn policy_version(&self) -> u64 {
        self.policy_version
    }

    pub fn policy_digest(&self) -> Option<&str> {
        self.policy_digest.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(key: &RolloutKey) -> Trajectory {
        Trajectory {
            task_id: key.task_id.clone(),
            rollout_index: key.rollout_index,
            steps: Vec::new(),
            final_answer: Some("x".into()),
            status: AgentStatus::Answered,
            reward: Some(1),
            policy_version: 0,
            elapsed: 0.0,
        }
    }

    fn task(id: &str, priority: i64) -> TaskItem {
        TaskItem::new(id, "what is 1+1", 0).with_priority(priority)
    }

    #[test]
    fn highest_priority_first() {
        let trace = TraceStore::in_memory();
        let mut s = CoordinatorState::default();
        for (id, p) in [("a", 2), ("b", 9), ("c", 5)] {
            s.submit(&trace, task(id, p)).unwrap();
        }
        assert!(s.schedule(&trace).unwrap().is_empty());
        s.register_worker("w", 1, 0.0).unwrap();
        let got = s.schedule(&trace).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].task.task_id, "b");
        assert_eq!(s.worker("w").unwrap().status, WorkerStatus::Busy);
    }

    #[test]
    fn duplicates_and_invalid_tasks_rejected() {
        let trace = TraceStore::in_memory();
        let mut s = CoordinatorState::default();
        s.submit(&trace, task("a", 0)).unwrap();
        assert_eq!(s.submit(&trace, task("a", 3)), Err(StateError::Duplicate(RolloutKey::new("a", 0))));
        assert!(matches!(s.submit(&trace, TaskItem::new("", "q", 0)), Err(StateError::InvalidTask(_))));
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn dead_worker_requeues_with_next_attempt() {
        let trace = TraceStore::in_memory();
        let mut s = CoordinatorState::default();
        s.register_worker("w", 1, 0.0).unwrap();
        s.submit(&trace, task("a", 4)).unwrap();
        s.schedule(&trace).unwrap();
        assert!(s.heartbeat_scan(&trace, 1.0, 3.0, 10.0).unwrap().is_empty());
        let t = s.heartbeat_scan(&trace, 20.0, 3.0, 10.0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].to, WorkerStatus::Dead);
        assert_eq!(t[0].requeued, vec![RolloutKey::new("a", 0)]);
        assert_eq!(s.ready_keys(), vec![RolloutKey::new("a", 0)]);
        assert_eq!(s.attempt(&RolloutKey::new("a", 0)), Some(2));
        let last = trace.events().pop().unwrap();
        assert_eq!(last.kind, TraceKind::Reassigned);
        assert_eq!(last.payload["attempt"], 2);
    }

    #[test]
    fn suspect_worker_recovers_without_reassignment() {
        let trace = TraceStore::in_memory();
        let mut s = CoordinatorState::default();
        s.register_worker("w", 1, 0.0).unwrap();
        s.submit(&trace, task("a", 0)).unwrap();
        s.schedule(&trace).unwrap();
        let t = s.heartbeat_scan(&trace, 5.0, 3.0, 10.0).unwrap();
        assert_eq!(t[0].to, WorkerStatus::Suspect);
        assert!(s.heartbeat_scan(&trace, 6.0, 3.0, 10.0).unwrap().is_empty());
        let back = s.heartbeat("w", 6.5).unwrap().unwrap();
        assert_eq!(back.to, WorkerStatus::Busy);
        assert_eq!(s.in_flight_keys().len(), 1);
        assert_eq!(s.heartbeat_scan(&trace, 7.0, 3.0, 10.0).unwrap(), vec![]);
        assert_eq!(s.heartbeat_scan(&trace, 7.0, 10.0, 10.0), Err(StateError::BadThresholds));
    }

    #[test]
    fn stale_completion_is_ignored() {
        let trace = TraceStore::in_memory();
        let mut s = CoordinatorState::default();
        s.register_worker("w1", 1, 0.0).unwrap();
        s.submit(&trace, task("a", 0)).unwrap();
        s.schedule(&trace).unwrap();
        let key = RolloutKey::new("a", 0);
        s.worker_lost(&trace, "w1", "eof").unwrap();
        s.register_worker("w2", 1, 0.0).unwrap();
        let a = s.schedule(&trace).unwrap();
        assert_eq!((a[0].worker_id.as_str(), a[0].attempt), ("w2", 2));
        assert_eq!(s.complete(&trace, "w1", &key, 1, traj(&key), Value::Null).unwrap(), CompletionOutcome::Stale);
        assert_eq!(s.complete(&trace, "w2", &key, 2, traj(&key), Value::Null).unwrap(), CompletionOutcome::Accepted);
        assert_eq!(s.complete(&trace, "w2", &key, 2, traj(&key), Value::Null).unwrap(), CompletionOutcome::Stale);
        let terminal = trace.events().iter().filter(|e| e.kind == TraceKind::Completed).count();
        assert_eq!(terminal, 1);
        assert!(s.collect("a").is_complete());
    }

    #[test]
    fn attempts_are_bounded() {
        let trace = TraceStore::in_memory();
        let mut s = CoordinatorState::new(2);
        s.submit(&trace, task("a", 0)).unwrap();
        for i in 0..2 {
            let id = format!("w{i}");
            s.register_worker(&id, 1, 0.0).unwrap();
            s.schedule(&trace).unwrap();
            s.worker_lost(&trace, &id, "eof").unwrap();
        }
        assert!(s.is_drained());
        let group = s.collect("a");
        assert!(group.is_complete());
        assert_eq!(group.trajectories[0].status, AgentStatus::Failed);
        assert_eq!(group.trajectories[0].reward, Some(0));
        assert_eq!(trace.events().last().unwrap().kind, TraceKind::Failed);
    }

    #[test]
    fn policy_sync_always_increments() {
        let trace = TraceStore::in_memory();
        let mut s = CoordinatorState::default();
        assert_eq!(s.sync_policy(&trace, "d1").unwrap(), 1);
        assert_eq!(s.sync_policy(&trace, "d1").unwrap(), 2);
        assert_eq!(trace.events()[1].payload["unchanged_digest"], true);
        s.register_worker("w", 1, 0.0).unwrap();
        s.submit(&trace, task("a", 0)).unwrap();
        assert_eq!(s.schedule(&trace).unwrap()[0].policy_version, 2);
    }

    #[test]
    fn replay_matches_live_state() {
        let trace = TraceStore::in_memory();
        let mut s = CoordinatorState::default();
        s.register_worker("w", 2, 0.0).unwrap();
        for i in 0..5 {
            s.submit(&trace, TaskItem::new("t", "q", i)).unwrap();
        }
        let a = s.schedule(&trace).unwrap();
        let key = a[0].task.key();
        s.complete(&trace, "w", &key, 1, traj(&key), Value::Null).unwrap();
        s.sync_policy(&trace, "x").unwrap();

        let r = CoordinatorState::recover(&trace.events(), DEFAULT_MAX_ATTEMPTS).unwrap();
        assert_eq!(r.done_keys(), s.done_keys());
        assert_eq!(r.policy_version(), 1);
        assert_eq!(r.in_flight_keys(), vec![]);
        assert_eq!(r.ready_keys().len(), 4);
        assert_eq!(r.ready_keys()[0], RolloutKey::new("t", 1));
        assert_eq!(r.attempt(&RolloutKey::new("t", 1)), Some(2));
        r.check_partition().unwrap();
    }
}
