//! In-process harness: one coordinator plus worker threads speaking the
//! real wire protocol over loopback TCP. Workers killed by injected faults
//! are replaced, and a crashed coordinator can be restarted from its trace.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::coordinator::{Coordinator, CoordinatorConfig, CoordinatorError, HeartbeatConfig};
use super::trace::{Corruption, TraceEvent, TraceStore};
use super::worker::{run_worker, ChaosConfig, WorkerConfig, WorkerExit};
use super::{RolloutKey, TaskItem};
use crate::agent::{RuntimeConfig, Trajectory};
use crate::seed::derive_seed_str;

#[derive(Debug, Clone)]
pub struct LocalClusterConfig {
    pub workers: usize,
    pub capacity: u32,
    pub profile: RuntimeConfig,
    pub heartbeat: HeartbeatConfig,
    pub chaos: ChaosConfig,
    pub seed: u64,
    pub max_attempts: u32,
    /// Replace workers that die from injected faults.
    pub respawn: bool,
    /// `None` keeps the trace in memory (no coordinator restart possible).
    pub trace_path: Option<PathBuf>,
    /// Simulated coordinator crash at this trace seq.
    pub crash_coordinator_at: Option<u64>,
    pub sandbox_root: PathBuf,
    pub timeout: Duration,
}

impl LocalClusterConfig {
    pub fn new(profile: RuntimeConfig, workers: usize, sandbox_root: impl Into<PathBuf>) -> Self {
        LocalClusterConfig {
            workers,
            capacity: 1,
            profile,
            heartbeat: HeartbeatConfig::fast(),
            chaos: ChaosConfig::default(),
            seed: 0,
            max_attempts: super::DEFAULT_MAX_ATTEMPTS,
            respawn: true,
            trace_path: None,
            crash_coordinator_at: None,
            sandbox_root: sandbox_root.into(),
            timeout: Duration::from_secs(300),
        }
    }
}

/// Outcome of [`LocalCluster::run`].
#[derive(Debug, Clone)]
pub struct ClusterRun {
    /// Ordered by (task_id, rollout_index).
    pub trajectories: Vec<Trajectory>,
    /// The log of the last coordinator incarnation (the whole run when it
    /// was restarted from a trace file).
    pub trace: Vec<TraceEvent>,
    /// Wall time from first submission until every rollout finished.
    pub rollout_secs: f64,
    pub worker_exits: Vec<WorkerExit>,
    pub coordinator_restarts: u32,
    pub corruption: Option<Corruption>,
    pub complete: bool,
}

struct Slots {
    stop: Arc<AtomicBool>,
    exits: Arc<Mutex<Vec<WorkerExit>>>,
    handles: Vec<JoinHandle<()>>,
}

impl Slots {
    fn spawn(config: &LocalClusterConfig, addr: String, epoch: u32) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let exits = Arc::new(Mutex::new(Vec::new()));
        let handles = (0..config.workers)
            .map(|slot| {
                let (stop, exits, config, addr) = (Arc::clone(&stop), Arc::clone(&exits), config.clone(), addr.clone());
                thread::spawn(move || {
                    let mut generation = 0u32;
                    loop {
                        let id = format!("w{slot}-e{epoch}-g{generation}");
                        let worker = WorkerConfig {
                            connect: addr.clone(),
                            worker_id: id.clone(),
                            capacity: config.capacity,
                            seed: derive_seed_str(config.seed, &id),
                            sandbox_root: config.sandbox_root.join(&id),
                            chaos: config.chaos,
                        };
                        match run_worker(worker) {
                            Ok(exit) => {
                                exits.lock().push(exit);
                                let faulted = matches!(exit, WorkerExit::Crashed | WorkerExit::Hung | WorkerExit::Zombie);
                                if !faulted || !config.respawn || stop.load(Ordering::SeqCst) {
                                    return;
                                }
                            }
                            Err(e) => {
                                tracing::debug!(worker = %id, error = %e, "worker ended");
                                return;
                            }
                        }
                        generation += 1;
                    }
                })
            })
            .collect();
        Slots { stop, exits, handles }
    }

    fn finish(self) -> Vec<WorkerExit> {
        self.stop.store(true, Ordering::SeqCst);
        for h in self.handles {
            let _ = h.join();
        }
        let exits = self.exits.lock().clone();
        exits
    }
}

pub struct LocalCluster;

impl LocalCluster {
    /// Runs every task to completion and returns the collected
    /// trajectories. A simulated coordinator crash is followed by recovery
    /// from the trace file and resubmission of the full task list
    /// (duplicates are ignored), as a client would do after reconnecting.
    pub fn run(config: &LocalClusterConfig, tasks: Vec<TaskItem>) -> Result<ClusterRun, CoordinatorError> {
        let coord_config = CoordinatorConfig {
            heartbeat: config.heartbeat,
            max_attempts: config.max_attempts,
            ..CoordinatorConfig::new(config.profile.clone())
        };
        let trace = match &config.trace_path {
            Some(path) => TraceStore::create(path)?,
            None => TraceStore::in_memory(),
        };
        if let Some(seq) = config.crash_coordinator_at {
            trace.crash_at_seq(seq);
        }
        let keys: Vec<RolloutKey> = tasks.iter().map(TaskItem::key).collect();
        let deadline = Instant::now() + config.timeout;

        let mut coordinator = Coordinator::start(coord_config.clone(), trace)?;
        let mut slots = Slots::spawn(config, coordinator.addr().to_string(), 0);
        let started = Instant::now();
        let mut exits = Vec::new();
        let mut restarts = 0;
        let mut corruption = None;

        // A crash during submission leaves the rest unsubmitted; recovery
        // resubmits.
        let _ = coordinator.submit(tasks.clone());
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let finished = coordinator.wait_for(&keys, Some(remaining));
            if finished || coordinator.halted().is_none() || config.trace_path.is_none() {
                break;
            }
            tracing::info!(reason = ?coordinator.halted(), "restarting coordinator from trace");
            coordinator.kill();
            exits.extend(slots.finish());
            let path = config.trace_path.as_ref().expect("checked above");
            let (next, cut) = Coordinator::recover(coord_config.clone(), path)?;
            coordinator = next;
            corruption = corruption.or(cut);
            restarts += 1;
            slots = Slots::spawn(config, coordinator.addr().to_string(), restarts);
            coordinator.submit(tasks.clone())?;
        }
        let rollout_secs = started.elapsed().as_secs_f64();
        let complete = keys.iter().all(|k| coordinator.with_state(|s| s.done_keys().binary_search(k).is_ok()));
        let trajectories = coordinator.collect_all();
        let trace = coordinator.trace().events();
        coordinator.shutdown();
        exits.extend(slots.finish());
        Ok(ClusterRun {
            trajectories,
            trace,
            rollout_secs,
            worker_exits: exits,
            coordinator_restarts: restarts,
            corruption,
            complete,
        })
    }
}
