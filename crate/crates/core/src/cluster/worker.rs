use std::net::{Shutdown, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::wire::{self, read_frame, write_frame};
use super::TaskItem;
use crate::agent::{run_task_with_hooks, AgentStatus, RunHooks, RuntimeConfig, Trajectory, TrajectoryStep};
use crate::message::{Message, Payload};
use crate::seed::derive_seed_str;

/// How an injected fault shows itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChaosMode {
    /// The process dies: the connection drops mid-rollout.
    #[default]
    Crash,
    /// The process freezes: heartbeats stop, the connection stays open.
    Hang,
    /// Heartbeats stop, and the result is delivered only after the
    /// coordinator has given up on the worker.
    Zombie,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChaosConfig {
    /// Chance that a given assignment triggers the fault.
    pub kill_probability: f64,
    pub mode: ChaosMode,
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub connect: String,
    pub worker_id: String,
    pub capacity: u32,
    pub seed: u64,
    pub sandbox_root: PathBuf,
    pub chaos: ChaosConfig,
}

impl WorkerConfig {
    pub fn new(connect: &str, worker_id: &str, sandbox_root: impl Into<PathBuf>) -> Self {
        WorkerConfig {
            connect: connect.to_string(),
            worker_id: worker_id.to_string(),
            capacity: 1,
            seed: 0,
            sandbox_root: sandbox_root.into(),
            chaos: ChaosConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerExit {
    /// Told to stop by the coordinator.
    Shutdown,
    /// The coordinator went away.
    Disconnected,
    /// Injected faults.
    Crashed,
    Hung,
    Zombie,
}

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("registration refused: {0}")]
    Rejected(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

type Writer = Arc<Mutex<TcpStream>>;

fn send(writer: &Writer, msg: &Message) -> bool {
    write_frame(&mut *writer.lock(), msg).is_ok()
}

fn draws_fault(config: &WorkerConfig, task: &TaskItem, attempt: u64) -> bool {
    let p = config.chaos.kill_probability;
    if p <= 0.0 {
        return false;
    }
    let label = format!("chaos/{}/{}/{}", task.task_id, task.rollout_index, attempt);
    ChaCha8Rng::seed_from_u64(derive_seed_str(config.seed, &label)).gen_bool(p.min(1.0))
}

struct Rollout<'a> {
    worker_id: &'a str,
    profile: &'a RuntimeConfig,
    sandbox_root: &'a PathBuf,
    task: TaskItem,
    attempt: u64,
    version: u64,
}

impl Rollout<'_> {
    /// Runs from a clean sandbox and returns the trajectory-complete frame.
    fn run(&self, writer: Option<&Writer>) -> Message {
        let started = Instant::now();
        let task = &self.task;
        let traj = match self.profile.instantiate(self.sandbox_root, self.version) {
            Ok(inst) => {
                let _ = std::fs::remove_dir_all(inst.env.sandbox_for(&task.task_id, task.rollout_index));
                let report = |step_index: u32, step: &TrajectoryStep| -> bool {
                    let Some(writer) = writer else { return true };
                    let msg = Message::control(
                        task.task_id.clone(),
                        self.worker_id,
                        wire::STEP_REPORT,
                        json!({
                            "task_id": task.task_id,
                            "rollout_index": task.rollout_index,
                            "step_index": step_index,
                            "step": step,
                        }),
                    )
                    .to("coordinator")
                    .with_header(wire::HEADER_ATTEMPT, self.attempt);
                    send(writer, &msg)
                };
                let hooks = RunHooks { on_step: Some(&report) };
                run_task_with_hooks(&inst.entry, task, inst.policy.as_ref(), &inst.env, &hooks)
            }
            Err(e) => {
                tracing::error!(error = %e, "profile does not instantiate");
                Trajectory {
                    task_id: task.task_id.clone(),
                    rollout_index: task.rollout_index,
                    steps: Vec::new(),
                    final_answer: None,
                    status: AgentStatus::Failed,
                    reward: None,
                    policy_version: self.version,
                    elapsed: 0.0,
                }
            }
        };
        let steps = traj.steps.len();
        Message::control(
            task.task_id.clone(),
            self.worker_id,
            wire::TRAJECTORY_COMPLETE,
            json!({
                "trajectory": traj,
                "metrics": { "wall_secs": started.elapsed().as_secs_f64(), "steps": steps },
            }),
        )
        .to("coordinator")
        .with_header(wire::HEADER_ATTEMPT, self.attempt)
    }
}

/// Connects, registers and serves assignments until told to stop, the
/// coordinator disappears, or an injected fault fires.
pub fn run_worker(config: WorkerConfig) -> Result<WorkerExit, WorkerError> {
    let stream = TcpStream::connect(&config.connect)?;
    stream.set_nodelay(true).ok();
    let mut reader = stream.try_clone()?;
    let writer: Writer = Arc::new(Mutex::new(stream));

    let hello = Message::control(
        "cluster",
        config.worker_id.clone(),
        wire::WORKER_REGISTER,
        json!({ "worker_id": config.worker_id, "capacity": config.capacity }),
    )
    .to("coordinator");
    if !send(&writer, &hello) {
        return Err(WorkerError::Protocol("cannot send registration".into()));
    }
    let ack = read_frame(&mut reader)?.ok_or_else(|| WorkerError::Protocol("closed during registration".into()))?;
    let body = match ack.payload {
        Payload::Control(body) if ack.header_str("frame") == Some(wire::WORKER_REGISTER) => body,
        Payload::ErrorNotice(n) => return Err(WorkerError::Rejected(n.detail.unwrap_or_default())),
        other => return Err(WorkerError::Protocol(format!("unexpected {} during registration", other.tag()))),
    };
    let profile: Arc<RuntimeConfig> = Arc::new(
        serde_json::from_value(body["profile"].clone()).map_err(|e| WorkerError::Protocol(format!("bad profile: {e}")))?,
    );
    let interval = Duration::from_secs_f64(body["heartbeat_interval_secs"].as_f64().unwrap_or(1.0).max(0.001));

    let exiting = Arc::new(AtomicBool::new(false));
    let beating = Arc::new(AtomicBool::new(true));
    let completed = Arc::new(AtomicU32::new(0));
    let heartbeat = thread::spawn({
        let (writer, exiting, beating, id) = (Arc::clone(&writer), Arc::clone(&exiting), Arc::clone(&beating), config.worker_id.clone());
        move || {
            while !exiting.load(Ordering::SeqCst) {
                thread::sleep(interval);
                if beating.load(Ordering::SeqCst) && !exiting.load(Ordering::SeqCst) {
                    let beat = Message::control("cluster", id.clone(), wire::HEARTBEAT, json!({})).to("coordinator");
                    if !send(&writer, &beat) {
                        break;
                    }
                }
            }
        }
    });

    let mut frozen: Option<ChaosMode> = None;
    let mut held_back: Vec<Message> = Vec::new();
    let exit = loop {
        let msg = match read_frame(&mut reader) {
            Ok(Some(m)) => m,
            _ => break WorkerExit::Disconnected,
        };
        let frame = msg.frame().map(str::to_string);
        let attempt = msg.headers.get(wire::HEADER_ATTEMPT).and_then(|v| v.as_u64()).unwrap_or(1);
        let version = msg.headers.get(wire::HEADER_POLICY_VERSION).and_then(|v| v.as_u64()).unwrap_or(0);
        match (frame.as_deref(), msg.payload) {
            (Some(wire::TASK_ASSIGN), Payload::TaskItem(task)) => {
                if frozen.is_some() {
                    continue;
                }
                let rollout = Rollout {
                    worker_id: &config.worker_id,
                    profile: &profile,
                    sandbox_root: &config.sandbox_root,
                    attempt,
                    version,
                    task,
                };
                if draws_fault(&config, &rollout.task, rollout.attempt) {
                    tracing::info!(worker = %config.worker_id, mode = ?config.chaos.mode, "injected fault");
                    match config.chaos.mode {
                        ChaosMode::Crash => {
                            let _ = writer.lock().shutdown(Shutdown::Both);
                            break WorkerExit::Crashed;
                        }
                        ChaosMode::Hang => {
                            beating.store(false, Ordering::SeqCst);
                            frozen = Some(ChaosMode::Hang);
                        }
                        ChaosMode::Zombie => {
                            beating.store(false, Ordering::SeqCst);
                            frozen = Some(ChaosMode::Zombie);
                            held_back.push(rollout.run(None));
                        }
                    }
                    continue;
                }
                let (writer, completed) = (Arc::clone(&writer), Arc::clone(&completed));
                let (profile, id, root) = (Arc::clone(&profile), config.worker_id.clone(), config.sandbox_root.clone());
                let Rollout { task, attempt, version, .. } = rollout;
                thread::spawn(move || {
                    let rollout = Rollout { worker_id: &id, profile: &profile, sandbox_root: &root, task, attempt, version };
                    let done = rollout.run(Some(&writer));
                    if send(&writer, &done) {
                        completed.fetch_add(1, Ordering::SeqCst);
                    }
                });
            }
            (Some(wire::POLICY_SYNC), _) => {
                tracing::debug!(worker = %config.worker_id, "policy sync announced");
            }
            (Some(wire::SHUTDOWN), _) => {
                for late in held_back.drain(..) {
                    send(&writer, &late);
                }
                break match frozen {
                    Some(ChaosMode::Hang) => WorkerExit::Hung,
                    Some(ChaosMode::Zombie) => WorkerExit::Zombie,
                    _ => WorkerExit::Shutdown,
                };
            }
            (frame, _) => tracing::warn!(worker = %config.worker_id, ?frame, "unexpected frame"),
        }
    };
    exiting.store(true, Ordering::SeqCst);
    let _ = writer.lock().shutdown(Shutdown::Both);
    let _ = heartbeat.join();
    tracing::debug!(worker = %config.worker_id, ?exit, completed = completed.load(Ordering::SeqCst), "worker exiting");
    Ok(exit)
}
