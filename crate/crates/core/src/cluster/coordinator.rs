use std::collections::BTreeMap;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

use super::state::{CoordinatorState, GroupStatus, RolloutKey, StateError, WorkerStatus};
use super::trace::{Corruption, TraceStore};
use super::wire::{self, read_frame, write_frame};
use super::TaskItem;
use crate::agent::{RuntimeConfig, Trajectory, TrajectoryStep};
use crate::message::{make_error_notice_with_detail, ErrorCause, Message, Payload};
use crate::train::{compute_reward, expand_group, Executor, ExecutorError, PolicyVersion, RolloutGroup};

const SESSION: &str = "cluster";
const SENDER: &str = "coordinator";
pub const POLICY_TOPIC: &str = "policy";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeartbeatConfig {
    pub interval: Duration,
    pub suspect_after: Duration,
    pub dead_after: Duration,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        HeartbeatConfig {
            interval: Duration::from_secs(1),
            suspect_after: Duration::from_secs(3),
            dead_after: Duration::from_secs(10),
        }
    }
}

impl HeartbeatConfig {
    /// Same ratios as the default, compressed for tests.
    pub fn fast() -> Self {
        HeartbeatConfig {
            interval: Duration::from_millis(20),
            suspect_after: Duration::from_millis(60),
            dead_after: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub listen: String,
    /// Agents, tools and policies every worker runs; sent on registration.
    pub profile: RuntimeConfig,
    pub heartbeat: HeartbeatConfig,
    pub max_attempts: u32,
    /// Sender name allowed to issue policy syncs.
    pub trainer_id: String,
}

impl CoordinatorConfig {
    pub fn new(profile: RuntimeConfig) -> Self {
        CoordinatorConfig {
            listen: "127.0.0.1:0".into(),
            profile,
            heartbeat: HeartbeatConfig::default(),
            max_attempts: super::DEFAULT_MAX_ATTEMPTS,
            trainer_id: "trainer".into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("coordinator halted: {0}")]
    Halted(String),
}

type Link = Arc<Mutex<TcpStream>>;

struct Shared {
    config: CoordinatorConfig,
    trace: Arc<TraceStore>,
    state: Mutex<CoordinatorState>,
    changed: Condvar,
    workers: Mutex<BTreeMap<String, Link>>,
    sockets: Mutex<Vec<TcpStream>>,
    stop: AtomicBool,
    halt_reason: Mutex<Option<String>>,
    epoch: Instant,
}

#[derive(Deserialize)]
struct SubmitGroup {
    task: TaskItem,
    k: u32,
    #[serde(default)]
    rollout_indices: Option<Vec<u32>>,
}

impl Shared {
    fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Fail-stop: every connection is cut as if the process died.
    fn halt(&self, reason: String) {
        {
            let mut slot = self.halt_reason.lock();
            if slot.is_none() {
                tracing::error!(%reason, "coordinator halting");
                *slot = Some(reason);
            }
        }
        self.stop.store(true, Ordering::SeqCst);
        for s in self.sockets.lock().iter() {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.notify();
    }

    fn notify(&self) {
        let _guard = self.state.lock();
        self.changed.notify_all();
    }

    fn check<T>(&self, result: Result<T, StateError>) -> Option<T> {
        match result {
            Ok(v) => Some(v),
            Err(StateError::Trace(e)) => {
                self.halt(e.to_string());
                None
            }
            Err(e) => {
                tracing::warn!(error = %e, "rejected");
                None
            }
        }
    }

    fn send_to_worker(&self, worker_id: &str, msg: &Message) -> bool {
        let link = self.workers.lock().get(worker_id).cloned();
        match link {
            Some(link) => write_frame(&mut *link.lock(), msg).is_ok(),
            None => false,
        }
    }

    fn lose_worker(&self, worker_id: &str, reason: &str) {
        self.workers.lock().remove(worker_id);
        let requeued = {
            let mut st = self.state.lock();
            let r = st.worker_lost(&self.trace, worker_id, reason);
            self.changed.notify_all();
            r
        };
        if let Some(keys) = self.check(requeued) {
            if !keys.is_empty() {
                tracing::info!(worker_id, rollouts = keys.len(), "requeued after worker loss");
            }
        }
    }

    /// Schedules and sends assignments until nothing more can be placed.
    fn dispatch(&self) {
        loop {
            if self.stopped() {
                return;
            }
            let assignments = {
                let mut st = self.state.lock();
                st.schedule(&self.trace)
            };
            let Some(assignments) = self.check(assignments) else { return };
            if assignments.is_empty() {
                return;
            }
            let mut lost = Vec::new();
            for a in assignments {
                let msg = Message::new(a.task.task_id.clone(), SENDER, Payload::TaskItem(a.task.without_truth()))
                    .to(a.worker_id.clone())
                    .with_priority(a.task.priority)
                    .with_header("frame", wire::TASK_ASSIGN)
                    .with_header(wire::HEADER_ATTEMPT, a.attempt)
                    .with_header(wire::HEADER_POLICY_VERSION, a.policy_version);
                if !lost.contains(&a.worker_id) && !self.send_to_worker(&a.worker_id, &msg) {
                    lost.push(a.worker_id);
                }
            }
            if lost.is_empty() {
                return;
            }
            for id in lost {
                self.lose_worker(&id, "send failed");
            }
        }
    }

    fn wait_for(&self, keys: &[RolloutKey], timeout: Option<Duration>) -> bool {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.state.lock();
        loop {
            let done = st.done_keys();
            if keys.iter().all(|k| done.binary_search(k).is_ok()) {
                return true;
            }
            if self.stopped() || deadline.is_some_and(|d| Instant::now() >= d) {
                return false;
            }
            self.changed.wait_for(&mut st, Duration::from_millis(50));
        }
    }

    fn submit_tasks(&self, tasks: Vec<TaskItem>) -> Result<usize, CoordinatorError> {
        let mut accepted = 0;
        {
            let mut st = self.state.lock();
            for task in tasks {
                match st.submit(&self.trace, task) {
                    Ok(()) => accepted += 1,
                    Err(StateError::Duplicate(_)) => {}
                    Err(StateError::Trace(e)) => {
                        drop(st);
                        self.halt(e.to_string());
                        return Err(CoordinatorError::Halted(e.to_string()));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        self.dispatch();
        Ok(accepted)
    }

    fn sync_policy(&self, digest: &str) -> Result<PolicyVersion, CoordinatorError> {
        // Assignments made after the bump carry the new version in their
        // header; the broadcast only informs idle workers.
        let mut st = self.state.lock();
        let version = match st.sync_policy(&self.trace, digest) {
            Ok(v) => v,
            Err(e) => {
                drop(st);
                if let StateError::Trace(t) = &e {
                    self.halt(t.to_string());
                    return Err(CoordinatorError::Halted(t.to_string()));
                }
                return Err(e.into());
            }
        };
        self.changed.notify_all();
        drop(st);
        let announcement = Message::control(SESSION, SENDER, wire::POLICY_SYNC, json!({ "version": version, "digest": digest }))
            .on_topic(POLICY_TOPIC);
        let links: Vec<(String, Link)> = self.workers.lock().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (_, link) in links {
            let _ = write_frame(&mut *link.lock(), &announcement);
        }
        Ok(PolicyVersion { version, params_digest: digest.to_string() })
    }

    fn group(&self, task_id: &str, k: u32) -> RolloutGroup {
        let status = self.state.lock().collect(task_id);
        RolloutGroup::assemble(task_id, k as usize, status.trajectories)
    }
}

fn reply(link: &Link, msg: &Message) {
    let _ = write_frame(&mut *link.lock(), msg);
}

fn refuse(link: &Link, request: &Message, detail: String) {
    let notice = make_error_notice_with_detail(request, ErrorCause::ValidationFailure, Some(detail));
    reply(link, &notice);
}

fn body(msg: &Message) -> Value {
    match &msg.payload {
        Payload::Control(v) => v.clone(),
        _ => Value::Null,
    }
}

fn handle_connection(shared: Arc<Shared>, stream: TcpStream) {
    let Ok(mut reader) = stream.try_clone() else { return };
    if let Ok(s) = stream.try_clone() {
        shared.sockets.lock().push(s);
    }
    let link: Link = Arc::new(Mutex::new(stream));
    let first = match read_frame(&mut reader) {
        Ok(Some(m)) => m,
        _ => return,
    };
    if first.frame() == Some(wire::WORKER_REGISTER) {
        serve_worker(&shared, link, reader, first);
    } else {
        serve_client(&shared, link, reader, first);
    }
}

fn serve_worker(shared: &Arc<Shared>, link: Link, mut reader: TcpStream, hello: Message) {
    let b = body(&hello);
    let worker_id = b["worker_id"].as_str().unwrap_or(&hello.sender).to_string();
    let capacity = b["capacity"].as_u64().unwrap_or(1) as u32;
    // The link stays locked until the ack is out, so a concurrent dispatch
    // cannot put a task-assign ahead of it. Lock order: link, worker map,
    // state.
    let mut out = link.lock();
    let registered = {
        let mut links = shared.workers.lock();
        let r = shared.state.lock().register_worker(&worker_id, capacity, shared.now());
        if r.is_ok() {
            links.insert(worker_id.clone(), Arc::clone(&link));
        }
        r
    };
    if let Err(e) = registered {
        drop(out);
        refuse(&link, &hello, e.to_string());
        return;
    }
    let version = shared.state.lock().policy_version();
    let ack = Message::control(
        SESSION,
        SENDER,
        wire::WORKER_REGISTER,
        json!({
            "accepted": true,
            "profile": shared.config.profile,
            "policy_version": version,
            "heartbeat_interval_secs": shared.config.heartbeat.interval.as_secs_f64(),
        }),
    )
    .to(worker_id.clone());
    let sent = write_frame(&mut *out, &ack);
    drop(out);
    if sent.is_err() {
        shared.lose_worker(&worker_id, "ack failed");
        return;
    }
    tracing::debug!(worker_id, capacity, "worker registered");
    shared.dispatch();

    while let Ok(Some(msg)) = read_frame(&mut reader) {
        match msg.frame() {
            Some(wire::HEARTBEAT) => {
                let now = shared.now();
                let _ = shared.state.lock().heartbeat(&worker_id, now);
            }
            Some(wire::STEP_REPORT) => {
                let b = body(&msg);
                let step: Option<TrajectoryStep> = serde_json::from_value(b["step"].clone()).ok();
                if let (Some(task_id), Some(index), Some(step)) = (b["task_id"].as_str(), b["rollout_index"].as_u64(), step) {
                    let key = RolloutKey::new(task_id, index as u32);
                    let attempt = msg.header_u64(wire::HEADER_ATTEMPT).unwrap_or(0) as u32;
                    let step_index = b["step_index"].as_u64().unwrap_or(0) as u32;
                    let r = shared.state.lock().record_step(&shared.trace, &worker_id, &key, attempt, step_index, &step);
                    shared.check(r);
                }
            }
            Some(wire::TRAJECTORY_COMPLETE) => {
                let b = body(&msg);
                let Ok(mut traj) = serde_json::from_value::<Trajectory>(b["trajectory"].clone()) else {
                    tracing::warn!(worker_id, "malformed trajectory");
                    continue;
                };
                let key = RolloutKey::new(&traj.task_id, traj.rollout_index);
                let attempt = msg.header_u64(wire::HEADER_ATTEMPT).unwrap_or(0) as u32;
                let outcome = {
                    let mut st = shared.state.lock();
                    let truth = st.task(&key).and_then(|t| t.ground_truth.clone());
                    traj.reward = Some(truth.map_or(0, |g| compute_reward(&traj, &g)));
                    let r = st.complete(&shared.trace, &worker_id, &key, attempt, traj, b["metrics"].clone());
                    shared.changed.notify_all();
                    r
                };
                if let Some(outcome) = shared.check(outcome) {
                    tracing::debug!(worker_id, %key, ?outcome, "completion");
                }
                shared.dispatch();
            }
            Some(wire::SHUTDOWN) => break,
            other => tracing::warn!(worker_id, frame = ?other, "unexpected frame from worker"),
        }
    }
    shared.lose_worker(&worker_id, "disconnected");
    shared.dispatch();
}

fn serve_client(shared: &Arc<Shared>, link: Link, mut reader: TcpStream, first: Message) {
    let mut next = Some(first);
    while let Some(msg) = next.take() {
        match msg.frame() {
            Some(wire::SUBMIT_GROUP) => {
                let request: SubmitGroup = match serde_json::from_value(body(&msg)) {
                    Ok(r) => r,
                    Err(e) => {
                        refuse(&link, &msg, format!("malformed submit-group: {e}"));
                        break;
                    }
                };
                let indices = request.rollout_indices.clone().unwrap_or_else(|| (0..request.k).collect());
                if request.k == 0 || indices.iter().any(|i| *i >= request.k) {
                    refuse(&link, &msg, "rollout indices must lie in [0, k)".into());
                } else {
                    let tasks = expand_group(&request.task, indices.iter().copied());
                    let keys: Vec<RolloutKey> = tasks.iter().map(TaskItem::key).collect();
                    match shared.submit_tasks(tasks) {
                        Ok(_) => {
                            let shared = Arc::clone(shared);
                            let link = Arc::clone(&link);
                            thread::spawn(move || {
                                shared.wait_for(&keys, None);
                                let group = shared.group(&request.task.task_id, request.k);
                                let out = Message::control(
                                    SESSION,
                                    SENDER,
                                    wire::GROUP_RESULT,
                                    serde_json::to_value(&group).expect("groups serialize"),
                                )
                                .to(msg.sender.clone())
                                .with_header("reply_to", msg.id.to_string());
                                reply(&link, &out);
                            });
                        }
                        Err(e) => refuse(&link, &msg, e.to_string()),
                    }
                }
            }
            Some(wire::POLICY_SYNC) => {
                if msg.sender != shared.config.trainer_id {
                    refuse(&link, &msg, format!("policy-sync is accepted only from `{}`", shared.config.trainer_id));
                } else {
                    let digest = body(&msg)["digest"].as_str().unwrap_or_default().to_string();
                    match shared.sync_policy(&digest) {
                        Ok(v) => reply(
                            &link,
                            &Message::control(SESSION, SENDER, wire::POLICY_SYNC, serde_json::to_value(&v).unwrap())
                                .to(msg.sender.clone())
                                .with_header("reply_to", msg.id.to_string()),
                        ),
                        Err(e) => refuse(&link, &msg, e.to_string()),
                    }
                }
            }
            Some(wire::SHUTDOWN) => {
                request_stop(shared);
                break;
            }
            other => refuse(&link, &msg, format!("unsupported frame {other:?}")),
        }
        next = match read_frame(&mut reader) {
            Ok(Some(m)) => Some(m),
            _ => None,
        };
    }
}

/// Graceful stop: workers are told to exit, then every socket is closed.
fn request_stop(shared: &Shared) {
    if shared.stop.swap(true, Ordering::SeqCst) {
        return;
    }
    let bye = Message::control(SESSION, SENDER, wire::SHUTDOWN, json!({}));
    let links: Vec<Link> = shared.workers.lock().values().cloned().collect();
    for link in links {
        let _ = write_frame(&mut *link.lock(), &bye);
    }
    for s in shared.sockets.lock().iter() {
        let _ = s.shutdown(Shutdown::Both);
    }
    shared.notify();
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    while !shared.stopped() {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let _ = stream.set_write_timeout(Some(Duration::from_secs(5)));
                let shared = Arc::clone(&shared);
                thread::spawn(move || handle_connection(shared, stream));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(1)),
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

fn scan_loop(shared: Arc<Shared>) {
    let hb = shared.config.heartbeat;
    let period = (hb.interval / 2).max(Duration::from_millis(5));
    while !shared.stopped() {
        thread::sleep(period);
        let transitions = {
            let mut st = shared.state.lock();
            st.heartbeat_scan(&shared.trace, shared.now(), hb.suspect_after.as_secs_f64(), hb.dead_after.as_secs_f64())
        };
        let Some(transitions) = shared.check(transitions) else { continue };
        let mut requeued = false;
        for t in &transitions {
            tracing::info!(worker = %t.worker_id, from = ?t.from, to = ?t.to, "worker status");
            if t.to == WorkerStatus::Dead {
                let bye = Message::control(SESSION, SENDER, wire::SHUTDOWN, json!({ "reason": "declared dead" }));
                shared.send_to_worker(&t.worker_id, &bye);
                shared.workers.lock().remove(&t.worker_id);
                requeued |= !t.requeued.is_empty();
            }
        }
        if !transitions.is_empty() {
            shared.notify();
        }
        if requeued {
            shared.dispatch();
        }
    }
}

/// A running coordinator. Dropping it stops it.
pub struct Coordinator {
    shared: Arc<Shared>,
    addr: SocketAddr,
    threads: Vec<JoinHandle<()>>,
}

impl Coordinator {
    pub fn start(config: CoordinatorConfig, trace: TraceStore) -> Result<Self, CoordinatorError> {
        let state = CoordinatorState::new(config.max_attempts);
        Self::start_with_state(config, trace, state)
    }

    /// Rebuilds state from the trace at `path`, logs the requeue of
    /// rollouts that were in flight at the crash, and starts serving. A
    /// corrupt tail is cut off and reported.
    pub fn recover(config: CoordinatorConfig, path: &Path) -> Result<(Self, Option<Corruption>), CoordinatorError> {
        let (trace, corruption) = TraceStore::resume(path)?;
        let mut state = CoordinatorState::recover(&trace.events(), config.max_attempts)?;
        state.log_recovery(&trace)?;
        Ok((Self::start_with_state(config, trace, state)?, corruption))
    }

    pub fn start_with_state(
        config: CoordinatorConfig,
        trace: TraceStore,
        state: CoordinatorState,
    ) -> Result<Self, CoordinatorError> {
        let listener = TcpListener::bind(&config.listen)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            config,
            trace: Arc::new(trace),
            state: Mutex::new(state),
            changed: Condvar::new(),
            workers: Mutex::new(BTreeMap::new()),
            sockets: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
            halt_reason: Mutex::new(None),
            epoch: Instant::now(),
        });
        let threads = vec![
            thread::spawn({
                let shared = Arc::clone(&shared);
                move || accept_loop(shared, listener)
            }),
            thread::spawn({
                let shared = Arc::clone(&shared);
                move || scan_loop(shared)
            }),
        ];
        Ok(Coordinator { shared, addr, threads })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn trace(&self) -> Arc<TraceStore> {
        Arc::clone(&self.shared.trace)
    }

    /// Submits rollouts; ones already submitted are skipped. Returns how
    /// many were new.
    pub fn submit(&self, tasks: Vec<TaskItem>) -> Result<usize, CoordinatorError> {
        if let Some(reason) = self.halted() {
            return Err(CoordinatorError::Halted(reason));
        }
        self.shared.submit_tasks(tasks)
    }

    pub fn sync_policy(&self, digest: &str) -> Result<PolicyVersion, CoordinatorError> {
        self.shared.sync_policy(digest)
    }

    /// Blocks until every key is done, the coordinator stops, or the
    /// timeout passes.
    pub fn wait_for(&self, keys: &[RolloutKey], timeout: Option<Duration>) -> bool {
        let mut sorted = keys.to_vec();
        sorted.sort();
        self.shared.wait_for(&sorted, timeout)
    }

    /// Blocks until nothing is queued or running.
    pub fn wait_drained(&self, timeout: Option<Duration>) -> bool {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.shared.state.lock();
        loop {
            if st.is_drained() {
                return true;
            }
            if self.shared.stopped() || deadline.is_some_and(|d| Instant::now() >= d) {
                return false;
            }
            self.shared.changed.wait_for(&mut st, Duration::from_millis(50));
        }
    }

    pub fn collect(&self, task_id: &str) -> GroupStatus {
        self.shared.state.lock().collect(task_id)
    }

    pub fn collect_all(&self) -> Vec<Trajectory> {
        self.shared.state.lock().collect_all()
    }

    pub fn with_state<R>(&self, f: impl FnOnce(&CoordinatorState) -> R) -> R {
        f(&self.shared.state.lock())
    }

    /// Why the coordinator halted, if it did.
    pub fn halted(&self) -> Option<String> {
        self.shared.halt_reason.lock().clone()
    }

    pub fn is_stopped(&self) -> bool {
        self.shared.stopped()
    }

    pub fn connected_workers(&self) -> usize {
        self.shared.workers.lock().len()
    }

    /// Stops the coordinator, telling workers to exit.
    pub fn shutdown(self) {}

    /// Cuts every connection without telling anyone, as a crash would.
    pub fn kill(self) {
        self.shared.halt("killed".into());
    }
}

impl Drop for Coordinator {
    fn drop(&mut self) {
        request_stop(&self.shared);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Executor for Coordinator {
    fn execute(&self, tasks: &[TaskItem]) -> Result<Vec<Trajectory>, ExecutorError> {
        self.submit(tasks.to_vec()).map_err(|e| ExecutorError::Unavailable(e.to_string()))?;
        let keys: Vec<RolloutKey> = tasks.iter().map(TaskItem::key).collect();
        self.wait_for(&keys, None);
        let st = self.shared.state.lock();
        let mut by_task: BTreeMap<&str, GroupStatus> = BTreeMap::new();
        for t in tasks {
            by_task.entry(&t.task_id).or_insert_with(|| st.collect(&t.task_id));
        }
        Ok(tasks
            .iter()
            .filter_map(|t| by_task[t.task_id.as_str()].trajectories.iter().find(|x| x.rollout_index == t.rollout_index).cloned())
            .collect())
    }
}
