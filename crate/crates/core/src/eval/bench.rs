use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::agent::{ActionModel, PolicyConfig, RuntimeConfig};
use crate::cluster::{HeartbeatConfig, LocalCluster, LocalClusterConfig, TaskItem};
use crate::seed::derive_seed;
use crate::tools::LatencyModel;
use crate::train::{Executor, SequentialExecutor};

pub const BENCH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Distributed,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub workers: usize,
    pub rollout_count: usize,
    pub latency_model: LatencyModel,
    pub rollout_time: f64,
    /// `rollout_time` plus the simulated training phase.
    pub total_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchComparison {
    pub format_version: u32,
    pub train_time: f64,
    pub distributed: BenchReport,
    pub sequential: BenchReport,
    /// sequential / distributed rollout time.
    pub rollout_speedup: f64,
    pub total_speedup: f64,
}

impl BenchComparison {
    pub fn new(distributed: BenchReport, sequential: BenchReport, train_time: f64) -> Self {
        BenchComparison {
            format_version: BENCH_FORMAT_VERSION,
            train_time,
            rollout_speedup: sequential.rollout_time / distributed.rollout_time,
            total_speedup: sequential.total_time / distributed.total_time,
            distributed,
            sequential,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub rollouts: usize,
    pub workers: usize,
    /// Seconds each rollout spends in its one tool call.
    pub latency: f64,
    /// Fixed training phase added to both totals.
    pub train_time: f64,
    pub seed: u64,
    pub sandbox_root: PathBuf,
}

/// One `sleepy_noop` call, then a fixed answer.
pub fn bench_profile(latency: f64) -> RuntimeConfig {
    let actions = vec![
        ActionModel::tool_call("", "sleepy_noop", Default::default()),
        ActionModel::final_answer("", "done"),
    ];
    RuntimeConfig::single_agent(PolicyConfig::Scripted { actions }, 4)
        .with_sleepy_latency(LatencyModel::Fixed { seconds: latency })
}

pub fn bench_tasks(rollouts: usize, seed: u64) -> Vec<TaskItem> {
    (0..rollouts)
        .map(|i| TaskItem::new(&format!("bench{i:04}"), "wait, then report done", 0).with_truth("done").with_seed(derive_seed(seed, i as u64)))
        .collect()
}

fn report(mode: BenchMode, workers: usize, config: &BenchConfig, rollout_time: f64) -> BenchReport {
    BenchReport {
        mode,
        workers,
        rollout_count: config.rollouts,
        latency_model: LatencyModel::Fixed { seconds: config.latency },
        rollout_time,
        total_time: rollout_time + config.train_time,
    }
}

/// Every rollout one after another on the calling thread.
pub fn run_sequential_bench(config: &BenchConfig) -> Result<BenchReport, EvalError> {
    let exec = SequentialExecutor::new(bench_profile(config.latency), config.sandbox_root.join("sequential"));
    let tasks = bench_tasks(config.rollouts, config.seed);
    let started = Instant::now();
    let done = exec.execute(&tasks)?;
    let elapsed = started.elapsed().as_secs_f64();
    if done.len() != tasks.len() {
        return Err(EvalError::Incomplete(format!("{} of {} sequential rollouts", done.len(), tasks.len())));
    }
    Ok(report(BenchMode::Sequential, 1, config, elapsed))
}

/// The same rollouts through a local cluster of `workers` workers.
pub fn run_distributed_bench(config: &BenchConfig) -> Result<BenchReport, EvalError> {
    let mut cluster = LocalClusterConfig::new(bench_profile(config.latency), config.workers.max(1), config.sandbox_root.join("distributed"));
    cluster.heartbeat = HeartbeatConfig::default();
    cluster.seed = config.seed;
    let run = LocalCluster::run(&cluster, bench_tasks(config.rollouts, config.seed))?;
    if !run.complete {
        return Err(EvalError::Incomplete(format!("{} of {} distributed rollouts", run.trajectories.len(), config.rollouts)));
    }
    Ok(report(BenchMode::Distributed, config.workers.max(1), config, run.rollout_secs))
}

/// Sequential baseline first, then the distributed run.
pub fn run_efficiency_bench(config: &BenchConfig) -> Result<BenchComparison, EvalError> {
    let sequential = run_sequential_bench(config)?;
    let distributed = run_distributed_bench(config)?;
    Ok(BenchComparison::new(distributed, sequential, config.train_time))
}

/// One training cycle of a full-scale deployment (seconds) in this report format. The
/// worker count and per-rollout latency of that setup are not given; they
/// are left at 0.
pub fn reference_cycle() -> BenchComparison {
    let mk = |mode, rollout_time: f64| BenchReport {
        mode,
        workers: 0,
        rollout_count: 0,
        latency_model: LatencyModel::Fixed { seconds: 0.0 },
        rollout_time,
        total_time: rollout_time + 144.0,
    };
    BenchComparison::new(mk(BenchMode::Distributed, 525.0), mk(BenchMode::Sequential, 7695.0), 144.0)
}
