use std::collections::BTreeMap;
use std::fs;
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use agentry_core::agent::{PolicyConfig, RuntimeConfig};
use agentry_core::cluster::wire::{self, read_frame, write_frame};
use agentry_core::cluster::{
    check_trace, read_trace, run_worker, Coordinator, CoordinatorConfig, CoordinatorState, TaskItem,
    TraceStore, WorkerConfig, DEFAULT_MAX_ATTEMPTS,
};
use agentry_core::eval::{
    curve_csv, run_efficiency_bench, run_scaling_experiment, BenchConfig, ScalingConfig,
};
use agentry_core::message::{Message, Payload};
use agentry_core::train::{emit_training_batch, RolloutGroup};

#[derive(Parser)]
#[command(name = "agentry", version, about = "Distributed agent rollouts, rewards and advantages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the coordinator until a client sends shutdown.
    Coordinator {
        /// Port, or HOST:PORT.
        #[arg(long, default_value = "0")]
        listen: String,
        #[arg(long)]
        trace: PathBuf,
        /// Agent profile JSON shipped to workers. Defaults to one
        /// calculator agent with a seeded stochastic policy.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Recover from an existing trace instead of starting fresh.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = DEFAULT_MAX_ATTEMPTS)]
        max_attempts: u32,
    },
    /// Serve rollouts for a coordinator.
    Worker {
        #[arg(long)]
        connect: String,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 1)]
        capacity: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sandbox: Option<PathBuf>,
    },
    /// Submit every task in FILE as a group of K rollouts and write one
    /// group file per task.
    Submit {
        #[arg(long)]
        connect: String,
        /// JSON array or JSON lines of tasks.
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value_t = 32)]
        k: u32,
        #[arg(long, default_value = "groups")]
        out: PathBuf,
        #[arg(long, default_value = "client")]
        sender: String,
    },
    /// Pass@k versus rollouts on calibrated synthetic questions.
    Scaling {
        #[arg(long, default_value_t = 50)]
        questions: usize,
        #[arg(long, default_value_t = 32)]
        n: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        workers: usize,
    },
    /// Sequential versus distributed rollout time.
    Bench {
        #[arg(long, default_value_t = 64)]
        rollouts: usize,
        #[arg(long, default_value_t = 16)]
        workers: usize,
        /// Seconds per rollout.
        #[arg(long, default_value_t = 0.5)]
        latency: f64,
        /// Simulated training phase added to both totals.
        #[arg(long, default_value_t = 0.0)]
        train_time: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a trace file and print the state it rebuilds.
    TraceReplay {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Turn a directory of group files into a training batch.
    Batch {
        #[arg(long)]
        groups: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Coordinator { listen, trace, profile, resume, max_attempts } => {
            coordinator(&listen, &trace, profile.as_deref(), resume, max_attempts)
        }
        Command::Worker { connect, id, capacity, seed, sandbox } => {
            let root = sandbox.unwrap_or_else(|| std::env::temp_dir().join("agentry").join(&id));
            let config = WorkerConfig { capacity, seed, ..WorkerConfig::new(&connect, &id, root) };
            let exit = run_worker(config)?;
            eprintln!("worker {id} exited: {exit:?}");
            Ok(())
        }
        Command::Submit { connect, tasks, k, out, sender } => submit(&connect, &tasks, k, &out, &sender),
        Command::Scaling { questions, n, out, seed, workers } => {
            let root = tempfile::tempdir()?;
            let config = ScalingConfig { workers, ..ScalingConfig::calibrated(questions, n, seed, root.path()) };
            let result = run_scaling_experiment(&config)?;
            fs::write(&out, curve_csv(&result.curve))?;
            for (k, p) in result.curve.iter().filter(|(k, _)| k.is_power_of_two()) {
                println!("pass@{k} = {p:.4}");
            }
            Ok(())
        }
        Command::Bench { rollouts, workers, latency, train_time, seed, out } => {
            let root = tempfile::tempdir()?;
            let config = BenchConfig { rollouts, workers, latency, train_time, seed, sandbox_root: root.path().into() };
            let report = run_efficiency_bench(&config)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => fs::write(path, &text)?,
                None => println!("{text}"),
            }
            eprintln!(
                "sequential {:.2}s, distributed {:.2}s, speedup {:.2}x",
                report.sequential.rollout_time, report.distributed.rollout_time, report.rollout_speedup
            );
            Ok(())
        }
        Command::TraceReplay { trace } => trace_replay(&trace),
        Command::Batch { groups, out } => batch(&groups, &out),
    }
}

fn default_profile() -> RuntimeConfig {
    RuntimeConfig::single_agent(PolicyConfig::SeededStochastic { default_success: 0.5, per_task: BTreeMap::new() }, 4)
}

fn coordinator(listen: &str, trace: &Path, profile: Option<&Path>, resume: bool, max_attempts: u32) -> Result<()> {
    let profile = match profile {
        Some(path) => RuntimeConfig::load(path)?,
        None => default_profile(),
    };
    let listen = if listen.contains(':') { listen.to_string() } else { format!("127.0.0.1:{listen}") };
    let config = CoordinatorConfig { listen, max_attempts, ..CoordinatorConfig::new(profile) };
    let coordinator = if resume && trace.exists() {
        let (c, corruption) = Coordinator::recover(config, trace)?;
        if let Some(cut) = corruption {
            eprintln!("trace truncated: {cut}");
        }
        c
    } else {
        Coordinator::start(config, TraceStore::create(trace)?)?
    };
    // Scripts read the bound address from the first stdout line.
    println!("listening on {}", coordinator.addr());
    while !coordinator.is_stopped() {
        if let Some(reason) = coordinator.halted() {
            bail!("coordinator halted: {reason}");
        }
        thread::sleep(Duration::from_millis(100));
    }
    coordinator.shutdown();
    Ok(())
}

fn load_tasks(path: &Path) -> Result<Vec<TaskItem>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

fn submit(connect: &str, tasks: &Path, k: u32, out: &Path, sender: &str) -> Result<()> {
    let tasks = load_tasks(tasks)?;
    fs::create_dir_all(out)?;
    let mut stream = TcpStream::connect(connect)?;
    let mut reader = stream.try_clone()?;
    for task in &tasks {
        let msg = Message::control("client", sender, wire::SUBMIT_GROUP, json!({ "task": task, "k": k }))
            .to("coordinator");
        write_frame(&mut stream, &msg)?;
    }
    let mut pending = tasks.len();
    while pending > 0 {
        let reply = read_frame(&mut reader)?.ok_or_else(|| anyhow!("coordinator closed the connection"))?;
        match (reply.frame(), &reply.payload) {
            (Some(wire::GROUP_RESULT), Payload::Control(body)) => {
                let group: RolloutGroup = serde_json::from_value(body.clone())?;
                let path = out.join(format!("{}.json", group.task_id));
                fs::write(&path, serde_json::to_string_pretty(&group)?)?;
                println!("{} rewards {:?} missing {:?}", group.task_id, group.rewards(), group.missing);
                pending -= 1;
            }
            (_, Payload::ErrorNotice(notice)) => bail!("refused: {}", notice.detail.clone().unwrap_or_default()),
            (frame, _) => bail!("unexpected reply {frame:?}"),
        }
    }
    Ok(())
}

fn trace_replay(path: &Path) -> Result<()> {
    let (events, corruption) = read_trace(path)?;
    if let Err(e) = check_trace(&events) {
        bail!("trace invariant violated: {e}");
    }
    let state = CoordinatorState::recover(&events, DEFAULT_MAX_ATTEMPTS)?;
    let summary = json!({
        "events": events.len(),
        "last_seq": events.last().map(|e| e.seq),
        "corruption": corruption.map(|c| c.to_string()),
        "submitted": state.submitted_count(),
        "done": state.done_keys().len(),
        "in_flight": state.in_flight_keys().len(),
        "ready": state.ready_keys().len(),
        "policy_version": state.policy_version(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn batch(dir: &Path, out: &Path) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let groups = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<RolloutGroup>(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    emit_training_batch(&groups, out)?;
    println!("{} groups -> {}", groups.len(), out.display());
    Ok(())
}
