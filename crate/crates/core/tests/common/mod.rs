//! Checks shared by the acceptance runner and the regular integration
//! tests. Each returns a one-line summary on success and a reason on
//! failure. The oracles here are written independently of the library.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::thread;
use std::time::Duration;

use agentry_core::agent::{PolicyConfig, RuntimeConfig};
use agentry_core::cluster::{
    check_trace, ChaosConfig, ChaosMode, ClusterRun, LocalCluster, LocalClusterConfig, RolloutKey,
    TaskItem, TraceKind,
};
use agentry_core::eval::{
    pass_at_k, pass_at_k_single, run_distributed_bench, run_scaling_experiment, run_sequential_bench,
    scaling_questions, BenchConfig, PassKRecord, ScalingConfig,
};
use agentry_core::message::{Category, EndpointRegistry, Message, Payload};
use agentry_core::train::{expand_group, grpo_advantages, render_training_batch, RolloutGroup};
use agentry_core::Trajectory;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- fixtures

/// One calculator agent whose success odds are set per question.
pub fn arithmetic_profile(per_task: BTreeMap<String, f64>) -> RuntimeConfig {
    RuntimeConfig::single_agent(PolicyConfig::SeededStochastic { default_success: 0.5, per_task }, 4)
}

/// `tasks` questions, each expanded to `k` rollouts.
pub fn grouped_tasks(tasks: usize, k: u32, seed: u64) -> Vec<TaskItem> {
    scaling_questions(tasks, seed).iter().flat_map(|q| expand_group(q, 0..k)).collect()
}

pub fn reward_map(trajectories: &[Trajectory]) -> BTreeMap<(String, u32), Option<u8>> {
    trajectories.iter().map(|t| ((t.task_id.clone(), t.rollout_index), t.reward)).collect()
}

/// Keys with other than exactly one Completed/Failed record.
pub fn terminal_violations(run: &ClusterRun, keys: &[RolloutKey]) -> Vec<String> {
    let mut counts: BTreeMap<RolloutKey, usize> = keys.iter().map(|k| (k.clone(), 0)).collect();
    for e in &run.trace {
        if matches!(e.kind, TraceKind::Completed | TraceKind::Failed) {
            if let Some(k) = e.key() {
                *counts.entry(k).or_default() += 1;
            }
        }
    }
    counts.into_iter().filter(|(_, n)| *n != 1).map(|(k, n)| format!("{k} x{n}")).collect()
}

// ---------------------------------------------------------------- speedup

/// The sequential baseline and the one-worker run are both sleep-bound, so
/// they run side by side; the many-worker run goes afterwards alone.
pub fn check_speedup(rollouts: usize, workers: usize, latency: f64, min_speedup: f64, root: &Path) -> Check {
    let config = |w: usize, sub: &str| BenchConfig {
        rollouts,
        workers: w,
        latency,
        train_time: 0.0,
        seed: 11,
        sandbox_root: root.join(sub),
    };
    let (seq_cfg, one_cfg, many_cfg) = (config(1, "seq"), config(1, "one"), config(workers, "many"));
    let (sequential, single) = thread::scope(|s| {
        let a = s.spawn(|| run_sequential_bench(&seq_cfg));
        let b = s.spawn(|| run_distributed_bench(&one_cfg));
        (a.join().unwrap(), b.join().unwrap())
    });
    let sequential = sequential.map_err(|e| e.to_string())?;
    let single = single.map_err(|e| e.to_string())?;
    let many = run_distributed_bench(&many_cfg).map_err(|e| e.to_string())?;

    let speedup = sequential.rollout_time / many.rollout_time;
    let single_speedup = sequential.rollout_time / single.rollout_time;
    let summary = format!(
        "sequential {:.2}s, W={workers} {:.2}s ({speedup:.2}x), W=1 {:.2}s ({single_speedup:.3}x)",
        sequential.rollout_time, many.rollout_time, single.rollout_time
    );
    ensure!(speedup >= min_speedup, "{summary}: W={workers} speedup below {min_speedup}");
    ensure!((0.85..=1.0).contains(&single_speedup), "{summary}: W=1 speedup outside [0.85, 1.0]");
    Ok(summary)
}

// ---------------------------------------------------------------- pass@k

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Fraction of k-subsets of n rollouts (the first c correct) that contain
/// a correct one, by listing every subset.
fn brute_pass(n: u32, c: u32, k: u32) -> f64 {
    let correct_mask: u32 = (1u32 << c) - 1;
    let (mut hit, mut total) = (0u64, 0u64);
    for subset in 0u32..(1 << n) {
        if subset.count_ones() == k {
            total += 1;
            if subset & correct_mask != 0 {
                hit += 1;
            }
        }
    }
    assert_eq!(total, binomial(n as u64, k as u64));
    hit as f64 / total as f64
}

pub fn check_pass_at_k(random_sets: usize) -> Check {
    let mut cases = 0;
    for n in 1..=10u32 {
        for c in 0..=n {
            for k in 1..=n {
                let got = pass_at_k_single(n, c, k);
                let want = brute_pass(n, c, k);
                ensure!((got - want).abs() <= 1e-12, "n={n} c={c} k={k}: {got} vs brute force {want}");
                cases += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..random_sets {
        let size = rng.gen_range(1..=20);
        let n = rng.gen_range(1..=40);
        let records: Vec<PassKRecord> = (0..size)
            .map(|i| PassKRecord { question_id: format!("q{i}"), n, c: rng.gen_range(0..=n) })
            .collect();
        let mut last = -1.0;
        for k in 1..=n {
            let p = pass_at_k(&records, k).map_err(|e| e.to_string())?;
            ensure!(p >= last, "not monotone at k={k}: {p} < {last}");
            last = p;
        }
        let mean = records.iter().map(|r| f64::from(r.c) / f64::from(r.n)).sum::<f64>() / records.len() as f64;
        let p1 = pass_at_k(&records, 1).map_err(|e| e.to_string())?;
        ensure!(p1 == mean, "pass@1 {p1} != mean(c/n) {mean}");
    }
    Ok(format!("{cases} (n, c, k) cases match brute force; {random_sets} random record sets monotone with exact pass@1"))
}

// ---------------------------------------------------------------- scaling

pub fn check_scaling(seeds: &[u64], questions: usize, n: u32, workers: usize, root: &Path) -> Check {
    let mut lines = Vec::new();
    for &seed in seeds {
        let mut config = ScalingConfig::calibrated(questions, n, seed, root.join(format!("s{seed}")));
        config.workers = workers;
        let result = run_scaling_experiment(&config).map_err(|e| e.to_string())?;
        let curve: BTreeMap<u32, f64> = result.curve.iter().copied().collect();
        let p1 = curve[&1];
        let top = curve[&n];
        ensure!((p1 - 0.48).abs() <= 0.03, "seed {seed}: pass@1 {p1:.4} outside 0.48 +- 0.03");
        for k in 2..=16.min(n) {
            ensure!(curve[&k] > curve[&(k - 1)], "seed {seed}: pass@{k} {} not above pass@{} {}", curve[&k], k - 1, curve[&(k - 1)]);
        }
        ensure!(top - p1 >= 0.20, "seed {seed}: pass@{n} - pass@1 = {:.4} < 0.20", top - p1);
        lines.push(format!("seed {seed}: {p1:.3}->{top:.3}"));
    }
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------- GRPO

/// Two-pass textbook standardisation, population std.
fn oracle_advantages(r: &[f64]) -> Vec<f64> {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return vec![0.0; r.len()];
    }
    r.iter().map(|x| (x - mean) / var.sqrt()).collect()
}

pub fn check_grpo(vectors: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut varied, mut constant) = (0, 0);
    for i in 0..vectors {
        let k = *[2usize, 4, 8, 32].choose(&mut rng).unwrap();
        let rewards: Vec<f64> = match i % 4 {
            0 => vec![f64::from(rng.gen_range(0..=1u8)); k],
            1 => (0..k).map(|_| rng.gen::<f64>()).collect(),
            _ => (0..k).map(|_| f64::from(rng.gen_range(0..=1u8))).collect(),
        };
        let adv = grpo_advantages(&rewards).map_err(|e| e.to_string())?;
        ensure!(adv.len() == k, "length {} for k={k}", adv.len());
        let want = oracle_advantages(&rewards);
        if rewards.iter().all(|r| *r == rewards[0]) {
            ensure!(adv.iter().all(|a| *a == 0.0), "constant vector gave {adv:?}");
            constant += 1;
            continue;
        }
        let mean = adv.iter().sum::<f64>() / k as f64;
        let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / k as f64).sqrt();
        ensure!(mean.abs() <= 1e-9, "mean {mean:e} for {rewards:?}");
        ensure!((std - 1.0).abs() <= 1e-9, "std {std} for {rewards:?}");
        for (a, b) in adv.iter().zip(&want) {
            ensure!((a - b).abs() <= 1e-12, "{a} vs oracle {b}");
        }
        varied += 1;
    }
    let fixture = grpo_advantages(&[1.0, 0.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    // By hand: mean 1/4, population std sqrt(3)/4.
    let expected = [3f64.sqrt(), -1.0 / 3f64.sqrt(), -1.0 / 3f64.sqrt(), -1.0 / 3f64.sqrt()];
    let printed_values = [1.7320508, -0.5773503, -0.5773503, -0.5773503];
    for ((got, exact), printed) in fixture.iter().zip(expected).zip(printed_values) {
        ensure!((got - exact).abs() <= 1e-12 && (got - printed).abs() <= 1e-6, "fixture gave {fixture:?}");
    }
    Ok(format!("{varied} varied and {constant} constant vectors; [1,0,0,0] -> {:.7?}", fixture))
}

// ---------------------------------------------------------------- chaos

pub fn chaos_config(seed: u64, kill_probability: f64, mode: ChaosMode, root: &Path) -> LocalClusterConfig {
    let mut config = LocalClusterConfig::new(arithmetic_profile(BTreeMap::new()), 4, root);
    config.seed = seed;
    config.chaos = ChaosConfig { kill_probability, mode };
    config.timeout = Duration::from_secs(120);
    config
}

pub fn check_exactly_once(runs: u64, root: &Path) -> Check {
    let mut faults = 0;
    for run_seed in 0..runs {
        let tasks = grouped_tasks(16, 4, run_seed);
        let keys: Vec<RolloutKey> = tasks.iter().map(TaskItem::key).collect();
        let config = chaos_config(run_seed, 0.2, ChaosMode::Crash, &root.join(format!("r{run_seed}")));
        let run = LocalCluster::run(&config, tasks).map_err(|e| format!("run {run_seed}: {e}"))?;
        ensure!(run.complete && run.trajectories.len() == 64, "run {run_seed}: {} trajectories", run.trajectories.len());
        let bad = terminal_violations(&run, &keys);
        ensure!(bad.is_empty(), "run {run_seed}: terminal counts {bad:?}");
        check_trace(&run.trace).map_err(|e| format!("run {run_seed}: {e}"))?;
        let got: BTreeSet<(String, u32)> = run.trajectories.iter().map(|t| (t.task_id.clone(), t.rollout_index)).collect();
        ensure!(got.len() == 64, "run {run_seed}: duplicate trajectories");
        faults += run.worker_exits.iter().filter(|e| !matches!(e, agentry_core::cluster::WorkerExit::Shutdown)).count();
    }
    ensure!(faults > 0, "no faults were injected");
    Ok(format!("{runs} runs, {faults} worker crashes, one terminal record per rollout, 64/64 collected each"))
}

// ---------------------------------------------------------------- recovery

pub fn check_recovery(seeds: u64, root: &Path) -> Check {
    let mut restarts = 0;
    for seed in 0..seeds {
        let tasks = grouped_tasks(8, 4, 1000 + seed);
        let dir = root.join(format!("rec{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let mut base = chaos_config(seed, 0.0, ChaosMode::Crash, &dir.join("base"));
        base.trace_path = Some(dir.join("base.trace"));
        let clean = LocalCluster::run(&base, tasks.clone()).map_err(|e| e.to_string())?;
        ensure!(clean.complete, "seed {seed}: fault-free run incomplete");

        let crash_at = ChaCha8Rng::seed_from_u64(seed).gen_range(1..clean.trace.len() as u64 * 4 / 5);
        let mut faulty = chaos_config(seed, 0.0, ChaosMode::Crash, &dir.join("crash"));
        faulty.trace_path = Some(dir.join("crash.trace"));
        faulty.crash_coordinator_at = Some(crash_at);
        let run = LocalCluster::run(&faulty, tasks).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure!(run.coordinator_restarts == 1, "seed {seed}: {} restarts for crash at {crash_at}", run.coordinator_restarts);
        ensure!(run.complete, "seed {seed}: recovered run incomplete");
        ensure!(
            reward_map(&run.trajectories) == reward_map(&clean.trajectories),
            "seed {seed}: recovered set differs from fault-free set (crash at seq {crash_at})"
        );
        let keys: Vec<RolloutKey> = run.trajectories.iter().map(|t| RolloutKey::new(&t.task_id, t.rollout_index)).collect();
        let bad = terminal_violations(&run, &keys);
        ensure!(bad.is_empty(), "seed {seed}: terminal counts {bad:?}");
        restarts += run.coordinator_restarts;
    }
    Ok(format!("{seeds} seeds, {restarts} coordinator restarts, every recovered set equals its fault-free run"))
}

// ---------------------------------------------------------------- messages

fn ctl(sender: &str) -> Message {
    Message::new("s", sender, Payload::Control(json!({})))
}

/// Every address pattern over {live, unregistered, failed} receivers for
/// batches of 1..=max messages: exactly one notice per undeliverable
/// message, back to its sender, and none for the rest.
pub fn check_error_totality(max: u32) -> Check {
    let mut patterns = 0;
    for size in 1..=max {
        for code in 0..3u32.pow(size) {
            let reg = EndpointRegistry::new();
            for name in ["src", "live", "broken"] {
                reg.register(name).unwrap();
            }
            reg.mark_failed("broken").unwrap();
            let mut expect_notice = BTreeSet::new();
            let mut c = code;
            for _ in 0..size {
                let target = ["live", "ghost", "broken"][(c % 3) as usize];
                c /= 3;
                let msg = ctl("src").to(target);
                if target != "live" {
                    expect_notice.insert(msg.id);
                }
                reg.route(msg).map_err(|e| e.to_string())?;
            }
            let inbox = reg.drain("src").unwrap();
            let mut seen = BTreeMap::new();
            for m in &inbox {
                ensure!(m.category == Category::Error, "non-error message at sender");
                let Payload::ErrorNotice(n) = &m.payload else { return Err("error without notice".into()) };
                *seen.entry(n.original_message_id).or_insert(0) += 1;
            }
            ensure!(seen.values().all(|v| *v == 1), "duplicate notices for pattern {code}");
            ensure!(seen.keys().copied().collect::<BTreeSet<_>>() == expect_notice, "notice set mismatch for pattern {code}");
            ensure!(reg.queue_len("live") as u32 + expect_notice.len() as u32 == size, "lost message for pattern {code}");
            patterns += 1;
        }
    }
    Ok(format!("{patterns} address patterns"))
}

/// Dequeue order against a selection sort on (-priority, timestamp, id),
/// over every arrival order of each batch.
pub fn check_priority_order(batches: usize, max: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut orders = 0u64;
    for b in 0..batches {
        let size = 1 + b % max;
        let msgs: Vec<Message> = (0..size).map(|_| ctl("src").to("dst").with_priority(rng.gen_range(0..3))).collect();
        let mut expected = Vec::new();
        let mut pool = msgs.clone();
        while !pool.is_empty() {
            let mut best = 0;
            for i in 1..pool.len() {
                let (a, m) = (&pool[i], &pool[best]);
                let before = a.priority > m.priority
                    || (a.priority == m.priority && a.timestamp < m.timestamp)
                    || (a.priority == m.priority && a.timestamp == m.timestamp && a.id < m.id);
                if before {
                    best = i;
                }
            }
            expected.push(pool.remove(best).id);
        }
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            let reg = EndpointRegistry::new();
            reg.register("src").unwrap();
            reg.register("dst").unwrap();
            for &i in &idx {
                reg.route(msgs[i].clone()).map_err(|e| e.to_string())?;
            }
            let got: Vec<_> = reg.drain("dst").unwrap().into_iter().map(|m| m.id).collect();
            ensure!(got == expected, "batch {b} arrival {idx:?} dequeued out of order");
            orders += 1;
            if !next_permutation(&mut idx) {
                break;
            }
        }
    }
    Ok(format!("{batches} batches, {orders} arrival orders"))
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else { return false };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).unwrap();
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Each of up to `max` endpoints subscribes 0..=2 times, every
/// combination; one publish reaches each subscriber exactly once.
pub fn check_pubsub_idempotent(max: u32) -> Check {
    let mut combos = 0;
    for size in 1..=max {
        for code in 0..3u32.pow(size) {
            let reg = EndpointRegistry::new();
            reg.register("pub").unwrap();
            let mut subscribed = 0;
            let mut c = code;
            for e in 0..size {
                let name = format!("e{e}");
                reg.register(&name).unwrap();
                let times = c % 3;
                c /= 3;
                for _ in 0..times {
                    reg.subscribe(&name, "news").unwrap();
                }
                subscribed += usize::from(times > 0);
            }
            let result = reg.route(ctl("pub").on_topic("news")).map_err(|e| e.to_string())?;
            ensure!(result.recipient_count == subscribed, "pattern {code}: {} recipients", result.recipient_count);
            for e in 0..size {
                let got = reg.queue_len(&format!("e{e}"));
                ensure!(got <= 1, "pattern {code}: e{e} got {got} copies");
            }
            combos += 1;
        }
    }
    Ok(format!("{combos} subscription patterns"))
}

pub fn check_messages() -> Check {
    let a = check_error_totality(8)?;
    let b = check_priority_order(64, 8)?;
    let c = check_pubsub_idempotent(8)?;
    Ok(format!("totality: {a}; order: {b}; pub-sub: {c}"))
}

// ---------------------------------------------------------------- determinism

/// Trajectory JSON and batch file text of one full cluster run.
pub fn full_run_bytes(seed: u64, chaos: f64, root: &Path) -> Result<(String, String), String> {
    let questions = scaling_questions(8, seed);
    let per_task = questions.iter().enumerate().map(|(i, q)| (q.task_id.clone(), 0.2 + 0.1 * i as f64)).collect();
    let tasks: Vec<TaskItem> = questions.iter().flat_map(|q| expand_group(q, 0..4)).collect();
    let mut config = LocalClusterConfig::new(arithmetic_profile(per_task), 4, root);
    config.seed = seed;
    config.chaos = ChaosConfig { kill_probability: chaos, mode: ChaosMode::Crash };
    let run = LocalCluster::run(&config, tasks).map_err(|e| e.to_string())?;
    ensure!(run.complete, "run incomplete");
    let json = serde_json::to_string(&run.trajectories).unwrap();
    let groups: Vec<RolloutGroup> =
        questions.iter().map(|q| RolloutGroup::assemble(&q.task_id, 4, run.trajectories.clone())).collect();
    let batch = render_training_batch(&groups).map_err(|e| e.to_string())?;
    Ok((json, batch))
}

pub fn check_determinism(root: &Path) -> Check {
    let first = full_run_bytes(31, 0.0, &root.join("a"))?;
    let second = full_run_bytes(31, 0.0, &root.join("b"))?;
    ensure!(first.0 == second.0, "trajectory JSON differs between identical runs");
    ensure!(first.1 == second.1, "batch files differ between identical runs");
    let chaotic = full_run_bytes(31, 0.3, &root.join("c"))?;
    ensure!(chaotic == first, "worker faults changed the output bytes");
    let other = full_run_bytes(32, 0.0, &root.join("d"))?;
    ensure!(other.0 != first.0, "different seeds gave identical trajectories");
    Ok(format!("{} trajectory bytes and {} batch bytes identical across runs (also under worker faults)", first.0.len(), first.1.len()))
}
