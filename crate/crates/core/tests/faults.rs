//! Worker faults other than a clean crash, and restarts from damaged traces.

mod common;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;

use agentry_core::cluster::{
    check_trace, read_trace, ChaosMode, Coordinator, CoordinatorConfig, LocalCluster, RolloutKey, TaskItem,
    TraceKind, WorkerExit,
};

fn faulty_run(mode: ChaosMode, seed: u64) {
    let dir = tempfile::tempdir().unwrap();
    let tasks = common::grouped_tasks(6, 4, seed);
    let keys: Vec<RolloutKey> = tasks.iter().map(TaskItem::key).collect();
    let config = common::chaos_config(seed, 0.25, mode, dir.path());
    let run = LocalCluster::run(&config, tasks.clone()).unwrap();
    assert!(run.complete);
    assert_eq!(run.trajectories.len(), 24);
    assert!(common::terminal_violations(&run, &keys).is_empty());
    check_trace(&run.trace).unwrap();

    let expected = match mode {
        ChaosMode::Hang => WorkerExit::Hung,
        ChaosMode::Zombie => WorkerExit::Zombie,
        ChaosMode::Crash => WorkerExit::Crashed,
    };
    assert!(run.worker_exits.contains(&expected), "{:?}", run.worker_exits);
    assert!(run.trace.iter().any(|e| e.kind == TraceKind::HeartbeatMissed));
    assert!(run.trace.iter().any(|e| e.kind == TraceKind::Reassigned));

    // Same rewards as a run with no faults at all.
    let clean_config = common::chaos_config(seed, 0.0, mode, &dir.path().join("clean"));
    let clean = LocalCluster::run(&clean_config, tasks).unwrap();
    assert_eq!(common::reward_map(&run.trajectories), common::reward_map(&clean.trajectories));
}

#[test]
fn hung_workers_are_declared_dead_and_their_work_rerun() {
    faulty_run(ChaosMode::Hang, 3);
}

#[test]
fn zombie_results_arriving_late_are_ignored() {
    faulty_run(ChaosMode::Zombie, 4);
}

#[test]
fn crash_chaos_small() {
    let dir = tempfile::tempdir().unwrap();
    common::check_exactly_once(5, dir.path()).unwrap();
}

#[test]
fn coordinator_crash_recovery_small() {
    let dir = tempfile::tempdir().unwrap();
    common::check_recovery(3, dir.path()).unwrap();
}

#[test]
fn recovery_from_a_torn_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.bin");
    let tasks = common::grouped_tasks(4, 2, 8);
    let mut config = common::chaos_config(8, 0.0, ChaosMode::Crash, dir.path());
    config.trace_path = Some(path.clone());
    let first = LocalCluster::run(&config, tasks.clone()).unwrap();
    assert!(first.complete);
    let (events, cut) = read_trace(&path).unwrap();
    assert!(cut.is_none());

    // A half-written record at the tail, as after power loss mid-append.
    let mut f = OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(&[0, 0, 1, 0, 0xde, 0xad]).unwrap();
    drop(f);

    let coord_config = CoordinatorConfig::new(common::arithmetic_profile(BTreeMap::new()));
    let (coord, corruption) = Coordinator::recover(coord_config, &path).unwrap();
    let corruption = corruption.expect("torn tail reported");
    assert_eq!(corruption.last_valid_seq, events.last().map(|e| e.seq));
    assert_eq!(coord.collect_all(), first.trajectories);
    // Nothing resubmitted twice; the log continues after the cut.
    assert_eq!(coord.submit(tasks).unwrap(), 0);
    let log = coord.trace().events();
    check_trace(&log).unwrap();
    coord.shutdown();
    let (reread, cut) = read_trace(&path).unwrap();
    assert!(cut.is_none());
    assert!(reread.len() >= events.len());
}

#[test]
fn flipped_byte_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.bin");
    let mut config = common::chaos_config(2, 0.0, ChaosMode::Crash, dir.path());
    config.trace_path = Some(path.clone());
    LocalCluster::run(&config, common::grouped_tasks(2, 2, 2)).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x55;
    std::fs::write(&path, &bytes).unwrap();
    let (events, cut) = read_trace(&path).unwrap();
    let cut = cut.expect("corruption found");
    assert!(cut.offset as usize <= mid);
    check_trace(&events).unwrap();
}
