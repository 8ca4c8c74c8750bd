use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pass_at_k_curve, EvalError, PassKRecord};
use crate::agent::{PolicyConfig, RuntimeConfig};
use crate::cluster::{LocalCluster, LocalClusterConfig, TaskItem};
use crate::seed::derive_seed;
use crate::train::expand_group;

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub n: u32,
    /// One success probability per question.
    pub probabilities: Vec<f64>,
    pub seed: u64,
    pub workers: usize,
    pub sandbox_root: PathBuf,
}

impl ScalingConfig {
    /// `questions` questions with [`calibrated_probabilities`].
    pub fn calibrated(questions: usize, n: u32, seed: u64, sandbox_root: impl Into<PathBuf>) -> Self {
        ScalingConfig {
            n,
            probabilities: calibrated_probabilities(questions),
            seed,
            workers: 8,
            sandbox_root: sandbox_root.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub records: Vec<PassKRecord>,
    pub curve: Vec<(u32, f64)>,
}

/// Half the questions are hard (p spread over 0.02..0.10), half easy (p over
/// 0.86..0.94), so the mean is 0.48. Extra retries pay off on the hard
/// half, which gives the curve its rise; the polarised spread keeps the
/// sampling noise of pass@1 small.
pub fn calibrated_probabilities(questions: usize) -> Vec<f64> {
    let hard = questions / 2;
    let easy = questions - hard;
    let spread = |i: usize, count: usize, lo: f64, hi: f64| {
        if count <= 1 {
            (lo + hi) / 2.0
        } else {
            lo + (hi - lo) * i as f64 / (count - 1) as f64
        }
    };
    let mut p: Vec<f64> = (0..hard).map(|i| spread(i, hard, 0.02, 0.10)).collect();
    p.extend((0..easy).map(|i| spread(i, easy, 0.86, 0.94)));
    p
}

/// Arithmetic questions `a*b+c` with known answers.
pub fn scaling_questions(count: usize, seed: u64) -> Vec<TaskItem> {
    (0..count)
        .map(|i| {
            let qseed = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(qseed);
            let (a, b, c): (i64, i64, i64) = (rng.gen_range(2..50), rng.gen_range(2..50), rng.gen_range(0..100));
            let mut task = TaskItem::new(&format!("q{i:03}"), &format!("what is {a}*{b}+{c}?"), 0)
                .with_truth(&(a * b + c).to_string())
                .with_seed(qseed);
            task.max_steps = 4;
            task
        })
        .collect()
}

/// Runs `n` rollouts of every question through a local cluster and returns
/// the per-question counts and the pass@k curve for k = 1..=n.
pub fn run_scaling_experiment(config: &ScalingConfig) -> Result<ScalingResult, EvalError> {
    if config.n == 0 {
        return Err(EvalError::ZeroK);
    }
    if config.probabilities.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(p) = config.probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(EvalError::BadProbability(*p));
    }
    let questions = scaling_questions(config.probabilities.len(), config.seed);
    let per_task: BTreeMap<String, f64> = questions
        .iter()
        .zip(&config.probabilities)
        .map(|(q, p)| (q.task_id.clone(), *p))
        .collect();
    let profile = RuntimeConfig::single_agent(PolicyConfig::SeededStochastic { default_success: 0.0, per_task }, 4);
    let tasks: Vec<TaskItem> = questions.iter().flat_map(|q| expand_group(q, 0..config.n)).collect();

    let cluster = LocalClusterConfig::new(profile, config.workers.max(1), &config.sandbox_root);
    let run = LocalCluster::run(&cluster, tasks)?;
    if !run.complete {
        return Err(EvalError::Incomplete(format!("{} of {} rollouts", run.trajectories.len(), questions.len() as u32 * config.n)));
    }
    let records: Vec<PassKRecord> = questions
        .iter()
        .map(|q| {
            let mine = run.trajectories.iter().filter(|t| t.task_id == q.task_id);
            let (n, c) = mine.fold((0, 0), |(n, c), t| (n + 1, c + u32::from(t.reward == Some(1))));
            PassKRecord { question_id: q.task_id.clone(), n, c }
        })
        .collect();
    let curve = pass_at_k_curve(&records, config.n)?;
    Ok(ScalingResult { records, curve })
}

/// `k,pass_at_k` with a header row.
pub fn curve_csv(curve: &[(u32, f64)]) -> String {
    let mut out = String::from("k,pass_at_k\n");
    for (k, p) in curve {
        let _ = writeln!(out, "{k},{p:.10}");
    }
    out
}
