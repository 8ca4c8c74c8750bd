//! pass@k estimation, the rollouts-vs-success scaling experiment and the
//! sequential-vs-distributed timing benchmark.

mod bench;
mod scaling;

pub use bench::{
    bench_profile, bench_tasks, reference_cycle, run_distributed_bench, run_efficiency_bench,
    run_sequential_bench, BenchComparison, BenchConfig, BenchMode, BenchReport, BENCH_FORMAT_VERSION,
};
pub use scaling::{
    calibrated_probabilities, curve_csv, run_scaling_experiment, scaling_questions, ScalingConfig,
    ScalingResult,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::CoordinatorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k={k} exceeds the {n} rollouts of question `{question}`")]
    KTooLarge { question: String, n: u32, k: u32 },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no records")]
    Empty,
    #[error("question `{0}` has more successes than rollouts")]
    BadRecord(String),
    #[error("success probability {0} is outside [0, 1]")]
    BadProbability(f64),
    #[error("run incomplete: {0}")]
    Incomplete(String),
    #[error(transparent)]
    Cluster(#[from] CoordinatorError),
    #[error(transparent)]
    Executor(#[from] crate::train::ExecutorError),
}

/// Rollouts and successes for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassKRecord {
    pub question_id: String,
    pub n: u32,
    pub c: u32,
}

/// `1 - C(n-c, k) / C(n, k)`, computed as a running product so it never
/// forms a factorial.
pub fn pass_at_k_single(n: u32, c: u32, k: u32) -> f64 {
    if n - c < k {
        return 1.0;
    }
    // Exactly c/n rather than 1 - (n-c)/n, which can be off by an ulp.
    if k == 1 {
        return f64::from(c) / f64::from(n);
    }
    let mut miss = 1.0;
    for i in 0..k {
        miss *= f64::from(n - c - i) / f64::from(n - i);
    }
    1.0 - miss
}

/// Mean of the per-question unbiased estimates.
pub fn pass_at_k(records: &[PassKRecord], k: u32) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = 0.0;
    for r in records {
        if r.c > r.n {
            return Err(EvalError::BadRecord(r.question_id.clone()));
        }
        if k > r.n {
            return Err(EvalError::KTooLarge { question: r.question_id.clone(), n: r.n, k });
        }
        total += pass_at_k_single(r.n, r.c, k);
    }
    Ok(total / records.len() as f64)
}

/// `(k, pass@k)` for k = 1..=max_k.
pub fn pass_at_k_curve(records: &[PassKRecord], max_k: u32) -> Result<Vec<(u32, f64)>, EvalError> {
    (1..=max_k).map(|k| pass_at_k(records, k).map(|p| (k, p))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: u32, c: u32) -> PassKRecord {
        PassKRecord { question_id: "q".into(), n, c }
    }

    #[test]
    fn fixtures() {
        assert_eq!(pass_at_k(&[rec(32, 32)], 1).unwrap(), 1.0);
        assert_eq!(pass_at_k(&[rec(2, 1)], 2).unwrap(), 1.0);
        assert!((pass_at_k(&[rec(4, 1)], 2).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(pass_at_k(&[rec(5, 0)], 3).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(pass_at_k(&[rec(4, 1)], 5), Err(EvalError::KTooLarge { .. })));
        assert!(matches!(pass_at_k(&[rec(4, 1)], 0), Err(EvalError::ZeroK)));
        assert!(matches!(pass_at_k(&[], 1), Err(EvalError::Empty)));
        assert!(matches!(pass_at_k(&[rec(2, 3)], 1), Err(EvalError::BadRecord(_))));
    }

    #[test]
    fn large_n_is_finite() {
        let p = pass_at_k_single(1000, 3, 500);
        assert!(p.is_finite() && p > 0.8 && p < 1.0);
    }
}
