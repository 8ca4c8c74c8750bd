//! Acceptance run: one PASS/FAIL line per headline property, exit status
//! non-zero if any fails. Runs as a plain binary (`harness = false`).

mod common;

use std::time::Instant;

use common::Check;

type Named<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let root = root.path();
    let checks: Vec<Named> = vec![
        ("speedup: 64 rollouts, 16 workers, 0.5 s latency", Box::new(|| common::check_speedup(64, 16, 0.5, 12.0, &root.join("bench")))),
        ("pass@k: brute force, monotone, exact pass@1", Box::new(|| common::check_pass_at_k(500))),
        ("scaling curve: 50 questions, n=32, 5 seeds", Box::new(|| common::check_scaling(&[1, 2, 3, 4, 5], 50, 32, 8, &root.join("scaling")))),
        ("group advantages: 1000 vectors and fixture", Box::new(|| common::check_grpo(1000))),
        ("exactly-once: 200 chaos runs, 16 tasks x 4", Box::new(|| common::check_exactly_once(200, &root.join("chaos")))),
        ("recovery equivalence: 50 seeds", Box::new(|| common::check_recovery(50, &root.join("recovery")))),
        ("message layer: totality, order, pub-sub", Box::new(common::check_messages)),
        ("determinism: trajectory JSON and batch bytes", Box::new(|| common::check_determinism(&root.join("determinism")))),
    ];
    let mut failed = 0;
    for (name, check) in &checks {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {name} ({secs:.1}s): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("[FAIL] {name} ({secs:.1}s): {reason}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
