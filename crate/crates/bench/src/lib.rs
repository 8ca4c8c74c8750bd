//! Shared fixtures for the criterion benchmarks.

use agentry_core::message::{Message, Payload};
use serde_json::json;

/// `n` control messages with mixed priorities.
pub fn message_batch(n: usize) -> Vec<Message> {
    (0..n)
        .map(|i| {
            Message::new("bench", "src", Payload::Control(json!({ "i": i })))
                .to("sink")
                .with_priority((i % 7) as i64)
        })
        .collect()
}

/// A reward vector with a few successes.
pub fn rewards(k: usize) -> Vec<f64> {
    (0..k).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect()
}
