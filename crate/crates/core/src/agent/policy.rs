use std::collections::BTreeMap;
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{ActionModel, MemoryRecord, PromptContext, TaskView};
use crate::cluster::wire::{read_frame, write_frame};
use crate::message::{Message, Payload};
use crate::seed::derive_seed;

/// Answer text substituted with the last observation's content.
pub const LAST_RESULT_PLACEHOLDER: &str = "{last_result}";

pub struct DecisionRequest<'a> {
    pub agent: &'a str,
    pub context: &'a PromptContext,
    pub task: &'a TaskView,
    pub step: u32,
    pub memory: &'a [MemoryRecord],
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("remote policy unavailable: {0}")]
    Remote(String),
    #[error("policy has no action for step {0}")]
    Exhausted(u32),
}

/// Chooses the next action. Implementations must be deterministic in
/// (context, version, task seed).
pub trait Policy: Send + Sync {
    fn decide(&self, request: &DecisionRequest<'_>) -> Result<ActionModel, PolicyError>;
    fn version(&self) -> u64;
}

/// Table-driven policy: step `i` takes action `i`, and the last action
/// repeats once the table runs out.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    actions: Vec<ActionModel>,
    version: u64,
}

impl ScriptedPolicy {
    pub fn new(actions: Vec<ActionModel>) -> Self {
        ScriptedPolicy { actions, version: 0 }
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }
}

fn substitute(text: &str, last: &str) -> String {
    text.replace(LAST_RESULT_PLACEHOLDER, last)
}

impl Policy for ScriptedPolicy {
    fn decide(&self, request: &DecisionRequest<'_>) -> Result<ActionModel, PolicyError> {
        let Some(last_index) = self.actions.len().checked_sub(1) else {
            return Err(PolicyError::Exhausted(request.step));
        };
        let mut action = self.actions[(request.step as usize).min(last_index)].clone();
        action.agent = request.agent.to_string();
        let last = request.memory.last().map(|r| r.result.text()).unwrap_or_default();
        if let Some(answer) = &action.answer {
            action.answer = Some(substitute(answer, &last));
        }
        for value in action.params.values_mut() {
            if let Value::String(s) = value {
                *s = substitute(s, &last);
            }
        }
        Ok(action)
    }

    fn version(&self) -> u64 {
        self.version
    }
}

/// Simulated policy for arithmetic questions with a controllable success
/// rate.
///
/// On its first step it asks the calculator for the query expression; with
/// probability `1 - p` it perturbs the expression to `(expr)+1`, which always
/// evaluates to a different number. It then answers with whatever the
/// calculator returned. The coin is drawn from the rollout seed and policy
/// version, so a rollout is reproducible and independent of its siblings.
#[derive(Debug, Clone)]
pub struct SeededStochasticPolicy {
    default_success: f64,
    per_task: BTreeMap<String, f64>,
    version: u64,
}

impl SeededStochasticPolicy {
    pub fn new(default_success: f64) -> Self {
        SeededStochasticPolicy { default_success, per_task: BTreeMap::new(), version: 0 }
    }

    pub fn with_task_success(mut self, per_task: BTreeMap<String, f64>) -> Self {
        self.per_task = per_task;
        self
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn success_probability(&self, task_id: &str) -> f64 {
        self.per_task.get(task_id).copied().unwrap_or(self.default_success).clamp(0.0, 1.0)
    }

    /// Whether this rollout draws the correct expression.
    pub fn draws_success(&self, task: &TaskView) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task.seed, self.version));
        rng.gen_bool(self.success_probability(&task.task_id))
    }
}

/// Strips a leading "what is" and trailing punctuation from a question.
pub(crate) fn question_expression(query: &str) -> &str {
    let trimmed = query.trim();
    let lowered = trimmed.to_ascii_lowercase();
    let body = if lowered.starts_with("what is") { trimmed[7..].trim_start() } else { trimmed };
    body.trim_end_matches(['?', '.', ' '])
}

impl Policy for SeededStochasticPolicy {
    fn decide(&self, request: &DecisionRequest<'_>) -> Result<ActionModel, PolicyError> {
        let agent = request.agent;
        match request.memory.last() {
            None => {
                let expr = question_expression(&request.task.query);
                let expr = if self.draws_success(request.task) {
                    expr.to_string()
                } else {
                    format!("({expr})+1")
                };
                Ok(ActionModel::tool_call(
                    agent,
                    "calculator",
                    BTreeMap::from([("expr".to_string(), Value::String(expr))]),
                ))
            }
            Some(last) if last.result.is_error => Ok(ActionModel::final_answer(agent, "unknown")),
            Some(last) => Ok(ActionModel::final_answer(agent, &last.result.text())),
        }
    }

    fn version(&self) -> u64 {
        self.version
    }
}

/// Delegates each decision to an external service over the framed wire
/// protocol: one `decide` control frame out, one `ActionModel` frame back.
pub struct RemoteEndpointPolicy {
    addr: String,
    timeout: Duration,
    version: u64,
    conn: Mutex<Option<TcpStream>>,
}

impl RemoteEndpointPolicy {
    pub fn new(addr: &str, timeout: Duration, version: u64) -> Self {
        RemoteEndpointPolicy { addr: addr.to_string(), timeout, version, conn: Mutex::new(None) }
    }

    fn exchange(&self, stream: &mut TcpStream, request: &Message) -> Result<ActionModel, PolicyError> {
        write_frame(stream, request).map_err(|e| PolicyError::Remote(e.to_string()))?;
        let reply = read_frame(stream)
            .map_err(|e| PolicyError::Remote(e.to_string()))?
            .ok_or_else(|| PolicyError::Remote("connection closed".into()))?;
        match reply.payload {
            Payload::ActionModel(action) => Ok(action),
            Payload::ErrorNotice(notice) => Err(PolicyError::Remote(format!(
                "service reported {:?}: {}",
                notice.cause,
                notice.detail.unwrap_or_default()
            ))),
            other => Err(PolicyError::Remote(format!("unexpected reply payload {}", other.tag()))),
        }
    }
}

impl Policy for RemoteEndpointPolicy {
    fn decide(&self, request: &DecisionRequest<'_>) -> Result<ActionModel, PolicyError> {
        let msg = Message::control(
            request.task.task_id.clone(),
            request.agent,
            "decide",
            json!({
                "context": request.context.text,
                "digest": request.context.digest,
                "task": request.task,
                "step": request.step,
                "version": self.version,
            }),
        )
        .to("policy")
        .with_header("policy_version", self.version);
        let mut guard = self.conn.lock();
        if guard.is_none() {
            let stream = TcpStream::connect(&self.addr).map_err(|e| PolicyError::Remote(e.to_string()))?;
            stream.set_read_timeout(Some(self.timeout)).ok();
            stream.set_nodelay(true).ok();
            *guard = Some(stream);
        }
        let stream = guard.as_mut().expect("connection established above");
        let result = self.exchange(stream, &msg);
        if result.is_err() {
            *guard = None;
        }
        let mut action = result?;
        action.agent = request.agent.to_string();
        Ok(action)
    }

    fn version(&self) -> u64 {
        self.version
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicyConfig {
    Scripted {
        actions: Vec<ActionModel>,
    },
    SeededStochastic {
        default_success: f64,
        #[serde(default)]
        per_task: BTreeMap<String, f64>,
    },
    Remote {
        addr: String,
        #[serde(default = "default_remote_timeout")]
        timeout_secs: f64,
    },
}

fn default_remote_timeout() -> f64 {
    30.0
}

impl PolicyConfig {
    /// Instantiates the policy at a given synchronized version.
    pub fn build(&self, version: u64) -> Arc<dyn Policy> {
        match self {
            PolicyConfig::Scripted { actions } => {
                Arc::new(ScriptedPolicy::new(actions.clone()).with_version(version))
            }
            PolicyConfig::SeededStochastic { default_success, per_task } => Arc::new(
                SeededStochasticPolicy::new(*default_success)
                    .with_task_success(per_task.clone())
                    .with_version(version),
            ),
            PolicyConfig::Remote { addr, timeout_secs } => Arc::new(RemoteEndpointPolicy::new(
                addr,
                Duration::from_secs_f64(timeout_secs.max(0.001)),
                version,
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{AgentState, Observation};

    fn view(seed: u64) -> TaskView {
        TaskView { task_id: "q1".into(), query: "what is (2+3)*4?".into(), rollout_index: 0, seed }
    }

    fn ctx() -> PromptContext {
        PromptContext { text: "ctx".into(), digest: "d".into(), template_hash: "h".into() }
    }

    #[test]
    fn scripted_repeats_last_and_substitutes() {
        let policy = ScriptedPolicy::new(vec![
            ActionModel::tool_call("", "calculator", BTreeMap::from([("expr".into(), json!("2+3"))])),
            ActionModel::final_answer("", "answer={last_result}"),
        ]);
        let task = view(1);
        let context = ctx();
        let memory = vec![MemoryRecord {
            prompt_digest: "d".into(),
            action: ActionModel::final_answer("a", "x"),
            result: Observation::ok("calculator", json!("5"), 0),
        }];
        let req = |step, memory: &'_ [MemoryRecord]| {
            policy
                .decide(&DecisionRequest { agent: "solver", context: &context, task: &task, step, memory })
                .unwrap()
        };
        assert_eq!(req(0, &[]).tool.as_deref(), Some("calculator"));
        assert_eq!(req(1, &memory).answer.as_deref(), Some("answer=5"));
        assert_eq!(req(7, &memory).answer.as_deref(), Some("answer=5"));
        assert_eq!(req(0, &[]).agent, "solver");
        let empty = ScriptedPolicy::new(vec![]);
        let state = AgentState::new("s");
        assert_eq!(
            empty.decide(&DecisionRequest {
                agent: "a",
                context: &context,
                task: &task,
                step: 0,
                memory: state.memory()
            }),
            Err(PolicyError::Exhausted(0))
        );
    }

    #[test]
    fn question_expression_strips_prose() {
        assert_eq!(question_expression("what is (2+3)*4?"), "(2+3)*4");
        assert_eq!(question_expression("What is 7 ."), "7");
        assert_eq!(question_expression("1+1"), "1+1");
    }

    #[test]
    fn stochastic_success_rate_tracks_probability() {
        let policy = SeededStochasticPolicy::new(0.3);
        let hits = (0..4000u64).filter(|s| policy.draws_success(&view(derive_seed(99, *s)))).count();
        let rate = hits as f64 / 4000.0;
        assert!((rate - 0.3).abs() < 0.03, "rate {rate}");
        let certain = SeededStochasticPolicy::new(0.0)
            .with_task_success(BTreeMap::from([("q1".to_string(), 1.0)]));
        assert!((0..50).all(|s| certain.draws_success(&view(s))));
    }

    #[test]
    fn stochastic_is_deterministic_per_seed_and_version() {
        let a = SeededStochasticPolicy::new(0.5);
        let outcomes: Vec<bool> = (0..64).map(|s| a.draws_success(&view(s))).collect();
        let again: Vec<bool> = (0..64).map(|s| a.draws_success(&view(s))).collect();
        assert_eq!(outcomes, again);
        let bumped = SeededStochasticPolicy::new(0.5).with_version(1);
        let other: Vec<bool> = (0..64).map(|s| bumped.draws_success(&view(s))).collect();
        assert_ne!(outcomes, other);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg: PolicyConfig = serde_json::from_value(json!({
            "type": "seeded_stochastic", "default_success": 0.4, "per_task": {"q1": 0.9}
        }))
        .unwrap();
        assert_eq!(cfg.build(3).version(), 3);
        let scripted: PolicyConfig = serde_json::from_value(json!({
            "type": "scripted",
            "actions": [{"kind": "final_answer", "answer": "done"}]
        }))
        .unwrap();
        assert!(matches!(scripted, PolicyConfig::Scripted { .. }));
    }
}
