use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde_json::Value;
use thiserror::Error;

use super::{
    assemble_context, ActionKind, ActionModel, AgentSpec, AgentState, AgentStatus, DecisionRequest,
    MemoryRecord, Observation, Policy, PolicyError, TaskView, TopologyPlan, Trajectory,
    TrajectoryStep, DEFAULT_RECURSION_LIMIT, TEMPLATE_HASH_HEADER,
};
use crate::cluster::TaskItem;
use crate::message::{
    make_error_notice_with_detail, DeliveryResult, EndpointRegistry, ErrorCause, Message, Payload,
};
use crate::tools::{execute_tool, ToolContext, ToolRegistry};

/// Everything a rollout runs against: tools, the local message bus, the
/// sandbox root and (optionally) the agents reachable by delegation.
pub struct Environment {
    pub tools: Arc<ToolRegistry>,
    pub bus: Arc<EndpointRegistry>,
    pub sandbox_root: PathBuf,
    pub topology: Option<Arc<TopologyPlan>>,
    peers: BTreeMap<String, (AgentSpec, Arc<dyn Policy>)>,
    pub recursion_limit: u32,
    transcript: Option<Mutex<Vec<Message>>>,
}

impl std::fmt::Debug for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Environment")
            .field("tools", &self.tools)
            .field("sandbox_root", &self.sandbox_root)
            .field("peers", &self.peers.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Environment {
    /// Registers one bus endpoint per tool.
    pub fn new(tools: ToolRegistry, sandbox_root: impl Into<PathBuf>) -> Self {
        let bus = Arc::new(EndpointRegistry::new());
        for name in tools.names() {
            bus.ensure_registered(name);
        }
        Environment {
            tools: Arc::new(tools),
            bus,
            sandbox_root: sandbox_root.into(),
            topology: None,
            peers: BTreeMap::new(),
            recursion_limit: DEFAULT_RECURSION_LIMIT,
            transcript: None,
        }
    }

    /// Agents that may be targeted by `Delegate` actions, subject to `plan`.
    pub fn with_topology(
        mut self,
        plan: TopologyPlan,
        peers: impl IntoIterator<Item = (AgentSpec, Arc<dyn Policy>)>,
    ) -> Self {
        for (spec, policy) in peers {
            self.bus.ensure_registered(&spec.name);
            self.peers.insert(spec.name.clone(), (spec, policy));
        }
        self.topology = Some(Arc::new(plan));
        self
    }

    /// Keep a copy of every message routed through this environment.
    pub fn with_transcript(mut self) -> Self {
        self.transcript = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn transcript(&self) -> Vec<Message> {
        self.transcript.as_ref().map(|t| t.lock().clone()).unwrap_or_default()
    }

    /// Per-(task, rollout) sandbox directory; created lazily by file tools.
    pub fn sandbox_for(&self, task_id: &str, rollout_index: u32) -> PathBuf {
        let safe: String = task_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        self.sandbox_root.join(safe).join(rollout_index.to_string())
    }

    fn send(&self, msg: Message) -> DeliveryResult {
        if let Some(t) = &self.transcript {
            t.lock().push(msg.clone());
        }
        self.bus.route(msg).expect("runtime only routes validated point-to-point messages")
    }
}

/// Sees each step as it is recorded; returning false aborts the rollout.
pub type StepHook<'a> = dyn Fn(u32, &TrajectoryStep) -> bool + 'a;

/// Callbacks a caller can attach to a rollout.
#[derive(Default)]
pub struct RunHooks<'a> {
    /// Called after each completed step; returning `false` aborts the
    /// rollout with status `Failed`.
    pub on_step: Option<&'a StepHook<'a>>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum StepError {
    #[error("agent is not running")]
    NotRunning,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// What `step` emitted.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub message: Message,
    /// `true` when the action went out and its observation is still owed.
    pub awaiting_observation: bool,
}

/// Identity of the rollout a step belongs to.
pub(crate) struct StepScope<'a> {
    pub task: &'a TaskView,
    pub caller: Option<&'a str>,
}

/// One decision: ask the policy, validate the action against the toolset
/// and topology, and emit the action message.
///
/// A tool outside the toolset, an illegal delegation or a malformed action is
/// turned into an error observation on the agent's own memory; the agent keeps
/// running and the step still counts against the budget.
pub fn step(
    spec: &AgentSpec,
    state: &mut AgentState,
    policy: &dyn Policy,
    env: &Environment,
    task: &TaskView,
) -> Result<StepOutcome, StepError> {
    step_scoped(spec, state, policy, env, &StepScope { task, caller: None })
}

pub(crate) fn step_scoped(
    spec: &AgentSpec,
    state: &mut AgentState,
    policy: &dyn Policy,
    env: &Environment,
    scope: &StepScope<'_>,
) -> Result<StepOutcome, StepError> {
    if state.status != AgentStatus::Running || state.step_count >= spec.max_steps || state.pending.is_some() {
        return Err(StepError::NotRunning);
    }
    let context = assemble_context(spec, state, scope.task, &env.tools);
    let step_index = state.step_count;
    let action = policy.decide(&DecisionRequest {
        agent: &spec.name,
        context: &context,
        task: scope.task,
        step: step_index,
        memory: state.memory(),
    })?;
    state.step_count += 1;

    let mut message = Message::new(state.session_id.clone(), spec.name.clone(), Payload::ActionModel(action.clone()))
        .with_header("task_id", scope.task.task_id.clone())
        .with_header("step", step_index)
        .with_header("policy_version", policy.version())
        .with_header(TEMPLATE_HASH_HEADER, context.template_hash.clone());
    if let Some(caller) = scope.caller {
        message = message.with_caller(caller);
    }

    let rejection = action.check_shape().err().or_else(|| match action.kind {
        ActionKind::ToolCall => {
            let tool = action.tool.as_deref().unwrap_or_default();
            (!spec.has_tool(tool))
                .then(|| format!("tool `{tool}` is not in the toolset of `{}`", spec.name))
        }
        ActionKind::Delegate => {
            let target = action.target_agent.as_deref().unwrap_or_default();
            let legal = env.topology.as_ref().is_some_and(|plan| plan.allows(&spec.name, target));
            (!legal).then(|| format!("`{}` may not delegate to `{target}`", spec.name))
        }
        ActionKind::FinalAnswer => None,
    });

    if let Some(diagnostic) = rejection {
        let target = action
            .tool
            .clone()
            .or_else(|| action.target_agent.clone())
            .unwrap_or_else(|| spec.name.clone());
        let attempted = message.to(target);
        let notice = make_error_notice_with_detail(&attempted, ErrorCause::ValidationFailure, Some(diagnostic.clone()));
        env.bus.ensure_registered(&spec.name);
        env.send(notice.clone());
        // the notice is consumed right away by this agent
        let _ = take_reply(env, &spec.name, attempted.id);
        state.push_record(MemoryRecord {
            prompt_digest: context.digest,
            action,
            result: Observation::error(crate::message::SYSTEM_ENDPOINT, diagnostic, step_index),
        });
        return Ok(StepOutcome { message: notice, awaiting_observation: false });
    }

    match action.kind {
        ActionKind::FinalAnswer => {
            let message = message.to(spec.name.clone());
            env.bus.ensure_registered(&spec.name);
            env.send(message.clone());
            let _ = take_reply(env, &spec.name, message.id);
            let answer = action.answer.clone().unwrap_or_default();
            state.push_record(MemoryRecord {
                prompt_digest: context.digest,
                action,
                result: Observation::ok(&spec.name, Value::String(answer), step_index),
            });
            state.status = AgentStatus::Answered;
            Ok(StepOutcome { message, awaiting_observation: false })
        }
        ActionKind::ToolCall | ActionKind::Delegate => {
            let target = action.tool.clone().or_else(|| action.target_agent.clone()).unwrap_or_default();
            let message = message.to(target);
            env.bus.ensure_registered(&spec.name);
            env.send(message.clone());
            state.pending = Some((context.digest, action));
            Ok(StepOutcome { message, awaiting_observation: true })
        }
    }
}

/// Pops messages addressed to `endpoint` until the reply to `request_id`
/// shows up (an observation tagged `reply_to`, an error notice about it, or
/// the request itself when it was sent to self).
fn take_reply(env: &Environment, endpoint: &str, request_id: uuid::Uuid) -> Option<Message> {
    let wanted = request_id.to_string();
    while let Ok(Some(msg)) = env.bus.try_recv(endpoint) {
        let matches = msg.id == request_id
            || msg.header_str("reply_to") == Some(wanted.as_str())
            || matches!(&msg.payload, Payload::ErrorNotice(n) if n.original_message_id == request_id);
        if matches {
            return Some(msg);
        }
        tracing::debug!(endpoint, id = %msg.id, "discarding stray message");
    }
    None
}

enum Failure {
    Environment(String),
}

/// Executes an emitted tool/delegation message at its receiver and routes
/// the observation back. Returns the modelled latency consumed.
fn service(
    env: &Environment,
    spec: &AgentSpec,
    request: &Message,
    scope: &StepScope<'_>,
    depth: u32,
) -> Result<f64, Failure> {
    let receiver = request.receiver.clone().unwrap_or_default();
    let Some(delivered) = take_reply(env, &receiver, request.id) else {
        // routing already produced an error notice for the agent
        return Ok(0.0);
    };
    let Payload::ActionModel(action) = &delivered.payload else {
        return Ok(0.0);
    };
    let step_index = delivered.header_u64("step").unwrap_or(0) as u32;
    let (observation, elapsed) = match action.kind {
        ActionKind::ToolCall => {
            let sandbox = env.sandbox_for(&scope.task.task_id, scope.task.rollout_index);
            let ctx = ToolContext {
                task_id: &scope.task.task_id,
                seed: scope.task.seed,
                sandbox: Path::new(&sandbox),
                depth,
                caller: &spec.name,
                env: Some(env),
            };
            let result = execute_tool(action, &env.tools, &ctx).map_err(|f| Failure::Environment(f.to_string()))?;
            let observation = Observation {
                source: receiver.clone(),
                content: result.content,
                is_error: result.is_error,
                step_index,
            };
            (observation, result.elapsed)
        }
        ActionKind::Delegate => delegate(env, spec, action, scope, depth, step_index)?,
        ActionKind::FinalAnswer => return Ok(0.0),
    };
    let mut reply = Message::new(delivered.session_id.clone(), receiver, Payload::Observation(observation))
        .to(spec.name.clone())
        .with_header("reply_to", request.id.to_string())
        .with_header("task_id", scope.task.task_id.clone());
    reply.caller = request.caller.clone();
    env.send(reply);
    Ok(elapsed)
}

fn delegate(
    env: &Environment,
    spec: &AgentSpec,
    action: &ActionModel,
    scope: &StepScope<'_>,
    depth: u32,
    step_index: u32,
) -> Result<(Observation, f64), Failure> {
    let target = action.target_agent.as_deref().unwrap_or_default();
    let Some((peer_spec, peer_policy)) = env.peers.get(target) else {
        return Ok((Observation::error(target, format!("no agent `{target}` in this environment"), step_index), 0.0));
    };
    if depth >= env.recursion_limit {
        return Ok((
            Observation::error(target, format!("delegation depth limit {} reached", env.recursion_limit), step_index),
            0.0,
        ));
    }
    let query = action.params.get("query").and_then(Value::as_str).unwrap_or_default();
    let view = TaskView {
        task_id: format!("{}/{}", scope.task.task_id, target),
        query: query.to_string(),
        rollout_index: scope.task.rollout_index,
        seed: crate::seed::derive_seed_str(scope.task.seed, target),
    };
    let nested = run_task_nested(peer_spec, &view, peer_policy.as_ref(), env, depth + 1, Some(&spec.name), &RunHooks::default());
    match (nested.status, nested.final_answer) {
        (AgentStatus::Answered, Some(answer)) => Ok((Observation::ok(target, Value::String(answer), step_index), nested.elapsed)),
        (AgentStatus::Failed, _) => Err(Failure::Environment(format!("delegate `{target}` failed"))),
        (status, _) => Ok((Observation::error(target, format!("`{target}` ended with {status:?}"), step_index), nested.elapsed)),
    }
}

/// Runs one rollout of `task` to completion. Never panics or returns an
/// error: environment trouble yields a `Failed` trajectory with the steps
/// completed so far.
pub fn run_task(spec: &AgentSpec, task: &TaskItem, policy: &dyn Policy, env: &Environment) -> Trajectory {
    run_task_with_hooks(spec, task, policy, env, &RunHooks::default())
}

pub fn run_task_with_hooks(
    spec: &AgentSpec,
    task: &TaskItem,
    policy: &dyn Policy,
    env: &Environment,
    hooks: &RunHooks<'_>,
) -> Trajectory {
    let mut budgeted = spec.clone();
    if task.max_steps > 0 {
        budgeted.max_steps = budgeted.max_steps.min(task.max_steps);
    }
    run_task_nested(&budgeted, &TaskView::from(task), policy, env, 0, None, hooks)
}

/// `run_task` at a given agent-as-tool depth, with `caller` stamped on every
/// message the agent emits.
pub fn run_task_nested(
    spec: &AgentSpec,
    task: &TaskView,
    policy: &dyn Policy,
    env: &Environment,
    depth: u32,
    caller: Option<&str>,
    hooks: &RunHooks<'_>,
) -> Trajectory {
    let session = format!("{}#{}", task.task_id, task.rollout_index);
    let mut state = AgentState::new(&session);
    let mut elapsed = 0.0;
    let scope = StepScope { task, caller };

    let missing_tool = spec.toolset.iter().find(|t| !env.tools.contains(t)).cloned();
    if let Some(tool) = missing_tool {
        tracing::warn!(tool, agent = %spec.name, "environment lacks a tool");
        state.status = AgentStatus::Failed;
    }

    while state.status == AgentStatus::Running && state.step_count < spec.max_steps {
        let outcome = match step_scoped(spec, &mut state, policy, env, &scope) {
            Ok(outcome) => outcome,
            Err(e) => {
                tracing::warn!(error = %e, agent = %spec.name, "step failed");
                state.status = AgentStatus::Failed;
                break;
            }
        };
        if outcome.awaiting_observation {
            match service(env, spec, &outcome.message, &scope, depth) {
                Ok(latency) => elapsed += latency,
                Err(Failure::Environment(reason)) => {
                    tracing::warn!(reason, agent = %spec.name, "environment failure");
                    state.pending = None;
                    state.status = AgentStatus::Failed;
                    break;
                }
            }
            let observation = match take_reply(env, &spec.name, outcome.message.id) {
                Some(reply) => observation_from(reply, state.step_count - 1),
                None => Observation::error(&spec.name, "no reply received", state.step_count - 1),
            };
            state.record_observation(observation);
        }
        if let (Some(on_step), Some(last)) = (hooks.on_step, state.memory().last()) {
            let record = to_step(last);
            if !on_step(state.step_count - 1, &record) {
                state.status = AgentStatus::Failed;
                break;
            }
        }
    }
    if state.status == AgentStatus::Running {
        state.status = AgentStatus::StepBudgetExhausted;
    }

    let final_answer = match state.status {
        AgentStatus::Answered => state.memory().last().and_then(|r| r.action.answer.clone()),
        _ => None,
    };
    Trajectory {
        task_id: task.task_id.clone(),
        rollout_index: task.rollout_index,
        steps: state.memory().iter().map(to_step).collect(),
        final_answer,
        status: state.status,
        reward: None,
        policy_version: policy.version(),
        elapsed,
    }
}

fn observation_from(reply: Message, step_index: u32) -> Observation {
    match reply.payload {
        Payload::Observation(obs) => obs,
        Payload::ErrorNotice(notice) => Observation::error(
            &notice.failed_receiver,
            notice
                .detail
                .unwrap_or_else(|| format!("endpoint `{}` unreachable: {:?}", notice.failed_receiver, notice.cause)),
            step_index,
        ),
        other => Observation::error(&reply.sender, format!("unexpected {} reply", other.tag()), step_index),
    }
}

fn to_step(record: &MemoryRecord) -> TrajectoryStep {
    TrajectoryStep {
        prompt_digest: record.prompt_digest.clone(),
        action: record.action.clone(),
        observation: record.result.clone(),
    }
}
