//! The single-agent loop: context assembly, policy decisions, tool
//! execution over the message bus, and trajectory recording.

mod agent_tool;
mod config;
mod context;
mod policy;
mod runtime;
mod topology;
mod trajectory;

pub use agent_tool::{as_tool, AgentTool, DEFAULT_RECURSION_LIMIT};
pub use config::{AgentDecl, ConfigError, Instantiated, RuntimeConfig, ToolDecl};
pub use context::{assemble_context, PromptContext, TEMPLATE, TEMPLATE_HASH_HEADER};
pub use policy::{
    DecisionRequest, Policy, PolicyConfig, PolicyError, RemoteEndpointPolicy, ScriptedPolicy,
    SeededStochasticPolicy, LAST_RESULT_PLACEHOLDER,
};
pub use runtime::{run_task, run_task_nested, run_task_with_hooks, step, Environment, RunHooks, StepError, StepOutcome};
pub use topology::{build_topology, TopologyError, TopologyPlan};
pub use trajectory::{Trajectory, TrajectoryStep};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cluster::TaskItem;
use crate::tools::ToolRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    ToolCall,
    FinalAnswer,
    Delegate,
}

/// One decision made by a policy on behalf of an agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionModel {
    #[serde(default)]
    pub agent: String,
    pub kind: ActionKind,
    #[serde(default)]
    pub tool: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    #[serde(default)]
    pub answer: Option<String>,
    #[serde(default)]
    pub target_agent: Option<String>,
}

impl ActionModel {
    pub fn tool_call(agent: &str, tool: &str, params: BTreeMap<String, Value>) -> Self {
        ActionModel {
            agent: agent.to_string(),
            kind: ActionKind::ToolCall,
            tool: Some(tool.to_string()),
            params,
            answer: None,
            target_agent: None,
        }
    }

    pub fn final_answer(agent: &str, answer: &str) -> Self {
        ActionModel {
            agent: agent.to_string(),
            kind: ActionKind::FinalAnswer,
            tool: None,
            params: BTreeMap::new(),
            answer: Some(answer.to_string()),
            target_agent: None,
        }
    }

    /// Hands `query` to another agent in the topology.
    pub fn delegate(agent: &str, target: &str, query: &str) -> Self {
        ActionModel {
            agent: agent.to_string(),
            kind: ActionKind::Delegate,
            tool: None,
            params: BTreeMap::from([("query".to_string(), Value::String(query.to_string()))]),
            answer: None,
            target_agent: Some(target.to_string()),
        }
    }

    /// Checks the kind-specific required fields.
    pub fn check_shape(&self) -> Result<(), String> {
        match self.kind {
            ActionKind::ToolCall if self.tool.is_none() => Err("tool call without a tool".into()),
            ActionKind::FinalAnswer if self.answer.is_none() => Err("final answer without text".into()),
            ActionKind::Delegate if self.target_agent.is_none() => Err("delegation without a target".into()),
            _ => Ok(()),
        }
    }
}

/// Feedback for one step, from a tool, another agent, or the framework.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub source: String,
    pub content: Value,
    pub is_error: bool,
    pub step_index: u32,
}

impl Observation {
    pub fn ok(source: &str, content: impl Into<Value>, step_index: u32) -> Self {
        Observation { source: source.to_string(), content: content.into(), is_error: false, step_index }
    }

    pub fn error(source: &str, diagnostic: impl Into<String>, step_index: u32) -> Self {
        Observation {
            source: source.to_string(),
            content: Value::String(diagnostic.into()),
            is_error: true,
            step_index,
        }
    }

    /// Content as plain text (strings unquoted, other values as JSON).
    pub fn text(&self) -> String {
        match &self.content {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRef {
    pub id: String,
    #[serde(default)]
    pub version: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("agent `{agent}` lists unknown tool `{tool}`")]
    UnknownTool { agent: String, tool: String },
    #[error("agent `{0}` needs max_steps >= 1")]
    ZeroSteps(String),
    #[error("agent name must not be empty")]
    EmptyName,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub name: String,
    pub system_prompt: String,
    pub toolset: Vec<String>,
    pub max_steps: u32,
    pub policy_ref: PolicyRef,
}

impl AgentSpec {
    /// Builds a spec whose toolset is checked against `tools`.
    pub fn new(
        name: &str,
        system_prompt: &str,
        toolset: &[&str],
        max_steps: u32,
        tools: &ToolRegistry,
    ) -> Result<Self, SpecError> {
        let spec = AgentSpec {
            name: name.to_string(),
            system_prompt: system_prompt.to_string(),
            toolset: toolset.iter().map(|t| t.to_string()).collect(),
            max_steps,
            policy_ref: PolicyRef { id: "default".into(), version: 0 },
        };
        spec.validate(tools)?;
        Ok(spec)
    }

    pub fn validate(&self, tools: &ToolRegistry) -> Result<(), SpecError> {
        if self.name.is_empty() {
            return Err(SpecError::EmptyName);
        }
        if self.max_steps == 0 {
            return Err(SpecError::ZeroSteps(self.name.clone()));
        }
        if let Some(missing) = self.toolset.iter().find(|t| !tools.contains(t)) {
            return Err(SpecError::UnknownTool { agent: self.name.clone(), tool: missing.clone() });
        }
        Ok(())
    }

    pub fn has_tool(&self, tool: &str) -> bool {
        self.toolset.iter().any(|t| t == tool)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentStatus {
    Running,
    Answered,
    StepBudgetExhausted,
    Failed,
}

impl AgentStatus {
    pub fn is_terminal(self) -> bool {
        self != AgentStatus::Running
    }
}

/// One completed step in an agent's memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub prompt_digest: String,
    pub action: ActionModel,
    pub result: Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub session_id: String,
    pub step_count: u32,
    memory: Vec<MemoryRecord>,
    pub status: AgentStatus,
    /// Tool or delegation call emitted by `step` whose observation has not
    /// arrived yet.
    #[serde(skip)]
    pending: Option<(String, ActionModel)>,
}

impl AgentState {
    pub fn new(session_id: &str) -> Self {
        AgentState {
            session_id: session_id.to_string(),
            step_count: 0,
            memory: Vec::new(),
            status: AgentStatus::Running,
            pending: None,
        }
    }

    pub fn memory(&self) -> &[MemoryRecord] {
        &self.memory
    }

    pub fn pending_action(&self) -> Option<&ActionModel> {
        self.pending.as_ref().map(|(_, a)| a)
    }

    fn push_record(&mut self, record: MemoryRecord) {
        self.memory.push(record);
    }

    /// Completes the pending call with its observation.
    pub fn record_observation(&mut self, observation: Observation) -> bool {
        match self.pending.take() {
            Some((prompt_digest, action)) => {
                self.memory.push(MemoryRecord { prompt_digest, action, result: observation });
                true
            }
            None => false,
        }
    }
}

/// The part of a task a policy is allowed to see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub query: String,
    pub rollout_index: u32,
    pub seed: u64,
}

impl From<&TaskItem> for TaskView {
    fn from(task: &TaskItem) -> Self {
        TaskView {
            task_id: task.task_id.clone(),
            query: task.query.clone(),
            rollout_index: task.rollout_index,
            seed: task.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tools::ToolsConfig;

    #[test]
    fn spec_checks_toolset_and_budget() {
        let tools = ToolRegistry::with_builtins(&ToolsConfig::default()).unwrap();
        assert!(AgentSpec::new("a", "p", &["calculator"], 3, &tools).is_ok());
        assert_eq!(
            AgentSpec::new("a", "p", &["browser"], 3, &tools),
            Err(SpecError::UnknownTool { agent: "a".into(), tool: "browser".into() })
        );
        assert_eq!(AgentSpec::new("a", "p", &[], 0, &tools), Err(SpecError::ZeroSteps("a".into())));
    }

    #[test]
    fn action_shape_rules() {
        assert!(ActionModel::final_answer("a", "42").check_shape().is_ok());
        let mut bad = ActionModel::final_answer("a", "42");
        bad.answer = None;
        assert!(bad.check_shape().is_err());
        let mut bad = ActionModel::delegate("a", "b", "q");
        bad.target_agent = None;
        assert!(bad.check_shape().is_err());
        let mut bad = ActionModel::tool_call("a", "t", BTreeMap::new());
        bad.tool = None;
        assert!(bad.check_shape().is_err());
    }

    #[test]
    fn task_view_hides_ground_truth() {
        let mut task = TaskItem::new("t1", "2+3", 0);
        task.ground_truth = Some("5".into());
        let view = serde_json::to_string(&TaskView::from(&task)).unwrap();
        assert!(!view.contains("ground_truth"));
        assert!(!view.contains("\"5\""));
    }
}
