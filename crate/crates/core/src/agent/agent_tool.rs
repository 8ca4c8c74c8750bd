use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::Value;

use super::{run_task_nested, AgentSpec, AgentStatus, Policy, RunHooks, TaskView};
use crate::seed::derive_seed_str;
use crate::tools::{ParamType, Tool, ToolContext, ToolError, ToolOutput, ToolSpec};

/// Nesting bound for agents calling agents through the tool interface.
pub const DEFAULT_RECURSION_LIMIT: u32 = 3;

/// The tool-facing description of an agent: one `query` string in, the
/// agent's final answer out.
pub fn as_tool(spec: &AgentSpec) -> ToolSpec {
    let summary = spec.system_prompt.lines().next().unwrap_or_default();
    ToolSpec::new(&spec.name, &format!("Agent {}: {summary}", spec.name), &[("query", ParamType::String)])
}

/// An agent wrapped as a tool.
pub struct AgentTool {
    agent: AgentSpec,
    policy: Arc<dyn Policy>,
    spec: ToolSpec,
    limit: u32,
}

impl AgentTool {
    pub fn new(agent: AgentSpec, policy: Arc<dyn Policy>) -> Self {
        let spec = as_tool(&agent);
        AgentTool { agent, policy, spec, limit: DEFAULT_RECURSION_LIMIT }
    }

    pub fn with_limit(mut self, limit: u32) -> Self {
        self.limit = limit;
        self
    }

    /// The sub-task a call with `query` runs, so callers can reproduce it
    /// directly.
    pub fn subtask(&self, parent_task: &str, parent_seed: u64, query: &str) -> TaskView {
        TaskView {
            task_id: format!("{parent_task}/{}", self.agent.name),
            query: query.to_string(),
            rollout_index: 0,
            seed: derive_seed_str(parent_seed, &self.agent.name),
        }
    }
}

impl Tool for AgentTool {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn call(&self, params: &BTreeMap<String, Value>, ctx: &ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        if ctx.depth >= self.limit {
            return Err(ToolError::Invalid(format!(
                "agent `{}` not started: recursion depth limit {} reached",
                self.agent.name, self.limit
            )));
        }
        let Some(env) = ctx.env else {
            return Err(ToolError::Fault("agent tools need an environment".into()));
        };
        let query = params.get("query").and_then(Value::as_str).unwrap_or_default();
        let view = self.subtask(ctx.task_id, ctx.seed, query);
        let nested = run_task_nested(
            &self.agent,
            &view,
            self.policy.as_ref(),
            env,
            ctx.depth + 1,
            Some(ctx.caller),
            &RunHooks::default(),
        );
        match (nested.status, nested.final_answer) {
            (AgentStatus::Answered, Some(answer)) => {
                Ok(ToolOutput { content: Value::String(answer), extra_elapsed: nested.elapsed })
            }
            (status, _) => Err(ToolError::Invalid(format!("agent `{}` ended with {status:?}", self.agent.name))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{run_task, ActionModel, Environment, ScriptedPolicy};
    use crate::cluster::TaskItem;
    use crate::message::Category;
    use crate::tools::{ToolRegistry, ToolsConfig};
    use serde_json::json;

    fn echo_policy() -> Arc<dyn Policy> {
        // answers with the query line of its prompt
        struct Echo;
        impl Policy for Echo {
            fn decide(&self, r: &super::super::DecisionRequest<'_>) -> Result<ActionModel, super::super::PolicyError> {
                Ok(ActionModel::final_answer(r.agent, &r.task.query))
            }
            fn version(&self) -> u64 {
                0
            }
        }
        Arc::new(Echo)
    }

    fn outer_calls(tool: &str) -> ScriptedPolicy {
        ScriptedPolicy::new(vec![
            ActionModel::tool_call("", tool, BTreeMap::from([("query".into(), json!("hi"))])),
            ActionModel::final_answer("", "{last_result}"),
        ])
    }

    #[test]
    fn wrapped_echo_agent_returns_query() {
        let dir = tempfile::tempdir().unwrap();
        let mut tools = ToolRegistry::with_builtins(&ToolsConfig::default()).unwrap();
        let echo = AgentSpec::new("echo", "Repeat the query.", &[], 2, &tools).unwrap();
        tools.register(Arc::new(AgentTool::new(echo.clone(), echo_policy()))).unwrap();
        let outer = AgentSpec::new("outer", "Use echo.", &["echo"], 3, &tools).unwrap();
        let env = Environment::new(tools, dir.path()).with_transcript();
        let traj = run_task(&outer, &TaskItem::new("t", "q", 0), &outer_calls("echo"), &env);
        assert_eq!(traj.steps[0].observation.content, json!("hi"));
        assert_eq!(traj.final_answer.as_deref(), Some("hi"));

        let nested: Vec<_> = env
            .transcript()
            .into_iter()
            .filter(|m| m.sender == "echo" && m.category == Category::Action)
            .collect();
        assert_eq!(nested.len(), 1);
        assert_eq!(nested[0].caller.as_deref(), Some("outer"));
    }

    #[test]
    fn as_tool_matches_direct_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut tools = ToolRegistry::with_builtins(&ToolsConfig::default()).unwrap();
        let inner = AgentSpec::new("adder", "Adds.", &["calculator"], 3, &tools).unwrap();
        let inner_policy: Arc<dyn Policy> = Arc::new(ScriptedPolicy::new(vec![
            ActionModel::tool_call("", "calculator", BTreeMap::from([("expr".into(), json!("19+23"))])),
            ActionModel::final_answer("", "{last_result}"),
        ]));
        let wrapper = AgentTool::new(inner.clone(), Arc::clone(&inner_policy));
        let view = wrapper.subtask("t", 5, "add them");
        tools.register(Arc::new(wrapper)).unwrap();
        let outer = AgentSpec::new("outer", "p", &["adder"], 3, &tools).unwrap();
        let env = Environment::new(tools, dir.path());
        let mut task = TaskItem::new("t", "q", 0);
        task.seed = 5;
        let via_tool = run_task(&outer, &task, &outer_calls("adder"), &env);
        let direct = run_task_nested(&inner, &view, inner_policy.as_ref(), &env, 0, None, &RunHooks::default());
        assert_eq!(via_tool.final_answer, direct.final_answer);
        assert_eq!(direct.final_answer.as_deref(), Some("42"));
    }

    #[test]
    fn self_reference_stops_at_depth_limit() {
        let dir = tempfile::tempdir().unwrap();
        let mut tools = ToolRegistry::with_builtins(&ToolsConfig::default()).unwrap();
        // `loop` calls itself; the agent spec must exist before it can list itself.
        let mut selfish = AgentSpec::new("loop", "Call yourself.", &[], 3, &tools).unwrap();
        selfish.toolset = vec!["loop".into()];
        let policy: Arc<dyn Policy> = Arc::new(outer_calls("loop"));
        tools.register(Arc::new(AgentTool::new(selfish.clone(), Arc::clone(&policy)))).unwrap();
        let env = Environment::new(tools, dir.path()).with_transcript();
        let traj = run_task(&selfish, &TaskItem::new("t", "q", 0), policy.as_ref(), &env);
        assert_eq!(traj.status, AgentStatus::Answered);
        // depth 0 -> 1 -> 2 -> 3 run; the call made at depth 3 is refused
        let refusals = env
            .transcript()
            .iter()
            .filter(|m| matches!(&m.payload, crate::message::Payload::Observation(o) if o.is_error
                && o.text().contains("recursion depth limit 3")))
            .count();
        assert_eq!(refusals, 1);
        let nested_runs = env
            .transcript()
            .iter()
            .filter(|m| m.category == Category::Action && m.caller.as_deref() == Some("loop"))
            .count();
        // three nested agents, each: one tool call + one final answer
        assert_eq!(nested_runs, 6);
    }

    #[test]
    fn limit_is_configurable() {
        let dir = tempfile::tempdir().unwrap();
        let mut tools = ToolRegistry::with_builtins(&ToolsConfig::default()).unwrap();
        let echo = AgentSpec::new("echo", "e", &[], 2, &tools).unwrap();
        tools.register(Arc::new(AgentTool::new(echo, echo_policy()).with_limit(0))).unwrap();
        let outer = AgentSpec::new("outer", "p", &["echo"], 3, &tools).unwrap();
        let env = Environment::new(tools, dir.path());
        let traj = run_task(&outer, &TaskItem::new("t", "q", 0), &outer_calls("echo"), &env);
        assert!(traj.steps[0].observation.is_error);
    }
}
