use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    build_topology, AgentSpec, AgentTool, Environment, Policy, PolicyConfig, PolicyRef, SpecError,
    TopologyError, TopologyPlan,
};
use crate::tools::{LatencyModel, ToolRegistry, ToolsConfig, ToolsError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Tools(#[from] ToolsError),
    #[error("agent `{agent}` refers to unknown policy `{policy}`")]
    UnknownPolicy { agent: String, policy: String },
    #[error("unknown built-in tool `{0}`")]
    UnknownBuiltin(String),
    #[error("`{0}` is listed in agent_tools but is not a declared agent")]
    UnknownAgentTool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDecl {
    pub name: String,
    pub system_prompt: String,
    #[serde(default)]
    pub toolset: Vec<String>,
    #[serde(default)]
    pub max_steps: Option<u32>,
    #[serde(default)]
    pub policy_ref: Option<PolicyRef>,
}

/// Built-in tools to enable, by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDecl {
    pub name: String,
}

/// Declarative description of agents, tools, policies and the delegation
/// graph. The coordinator ships this to every worker on registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub agents: Vec<AgentDecl>,
    /// Empty means every built-in tool.
    #[serde(default)]
    pub tools: Vec<ToolDecl>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    pub entry: String,
    /// Budget for agents that do not set their own.
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    /// Policy used when an agent has no `policy_ref`.
    pub policy_ref: PolicyRef,
    pub policies: BTreeMap<String, PolicyConfig>,
    /// Agents also exposed to others through the tool interface.
    #[serde(default)]
    pub agent_tools: Vec<String>,
    #[serde(default)]
    pub tool_settings: ToolsConfig,
}

fn default_max_steps() -> u32 {
    8
}

const BUILTINS: [&str; 5] = ["calculator", "kv_search", "file_read", "file_write", "sleepy_noop"];

impl RuntimeConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// A single arithmetic agent with the calculator, driven by `policy`.
    pub fn single_agent(policy: PolicyConfig, max_steps: u32) -> Self {
        RuntimeConfig {
            agents: vec![AgentDecl {
                name: "solver".into(),
                system_prompt: "Answer the question. Use the tools when useful.".into(),
                toolset: vec!["calculator".into(), "kv_search".into(), "sleepy_noop".into()],
                max_steps: Some(max_steps),
                policy_ref: None,
            }],
            tools: Vec::new(),
            edges: Vec::new(),
            entry: "solver".into(),
            max_steps,
            policy_ref: PolicyRef { id: "main".into(), version: 0 },
            policies: BTreeMap::from([("main".to_string(), policy)]),
            agent_tools: Vec::new(),
            tool_settings: ToolsConfig::default(),
        }
    }

    pub fn with_sleepy_latency(mut self, latency: LatencyModel) -> Self {
        self.tool_settings.sleepy_latency = latency;
        self
    }

    fn specs(&self) -> Vec<AgentSpec> {
        self.agents
            .iter()
            .map(|a| AgentSpec {
                name: a.name.clone(),
                system_prompt: a.system_prompt.clone(),
                toolset: a.toolset.clone(),
                max_steps: a.max_steps.unwrap_or(self.max_steps),
                policy_ref: a.policy_ref.clone().unwrap_or_else(|| self.policy_ref.clone()),
            })
            .collect()
    }

    /// Builds the environment for one rollout under policy `version` and
    /// returns it with the entry agent and its policy.
    pub fn instantiate(
        &self,
        sandbox_root: impl Into<PathBuf>,
        version: u64,
    ) -> Result<Instantiated, ConfigError> {
        let specs = self.specs();
        let plan: TopologyPlan = build_topology(&specs, &self.edges, &self.entry)?;

        let mut policies: BTreeMap<String, Arc<dyn Policy>> = BTreeMap::new();
        for spec in &specs {
            let config = self.policies.get(&spec.policy_ref.id).ok_or_else(|| ConfigError::UnknownPolicy {
                agent: spec.name.clone(),
                policy: spec.policy_ref.id.clone(),
            })?;
            policies.insert(spec.name.clone(), config.build(version.max(spec.policy_ref.version)));
        }

        let mut tools = ToolRegistry::with_builtins(&self.tool_settings)?;
        if !self.tools.is_empty() {
            for decl in &self.tools {
                if !BUILTINS.contains(&decl.name.as_str()) {
                    return Err(ConfigError::UnknownBuiltin(decl.name.clone()));
                }
            }
            let keep: Vec<&str> = self.tools.iter().map(|t| t.name.as_str()).collect();
            let mut filtered = ToolRegistry::new();
            filtered.set_apply_latency(self.tool_settings.apply_latency);
            for name in BUILTINS.iter().filter(|n| keep.contains(n)) {
                let tool = tools.get(name).cloned().expect("built-in present");
                filtered.register(tool)?;
            }
            tools = filtered;
        }
        for name in &self.agent_tools {
            let spec = specs
                .iter()
                .find(|s| &s.name == name)
                .ok_or_else(|| ConfigError::UnknownAgentTool(name.clone()))?;
            tools.register(Arc::new(AgentTool::new(spec.clone(), Arc::clone(&policies[name]))))?;
        }
        for spec in &specs {
            spec.validate(&tools)?;
        }

        let entry = specs.iter().find(|s| s.name == self.entry).cloned().expect("entry checked by topology");
        let entry_policy = Arc::clone(&policies[&entry.name]);
        let peers: Vec<(AgentSpec, Arc<dyn Policy>)> = specs
            .iter()
            .filter(|s| s.name != self.entry)
            .map(|s| (s.clone(), Arc::clone(&policies[&s.name])))
            .collect();
        let env = Environment::new(tools, sandbox_root).with_topology(plan, peers);
        Ok(Instantiated { env, entry, policy: entry_policy })
    }
}

pub struct Instantiated {
    pub env: Environment,
    pub entry: AgentSpec,
    pub policy: Arc<dyn Policy>,
}
