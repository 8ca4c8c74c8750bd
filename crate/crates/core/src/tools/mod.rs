//! Deterministic tools the agent loop can call.
//!
//! Every tool declares a [`ToolSpec`]; [`execute_tool`] checks parameters
//! against the spec, applies the tool's latency model and turns any
//! malformed call into an error [`ToolResult`] rather than a fault.

mod calculator;
mod files;
mod kv_search;

pub use calculator::{evaluate_expression, format_number, Calculator};
pub use files::{resolve_in_sandbox, FileRead, FileWrite};
pub use kv_search::{Corpus, CorpusEntry, KvSearch};

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agent::{ActionKind, ActionModel, Environment};
use crate::seed::derive_seed_str;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Number,
    Integer,
    Boolean,
    Any,
}

impl ParamType {
    fn accepts(self, value: &Value) -> bool {
        match self {
            ParamType::String => value.is_string(),
            ParamType::Number => value.is_number(),
            ParamType::Integer => value.is_i64() || value.is_u64(),
            ParamType::Boolean => value.is_boolean(),
            ParamType::Any => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LatencyModel {
    Fixed { seconds: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::Fixed { seconds: 0.0 }
    }
}

impl LatencyModel {
    pub fn sample(&self, seed: u64) -> f64 {
        match *self {
            LatencyModel::Fixed { seconds } => seconds.max(0.0),
            LatencyModel::LogNormal { mu, sigma } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                LogNormal::new(mu, sigma.max(0.0))
                    .map(|d| d.sample(&mut rng))
                    .unwrap_or(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub param_schema: BTreeMap<String, ParamType>,
    pub deterministic: bool,
    #[serde(default)]
    pub latency_model: LatencyModel,
}

impl ToolSpec {
    pub fn new(name: &str, description: &str, params: &[(&str, ParamType)]) -> Self {
        ToolSpec {
            name: name.to_string(),
            description: description.to_string(),
            param_schema: params.iter().map(|(k, t)| (k.to_string(), *t)).collect(),
            deterministic: true,
            latency_model: LatencyModel::default(),
        }
    }

    pub fn with_latency(mut self, model: LatencyModel) -> Self {
        self.latency_model = model;
        self
    }

    /// Every declared parameter is required; undeclared ones are refused.
    pub fn check_params(&self, params: &BTreeMap<String, Value>) -> Result<(), String> {
        for (name, ty) in &self.param_schema {
            match params.get(name) {
                None => return Err(format!("missing parameter `{name}`")),
                Some(v) if !ty.accepts(v) => {
                    return Err(format!("parameter `{name}` must be {ty:?}").to_lowercase())
                }
                _ => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !self.param_schema.contains_key(*k)) {
            return Err(format!("unknown parameter `{extra}`"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub content: Value,
    pub is_error: bool,
    pub elapsed: f64,
}

impl ToolResult {
    pub fn ok(content: impl Into<Value>, elapsed: f64) -> Self {
        ToolResult { content: content.into(), is_error: false, elapsed }
    }

    pub fn error(diagnostic: impl Into<String>, elapsed: f64) -> Self {
        ToolResult { content: Value::String(diagnostic.into()), is_error: true, elapsed }
    }
}

/// What a tool call may fail with. `Invalid` becomes an error result the
/// agent can observe; `Fault` means the environment itself broke.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ToolError {
    #[error("{0}")]
    Invalid(String),
    #[error("environment fault: {0}")]
    Fault(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("tool `{tool}` faulted: {reason}")]
pub struct ToolFault {
    pub tool: String,
    pub reason: String,
}

pub struct ToolOutput {
    pub content: Value,
    /// Time the tool itself accounts for beyond its latency model.
    pub extra_elapsed: f64,
}

impl ToolOutput {
    pub fn new(content: impl Into<Value>) -> Self {
        ToolOutput { content: content.into(), extra_elapsed: 0.0 }
    }
}

/// Execution context handed to a tool.
pub struct ToolContext<'a> {
    pub task_id: &'a str,
    pub seed: u64,
    pub sandbox: &'a Path,
    /// Agent-as-tool nesting depth of the calling agent.
    pub depth: u32,
    pub caller: &'a str,
    pub env: Option<&'a Environment>,
}

impl<'a> ToolContext<'a> {
    pub fn standalone(sandbox: &'a Path, seed: u64) -> Self {
        ToolContext { task_id: "standalone", seed, sandbox, depth: 0, caller: "user", env: None }
    }
}

pub trait Tool: Send + Sync {
    fn spec(&self) -> &ToolSpec;
    fn call(&self, params: &BTreeMap<String, Value>, ctx: &ToolContext<'_>) -> Result<ToolOutput, ToolError>;
}

#[derive(Debug, Error, PartialEq)]
pub enum ToolsError {
    #[error("tool `{0}` is already registered")]
    Duplicate(String),
    #[error("cannot load corpus {path}: {reason}")]
    Corpus { path: PathBuf, reason: String },
}

/// Settings for the built-in tool suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolsConfig {
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub sleepy_latency: LatencyModel,
    /// Actually sleep for sampled latencies (off: latency is only recorded).
    #[serde(default = "default_true")]
    pub apply_latency: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ToolsConfig {
    fn default() -> Self {
        ToolsConfig { corpus: None, sleepy_latency: LatencyModel::default(), apply_latency: true }
    }
}

struct SleepyNoop {
    spec: ToolSpec,
}

impl Tool for SleepyNoop {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn call(&self, _: &BTreeMap<String, Value>, _: &ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        Ok(ToolOutput::new("ok"))
    }
}

pub fn sleepy_noop(latency: LatencyModel) -> Arc<dyn Tool> {
    let spec = ToolSpec::new("sleepy_noop", "Does nothing for the configured duration.", &[])
        .with_latency(latency);
    Arc::new(SleepyNoop { spec })
}

#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Arc<dyn Tool>>,
    apply_latency: bool,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolRegistry")
            .field("tools", &self.tools.keys().collect::<Vec<_>>())
            .field("apply_latency", &self.apply_latency)
            .finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        ToolRegistry { tools: BTreeMap::new(), apply_latency: true }
    }

    /// calculator, kv_search, file_read, file_write and sleepy_noop.
    pub fn with_builtins(config: &ToolsConfig) -> Result<Self, ToolsError> {
        let corpus = match &config.corpus {
            Some(path) => Corpus::load(path).map_err(|e| ToolsError::Corpus {
                path: path.clone(),
                reason: e.to_string(),
            })?,
            None => Corpus::builtin(),
        };
        let mut registry = ToolRegistry::new();
        registry.apply_latency = config.apply_latency;
        registry.register(Arc::new(Calculator::new()))?;
        registry.register(Arc::new(KvSearch::new(corpus)))?;
        registry.register(Arc::new(FileRead::new()))?;
        registry.register(Arc::new(FileWrite::new()))?;
        registry.register(sleepy_noop(config.sleepy_latency))?;
        Ok(registry)
    }

    pub fn register(&mut self, tool: Arc<dyn Tool>) -> Result<(), ToolsError> {
        let name = tool.spec().name.clone();
        if self.tools.contains_key(&name) {
            return Err(ToolsError::Duplicate(name));
        }
        self.tools.insert(name, tool);
        Ok(())
    }

    pub fn set_apply_latency(&mut self, apply: bool) {
        self.apply_latency = apply;
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Tool>> {
        self.tools.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    pub fn spec(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name).map(|t| t.spec())
    }
}

/// Runs one tool call. Malformed calls produce `is_error` results; only
/// environment faults (including a panicking tool) surface as `Err`.
pub fn execute_tool(
    call: &ActionModel,
    registry: &ToolRegistry,
    ctx: &ToolContext<'_>,
) -> Result<ToolResult, ToolFault> {
    let name = match (&call.kind, &call.tool) {
        (ActionKind::ToolCall, Some(name)) => name.as_str(),
        _ => return Ok(ToolResult::error("action is not a tool call", 0.0)),
    };
    let Some(tool) = registry.get(name) else {
        return Ok(ToolResult::error(format!("unknown tool `{name}`"), 0.0));
    };
    let spec = tool.spec();
    if let Err(diagnostic) = spec.check_params(&call.params) {
        return Ok(ToolResult::error(format!("{name}: {diagnostic}"), 0.0));
    }
    let params_text = serde_json::to_string(&call.params).unwrap_or_default();
    let latency = spec
        .latency_model
        .sample(derive_seed_str(ctx.seed, &format!("{name}:{params_text}")));
    if registry.apply_latency && latency > 0.0 {
        std::thread::sleep(Duration::from_secs_f64(latency));
    }
    match catch_unwind(AssertUnwindSafe(|| tool.call(&call.params, ctx))) {
        Ok(Ok(out)) => Ok(ToolResult::ok(out.content, latency + out.extra_elapsed)),
        Ok(Err(ToolError::Invalid(diagnostic))) => Ok(ToolResult::error(diagnostic, latency)),
        Ok(Err(ToolError::Fault(reason))) => Err(ToolFault { tool: name.to_string(), reason }),
        Err(_) => Err(ToolFault { tool: name.to_string(), reason: "tool panicked".into() }),
    }
}
