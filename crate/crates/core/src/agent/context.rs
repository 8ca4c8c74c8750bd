use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AgentSpec, AgentState, TaskView};
use crate::seed::sha256_hex;
use crate::tools::ToolRegistry;

/// Section layout of every prompt. Its hash travels in message headers so a
/// trace records which layout produced a decision.
pub const TEMPLATE: &str = "### SYSTEM\n{system_prompt}\n### TOOLS\n{tool_lines}\n[### HISTORY\n{records}\n]### TASK\n{query}\n";

pub const TEMPLATE_HASH_HEADER: &str = "template_hash";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub text: String,
    pub digest: String,
    pub template_hash: String,
}

impl PromptContext {
    pub fn template_hash() -> String {
        sha256_hex(TEMPLATE.as_bytes())[..16].to_string()
    }
}

/// Renders system prompt, tool list, history and query. Identical inputs
/// give identical bytes.
pub fn assemble_context(
    spec: &AgentSpec,
    state: &AgentState,
    task: &TaskView,
    tools: &ToolRegistry,
) -> PromptContext {
    let mut text = String::new();
    text.push_str("### SYSTEM\n");
    text.push_str(&spec.system_prompt);
    text.push_str("\n### TOOLS\n");
    if spec.toolset.is_empty() {
        text.push_str("(none)\n");
    }
    for name in &spec.toolset {
        match tools.spec(name) {
            Some(tool) => {
                let params: Vec<String> = tool
                    .param_schema
                    .iter()
                    .map(|(p, ty)| format!("{p}:{ty:?}").to_lowercase())
                    .collect();
                let _ = writeln!(text, "- {name}: {} (params: {})", tool.description, params.join(", "));
            }
            None => {
                let _ = writeln!(text, "- {name}");
            }
        }
    }
    if !state.memory().is_empty() {
        text.push_str("### HISTORY\n");
        for (i, record) in state.memory().iter().enumerate() {
            let action = serde_json::to_string(&record.action).unwrap_or_default();
            let _ = writeln!(text, "[{}] {action}", i + 1);
            let marker = if record.result.is_error { "ERROR: " } else { "" };
            let _ = writeln!(text, "    -> {marker}{}", record.result.text());
        }
    }
    text.push_str("### TASK\n");
    text.push_str(&task.query);
    text.push('\n');
    let digest = sha256_hex(text.as_bytes());
    PromptContext { text, digest, template_hash: PromptContext::template_hash() }
}
