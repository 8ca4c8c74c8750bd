use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use serde_json::Value;

use super::{ParamType, Tool, ToolContext, ToolError, ToolOutput, ToolSpec};

/// Resolves `relative` inside `root`, refusing absolute paths, any `..`
/// component, and anything whose real location escapes `root` (symlinks).
pub fn resolve_in_sandbox(root: &Path, relative: &str) -> Result<PathBuf, String> {
    if relative.is_empty() {
        return Err("empty path".into());
    }
    let rel = Path::new(relative);
    for component in rel.components() {
        match component {
            Component::Normal(_) | Component::CurDir => {}
            Component::ParentDir => return Err(format!("path `{relative}` leaves the sandbox")),
            Component::RootDir | Component::Prefix(_) => {
                return Err(format!("absolute path `{relative}` is not allowed"))
            }
        }
    }
    std::fs::create_dir_all(root).map_err(|e| format!("sandbox unavailable: {e}"))?;
    let real_root = root.canonicalize().map_err(|e| format!("sandbox unavailable: {e}"))?;
    let joined = real_root.join(rel);
    // Walk up to the deepest existing ancestor and make sure it is still inside.
    let mut probe = joined.as_path();
    loop {
        if probe.exists() {
            let real = probe.canonicalize().map_err(|e| e.to_string())?;
            if !real.starts_with(&real_root) {
                return Err(format!("path `{relative}` leaves the sandbox"));
            }
            break;
        }
        match probe.parent() {
            Some(parent) => probe = parent,
            None => break,
        }
    }
    Ok(joined)
}

pub struct FileRead {
    spec: ToolSpec,
}

impl FileRead {
    pub fn new() -> Self {
        FileRead {
            spec: ToolSpec::new(
                "file_read",
                "Reads a UTF-8 file from the task sandbox.",
                &[("path", ParamType::String)],
            ),
        }
    }
}

impl Default for FileRead {
    fn default() -> Self {
        Self::new()
    }
}

impl Tool for FileRead {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn call(&self, params: &BTreeMap<String, Value>, ctx: &ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        let rel = params.get("path").and_then(Value::as_str).unwrap_or_default();
        let path = resolve_in_sandbox(ctx.sandbox, rel).map_err(ToolError::Invalid)?;
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(ToolOutput::new(text)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(ToolError::Invalid(format!("no such file `{rel}`")))
            }
            Err(e) => Err(ToolError::Invalid(format!("cannot read `{rel}`: {e}"))),
        }
    }
}

pub struct FileWrite {
    spec: ToolSpec,
}

impl FileWrite {
    pub fn new() -> Self {
        FileWrite {
            spec: ToolSpec::new(
                "file_write",
                "Writes a UTF-8 file inside the task sandbox.",
                &[("path", ParamType::String), ("content", ParamType::String)],
            ),
        }
    }
}

impl Default for FileWrite {
    fn default() -> Self {
        Self::new()
    }
}

impl Tool for FileWrite {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn call(&self, params: &BTreeMap<String, Value>, ctx: &ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        let rel = params.get("path").and_then(Value::as_str).unwrap_or_default();
        let content = params.get("content").and_then(Value::as_str).unwrap_or_default();
        let path = resolve_in_sandbox(ctx.sandbox, rel).map_err(ToolError::Invalid)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| ToolError::Invalid(format!("cannot create `{rel}`: {e}")))?;
        }
        std::fs::write(&path, content)
            .map_err(|e| ToolError::Invalid(format!("cannot write `{rel}`: {e}")))?;
        Ok(ToolOutput::new(format!("wrote {} bytes", content.len())))
    }
}
