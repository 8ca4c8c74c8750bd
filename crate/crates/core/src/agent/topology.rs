use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::AgentSpec;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("edge references undeclared agent `{0}`")]
    UnknownAgent(String),
    #[error("entry agent `{0}` is not declared")]
    UnknownEntry(String),
    #[error("agent `{0}` is declared twice")]
    DuplicateAgent(String),
    #[error("agents not reachable from the entry: {0:?}")]
    Unreachable(Vec<String>),
}

/// Which agent may delegate to which. Cycles are allowed; each agent's own
/// step budget bounds them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyPlan {
    pub entry: String,
    pub agents: BTreeSet<String>,
    pub edges: BTreeMap<String, BTreeSet<String>>,
}

impl TopologyPlan {
    pub fn allows(&self, from: &str, to: &str) -> bool {
        self.edges.get(from).is_some_and(|targets| targets.contains(to))
    }

    pub fn targets(&self, from: &str) -> impl Iterator<Item = &str> {
        self.edges.get(from).into_iter().flatten().map(String::as_str)
    }
}

pub fn build_topology(
    specs: &[AgentSpec],
    edges: &[(String, String)],
    entry: &str,
) -> Result<TopologyPlan, TopologyError> {
    let mut agents = BTreeSet::new();
    for spec in specs {
        if !agents.insert(spec.name.clone()) {
            return Err(TopologyError::DuplicateAgent(spec.name.clone()));
        }
    }
    if !agents.contains(entry) {
        return Err(TopologyError::UnknownEntry(entry.to_string()));
    }
    let mut adjacency: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (from, to) in edges {
        for end in [from, to] {
            if !agents.contains(end) {
                return Err(TopologyError::UnknownAgent(end.clone()));
            }
        }
        adjacency.entry(from.clone()).or_default().insert(to.clone());
    }
    let mut seen = BTreeSet::from([entry.to_string()]);
    let mut queue = VecDeque::from([entry.to_string()]);
    while let Some(node) = queue.pop_front() {
        for next in adjacency.get(&node).into_iter().flatten() {
            if seen.insert(next.clone()) {
                queue.push_back(next.clone());
            }
        }
    }
    let unreachable: Vec<String> = agents.difference(&seen).cloned().collect();
    if !unreachable.is_empty() {
        return Err(TopologyError::Unreachable(unreachable));
    }
    Ok(TopologyPlan { entry: entry.to_string(), agents, edges: adjacency })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tools::ToolRegistry;

    fn specs(names: &[&str]) -> Vec<AgentSpec> {
        let tools = ToolRegistry::new();
        names.iter().map(|n| AgentSpec::new(n, "p", &[], 2, &tools).unwrap()).collect()
    }

    fn edge(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    #[test]
    fn cycles_are_allowed() {
        let plan = build_topology(&specs(&["a", "b"]), &[edge("a", "b"), edge("b", "a")], "a").unwrap();
        assert!(plan.allows("a", "b"));
        assert!(plan.allows("b", "a"));
        assert!(!plan.allows("a", "a"));
        assert_eq!(plan.targets("a").collect::<Vec<_>>(), vec!["b"]);
    }

    #[test]
    fn rejects_bad_graphs() {
        assert_eq!(
            build_topology(&specs(&["a"]), &[edge("a", "z")], "a"),
            Err(TopologyError::UnknownAgent("z".into()))
        );
        assert_eq!(build_topology(&specs(&["a"]), &[], "q"), Err(TopologyError::UnknownEntry("q".into())));
        assert_eq!(
            build_topology(&specs(&["a", "b", "c"]), &[edge("a", "b")], "a"),
            Err(TopologyError::Unreachable(vec!["c".into()]))
        );
        assert_eq!(
            build_topology(&specs(&["a", "a"]), &[], "a"),
            Err(TopologyError::DuplicateAgent("a".into()))
        );
    }
}
