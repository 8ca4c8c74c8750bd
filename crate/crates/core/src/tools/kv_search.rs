use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ParamType, Tool, ToolContext, ToolError, ToolOutput, ToolSpec};

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub key_terms: Vec<String>,
    pub snippet: String,
    pub rank_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
}

const MAX_HITS: usize = 5;

const BUILTIN: &[(&[&str], &str, f64)] = &[
    (&["paris", "france", "capital"], "Paris is the capital of France.", 0.9),
    (&["everest", "mountain", "height"], "Mount Everest is 8849 metres tall.", 0.8),
    (&["water", "boiling", "celsius"], "Water boils at 100 degrees Celsius at sea level.", 0.7),
    (&["rust", "language", "ownership"], "Rust enforces memory safety through ownership.", 0.6),
    (&["light", "speed", "vacuum"], "Light travels at 299792458 metres per second in vacuum.", 0.85),
    (&["pi", "circle", "constant"], "Pi is approximately 3.14159.", 0.5),
];

impl Corpus {
    pub fn new(entries: Vec<CorpusEntry>) -> Self {
        Corpus { entries }
    }

    pub fn builtin() -> Self {
        Corpus::new(
            BUILTIN
                .iter()
                .map(|(terms, snippet, score)| CorpusEntry {
                    key_terms: terms.iter().map(|t| t.to_string()).collect(),
                    snippet: snippet.to_string(),
                    rank_score: *score,
                })
                .collect(),
        )
    }

    /// Reads JSON-lines; blank lines are skipped.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CorpusEntry = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", lineno + 1))
            })?;
            entries.push(entry);
        }
        Ok(Corpus { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sharing at least one term with the query, scored by
    /// `rank_score * shared_terms`; ties keep corpus order.
    pub fn search(&self, query: &str) -> Vec<(f64, &CorpusEntry)> {
        let terms = tokenize(query);
        let mut hits: Vec<(usize, f64, &CorpusEntry)> = self
            .entries
            .iter()
            .enumerate()
            .filter_map(|(i, entry)| {
                let keys: BTreeSet<String> = entry.key_terms.iter().map(|k| k.to_lowercase()).collect();
                let shared = terms.iter().filter(|t| keys.contains(*t)).count();
                (shared > 0).then_some((i, entry.rank_score * shared as f64, entry))
            })
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.into_iter().take(MAX_HITS).map(|(_, s, e)| (s, e)).collect()
    }
}

fn tokenize(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Ranked snippet lookup over a fixed corpus.
pub struct KvSearch {
    spec: ToolSpec,
    corpus: Corpus,
}

impl KvSearch {
    pub fn new(corpus: Corpus) -> Self {
        KvSearch {
            spec: ToolSpec::new(
                "kv_search",
                "Looks up ranked snippets for a query in a fixed corpus.",
                &[("q", ParamType::String)],
            ),
            corpus,
        }
    }
}

impl Tool for KvSearch {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn call(&self, params: &BTreeMap<String, Value>, _: &ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        let query = params.get("q").and_then(Value::as_str).unwrap_or_default();
        let hits: Vec<Value> = self
            .corpus
            .search(query)
            .into_iter()
            .enumerate()
            .map(|(rank, (score, entry))| json!({"rank": rank + 1, "score": score, "snippet": entry.snippet}))
            .collect();
        Ok(ToolOutput::new(Value::Array(hits)))
    }
}
