//! Dataset records, JSON Lines IO, and synthetic generators.

mod generate;

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{validate_graph, TypedGraph};
use crate::tasks::TaskKind;

pub use generate::{
    entity_names, generate, generate_split, motif_shared, pair_topic_of_graph, pair_topic_of_text, qa_gold_oracle,
    GeneratorSpec, PairVariant, Split, Topic, TOPICS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    pub text: String,
    pub graph: TypedGraph,
    /// Nodes the text refers to.
    pub linked: Vec<usize>,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Choice {
    pub text: String,
    /// Graph node naming this answer, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub graph: TypedGraph,
    /// Nodes mentioned by the question.
    pub linked: Vec<usize>,
    pub choices: Vec<Choice>,
    pub gold: usize,
}

impl QaRecord {
    /// Text scored for choice `i`: question then answer.
    pub fn choice_text(&self, i: usize) -> String {
        format!("{} {}", self.question, self.choices[i].text)
    }

    /// Linked set for choice `i`: the question's nodes plus the choice's node.
    pub fn choice_linked(&self, i: usize) -> Vec<usize> {
        let mut l = self.linked.clone();
        l.extend(self.choices[i].node);
        l
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub text: String,
    pub graph: TypedGraph,
    pub linked: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub id: String,
    pub text: String,
    pub graph: TypedGraph,
    pub linked: Vec<usize>,
    /// Relevance gain; 0 for non-relevant candidates.
    #[serde(default)]
    pub gain: f64,
}

impl Candidate {
    pub fn document(&self) -> Document {
        Document {
            text: self.text.clone(),
            graph: self.graph.clone(),
            linked: self.linked.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalRecord {
    pub id: String,
    pub query: Document,
    pub candidates: Vec<Candidate>,
}

impl RetrievalRecord {
    /// The highest-gain candidate (first on ties), used as the training positive.
    pub fn positive(&self) -> Option<&Candidate> {
        self.candidates
            .iter()
            .filter(|c| c.gain > 0.0)
            .fold(None, |best: Option<&Candidate>, c| match best {
                Some(b) if b.gain >= c.gain => Some(b),
                _ => Some(c),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Qa(QaRecord),
    Pair(PairRecord),
    Retrieval(RetrievalRecord),
}

impl Record {
    pub fn id(&self) -> &str {
        match self {
            Record::Qa(r) => &r.id,
            Record::Pair(r) => &r.id,
            Record::Retrieval(r) => &r.id,
        }
    }

    pub fn task(&self) -> TaskKind {
        match self {
            Record::Qa(_) => TaskKind::Qa,
            Record::Pair(_) => TaskKind::Pair,
            Record::Retrieval(_) => TaskKind::Retrieval,
        }
    }

    /// Every invariant a loaded record must satisfy.
    pub fn validate(&self, max_nodes: usize) -> Result<()> {
        let check_graph = |g: &TypedGraph, linked: &[usize], what: &str| -> Result<()> {
            let v = validate_graph(g);
            if let Some(first) = v.first() {
                return Err(Error::Graph(format!("{what}: {first}")));
            }
            if g.node_count() > max_nodes {
                return Err(Error::Graph(format!(
                    "{what}: {} nodes exceeds the cap of {max_nodes}",
                    g.node_count()
                )));
            }
            if let Some(bad) = linked.iter().find(|&&u| u >= g.node_count()) {
                return Err(Error::Graph(format!("{what}: linked node {bad} not in graph")));
            }
            Ok(())
        };
        match self {
            Record::Pair(r) => check_graph(&r.graph, &r.linked, "graph"),
            Record::Qa(r) => {
                check_graph(&r.graph, &r.linked, "graph")?;
                if r.choices.len() < 2 {
                    return Err(Error::Contract(format!("{}: needs at least two choices", r.id)));
                }
                if r.gold >= r.choices.len() {
                    return Err(Error::Contract(format!("{}: gold {} out of range", r.id, r.gold)));
                }
                if let Some(n) = r.choices.iter().filter_map(|c| c.node).find(|&n| n >= r.graph.node_count()) {
                    return Err(Error::Graph(format!("{}: choice node {n} not in graph", r.id)));
                }
                Ok(())
            }
            Record::Retrieval(r) => {
                check_graph(&r.query.graph, &r.query.linked, "query graph")?;
                let mut ids = BTreeSet::new();
                for c in &r.candidates {
                    check_graph(&c.graph, &c.linked, &format!("candidate {}", c.id))?;
                    if !ids.insert(c.id.as_str()) {
                        return Err(Error::Contract(format!("{}: duplicate candidate id {}", r.id, c.id)));
                    }
                    if !(c.gain >= 0.0 && c.gain.is_finite()) {
                        return Err(Error::Contract(format!("{}: bad gain for {}", r.id, c.id)));
                    }
                }
                if r.positive().is_none() {
                    return Err(Error::Contract(format!("{}: no relevant candidate", r.id)));
                }
                Ok(())
            }
        }
    }
}

/// Strict JSON Lines parse; errors carry the 1-based line number.
pub fn load(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, path)
}

pub fn parse_records(text: &str, path: &Path) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    let lines: Vec<&str> = text.split('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            if i + 1 == lines.len() {
                break;
            }
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                detail: "blank line".into(),
            });
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            detail: e.to_string(),
        })?;
        rec.validate(usize::MAX).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            detail: e.to_string(),
        })?;
        if !ids.insert(rec.id().to_string()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                detail: format!("duplicate record id `{}`", rec.id()),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// One compact JSON object per line, newline-terminated.
pub fn save(path: &Path, records: &[Record]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Contract(format!("serialising {}: {e}", r.id())))?;
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sorted union of relation names over every graph in `records`.
pub fn relation_vocabulary<'a>(records: impl IntoIterator<Item = &'a Record>) -> Vec<String> {
    let mut set = BTreeSet::new();
    let mut add = |g: &TypedGraph| set.extend(g.relations.iter().cloned());
    for r in records {
        match r {
            Record::Pair(p) => add(&p.graph),
            Record::Qa(q) => add(&q.graph),
            Record::Retrieval(q) => {
                add(&q.query.graph);
                for c in &q.candidates {
                    add(&c.graph);
                }
            }
        }
    }
    set.into_iter().collect()
}

#[cfg(test)]
mod tests;
