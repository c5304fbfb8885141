//! Domain types shared across the pipeline.
//!
//! All types are plain immutable values once built; the JSONL shapes used on
//! disk are produced through serde.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array1;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label string of the undetermined relation.
pub const UR_LABEL: &str = "UR";

/// Fixed definition attached to the undetermined relation.
pub const UR_DESCRIPTION: &str = "This relation is used when the relationship between entities is either not applicable or unknown. It serves as a default category when no other relation type clearly applies or when there is insufficient information to determine the relationship.";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub String);

impl RelationId {
    pub fn new(id: impl Into<String>) -> Self {
        RelationId(id.into())
    }

    pub fn undetermined() -> Self {
        RelationId(UR_LABEL.to_string())
    }

    pub fn is_undetermined(&self) -> bool {
        self.0 == UR_LABEL
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RelationId {
    fn from(s: &str) -> Self {
        RelationId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanSource {
    Annotated,
    NerExtracted,
    Merged,
}

/// A token-level entity mention, `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EntitySpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub source: SpanSource,
}

impl EntitySpan {
    pub fn from_tokens(
        tokens: &[String],
        start: usize,
        end: usize,
        source: SpanSource,
    ) -> Result<Self> {
        if start >= end || end > tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "span [{start}, {end}) outside sentence of {} tokens",
                tokens.len()
            )));
        }
        Ok(EntitySpan { text: canonical_text(&tokens[start..end]), start, end, source })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, token: usize) -> bool {
        self.start <= token && token < self.end
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn same_range(&self, other: &EntitySpan) -> bool {
        self.start == other.start && self.end == other.end
    }

    pub fn range(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

/// Canonical surface form of a token slice.
pub fn canonical_text(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstanceKind {
    #[serde(rename = "DR")]
    Determined,
    #[serde(rename = "UR")]
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    OriginalAnnotation,
    PairEnumeration,
}

/// One (sentence, head, tail, label) unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceRecord", into = "InstanceRecord")]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<String>,
    pub head: EntitySpan,
    pub tail: EntitySpan,
    pub label: RelationId,
    pub kind: InstanceKind,
    pub origin: Origin,
}

impl Instance {
    /// Sentence identifier: instance ids are `<sentence>/<pair>`.
    pub fn sentence_id(&self) -> &str {
        self.id.rsplit_once('/').map_or(self.id.as_str(), |(s, _)| s)
    }

    pub fn is_determined(&self) -> bool {
        self.kind == InstanceKind::Determined
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpanRecord {
    start: usize,
    end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<SpanSource>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    tokens: Vec<String>,
    head: SpanRecord,
    tail: SpanRecord,
    label: String,
    kind: InstanceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<Origin>,
}

impl From<Instance> for InstanceRecord {
    fn from(inst: Instance) -> Self {
        let span = |s: EntitySpan| SpanRecord {
            start: s.start,
            end: s.end,
            text: Some(s.text),
            source: Some(s.source),
        };
        InstanceRecord {
            id: inst.id,
            tokens: inst.tokens,
            head: span(inst.head),
            tail: span(inst.tail),
            label: inst.label.0,
            kind: inst.kind,
            origin: Some(inst.origin),
        }
    }
}

impl TryFrom<InstanceRecord> for Instance {
    type Error = String;

    fn try_from(rec: InstanceRecord) -> std::result::Result<Self, String> {
        let span = |r: SpanRecord, which: &str| -> std::result::Result<EntitySpan, String> {
            if r.start >= r.end || r.end > rec.tokens.len() {
                return Err(format!(
                    "{}: {which} span [{}, {}) outside {} tokens",
                    rec.id,
                    r.start,
                    r.end,
                    rec.tokens.len()
                ));
            }
            Ok(EntitySpan {
                text: r.text.unwrap_or_else(|| canonical_text(&rec.tokens[r.start..r.end])),
                start: r.start,
                end: r.end,
                source: r.source.unwrap_or(SpanSource::Annotated),
            })
        };
        let head = span(rec.head.clone(), "head")?;
        let tail = span(rec.tail.clone(), "tail")?;
        let origin = rec.origin.unwrap_or(match rec.kind {
            InstanceKind::Determined => Origin::OriginalAnnotation,
            InstanceKind::Undetermined => Origin::PairEnumeration,
        });
        Ok(Instance {
            id: rec.id,
            tokens: rec.tokens,
            head,
            tail,
            label: RelationId(rec.label),
            kind: rec.kind,
            origin,
        })
    }
}

/// A violated instance invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    SpanOutOfRange { which: &'static str },
    SpanTextMismatch { which: &'static str },
    OverlappingSpans,
    KindLabelMismatch,
    UnknownLabel(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SpanOutOfRange { which } => write!(f, "{which} span out of range"),
            Violation::SpanTextMismatch { which } => write!(f, "{which} span text mismatch"),
            Violation::OverlappingSpans => f.write_str("overlapping spans"),
            Violation::KindLabelMismatch => f.write_str("kind/label mismatch"),
            Violation::UnknownLabel(l) => write!(f, "unknown label `{l}`"),
        }
    }
}

/// Lists every invariant `inst` violates. An empty list means valid.
///
/// `vocab` is the set of known relation ids; the undetermined label is always
/// accepted.
pub fn validate_instance(inst: &Instance, vocab: &BTreeSet<RelationId>) -> Vec<Violation> {
    let mut report = Vec::new();
    let n = inst.tokens.len();
    let mut spans_ok = true;
    for (which, span) in [("head", &inst.head), ("tail", &inst.tail)] {
        if span.start >= span.end || span.end > n {
            report.push(Violation::SpanOutOfRange { which });
            spans_ok = false;
        } else if span.text != canonical_text(&inst.tokens[span.start..span.end]) {
            report.push(Violation::SpanTextMismatch { which });
        }
    }
    if spans_ok && inst.head.overlaps(&inst.tail) {
        report.push(Violation::OverlappingSpans);
    }
    let is_ur = inst.label.is_undetermined();
    match inst.kind {
        InstanceKind::Determined if is_ur => report.push(Violation::KindLabelMismatch),
        InstanceKind::Undetermined if !is_ur => report.push(Violation::KindLabelMismatch),
        _ => {}
    }
    if !is_ur && !vocab.contains(&inst.label) {
        report.push(Violation::UnknownLabel(inst.label.0.clone()));
    }
    report
}

/// A relation and its description sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationInfo {
    pub id: RelationId,
    pub name: String,
    #[serde(rename = "description")]
    pub original_description: String,
    #[serde(rename = "augmented", default)]
    pub augmented_descriptions: Vec<String>,
    #[serde(rename = "candidates", default)]
    pub candidate_descriptions: Vec<String>,
}

impl RelationInfo {
    pub fn new(id: impl Into<String>, name: impl Into<String>, description: impl Into<String>) -> Self {
        RelationInfo {
            id: RelationId(id.into()),
            name: name.into(),
            original_description: description.into(),
            augmented_descriptions: Vec::new(),
            candidate_descriptions: Vec::new(),
        }
    }

    pub fn undetermined() -> Self {
        RelationInfo::new(UR_LABEL, "undetermined relation", UR_DESCRIPTION)
    }

    /// Texts for the raw-description channel: the augmented set, or the
    /// original description when augmentation has not run (always for UR).
    pub fn raw_texts(&self) -> Vec<&str> {
        if self.id.is_undetermined() || self.augmented_descriptions.is_empty() {
            vec![self.original_description.as_str()]
        } else {
            self.augmented_descriptions.iter().map(String::as_str).collect()
        }
    }

    /// Texts for the candidate channel, falling back to the raw channel.
    pub fn candidate_texts(&self) -> Vec<&str> {
        if self.id.is_undetermined() || self.candidate_descriptions.is_empty() {
            self.raw_texts()
        } else {
            self.candidate_descriptions.iter().map(String::as_str).collect()
        }
    }
}

/// One task of the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub index: usize,
    pub relations: Vec<RelationId>,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskDataset>,
    pub n_way: usize,
    pub k_shot: usize,
    pub num_tasks: usize,
}

impl TaskStream {
    /// Checks relation-set disjointness across tasks.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for task in &self.tasks {
            for r in &task.relations {
                if r.is_undetermined() {
                    continue;
                }
                if !seen.insert(r.clone()) {
                    return Err(Error::DatasetInconsistency(format!(
                        "relation `{r}` appears in more than one task"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Memory, prototypes and description sets carried across tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualState {
    pub memory: BTreeMap<RelationId, Vec<Instance>>,
    pub prototypes: BTreeMap<RelationId, Array1<f64>>,
    pub seen: BTreeSet<RelationId>,
    pub relations: BTreeMap<RelationId, RelationInfo>,
    pub memory_size: usize,
}

impl ContinualState {
    pub fn new(memory_size: usize) -> Self {
        let mut relations = BTreeMap::new();
        relations.insert(RelationId::undetermined(), RelationInfo::undetermined());
        ContinualState {
            memory: BTreeMap::new(),
            prototypes: BTreeMap::new(),
            seen: BTreeSet::new(),
            relations,
            memory_size,
        }
    }

    pub fn memory_instances(&self) -> impl Iterator<Item = &Instance> {
        self.memory.values().flatten()
    }

    pub fn memory_len(&self) -> usize {
        self.memory.values().map(Vec::len).sum()
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::json("serialize", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
