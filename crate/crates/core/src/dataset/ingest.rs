//! Readers for FewRel- and TACRED-shaped benchmark files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use super::build::{AnnotatedSentence, Annotation};
use crate::data::{RelationId, RelationInfo};
use crate::error::{Error, Result};

/// FewRel layout: `{"P931": [{"tokens": [...], "h": [name, id, [[i, ...]]], "t": [...]}, ...]}`.
pub fn parse_fewrel(json: &str) -> Result<Vec<AnnotatedSentence>> {
    let root: BTreeMap<String, Vec<Value>> =
        serde_json::from_str(json).map_err(|e| Error::json("fewrel", e))?;
    let mut out = Vec::new();
    for (rel, items) in root {
        for (i, item) in items.iter().enumerate() {
            let tokens: Vec<String> = serde_json::from_value(item["tokens"].clone())
                .map_err(|e| Error::json(format!("fewrel {rel}[{i}].tokens"), e))?;
            let head = fewrel_span(&item["h"])
                .ok_or_else(|| Error::DatasetInconsistency(format!("fewrel {rel}[{i}]: bad head")))?;
            let tail = fewrel_span(&item["t"])
                .ok_or_else(|| Error::DatasetInconsistency(format!("fewrel {rel}[{i}]: bad tail")))?;
            out.push(AnnotatedSentence {
                id: format!("fewrel-{rel}-{i}"),
                tokens,
                annotations: vec![Annotation { head, tail, relation: RelationId::new(rel.clone()) }],
            });
        }
    }
    Ok(out)
}

fn fewrel_span(v: &Value) -> Option<(usize, usize)> {
    let mention = v.get(2)?.get(0)?.as_array()?;
    let idx: Vec<usize> = mention.iter().filter_map(|x| x.as_u64().map(|x| x as usize)).collect();
    let start = *idx.iter().min()?;
    let end = *idx.iter().max()? + 1;
    Some((start, end))
}

#[derive(Deserialize)]
struct TacredRecord {
    id: String,
    token: Vec<String>,
    subj_start: usize,
    subj_end: usize,
    obj_start: usize,
    obj_end: usize,
    relation: String,
}

/// TACRED layout: an array of records with inclusive subject/object bounds.
/// `no_relation` records are dropped.
pub fn parse_tacred(json: &str) -> Result<Vec<AnnotatedSentence>> {
    let records: Vec<TacredRecord> = serde_json::from_str(json).map_err(|e| Error::json("tacred", e))?;
    Ok(records
        .into_iter()
        .filter(|r| r.relation != "no_relation")
        .map(|r| AnnotatedSentence {
            id: format!("tacred-{}", r.id),
            tokens: r.token,
            annotations: vec![Annotation {
                head: (r.subj_start, r.subj_end + 1),
                tail: (r.obj_start, r.obj_end + 1),
                relation: RelationId::new(r.relation),
            }],
        })
        .collect())
}

/// FewRel `pid2name.json`: `{"P931": ["name", "description"], ...}`.
pub fn parse_pid2name(json: &str) -> Result<Vec<RelationInfo>> {
    let root: BTreeMap<String, Vec<String>> =
        serde_json::from_str(json).map_err(|e| Error::json("pid2name", e))?;
    Ok(root
        .into_iter()
        .map(|(id, v)| {
            let name = v.first().cloned().unwrap_or_else(|| id.clone());
            let desc = v.get(1).cloned().unwrap_or_else(|| name.clone());
            RelationInfo::new(id, name, desc)
        })
        .collect())
}

/// Relation stubs for labels without a description file: the label, with
/// separators replaced, doubles as name and description.
pub fn relations_from_labels<'a>(labels: impl IntoIterator<Item = &'a RelationId>) -> Vec<RelationInfo> {
    let mut seen = BTreeMap::new();
    for l in labels {
        if l.is_undetermined() {
            continue;
        }
        let name = l.0.replace([':', '_', '/'], " ").trim().to_string();
        seen.entry(l.clone()).or_insert_with(|| RelationInfo::new(l.0.clone(), name.clone(), name));
    }
    seen.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    FewRel,
    Tacred,
    /// One [`AnnotatedSentence`] per line.
    Sentences,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fewrel" => Ok(InputFormat::FewRel),
            "tacred" => Ok(InputFormat::Tacred),
            "sentences" | "jsonl" => Ok(InputFormat::Sentences),
            other => Err(Error::InvalidArgument(format!("unknown input format `{other}`"))),
        }
    }
}

pub fn load_sentences(path: &Path, format: InputFormat) -> Result<Vec<AnnotatedSentence>> {
    match format {
        InputFormat::Sentences => crate::data::read_jsonl(path),
        InputFormat::FewRel | InputFormat::Tacred => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            if format == InputFormat::FewRel {
                parse_fewrel(&text)
            } else {
                parse_tacred(&text)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fewrel_record() {
        let json = r#"{"P26": [{"tokens": ["Ann", "married", "Bob", "Smith", "."],
            "h": ["ann", "Q1", [[0]]], "t": ["bob smith", "Q2", [[2, 3]]]}]}"#;
        let s = parse_fewrel(json).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].annotations[0].head, (0, 1));
        assert_eq!(s[0].annotations[0].tail, (2, 4));
        assert_eq!(s[0].annotations[0].relation, RelationId::new("P26"));
    }

    #[test]
    fn tacred_drops_no_relation_and_converts_inclusive_bounds() {
        let json = r#"[
          {"id": "a", "token": ["X", "founded", "Y"], "subj_start": 0, "subj_end": 0, "obj_start": 2, "obj_end": 2, "relation": "org:founded_by"},
          {"id": "b", "token": ["X", "and", "Y"], "subj_start": 0, "subj_end": 0, "obj_start": 2, "obj_end": 2, "relation": "no_relation"}
        ]"#;
        let s = parse_tacred(json).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].annotations[0].tail, (2, 3));
        let rels = relations_from_labels(s.iter().map(|x| &x.annotations[0].relation));
        assert_eq!(rels[0].name, "org founded by");
    }

    #[test]
    fn pid2name() {
        let rels = parse_pid2name(r#"{"P931": ["place served by transport hub", "territorial entity served by this hub"]}"#).unwrap();
        assert_eq!(rels[0].name, "place served by transport hub");
        assert_eq!(rels[0].original_description, "territorial entity served by this hub");
    }
}
