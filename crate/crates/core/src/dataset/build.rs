//! Entity merging, exhaustive pair enumeration and dataset statistics.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};

use super::ner::{extract_entities, NerInterface};
use crate::data::{EntitySpan, Instance, InstanceKind, Origin, RelationId, SpanSource};
use crate::error::{Error, Result};

/// A benchmark-annotated relation mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub head: (usize, usize),
    pub tail: (usize, usize),
    pub relation: RelationId,
}

/// A benchmark sentence with its annotations, before pair enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub annotations: Vec<Annotation>,
}

impl AnnotatedSentence {
    pub fn annotated_spans(&self) -> Result<Vec<EntitySpan>> {
        let mut spans = Vec::new();
        for a in &self.annotations {
            for (s, e) in [a.head, a.tail] {
                let span = EntitySpan::from_tokens(&self.tokens, s, e, SpanSource::Annotated)?;
                if !spans.iter().any(|x: &EntitySpan| x.same_range(&span)) {
                    spans.push(span);
                }
            }
        }
        Ok(spans)
    }
}

/// A sentence after entity merging and pair labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub entities: Vec<EntitySpan>,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpenDataset {
    pub sentences: Vec<OpenSentence>,
}

impl OpenDataset {
    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.sentences.iter().flat_map(|s| s.instances.iter())
    }

    /// Regroups flat instances by sentence id. Entities are recovered from the
    /// instance spans, so sentences with fewer than two entities are absent.
    pub fn from_instances(instances: Vec<Instance>) -> Self {
        let mut grouped: BTreeMap<String, OpenSentence> = BTreeMap::new();
        for inst in instances {
            let sentence = grouped.entry(inst.sentence_id().to_string()).or_insert_with(|| OpenSentence {
                id: inst.sentence_id().to_string(),
                tokens: inst.tokens.clone(),
                entities: Vec::new(),
                instances: Vec::new(),
            });
            for span in [&inst.head, &inst.tail] {
                if !sentence.entities.iter().any(|e| e.same_range(span)) {
                    sentence.entities.push(span.clone());
                }
            }
            sentence.instances.push(inst);
        }
        let mut sentences: Vec<OpenSentence> = grouped.into_values().collect();
        for s in &mut sentences {
            s.entities.sort_by_key(EntitySpan::range);
        }
        OpenDataset { sentences }
    }
}

/// Union of extracted and annotated spans where annotations win.
///
/// Each annotated span is kept verbatim; an extracted span overlapping any
/// annotated span is dropped in its favour (the annotated span is then tagged
/// `Merged`). Surviving extracted spans that overlap one another keep the
/// earliest. Output is sorted by `(start, end)` with exact duplicates removed.
pub fn merge_entities(extracted: &[EntitySpan], annotated: &[EntitySpan]) -> Vec<EntitySpan> {
    let mut out: Vec<EntitySpan> = Vec::new();
    for a in annotated {
        if out.iter().any(|x| x.same_range(a)) {
            continue;
        }
        let absorbed = extracted
            .iter()
            .any(|e| match e.source {
                SpanSource::NerExtracted => e.overlaps(a),
                SpanSource::Merged => e.same_range(a),
                SpanSource::Annotated => false,
            });
        let mut span = a.clone();
        span.source = if absorbed { SpanSource::Merged } else { a.source };
        out.push(span);
    }
    let mut survivors: Vec<&EntitySpan> =
        extracted.iter().filter(|e| !annotated.iter().any(|a| a.overlaps(e))).collect();
    survivors.sort_by_key(|e| e.range());
    let mut kept: Vec<EntitySpan> = Vec::new();
    for e in survivors {
        if !kept.iter().any(|k| k.overlaps(e)) {
            kept.push(e.clone());
        }
    }
    out.extend(kept);
    out.sort_by_key(EntitySpan::range);
    out
}

/// Labels every entity pair of a sentence.
///
/// One DR instance per annotation (ordered as annotated) followed by one UR
/// instance per unordered pair of `merged` spans that is not annotated in
/// either order; the earlier span becomes the UR head.
pub fn enumerate_pairs(
    sentence_id: &str,
    tokens: &[String],
    merged: &[EntitySpan],
    annotations: &[Annotation],
) -> Result<Vec<Instance>> {
    let find = |range: (usize, usize)| -> Result<&EntitySpan> {
        merged.iter().find(|e| e.range() == range).ok_or_else(|| {
            Error::DatasetInconsistency(format!(
                "{sentence_id}: annotated span {range:?} missing from merged entities"
            ))
        })
    };
    let mut out = Vec::new();
    let mut annotated_pairs = BTreeSet::new();
    for a in annotations {
        let head = find(a.head)?;
        let tail = find(a.tail)?;
        if head.overlaps(tail) {
            return Err(Error::DatasetInconsistency(format!(
                "{sentence_id}: annotated head {:?} overlaps tail {:?}",
                a.head, a.tail
            )));
        }
        annotated_pairs.insert((a.head, a.tail));
        annotated_pairs.insert((a.tail, a.head));
        out.push(Instance {
            id: format!("{sentence_id}/{}", out.len()),
            tokens: tokens.to_vec(),
            head: head.clone(),
            tail: tail.clone(),
            label: a.relation.clone(),
            kind: InstanceKind::Determined,
            origin: Origin::OriginalAnnotation,
        });
    }
    let mut sorted: Vec<&EntitySpan> = merged.iter().collect();
    sorted.sort_by_key(|e| e.range());
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            if annotated_pairs.contains(&(a.range(), b.range())) || a.overlaps(b) {
                continue;
            }
            out.push(Instance {
                id: format!("{sentence_id}/{}", out.len()),
                tokens: tokens.to_vec(),
                head: (*a).clone(),
                tail: (*b).clone(),
                label: RelationId::undetermined(),
                kind: InstanceKind::Undetermined,
                origin: Origin::PairEnumeration,
            });
        }
    }
    Ok(out)
}

/// Extract, merge and enumerate for every sentence.
///
/// NER failures are logged and the sentence keeps its annotated entities only.
pub fn build_open_dataset(sentences: &[AnnotatedSentence], ner: &dyn NerInterface) -> Result<OpenDataset> {
    let mut out = Vec::with_capacity(sentences.len());
    for s in sentences {
        if s.tokens.is_empty() {
            warn!("{}: empty sentence skipped", s.id);
            continue;
        }
        let annotated = s.annotated_spans()?;
        let extracted = extract_entities(&s.tokens, ner).unwrap_or_else(|e| {
            warn!("{}: {e}; keeping annotated entities only", s.id);
            Vec::new()
        });
        let entities = merge_entities(&extracted, &annotated);
        let instances = enumerate_pairs(&s.id, &s.tokens, &entities, &s.annotations)?;
        out.push(OpenSentence { id: s.id.clone(), tokens: s.tokens.clone(), entities, instances });
    }
    Ok(OpenDataset { sentences: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub dr_count: usize,
    pub ur_count: usize,
    /// Mean merged-entity count per sentence.
    pub avg_entities_per_sample: f64,
}

pub fn compute_stats(dataset: &OpenDataset) -> DatasetStats {
    let mut dr = 0;
    let mut ur = 0;
    for inst in dataset.instances() {
        match inst.kind {
            InstanceKind::Determined => dr += 1,
            InstanceKind::Undetermined => ur += 1,
        }
    }
    let n = dataset.sentences.len();
    let entities: usize = dataset.sentences.iter().map(|s| s.entities.len()).sum();
    DatasetStats {
        dr_count: dr,
        ur_count: ur,
        avg_entities_per_sample: if n == 0 { 0.0 } else { entities as f64 / n as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ner::Gazetteer;
    use crate::tokenize::{Tokenizer, WhitespaceTokenizer};
    use proptest::prelude::*;

    fn span(s: usize, e: usize, source: SpanSource) -> EntitySpan {
        let tokens: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
        EntitySpan::from_tokens(&tokens, s, e, source).unwrap()
    }

    fn ranges(v: &[EntitySpan]) -> Vec<(usize, usize)> {
        v.iter().map(EntitySpan::range).collect()
    }

    #[test]
    fn merge_replaces_overlapping_extracted() {
        let out = merge_entities(&[span(0, 2, SpanSource::NerExtracted)], &[span(1, 3, SpanSource::Annotated)]);
        assert_eq!(ranges(&out), [(1, 3)]);
        assert_eq!(out[0].source, SpanSource::Merged);
    }

    #[test]
    fn merge_keeps_disjoint_union() {
        let out = merge_entities(&[span(5, 6, SpanSource::NerExtracted)], &[span(0, 2, SpanSource::Annotated)]);
        assert_eq!(ranges(&out), [(0, 2), (5, 6)]);
    }

    #[test]
    fn merge_dedups() {
        let e = span(0, 2, SpanSource::NerExtracted);
        let out = merge_entities(&[e.clone(), e], &[]);
        assert_eq!(ranges(&out), [(0, 2)]);
    }

    fn abc() -> (Vec<String>, Vec<EntitySpan>) {
        let tokens: Vec<String> = "A x B y C".split(' ').map(String::from).collect();
        let ents = [(0, 1), (2, 3), (4, 5)]
            .iter()
            .map(|&(s, e)| EntitySpan::from_tokens(&tokens, s, e, SpanSource::Annotated).unwrap())
            .collect();
        (tokens, ents)
    }

    #[test]
    fn enumerate_one_annotation_three_entities() {
        let (tokens, ents) = abc();
        let ann = [Annotation { head: (0, 1), tail: (2, 3), relation: "r1".into() }];
        let out = enumerate_pairs("s", &tokens, &ents, &ann).unwrap();
        let dr: Vec<_> = out.iter().filter(|i| i.is_determined()).collect();
        let ur: Vec<_> = out.iter().filter(|i| !i.is_determined()).collect();
        assert_eq!(dr.len(), 1);
        assert_eq!(ur.len(), 2);
        let pairs: Vec<(&str, &str)> = ur.iter().map(|i| (i.head.text.as_str(), i.tail.text.as_str())).collect();
        assert_eq!(pairs, [("A", "C"), ("B", "C")]);
        assert!(out.iter().all(|i| i.tokens == tokens));

        let ds = OpenDataset {
            sentences: vec![OpenSentence { id: "s".into(), tokens, entities: ents, instances: out }],
        };
        let stats = compute_stats(&ds);
        assert_eq!((stats.dr_count, stats.ur_count), (1, 2));
        assert_eq!(stats.avg_entities_per_sample, 3.0);
    }

    #[test]
    fn enumerate_both_orders_annotated() {
        let (tokens, ents) = abc();
        let ents = &ents[..2];
        let ann = [
            Annotation { head: (0, 1), tail: (2, 3), relation: "r1".into() },
            Annotation { head: (2, 3), tail: (0, 1), relation: "r2".into() },
        ];
        let out = enumerate_pairs("s", &tokens, ents, &ann).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(Instance::is_determined));
        assert_eq!(out[1].head.text, "B");
    }

    #[test]
    fn enumerate_rejects_unknown_annotated_span() {
        let (tokens, ents) = abc();
        let ann = [Annotation { head: (0, 1), tail: (3, 4), relation: "r1".into() }];
        assert!(matches!(
            enumerate_pairs("s", &tokens, &ents, &ann),
            Err(Error::DatasetInconsistency(_))
        ));
    }

    #[test]
    fn worked_example_labels() {
        let text = "Spearhafoc was succeeded by William the Norman and was the last Bishop of London of English descent for an extended period, likely until Roger Niger's appointment in 1228.";
        let tokens = WhitespaceTokenizer.words(text);
        let pos = |w: &str| tokens.iter().position(|t| t == w).unwrap();
        let bishop = pos("Bishop");
        let sentence = AnnotatedSentence {
            id: "ex".into(),
            tokens: tokens.clone(),
            annotations: vec![Annotation {
                head: (0, 1),
                tail: (bishop, bishop + 3),
                relation: "location of formation".into(),
            }],
        };
        let ner = Gazetteer::new(["Roger Niger's", "Spearhafoc", "London"], &WhitespaceTokenizer);
        let ds = build_open_dataset(&[sentence], &ner).unwrap();
        let find = |a: &str, b: &str| {
            ds.instances()
                .find(|i| {
                    (i.head.text == a && i.tail.text == b) || (i.head.text == b && i.tail.text == a)
                })
                .cloned()
                .unwrap()
        };
        let dr = find("Spearhafoc", "Bishop of London");
        assert_eq!(dr.kind, InstanceKind::Determined);
        let ur = find("Roger Niger's", "Spearhafoc");
        assert_eq!(ur.kind, InstanceKind::Undetermined);
        // "London" overlapped the annotated span and was absorbed
        assert_eq!(ds.sentences[0].entities.len(), 3);
    }

    #[test]
    fn stats_ten_sentences_four_entities() {
        let mut sentences = Vec::new();
        for k in 0..10 {
            let tokens: Vec<String> = "A x B y C z D".split(' ').map(String::from).collect();
            sentences.push(AnnotatedSentence {
                id: format!("s{k}"),
                tokens,
                annotations: vec![Annotation { head: (0, 1), tail: (2, 3), relation: "r".into() }],
            });
        }
        let ner = Gazetteer::new(["C", "D"], &WhitespaceTokenizer);
        let stats = compute_stats(&build_open_dataset(&sentences, &ner).unwrap());
        assert_eq!((stats.dr_count, stats.ur_count), (10, 50));
        assert_eq!(stats.avg_entities_per_sample, 4.0);
    }

    #[test]
    fn stats_of_empty_dataset() {
        let s = compute_stats(&OpenDataset::default());
        assert_eq!((s.dr_count, s.ur_count, s.avg_entities_per_sample), (0, 0, 0.0));
    }

    fn arb_spans() -> impl Strategy<Value = Vec<(usize, usize)>> {
        prop::collection::vec((0usize..18, 1usize..3), 0..8)
            .prop_map(|v| v.into_iter().map(|(s, l)| (s, (s + l).min(20))).collect())
    }

    proptest! {
        #[test]
        fn merge_is_idempotent(ext in arb_spans(), ann in arb_spans()) {
            let extracted: Vec<_> = ext.iter().map(|&(s, e)| span(s, e, SpanSource::NerExtracted)).collect();
            let annotated: Vec<_> = ann.iter().map(|&(s, e)| span(s, e, SpanSource::Annotated)).collect();
            let once = merge_entities(&extracted, &annotated);
            let twice = merge_entities(&once, &annotated);
            prop_assert_eq!(&once, &twice);
            for a in &annotated {
                prop_assert!(once.iter().any(|x| x.same_range(a)));
            }
        }

        #[test]
        fn ur_count_is_pairs_minus_annotated(m in 2usize..8, picks in prop::collection::vec((0usize..8, 0usize..8), 0..6)) {
            let tokens: Vec<String> = (0..2 * m).map(|i| format!("w{i}")).collect();
            let ents: Vec<EntitySpan> = (0..m)
                .map(|i| EntitySpan::from_tokens(&tokens, 2 * i, 2 * i + 1, SpanSource::Annotated).unwrap())
                .collect();
            let mut anns = Vec::new();
            let mut unordered = BTreeSet::new();
            for (a, b) in picks {
                let (a, b) = (a % m, b % m);
                if a == b || !unordered.insert((a.min(b), a.max(b))) {
                    continue;
                }
                anns.push(Annotation { head: ents[a].range(), tail: ents[b].range(), relation: "r".into() });
            }
            let out = enumerate_pairs("s", &tokens, &ents, &anns).unwrap();
            // brute force over all ordered index pairs
            let mut brute_ur = 0;
            for i in 0..m {
                for j in 0..m {
                    if i < j && !unordered.contains(&(i, j)) {
                        brute_ur += 1;
                    }
                }
            }
            let ur = out.iter().filter(|i| !i.is_determined()).count();
            prop_assert_eq!(ur, brute_ur);
            prop_assert_eq!(ur, m * (m - 1) / 2 - anns.len());
        }
    }
}
