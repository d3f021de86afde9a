//! Annotation ingestion.
//!
//! Input is newline-delimited JSON, one record per object instance:
//!
//! ```json
//! {"image": "img1", "class": "apple", "attributes": ["red"],
//!  "relations": [{"predicate": "on", "object_class": "table"}]}
//! ```
//!
//! Counting is exact and order-invariant. Names outside the configured
//! vocabulary are tallied in a skip report instead of silently dropped.

use crate::error::{Error, Result};
use crate::graphs::{FrequencyTable, RelationshipTriples, TripleCount};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub class: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub relations: Vec<Relation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub predicate: String,
    pub object_class: String,
}

/// The class/attribute/predicate name lists that define table and graph
/// indices. Order is significant: row `i` of every artifact refers to
/// `classes[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub classes: Vec<String>,
    pub attributes: Vec<String>,
    pub predicates: Vec<String>,
}

impl Vocabulary {
    pub fn new(classes: Vec<String>, attributes: Vec<String>, predicates: Vec<String>) -> Self {
        Vocabulary {
            classes,
            attributes,
            predicates,
        }
    }

    fn index(names: &[String]) -> HashMap<&str, usize> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect()
    }

    /// Infers a vocabulary from the records themselves: every class, plus
    /// the `top_attrs`/`top_preds` most frequent attribute and predicate
    /// names (ties broken alphabetically, `None` keeps everything).
    pub fn infer(
        records: &[AnnotationRecord],
        top_attrs: Option<usize>,
        top_preds: Option<usize>,
    ) -> Self {
        let mut classes: BTreeMap<&str, u64> = BTreeMap::new();
        let mut attrs: BTreeMap<&str, u64> = BTreeMap::new();
        let mut preds: BTreeMap<&str, u64> = BTreeMap::new();
        for r in records {
            *classes.entry(&r.class).or_default() += 1;
            for a in &r.attributes {
                *attrs.entry(a).or_default() += 1;
            }
            for rel in &r.relations {
                *classes.entry(&rel.object_class).or_default() += 1;
                *preds.entry(&rel.predicate).or_default() += 1;
            }
        }
        let rank = |m: BTreeMap<&str, u64>, top: Option<usize>| -> Vec<String> {
            let mut v: Vec<(&str, u64)> = m.into_iter().collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            if let Some(k) = top {
                v.truncate(k);
            }
            v.into_iter().map(|(n, _)| n.to_string()).collect()
        };
        Vocabulary {
            classes: classes.into_keys().map(str::to_string).collect(),
            attributes: rank(attrs, top_attrs),
            predicates: rank(preds, top_preds),
        }
    }
}

/// Names seen in the stream but absent from the vocabulary, with counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub classes: BTreeMap<String, u64>,
    pub attributes: BTreeMap<String, u64>,
    pub predicates: BTreeMap<String, u64>,
    pub records_total: u64,
}

impl SkipReport {
    pub fn total_skipped(&self) -> u64 {
        self.classes.values().sum::<u64>()
            + self.attributes.values().sum::<u64>()
            + self.predicates.values().sum::<u64>()
    }
}

#[derive(Debug, Clone)]
pub struct Ingest {
    pub table: FrequencyTable,
    pub triples: RelationshipTriples,
    pub report: SkipReport,
}

/// Tallies class-attribute counts and relationship triples over the
/// configured vocabulary.
pub fn ingest_annotations(records: &[AnnotationRecord], vocab: &Vocabulary) -> Result<Ingest> {
    if records.is_empty() {
        return Err(Error::Domain("no annotation records: table would be empty".into()));
    }
    let class_idx = Vocabulary::index(&vocab.classes);
    let attr_idx = Vocabulary::index(&vocab.attributes);
    let pred_idx = Vocabulary::index(&vocab.predicates);

    let mut table = FrequencyTable::zeros(vocab.classes.clone(), vocab.attributes.clone());
    let mut triple_counts: BTreeMap<(usize, usize, usize), u64> = BTreeMap::new();
    let mut report = SkipReport {
        records_total: records.len() as u64,
        ..SkipReport::default()
    };

    for r in records {
        let Some(&c) = class_idx.get(r.class.as_str()) else {
            *report.classes.entry(r.class.clone()).or_default() += 1;
            continue;
        };
        for a in &r.attributes {
            match attr_idx.get(a.as_str()) {
                Some(&k) => table.add(c, k, 1),
                None => *report.attributes.entry(a.clone()).or_default() += 1,
            }
        }
        for rel in &r.relations {
            let p = match pred_idx.get(rel.predicate.as_str()) {
                Some(&p) => p,
                None => {
                    *report.predicates.entry(rel.predicate.clone()).or_default() += 1;
                    continue;
                }
            };
            let o = match class_idx.get(rel.object_class.as_str()) {
                Some(&o) => o,
                None => {
                    *report.classes.entry(rel.object_class.clone()).or_default() += 1;
                    continue;
                }
            };
            *triple_counts.entry((c, p, o)).or_default() += 1;
        }
    }

    let triples = RelationshipTriples {
        class_names: vocab.classes.clone(),
        predicate_names: vocab.predicates.clone(),
        entries: triple_counts
            .into_iter()
            .map(|((s, p, o), count)| TripleCount {
                subject: s,
                predicate: p,
                object: o,
                count,
            })
            .collect(),
    };
    Ok(Ingest {
        table,
        triples,
        report,
    })
}

/// Parses newline-delimited JSON records; blank lines are allowed. Parse
/// failures carry the 1-based line number.
pub fn read_annotations(reader: impl BufRead) -> Result<Vec<AnnotationRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn read_annotations_file(path: &std::path::Path) -> Result<Vec<AnnotationRecord>> {
    let file = std::fs::File::open(path)?;
    read_annotations(std::io::BufReader::new(file))
}

/// Serializes records back to newline-delimited JSON.
pub fn write_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Reads one name per line, ignoring blanks and `#` comments.
pub fn read_name_list(path: &std::path::Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(class: &str, attrs: &[&str], rels: &[(&str, &str)]) -> AnnotationRecord {
        AnnotationRecord {
            image: "img".into(),
            class: class.into(),
            attributes: attrs.iter().map(|s| s.to_string()).collect(),
            relations: rels
                .iter()
                .map(|&(p, o)| Relation {
                    predicate: p.into(),
                    object_class: o.into(),
                })
                .collect(),
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(
            vec!["apple".into(), "table".into()],
            vec!["red".into(), "round".into()],
            vec!["on".into()],
        )
    }

    #[test]
    fn single_record_single_count() {
        let recs = vec![record("apple", &["red"], &[])];
        let ingest = ingest_annotations(&recs, &vocab()).unwrap();
        assert_eq!(ingest.table.count(0, 0), 1);
        assert_eq!(
            ingest.table.counts.iter().sum::<u64>(),
            1,
            "all other counts zero"
        );
    }

    #[test]
    fn duplicated_records_double_all_counts() {
        let recs = vec![
            record("apple", &["red", "round"], &[("on", "table")]),
            record("table", &["round"], &[]),
        ];
        let once = ingest_annotations(&recs, &vocab()).unwrap();
        let mut twice_recs = recs.clone();
        twice_recs.extend(recs.clone());
        let twice = ingest_annotations(&twice_recs, &vocab()).unwrap();
        let doubled: Vec<u64> = once.table.counts.iter().map(|&c| c * 2).collect();
        assert_eq!(twice.table.counts, doubled);
        for (a, b) in once.triples.entries.iter().zip(&twice.triples.entries) {
            assert_eq!(b.count, a.count * 2);
        }
    }

    #[test]
    fn unknown_names_are_reported_not_counted() {
        let recs = vec![
            record("apple", &["shiny"], &[("under", "table")]),
            record("martian", &["red"], &[]),
        ];
        let ingest = ingest_annotations(&recs, &vocab()).unwrap();
        assert_eq!(ingest.table.counts.iter().sum::<u64>(), 0);
        assert_eq!(ingest.report.classes.get("martian"), Some(&1));
        assert_eq!(ingest.report.attributes.get("shiny"), Some(&1));
        assert_eq!(ingest.report.predicates.get("under"), Some(&1));
    }

    #[test]
    fn empty_input_is_an_error() {
        let err = ingest_annotations(&[], &vocab()).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn ingest_is_order_invariant() {
        let recs = vec![
            record("apple", &["red"], &[("on", "table")]),
            record("table", &["round"], &[]),
            record("apple", &["round"], &[("on", "table")]),
        ];
        let forward = ingest_annotations(&recs, &vocab()).unwrap();
        let mut reversed = recs.clone();
        reversed.reverse();
        let backward = ingest_annotations(&reversed, &vocab()).unwrap();
        assert_eq!(forward.table, backward.table);
        assert_eq!(forward.triples, backward.triples);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"image\":\"i\",\"class\":\"apple\"}\nnot json\n";
        let err = read_annotations(std::io::Cursor::new(text)).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn round_trip_through_ndjson() {
        let recs = vec![record("apple", &["red"], &[("on", "table")])];
        let text = write_annotations(&recs);
        let parsed = read_annotations(std::io::Cursor::new(text)).unwrap();
        assert_eq!(parsed, recs);
    }

    #[test]
    fn inferred_vocabulary_ranks_by_frequency_then_name() {
        let recs = vec![
            record("b", &["x", "y"], &[]),
            record("a", &["y"], &[("p", "b")]),
            record("a", &["z", "y"], &[]),
        ];
        let v = Vocabulary::infer(&recs, Some(2), None);
        assert_eq!(v.classes, vec!["a".to_string(), "b".to_string()]);
        // y appears 3 times, x and z once each; top-2 keeps y then x.
        assert_eq!(v.attributes, vec!["y".to_string(), "x".to_string()]);
        assert_eq!(v.predicates, vec!["p".to_string()]);
    }
}
