//! The annotation-to-graph pipeline against the committed 50-record
//! fixture: the frequency table must reproduce the hand tally exactly, and
//! both graphs must match a brute-force oracle computed straight from the
//! file, independent of the library's counting path.

use hkrm::annotations::{ingest_annotations, read_annotations_file, Vocabulary};
use hkrm::graphs::{
    build_attribute_graph, build_relationship_graph, AttributeEdgeMode, GraphKind,
};
use std::collections::HashMap;
use std::path::PathBuf;

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/annotations_50.ndjson")
}

fn fixture_vocab() -> Vocabulary {
    Vocabulary::new(
        ["apple", "banana", "bowl", "cup", "table"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        ["red", "yellow", "round", "flat", "shiny"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        ["on", "in", "near"].iter().map(|s| s.to_string()).collect(),
    )
}

// Hand-tallied from the fixture file, row per class, column per attribute.
const EXPECTED_COUNTS: [[u64; 5]; 5] = [
    [8, 0, 6, 0, 2], // apple: red, round, shiny
    [0, 9, 0, 0, 1], // banana: yellow, shiny
    [0, 0, 7, 0, 3], // bowl: round, shiny
    [0, 0, 4, 0, 4], // cup: round, shiny
    [0, 0, 0, 6, 0], // table: flat
];

// Hand-computed: symmetrized co-occurrence counts row-normalized.
// raw: apple->bowl 3, apple->table 5, banana->apple 2, banana->bowl 4,
//      bowl->table 2, cup->table 6.
const EXPECTED_REL: [[f64; 5]; 5] = [
    [0.0, 0.2, 0.3, 0.0, 0.5],
    [1.0 / 3.0, 0.0, 2.0 / 3.0, 0.0, 0.0],
    [1.0 / 3.0, 4.0 / 9.0, 0.0, 0.0, 2.0 / 9.0],
    [0.0, 0.0, 0.0, 0.0, 1.0],
    [5.0 / 13.0, 0.0, 2.0 / 13.0, 6.0 / 13.0, 0.0],
];

#[test]
fn fixture_has_fifty_records() {
    let records = read_annotations_file(&fixture_path()).unwrap();
    assert_eq!(records.len(), 50);
}

#[test]
fn frequency_table_matches_hand_tally_exactly() {
    let records = read_annotations_file(&fixture_path()).unwrap();
    let ingest = ingest_annotations(&records, &fixture_vocab()).unwrap();
    for (c, row) in EXPECTED_COUNTS.iter().enumerate() {
        assert_eq!(ingest.table.row(c), row.as_slice(), "class {c}");
    }
}

#[test]
fn skip_report_matches_hand_tally() {
    let records = read_annotations_file(&fixture_path()).unwrap();
    let ingest = ingest_annotations(&records, &fixture_vocab()).unwrap();
    let r = &ingest.report;
    assert_eq!(r.records_total, 50);
    assert_eq!(r.classes.get("martian"), Some(&3)); // 2 records + 1 relation object
    assert_eq!(r.classes.get("plate"), Some(&2));
    assert_eq!(r.classes.get("fork"), Some(&1));
    assert_eq!(r.attributes.get("bruised"), Some(&1));
    assert_eq!(r.predicates.get("under"), Some(&2));
    assert_eq!(r.total_skipped(), 9);
}

/// Brute-force oracle for the full pipeline: re-reads the file with plain
/// serde_json + HashMap counting, then recomputes both graphs entrywise.
struct Oracle {
    counts: HashMap<(String, String), u64>,
    cooccur: HashMap<(String, String), u64>,
}

fn oracle_tally() -> Oracle {
    let text = std::fs::read_to_string(fixture_path()).unwrap();
    let vocab = fixture_vocab();
    let known_class = |n: &str| vocab.classes.iter().any(|c| c == n);
    let known_attr = |n: &str| vocab.attributes.iter().any(|a| a == n);
    let known_pred = |n: &str| vocab.predicates.iter().any(|p| p == n);
    let mut counts = HashMap::new();
    let mut cooccur = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let class = v["class"].as_str().unwrap().to_string();
        if !known_class(&class) {
            continue;
        }
        for a in v["attributes"].as_array().unwrap() {
            let a = a.as_str().unwrap();
            if known_attr(a) {
                *counts.entry((class.clone(), a.to_string())).or_insert(0) += 1;
            }
        }
        for rel in v["relations"].as_array().unwrap() {
            let p = rel["predicate"].as_str().unwrap();
            let o = rel["object_class"].as_str().unwrap();
            if known_pred(p) && known_class(o) {
                *cooccur.entry((class.clone(), o.to_string())).or_insert(0) += 1;
            }
        }
    }
    Oracle { counts, cooccur }
}

#[test]
fn attribute_graph_matches_brute_force_oracle() {
    let records = read_annotations_file(&fixture_path()).unwrap();
    let vocab = fixture_vocab();
    let ingest = ingest_annotations(&records, &vocab).unwrap();
    let (graph, report) = build_attribute_graph(&ingest.table, AttributeEdgeMode::Divergence).unwrap();
    assert_eq!(graph.kind, GraphKind::Attribute);
    assert!(report.empty_classes.is_empty());

    let oracle = oracle_tally();
    let dist = |class: &str| -> Vec<f64> {
        let row: Vec<f64> = vocab
            .attributes
            .iter()
            .map(|a| *oracle.counts.get(&(class.to_string(), a.clone())).unwrap_or(&0) as f64)
            .collect();
        let s: f64 = row.iter().sum();
        row.into_iter().map(|x| x / s).collect()
    };
    let js = |p: &[f64], q: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (&a, &b) in p.iter().zip(q) {
            let m = 0.5 * (a + b);
            if a > 0.0 {
                acc += 0.5 * a * (a / m).log2();
            }
            if b > 0.0 {
                acc += 0.5 * b * (b / m).log2();
            }
        }
        acc
    };
    for (i, ci) in vocab.classes.iter().enumerate() {
        for (j, cj) in vocab.classes.iter().enumerate() {
            let expect = js(&dist(ci), &dist(cj));
            assert!(
                (graph.edge(i, j) - expect).abs() < 1e-9,
                "attribute edge {ci},{cj}: {} vs {expect}",
                graph.edge(i, j)
            );
        }
    }
}

#[test]
fn relationship_graph_matches_hand_computation_and_oracle() {
    let records = read_annotations_file(&fixture_path()).unwrap();
    let vocab = fixture_vocab();
    let ingest = ingest_annotations(&records, &vocab).unwrap();
    let (graph, report) = build_relationship_graph(&ingest.triples).unwrap();
    assert!(report.zero_rows.is_empty());

    // Frozen hand computation.
    for i in 0..5 {
        for j in 0..5 {
            assert!(
                (graph.edge(i, j) - EXPECTED_REL[i][j]).abs() < 1e-9,
                "rel edge {i},{j}: {} vs {}",
                graph.edge(i, j),
                EXPECTED_REL[i][j]
            );
        }
    }

    // Brute-force oracle from the raw file.
    let oracle = oracle_tally();
    let c = vocab.classes.len();
    let raw = |i: usize, j: usize| -> f64 {
        *oracle
            .cooccur
            .get(&(vocab.classes[i].clone(), vocab.classes[j].clone()))
            .unwrap_or(&0) as f64
    };
    for i in 0..c {
        let row: Vec<f64> = (0..c)
            .map(|j| if i == j { raw(i, i) } else { raw(i, j) + raw(j, i) })
            .collect();
        let s: f64 = row.iter().sum();
        for (j, &v) in row.iter().enumerate() {
            let expect = if s > 0.0 { v / s } else { 0.0 };
            assert!((graph.edge(i, j) - expect).abs() < 1e-9);
        }
        // Rows sum to 1 or 0.
        let total: f64 = (0..c).map(|j| graph.edge(i, j)).sum();
        assert!((total - 1.0).abs() < 1e-9 || total == 0.0);
    }
}

#[test]
fn fixture_rows_sum_to_one_or_zero() {
    let records = read_annotations_file(&fixture_path()).unwrap();
    let ingest = ingest_annotations(&records, &fixture_vocab()).unwrap();
    let (graph, _) = build_relationship_graph(&ingest.triples).unwrap();
    for i in 0..5 {
        let s: f64 = (0..5).map(|j| graph.edge(i, j)).sum();
        assert!((s - 1.0).abs() < 1e-9 || s == 0.0, "row {i} sums to {s}");
    }
}
