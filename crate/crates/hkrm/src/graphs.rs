//! Prior class-to-class graphs from annotation statistics.
//!
//! Two kinds are built here. Attribute graphs compare the per-class
//! attribute frequency distributions with Jensen-Shannon divergence (base-2
//! logs, so values live in [0, 1] and disjoint support hits exactly 1).
//! Relationship graphs count how often class pairs appear in relation
//! triples, symmetrize the counts, and row-normalize.
//!
//! Graphs serialize as a one-line JSON header followed by the row-major
//! float64 little-endian payload; the payload round-trips bitwise.

use crate::error::{Error, Result};
use crate::io_util::atomic_write;
use crate::matrix::DenseMatrix;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

pub const GRAPH_FORMAT_VERSION: u32 = 1;

/// C×K table of class-attribute (or class-relationship) co-occurrence
/// counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub class_names: Vec<String>,
    pub attribute_names: Vec<String>,
    /// Row-major C×K.
    pub counts: Vec<u64>,
}

impl FrequencyTable {
    pub fn zeros(class_names: Vec<String>, attribute_names: Vec<String>) -> Self {
        let counts = vec![0; class_names.len() * attribute_names.len()];
        FrequencyTable {
            class_names,
            attribute_names,
            counts,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    #[inline]
    pub fn count(&self, class: usize, attr: usize) -> u64 {
        self.counts[class * self.num_attributes() + attr]
    }

    #[inline]
    pub fn add(&mut self, class: usize, attr: usize, n: u64) {
        let k = self.num_attributes();
        self.counts[class * k + attr] += n;
    }

    pub fn row(&self, class: usize) -> &[u64] {
        let k = self.num_attributes();
        &self.counts[class * k..(class + 1) * k]
    }
}

/// A per-class probability distribution over attributes. Classes without a
/// single annotation are flagged empty instead of dividing by zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub probs: Vec<f64>,
    pub empty: bool,
}

/// Normalizes one row of the frequency table.
pub fn class_distribution(table: &FrequencyTable, class_id: usize) -> ClassDistribution {
    assert!(class_id < table.num_classes(), "class_id {} out of range", class_id);
    let row = table.row(class_id);
    let total: u64 = row.iter().sum();
    if total == 0 {
        return ClassDistribution {
            probs: vec![0.0; row.len()],
            empty: true,
        };
    }
    let t = total as f64;
    ClassDistribution {
        probs: row.iter().map(|&c| c as f64 / t).collect(),
        empty: false,
    }
}

/// Jensen-Shannon divergence with base-2 logarithms:
/// `JS(p,q) = ½·KL(p‖m) + ½·KL(q‖m)` with `m = (p+q)/2`. Terms with zero
/// mass contribute nothing. The result is clamped to [0, 1] to absorb
/// rounding at the boundaries.
pub fn js_divergence(p: &ClassDistribution, q: &ClassDistribution) -> Result<f64> {
    if p.empty || q.empty {
        return Err(Error::Domain(
            "js_divergence of an empty distribution".into(),
        ));
    }
    if p.probs.len() != q.probs.len() {
        return Err(Error::shape("js_divergence", p.probs.len(), q.probs.len()));
    }
    let mut acc = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            acc += 0.5 * b * (b / m).log2();
        }
    }
    Ok(acc.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Attribute,
    Relationship,
}

/// How attribute divergences map to edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeEdgeMode {
    /// Edge = JS divergence itself (higher = more dissimilar).
    #[default]
    Divergence,
    /// Edge = 1 − JS (higher = more similar).
    Similarity,
}

/// C×C class-to-class edge weights, the supervision target for learned
/// region edges.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorGraph {
    pub kind: GraphKind,
    pub class_names: Vec<String>,
    /// C×C, symmetric before any row normalization.
    pub edges: DenseMatrix,
}

impl PriorGraph {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn edge(&self, i: usize, j: usize) -> f64 {
        self.edges.at(i, j)
    }
}

/// Classes skipped or degenerate during graph construction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphReport {
    /// Classes with no annotations; every pair touching them got edge 0.
    pub empty_classes: Vec<String>,
    /// Relationship rows that summed to zero and were left unnormalized.
    pub zero_rows: Vec<String>,
}

/// Attribute graph: pairwise JS divergence (or 1−JS in similarity mode)
/// between per-class attribute distributions. Pairs involving empty classes
/// get edge 0 and the class is reported.
pub fn build_attribute_graph(
    table: &FrequencyTable,
    mode: AttributeEdgeMode,
) -> Result<(PriorGraph, GraphReport)> {
    let c = table.num_classes();
    if c < 2 {
        return Err(Error::Domain(format!(
            "attribute graph needs at least 2 classes, got {c}"
        )));
    }
    let dists: Vec<ClassDistribution> = (0..c).map(|i| class_distribution(table, i)).collect();
    if dists.iter().all(|d| d.empty) {
        return Err(Error::Domain("all classes are empty".into()));
    }
    let mut edges = DenseMatrix::zeros(c, c);
    for i in 0..c {
        for j in i..c {
            if dists[i].empty || dists[j].empty {
                continue;
            }
            let js = js_divergence(&dists[i], &dists[j])?;
            let w = match mode {
                AttributeEdgeMode::Divergence => js,
                AttributeEdgeMode::Similarity => 1.0 - js,
            };
            *edges.at_mut(i, j) = w;
            *edges.at_mut(j, i) = w;
        }
    }
    let report = GraphReport {
        empty_classes: (0..c)
            .filter(|&i| dists[i].empty)
            .map(|i| table.class_names[i].clone())
            .collect(),
        zero_rows: Vec::new(),
    };
    Ok((
        PriorGraph {
            kind: GraphKind::Attribute,
            class_names: table.class_names.clone(),
            edges,
        },
        report,
    ))
}

/// Subject–predicate–object triples with occurrence counts. Predicates are
/// retained so per-predicate breakdowns stay inspectable; the graph builder
/// sums over them with uniform weight.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationshipTriples {
    pub class_names: Vec<String>,
    pub predicate_names: Vec<String>,
    /// Sorted by (subject, predicate, object).
    pub entries: Vec<TripleCount>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripleCount {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
    pub count: u64,
}

impl RelationshipTriples {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total_count(&self) -> u64 {
        self.entries.iter().map(|t| t.count).sum()
    }
}

/// Relationship graph: symmetrized co-occurrence counts, row-normalized.
/// `raw[i][j]` collapses every predicate linking `i` to `j`; the
/// symmetrization adds the transpose while counting the diagonal once.
pub fn build_relationship_graph(triples: &RelationshipTriples) -> Result<(PriorGraph, GraphReport)> {
    if triples.entries.is_empty() {
        return Err(Error::Domain("no relationship triples".into()));
    }
    let c = triples.num_classes();
    let mut raw = DenseMatrix::zeros(c, c);
    for t in &triples.entries {
        assert!(t.subject < c && t.object < c, "triple class id out of range");
        *raw.at_mut(t.subject, t.object) += t.count as f64;
    }
    // raw + rawᵀ, diagonal counted once.
    let mut sym = DenseMatrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            let v = if i == j {
                raw.at(i, i)
            } else {
                raw.at(i, j) + raw.at(j, i)
            };
            *sym.at_mut(i, j) = v;
        }
    }
    let mut zero_rows = Vec::new();
    for i in 0..c {
        let s: f64 = sym.row(i).iter().sum();
        if s > 0.0 {
            for x in sym.row_mut(i) {
                *x /= s;
            }
        } else {
            zero_rows.push(triples.class_names[i].clone());
        }
    }
    Ok((
        PriorGraph {
            kind: GraphKind::Relationship,
            class_names: triples.class_names.clone(),
            edges: sym,
        },
        GraphReport {
            empty_classes: Vec::new(),
            zero_rows,
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphHeader {
    format: String,
    version: u32,
    kind: GraphKind,
    num_classes: usize,
    class_names: Vec<String>,
    payload: String,
}

/// One-line JSON header, newline, then `C*C` little-endian f64.
pub fn save_graph(graph: &PriorGraph, path: &Path) -> Result<()> {
    let header = GraphHeader {
        format: "prior-graph".into(),
        version: GRAPH_FORMAT_VERSION,
        kind: graph.kind,
        num_classes: graph.num_classes(),
        class_names: graph.class_names.clone(),
        payload: "f64le".into(),
    };
    let mut bytes = serde_json::to_string(&header)
        .expect("header serializes")
        .into_bytes();
    bytes.push(b'\n');
    for &x in graph.edges.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    atomic_write(path, &bytes)
}

pub fn load_graph(path: &Path) -> Result<PriorGraph> {
    let origin = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(&origin, "missing header line"))?;
    let header: GraphHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(&origin, format!("bad header: {e}")))?;
    if header.format != "prior-graph" {
        return Err(Error::format(&origin, "not a prior-graph file"));
    }
    if header.version != GRAPH_FORMAT_VERSION {
        return Err(Error::format(
            &origin,
            format!(
                "unsupported version {}, expected {GRAPH_FORMAT_VERSION}",
                header.version
            ),
        ));
    }
    let c = header.num_classes;
    if header.class_names.len() != c {
        return Err(Error::format(&origin, "class name count mismatch"));
    }
    let payload = &bytes[nl + 1..];
    let expected = c * c * 8;
    if payload.len() != expected {
        return Err(Error::format(
            &origin,
            format!("truncated payload: {} bytes, expected {expected}", payload.len()),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
        .collect();
    Ok(PriorGraph {
        kind: header.kind,
        class_names: header.class_names,
        edges: DenseMatrix::from_vec(c, c, data),
    })
}

/// CSV rendering for inspection: header row of class names, then one row
/// per class prefixed with its name.
pub fn graph_to_csv(graph: &PriorGraph) -> String {
    let mut out = String::from("class");
    for name in &graph.class_names {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for i in 0..graph.num_classes() {
        let _ = write!(out, "{}", graph.class_names[i]);
        for j in 0..graph.num_classes() {
            let _ = write!(out, ",{}", graph.edges.at(i, j));
        }
        out.push('\n');
    }
    out
}
