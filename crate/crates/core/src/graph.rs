// SPDX-License-Identifier: MIT OR Apache-2.0

//! The attribution graph: a causal adjacency matrix built from an
//! attribution table, plus display-only pruning and DOT export.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::AttributionTable;

/// Relative tolerance for row-sum checks.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// How raw table rows are turned into incoming edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum NormalizationMode {
    /// Clamp negatives to zero and divide by the row sum (`sum1`).
    #[default]
    #[serde(rename = "sum1")]
    RowStochastic,
    /// Clamp negatives to zero only (`clamp`).
    #[serde(rename = "clamp")]
    NonNegativeOnly,
    /// Use the raw scores unchanged (`none`).
    #[serde(rename = "none")]
    RawPassthrough,
}

impl NormalizationMode {
    /// All modes, default first.
    pub const ALL: [NormalizationMode; 3] = [
        NormalizationMode::RowStochastic,
        NormalizationMode::NonNegativeOnly,
        NormalizationMode::RawPassthrough,
    ];

    /// Short name used on the command line and in files.
    pub fn as_str(self) -> &'static str {
        match self {
            NormalizationMode::RowStochastic => "sum1",
            NormalizationMode::NonNegativeOnly => "clamp",
            NormalizationMode::RawPassthrough => "none",
        }
    }
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum1" => Ok(Self::RowStochastic),
            "clamp" => Ok(Self::NonNegativeOnly),
            "none" => Ok(Self::RawPassthrough),
            other => Err(Error::arg(format!("unknown mode {other:?} (expected sum1, clamp or none)"))),
        }
    }
}

/// Adjacency of the attribution graph, stored as `Y x T`.
///
/// Row `i` holds the incoming edge weights of generated node `P + i`;
/// prompt nodes have no incoming edges and no stored row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphFile", into = "GraphFile")]
pub struct AttributionGraph {
    prompt_len: usize,
    total_len: usize,
    adjacency: Vec<f64>,
    mode: NormalizationMode,
    labels: Vec<String>,
}

/// On-disk layout of a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    /// `P`.
    pub prompt_len: usize,
    /// `T`.
    pub total_len: usize,
    /// Normalization used to build the adjacency.
    pub mode: NormalizationMode,
    /// Row-major `Y x T` weights.
    pub adjacency: Vec<f64>,
    /// One label per node (may be empty).
    #[serde(default)]
    pub labels: Vec<String>,
}

/// A directed edge `source -> target` with global 0-based node indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    /// Influencing node.
    pub source: usize,
    /// Influenced (generated) node.
    pub target: usize,
    /// Edge weight.
    pub weight: f64,
}

/// Builds the adjacency matrix from a table.
///
/// Rows whose clamped scores are all zero become uniform over the
/// preceding units in `RowStochastic` mode.
pub fn build_graph(table: &AttributionTable, mode: NormalizationMode) -> AttributionGraph {
    let p = table.prompt_len();
    let t = table.total_len();
    let mut adjacency = Vec::with_capacity(table.values().len());
    for (i, row) in table.rows().enumerate() {
        let visible = p + i;
        match mode {
            NormalizationMode::RawPassthrough => adjacency.extend_from_slice(row),
            NormalizationMode::NonNegativeOnly => {
                adjacency.extend(row.iter().map(|&v| v.max(0.0)));
            }
            NormalizationMode::RowStochastic => {
                let sum: f64 = row[..visible].iter().map(|&v| v.max(0.0)).sum();
                if sum > 0.0 {
                    adjacency.extend(row[..visible].iter().map(|&v| v.max(0.0) / sum));
                } else {
                    let u = 1.0 / visible as f64;
                    adjacency.extend(std::iter::repeat_n(u, visible));
                }
                adjacency.extend(std::iter::repeat_n(0.0, t - visible));
            }
        }
    }
    AttributionGraph { prompt_len: p, total_len: t, adjacency, mode, labels: Vec::new() }
}

impl AttributionGraph {
    /// Validates a graph given explicitly (e.g. loaded from disk).
    pub fn new(
        prompt_len: usize,
        total_len: usize,
        adjacency: Vec<f64>,
        mode: NormalizationMode,
        labels: Vec<String>,
    ) -> Result<Self> {
        // Reuse the table's shape/causality/finiteness checks.
        let table = AttributionTable::new(
            prompt_len,
            total_len,
            adjacency,
            "",
            crate::sequence::UnitLevel::Sentence,
        )?;
        if !labels.is_empty() && labels.len() != total_len {
            return Err(Error::dim(format!(
                "{} labels for {total_len} nodes",
                labels.len()
            )));
        }
        let graph = Self {
            prompt_len,
            total_len,
            adjacency: table.values().to_vec(),
            mode,
            labels,
        };
        graph.check_mode_invariants()?;
        Ok(graph)
    }

    /// Attaches node labels (one per node).
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.total_len {
            return Err(Error::dim(format!("{} labels for {} nodes", labels.len(), self.total_len)));
        }
        self.labels = labels;
        Ok(self)
    }

    /// `P`.
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// `T`.
    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// `Y`.
    pub fn generated_len(&self) -> usize {
        self.total_len - self.prompt_len
    }

    /// Normalization mode.
    pub fn mode(&self) -> NormalizationMode {
        self.mode
    }

    /// Node labels; empty when none were attached.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Row-major adjacency.
    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    /// Incoming weights of generated unit `i` (length `T`).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.adjacency[i * self.total_len..(i + 1) * self.total_len]
    }

    /// Weight of edge `source -> P + i`.
    pub fn weight(&self, i: usize, source: usize) -> f64 {
        self.adjacency[i * self.total_len + source]
    }

    /// Checks the nonnegativity and row-sum invariants of `RowStochastic`
    /// graphs and nonnegativity of `NonNegativeOnly` graphs.
    pub fn check_mode_invariants(&self) -> Result<()> {
        if self.mode == NormalizationMode::RawPassthrough {
            return Ok(());
        }
        for i in 0..self.generated_len() {
            let row = self.row(i);
            if let Some(j) = row.iter().position(|&v| v < 0.0) {
                return Err(Error::arg(format!(
                    "negative weight at row {i}, column {j} in {} graph",
                    self.mode
                )));
            }
            if self.mode == NormalizationMode::RowStochastic {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(Error::arg(format!("row {i} sums to {sum}, expected 1")));
                }
            }
        }
        Ok(())
    }

    /// Serializes to the graph file format.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses the graph file format.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        Self::try_from(file)
    }

    /// Writes the graph file.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Reads a graph file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl TryFrom<GraphFile> for AttributionGraph {
    type Error = Error;

    fn try_from(f: GraphFile) -> Result<Self> {
        Self::new(f.prompt_len, f.total_len, f.adjacency, f.mode, f.labels)
    }
}

impl From<AttributionGraph> for GraphFile {
    fn from(g: AttributionGraph) -> Self {
        GraphFile {
            prompt_len: g.prompt_len,
            total_len: g.total_len,
            mode: g.mode,
            adjacency: g.adjacency,
            labels: g.labels,
        }
    }
}

fn check_threshold(graph: &AttributionGraph, threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::arg(format!("threshold {threshold} outside [0, 1]")));
    }
    if graph.mode() != NormalizationMode::RowStochastic {
        return Err(Error::arg(format!(
            "pruning needs a sum1 graph, got {}",
            graph.mode()
        )));
    }
    Ok(())
}

/// Edges with nonzero weight `>= threshold`, ordered by target then source.
/// The graph itself is left untouched and weights are not renormalized.
pub fn prune_view(graph: &AttributionGraph, threshold: f64) -> Result<Vec<Edge>> {
    check_threshold(graph, threshold)?;
    let p = graph.prompt_len();
    let mut edges = Vec::new();
    for i in 0..graph.generated_len() {
        for (source, &weight) in graph.row(i).iter().enumerate().take(p + i) {
            if weight > 0.0 && weight >= threshold {
                edges.push(Edge { source, target: p + i, weight });
            }
        }
    }
    Ok(edges)
}

fn escape_label(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' | '\r' => out.push(' '),
            c => out.push(c),
        }
    }
    out
}

/// Renders the pruned graph as Graphviz DOT.
///
/// Nodes are named `n1..nT` (global index, 1-based). Prompt nodes are
/// boxes ranked as sources; generated nodes are ellipses chained in
/// sequence order by invisible edges. Edge labels carry the weight with
/// three decimals.
pub fn export_dot(graph: &AttributionGraph, threshold: f64) -> Result<String> {
    let edges = prune_view(graph, threshold)?;
    let p = graph.prompt_len();
    let label = |k: usize| -> String {
        match graph.labels().get(k) {
            Some(l) => escape_label(l),
            None if k < p => format!("P{}", k + 1),
            None => format!("G{}", k - p + 1),
        }
    };

    let mut out = String::new();
    let _ = writeln!(out, "digraph attribution {{");
    let _ = writeln!(out, "  rankdir=LR;");
    let _ = writeln!(out, "  subgraph prompt {{");
    let _ = writeln!(out, "    rank=source;");
    for k in 0..p {
        let _ = writeln!(out, "    n{} [label=\"{}\", shape=box];", k + 1, label(k));
    }
    let _ = writeln!(out, "  }}");
    for k in p..graph.total_len() {
        let _ = writeln!(out, "  n{} [label=\"{}\", shape=ellipse];", k + 1, label(k));
    }
    for k in p + 1..graph.total_len() {
        let _ = writeln!(out, "  n{} -> n{} [style=invis];", k, k + 1);
    }
    for e in &edges {
        let _ = writeln!(
            out,
            "  n{} -> n{} [label=\"{:.3}\"];",
            e.source + 1,
            e.target + 1,
            e.weight
        );
    }
    out.push_str("}\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::UnitLevel;

    fn table(p: usize, rows: &[Vec<f64>]) -> AttributionTable {
        AttributionTable::from_rows(p, rows, "t", UnitLevel::Sentence).unwrap()
    }

    #[test]
    fn row_stochastic_clamps_and_normalizes() {
        let g = build_graph(&table(3, &[vec![2.0, -1.0, 2.0]]), NormalizationMode::RowStochastic);
        assert_eq!(g.row(0), &[0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn degenerate_row_is_uniform() {
        let g = build_graph(&table(2, &[vec![-1.0, -2.0]]), NormalizationMode::RowStochastic);
        assert_eq!(g.row(0), &[0.5, 0.5, 0.0]);
        let g = build_graph(&table(1, &[vec![1.0], vec![0.0, 0.0]]), NormalizationMode::RowStochastic);
        assert_eq!(g.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn passthrough_and_clamp() {
        let t = table(3, &[vec![2.0, -1.0, 2.0]]);
        assert_eq!(build_graph(&t, NormalizationMode::RawPassthrough).row(0), &[2.0, -1.0, 2.0, 0.0]);
        assert_eq!(build_graph(&t, NormalizationMode::NonNegativeOnly).row(0), &[2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn prune_thresholds() {
        // p1 -> g1 (1.0); g2 <- p1 0.1, g1 0.9
        let g = build_graph(&table(1, &[vec![1.0], vec![0.1, 0.9]]), NormalizationMode::RowStochastic);
        assert_eq!(prune_view(&g, 0.0).unwrap().len(), 3);
        let ones = prune_view(&g, 1.0).unwrap();
        assert_eq!(ones.len(), 1);
        assert_eq!((ones[0].source, ones[0].target), (0, 1));
        let half = prune_view(&g, 0.5).unwrap();
        assert_eq!(half.iter().filter(|e| e.target == 2).count(), 1);
        assert_eq!(half.iter().find(|e| e.target == 2).unwrap().weight, 0.9);
        assert!(prune_view(&g, 1.5).is_err());
        assert!(prune_view(&g, -0.1).is_err());
        let raw = build_graph(&table(1, &[vec![1.0]]), NormalizationMode::RawPassthrough);
        assert!(prune_view(&raw, 0.5).is_err());
    }

    #[test]
    fn dot_minimal_and_empty() {
        let g = build_graph(&table(1, &[vec![1.0]]), NormalizationMode::RowStochastic);
        let dot = export_dot(&g, 0.0).unwrap();
        let edges: Vec<_> = dot.lines().filter(|l| l.contains("->") && !l.contains("invis")).collect();
        assert_eq!(edges, vec!["  n1 -> n2 [label=\"1.000\"];"]);

        let g = build_graph(&table(2, &[vec![0.5, 0.5]]), NormalizationMode::RowStochastic);
        let dot = export_dot(&g, 0.9).unwrap();
        assert!(!dot.contains("->"));
        assert!(dot.contains("n1 [") && dot.contains("n3 ["));
    }

    #[test]
    fn graph_file_rejects_non_stochastic_rows() {
        let bad = r#"{"prompt_len":1,"total_len":2,"mode":"sum1","adjacency":[0.5,0.0]}"#;
        assert!(AttributionGraph::from_json(bad).is_err());
        let ok = r#"{"prompt_len":1,"total_len":2,"mode":"clamp","adjacency":[0.5,0.0]}"#;
        assert!(AttributionGraph::from_json(ok).is_ok());
    }
}
