// SPDX-License-Identifier: MIT OR Apache-2.0

//! Path marginalization over the attribution graph.
//!
//! Treat the `Y x T` adjacency `A` as the `T x T` strictly lower
//! triangular matrix whose first `P` rows are zero. Summing the weights of
//! every causal path from a prompt node to node `tau` gives row `tau` of
//! `A + A^2 + ... = A (I - A)^{-1}`. Because `A` is nilpotent the series is
//! finite, and `I - A` is unit lower triangular, so every row is obtained
//! exactly by substitution without forming an inverse.

use std::collections::BTreeSet;

use crate::attribution::ContextAttribution;
use crate::error::{Error, Result};
use crate::graph::AttributionGraph;
use crate::table::AttributionTable;

/// Fully propagated influence, `Y x T`.
///
/// Row `i` is the total influence on generated node `P + i` of every
/// earlier node, summed over all paths. Entries at and beyond the
/// diagonal are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalInfluenceMatrix {
    prompt_len: usize,
    total_len: usize,
    values: Vec<f64>,
}

impl TotalInfluenceMatrix {
    /// `P`.
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// `T`.
    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// Row for generated unit `i` (length `T`).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.total_len..(i + 1) * self.total_len]
    }

    /// Prompt slice of row `i`.
    pub fn prompt_slice(&self, i: usize) -> &[f64] {
        &self.row(i)[..self.prompt_len]
    }
}

fn check_generated_node(graph: &AttributionGraph, node: usize) -> Result<()> {
    if node < graph.prompt_len() || node >= graph.total_len() {
        return Err(Error::arg(format!(
            "node {node} is not a generated node (valid: {}..{})",
            graph.prompt_len(),
            graph.total_len()
        )));
    }
    Ok(())
}

fn push_in_place(acc: &mut [f64], graph: &AttributionGraph, node: usize) {
    let coef = acc[node];
    if coef == 0.0 {
        return;
    }
    let row = graph.row(node - graph.prompt_len());
    for (a, &w) in acc[..node].iter_mut().zip(row) {
        *a += coef * w;
    }
}

/// One propagation step at global node `node`: returns
/// `acc + acc[node] * A_row(node)`.
///
/// The coefficient at `node` itself is kept; callers reporting a prompt
/// slice clear it afterwards.
pub fn propagate_step(acc: &[f64], graph: &AttributionGraph, node: usize) -> Result<Vec<f64>> {
    check_generated_node(graph, node)?;
    if acc.len() != graph.total_len() {
        return Err(Error::dim(format!(
            "accumulator has {} entries, graph has {} nodes",
            acc.len(),
            graph.total_len()
        )));
    }
    let mut out = acc.to_vec();
    push_in_place(&mut out, graph, node);
    Ok(out)
}

/// Full-length marginalized row for generated unit `gen` (0-based). All
/// generated positions are zero on return.
fn marginalized_row(graph: &AttributionGraph, gen: usize) -> Vec<f64> {
    let p = graph.prompt_len();
    let tau = p + gen;
    let mut acc = graph.row(gen).to_vec();
    for node in (p..tau).rev() {
        push_in_place(&mut acc, graph, node);
        acc[node] = 0.0;
    }
    acc
}

/// Context attribution of a single generated unit `gen` (0-based
/// generation index): every path's weight pushed back onto the prompt.
pub fn attribute_token(graph: &AttributionGraph, gen: usize) -> Result<ContextAttribution> {
    if gen >= graph.generated_len() {
        return Err(Error::arg(format!(
            "generation index {} out of range 1..={}",
            gen + 1,
            graph.generated_len()
        )));
    }
    let mut acc = marginalized_row(graph, gen);
    acc.truncate(graph.prompt_len());
    ContextAttribution::new(acc, [gen], "cage", Some(graph.mode()))
}

/// Total influence of all nodes on every generated node, by forward
/// substitution: `Y_i = A_i + sum_{j < i} A[i][P + j] * Y_j`.
pub fn total_influence(graph: &AttributionGraph) -> TotalInfluenceMatrix {
    let p = graph.prompt_len();
    let t = graph.total_len();
    let y = graph.generated_len();
    let mut values = vec![0.0; y * t];
    for i in 0..y {
        let (done, rest) = values.split_at_mut(i * t);
        let row = &mut rest[..t];
        row.copy_from_slice(graph.row(i));
        for j in 0..i {
            let coef = graph.weight(i, p + j);
            if coef == 0.0 {
                continue;
            }
            let prev = &done[j * t..(j + 1) * t];
            for (r, &v) in row[..p + j].iter_mut().zip(prev) {
                *r += coef * v;
            }
        }
    }
    TotalInfluenceMatrix { prompt_len: p, total_len: t, values }
}

fn collect_outputs(outputs: &[usize], y: usize) -> Result<BTreeSet<usize>> {
    if outputs.is_empty() {
        return Err(Error::arg("output set is empty"));
    }
    let set: BTreeSet<usize> = outputs.iter().copied().collect();
    if let Some(&o) = set.iter().next_back() {
        if o >= y {
            return Err(Error::arg(format!("output index {} out of range 1..={y}", o + 1)));
        }
    }
    Ok(set)
}

/// Context attribution of an output set (0-based generation indices):
/// the sum of each unit's marginalized prompt slice. With `normalize`
/// the sum is divided by `|O|`.
pub fn attribute_output(
    graph: &AttributionGraph,
    outputs: &[usize],
    normalize: bool,
) -> Result<ContextAttribution> {
    let set = collect_outputs(outputs, graph.generated_len())?;
    let p = graph.prompt_len();
    let mut scores = vec![0.0; p];
    for &o in &set {
        let row = marginalized_row(graph, o);
        for (s, v) in scores.iter_mut().zip(&row[..p]) {
            *s += v;
        }
    }
    if normalize {
        let n = set.len() as f64;
        scores.iter_mut().for_each(|s| *s /= n);
    }
    ContextAttribution::new(scores, set, "cage", Some(graph.mode()))
}

/// Row-attribution baseline: sum of the selected raw table rows restricted
/// to the prompt columns. No clamping, normalization or propagation.
pub fn row_attribution(table: &AttributionTable, outputs: &[usize]) -> Result<ContextAttribution> {
    let set = collect_outputs(outputs, table.generated_len())?;
    let p = table.prompt_len();
    let mut scores = vec![0.0; p];
    for &o in &set {
        for (s, v) in scores.iter_mut().zip(&table.row(o)[..p]) {
            *s += v;
        }
    }
    ContextAttribution::new(scores, set, "row", None)
}
