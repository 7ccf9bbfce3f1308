// SPDX-License-Identifier: MIT OR Apache-2.0

//! Random instance generators and independent oracles shared by the
//! integration tests and the acceptance harness.

#![allow(dead_code)]

use cage_core::{
    build_graph, AttributionGraph, AttributionTable, MockModelSpec, NormalizationMode, UnitLevel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random table with `P + Y <= max_t`. About a fifth of the entries are
/// negative and some rows are made entirely nonpositive.
pub fn random_table(rng: &mut ChaCha8Rng, max_t: usize) -> AttributionTable {
    let t = rng.gen_range(2..=max_t);
    let p = rng.gen_range(1..t);
    let rows: Vec<Vec<f64>> = (0..t - p)
        .map(|i| {
            let degenerate = rng.gen_bool(0.1);
            (0..p + i)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.0..2.0);
                    if degenerate {
                        -v * f64::from(rng.gen_range(0..2))
                    } else if rng.gen_bool(0.2) {
                        -v
                    } else if rng.gen_bool(0.1) {
                        0.0
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    AttributionTable::from_rows(p, &rows, "random", UnitLevel::Sentence).unwrap()
}

pub fn random_graph(rng: &mut ChaCha8Rng, max_t: usize, mode: NormalizationMode) -> AttributionGraph {
    build_graph(&random_table(rng, max_t), mode)
}

/// Sum over every directed path from each prompt node to `node` of the
/// product of edge weights, by explicit recursive enumeration.
pub fn path_oracle(graph: &AttributionGraph, node: usize) -> Vec<f64> {
    let p = graph.prompt_len();
    let mut out = vec![0.0; p];
    fn walk(graph: &AttributionGraph, node: usize, weight: f64, out: &mut [f64]) {
        let p = graph.prompt_len();
        if node < p {
            out[node] += weight;
            return;
        }
        let row = graph.row(node - p);
        for (src, &w) in row.iter().enumerate().take(node) {
            if w != 0.0 {
                walk(graph, src, weight * w, out);
            }
        }
    }
    walk(graph, node, 1.0, &mut out);
    out
}

/// Random nonnegative mock spec with weights on a 1/1024 grid.
pub fn random_mock_spec(rng: &mut ChaCha8Rng, max_p: usize, max_y: usize) -> MockModelSpec {
    let p = rng.gen_range(1..=max_p);
    let y = rng.gen_range(1..=max_y);
    let t = p + y;
    let mut dependency = vec![0.0; y * t];
    for i in 0..y {
        for j in 0..p + i {
            if rng.gen_bool(0.6) {
                dependency[i * t + j] = f64::from(rng.gen_range(1..4096u32)) / 1024.0;
            }
        }
    }
    let base = (0..y).map(|_| -f64::from(rng.gen_range(0..8192u32)) / 1024.0).collect();
    MockModelSpec::new(p, t, dependency, base, vec![]).unwrap()
}

/// Mean of `table[r][c]` over token rows `r` in `rows` and token columns
/// `c` in `cols` that are causally visible (`c < prompt_tokens + r`).
pub fn block_mean(
    table: &AttributionTable,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> f64 {
    let p = table.prompt_len();
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in rows {
        for c in cols.clone() {
            if c < p + r {
                sum += table.get(r, c);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
