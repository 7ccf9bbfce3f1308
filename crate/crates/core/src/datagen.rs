// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic examples paired with mock model specs whose true
//! dependency structure is known.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::modelclient::{mock_generate, MockModelSpec};
use crate::sequence::{parse_examples, Example};

/// Small built-in claim pool, one claim per line.
pub const BUNDLED_POOL: &str = include_str!("../data/claims.txt");

/// Log-probability the mock assigns to every unperturbed generated unit.
const UNPERTURBED_LOGPROB: f64 = -0.25;

/// Non-empty trimmed lines of a pool file.
pub fn parse_pool(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

/// The bundled pool.
pub fn bundled_pool() -> Vec<String> {
    parse_pool(BUNDLED_POOL)
}

/// Reads a pool file.
pub fn load_pool(path: &Path) -> Result<Vec<String>> {
    Ok(parse_pool(&std::fs::read_to_string(path)?))
}

/// Reads an examples file (one JSON record per line).
pub fn load_examples(path: &Path) -> Result<Vec<Example>> {
    parse_examples(&std::fs::read_to_string(path)?, path)
}

/// Dependency weights of the facts mock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactsWeights {
    /// Weight of a generation on the prompt claim it repeats.
    pub source: f64,
    /// Weight of a generation on each earlier generation, as a fraction of
    /// `source`.
    pub reuse_ratio: f64,
}

impl Default for FactsWeights {
    fn default() -> Self {
        Self { source: 1.0, reuse_ratio: 0.5 }
    }
}

fn build_spec(p: usize, rows: Vec<Vec<f64>>, templates: Vec<String>) -> Result<MockModelSpec> {
    let t = p + rows.len();
    let base = rows.iter().map(|r| UNPERTURBED_LOGPROB - r.iter().sum::<f64>()).collect();
    let mut dependency = Vec::with_capacity(rows.len() * t);
    for mut r in rows {
        r.resize(t, 0.0);
        dependency.extend(r);
    }
    MockModelSpec::new(p, t, dependency, base, templates)
}

/// A facts-listing example: `n` sampled claims plus the instruction
/// `List m of these facts.`, a generation repeating `m` of the claims, and
/// the last `k` generations as the output.
///
/// The paired mock makes every generation depend on the claim it repeats
/// and, with weight `reuse_ratio * source`, on every earlier generation
/// (the model keeps track of what it already listed).
pub fn generate_facts_example(
    pool: &[String],
    n: usize,
    m: usize,
    k: usize,
    seed: u64,
) -> Result<(Example, MockModelSpec)> {
    generate_facts_example_with(pool, n, m, k, seed, FactsWeights::default())
}

/// [`generate_facts_example`] with explicit weights.
pub fn generate_facts_example_with(
    pool: &[String],
    n: usize,
    m: usize,
    k: usize,
    seed: u64,
    weights: FactsWeights,
) -> Result<(Example, MockModelSpec)> {
    if !(1 <= k && k <= m && m <= n) {
        return Err(Error::arg(format!("need 1 <= K <= M <= N, got N={n} M={m} K={k}")));
    }
    if pool.len() < n {
        return Err(Error::arg(format!("pool has {} claims, N={n}", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prompt: Vec<String> = sample(&mut rng, pool.len(), n).iter().map(|i| pool[i].clone()).collect();
    prompt.push(format!("List {m} of these facts."));
    let p = prompt.len();
    let sources: Vec<usize> = sample(&mut rng, n, m).into_vec();

    let reuse = weights.source * weights.reuse_ratio;
    let rows: Vec<Vec<f64>> = sources
        .iter()
        .enumerate()
        .map(|(i, &src)| {
            let mut row = vec![0.0; p + i];
            row[src] = weights.source;
            row[p..p + i].iter_mut().for_each(|v| *v = reuse);
            row
        })
        .collect();
    let templates = sources.iter().map(|s| format!("{{p{}}}", s + 1)).collect();
    let spec = build_spec(p, rows, templates)?;

    let generated = mock_generate(&spec, &prompt)?;
    let outputs: BTreeSet<usize> = (m - k..m).collect();
    let gt: BTreeSet<usize> = outputs.iter().map(|&o| sources[o]).collect();
    let example = Example::new(
        generated.prompt_units().to_vec(),
        generated.generated_units().to_vec(),
        outputs,
        Some(gt),
        generated.unit_level(),
    )?;
    Ok((example, spec))
}

/// A chain-of-thought style example.
///
/// The prompt holds `critical` numbered statements shuffled among
/// `distractors` copies of `Unrelated sentence.`. Each of the first
/// `critical - 1` generations restates one critical statement; the final
/// generation (the output) depends on those generations and directly on
/// the last critical statement, all with the same weight. Every critical
/// statement therefore matters equally to the answer, but most of them
/// only through an intermediate generation.
pub fn generate_reasoning_example(
    critical: usize,
    distractors: usize,
    seed: u64,
) -> Result<(Example, MockModelSpec)> {
    if critical < 2 {
        return Err(Error::arg("need at least two critical statements"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = critical + distractors;
    // positions[c] = prompt index of critical statement c
    let positions: Vec<usize> = sample(&mut rng, p, critical).into_vec();
    let mut prompt = vec!["Unrelated sentence.".to_string(); p];
    for (c, &pos) in positions.iter().enumerate() {
        let value: u32 = rng.gen_range(2..50);
        prompt[pos] = format!("Quantity {} is {value}.", (b'A' + c as u8) as char);
    }

    // Weights on a 1/64 grid so the mock stays exact.
    let grid = |rng: &mut ChaCha8Rng, lo: u32, hi: u32| f64::from(rng.gen_range(lo..hi)) / 64.0;
    let w = grid(&mut rng, 32, 96);
    let mut rows = Vec::with_capacity(critical);
    let mut templates = Vec::with_capacity(critical);
    for (c, &pos) in positions.iter().enumerate().take(critical - 1) {
        let mut row = vec![0.0; p + c];
        row[pos] = grid(&mut rng, 32, 128);
        rows.push(row);
        templates.push(format!("So {{p{}}}", pos + 1));
    }
    let mut last = vec![0.0; p + critical - 1];
    last[p..].iter_mut().for_each(|v| *v = w);
    last[positions[critical - 1]] = w;
    rows.push(last);
    templates.push("The answer combines every quantity.".to_string());
    let spec = build_spec(p, rows, templates)?;

    let generated = mock_generate(&spec, &prompt)?;
    let example = Example::new(
        generated.prompt_units().to_vec(),
        generated.generated_units().to_vec(),
        [critical - 1].into_iter().collect(),
        Some(positions.iter().copied().collect()),
        generated.unit_level(),
    )?;
    Ok((example, spec))
}
