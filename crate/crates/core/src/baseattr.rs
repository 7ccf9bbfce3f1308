// SPDX-License-Identifier: MIT OR Apache-2.0

//! Base attribution methods that fill an [`AttributionTable`].
//!
//! Both perturbation methods replace one unit at a time (prompt and
//! generated units alike) with an ablation text and rescore the whole
//! sequence once per replaced unit. One teacher-forced response covers
//! every generated unit, so a table costs `1 + (T - 1)` scoring calls.

use std::path::Path;

use crate::error::{Error, Result};
use crate::modelclient::{score_batch, ScoreRequest, ScoreResponse, ScoringBackend, TokenDistribution};
use crate::sequence::{Example, UnitLevel};
use crate::table::AttributionTable;

/// Probability floor applied before taking logarithms in KL terms.
pub const KL_FLOOR: f64 = 1e-12;

/// Text substituted for a perturbed unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ablation {
    /// Replacement text (usually the end-of-sequence marker).
    pub text: String,
    /// Repeat the text once per whitespace-separated word of the unit.
    pub match_length: bool,
}

impl Ablation {
    /// Single replacement text.
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into(), match_length: false }
    }

    /// A run of the backend's end-of-sequence marker, one per word.
    pub fn eos_run(backend: &dyn ScoringBackend) -> Self {
        Self { text: backend.eos_text(), match_length: true }
    }

    /// Replacement for `unit`.
    pub fn replace(&self, unit: &str) -> String {
        if !self.match_length {
            return self.text.clone();
        }
        let n = unit.split_whitespace().count().max(1);
        vec![self.text.as_str(); n].join(" ")
    }
}

/// Knobs shared by the perturbation methods.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringOptions {
    /// Concurrent scoring calls.
    pub max_in_flight: usize,
    /// Distribution truncation for CLP.
    pub top_k: usize,
    /// CLP: average KL over a unit's positions instead of summing.
    pub average_positions: bool,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self { max_in_flight: 4, top_k: 20, average_positions: false }
    }
}

fn perturbed_responses(
    backend: &dyn ScoringBackend,
    example: &Example,
    ablation: &Ablation,
    opts: &ScoringOptions,
    want_distributions: bool,
) -> Result<Vec<ScoreResponse>> {
    if example.unit_level() != UnitLevel::Sentence {
        return Err(Error::UnitLevel { expected: "sentence", found: example.unit_level().as_str() });
    }
    let units = example.unit_texts();
    let p = example.prompt_len();
    let make = |u: Vec<String>| {
        let r = ScoreRequest::new(u, p);
        if want_distributions {
            r.with_distributions(opts.top_k)
        } else {
            r
        }
    };
    // The last generated unit influences nothing, so it is never perturbed.
    let mut requests = Vec::with_capacity(units.len());
    requests.push(make(units.clone()));
    for j in 0..units.len() - 1 {
        let mut u = units.clone();
        u[j] = ablation.replace(&units[j]);
        requests.push(make(u));
    }
    let responses = score_batch(backend, &requests, opts.max_in_flight)?;
    for r in &responses {
        if r.unit_logprobs.len() != example.generated_len() {
            return Err(Error::dim(format!(
                "backend scored {} units, example has {}",
                r.unit_logprobs.len(),
                example.generated_len()
            )));
        }
    }
    Ok(responses)
}

/// Pert.: drop in each generated unit's log-probability when one earlier
/// unit is replaced. Negative drops are kept.
pub fn perturbation_table(
    backend: &dyn ScoringBackend,
    example: &Example,
    ablation: &Ablation,
    opts: &ScoringOptions,
) -> Result<AttributionTable> {
    let responses = perturbed_responses(backend, example, ablation, opts, false)?;
    let p = example.prompt_len();
    let t_len = example.total_len();
    let full = &responses[0].unit_logprobs;
    let mut values = vec![0.0; example.generated_len() * t_len];
    for (t, row) in values.chunks_mut(t_len).enumerate() {
        for (j, cell) in row.iter_mut().enumerate().take(p + t) {
            *cell = full[t] - responses[j + 1].unit_logprobs[t];
        }
    }
    AttributionTable::new(p, t_len, values, "pert", UnitLevel::Sentence)
}

/// KL divergence `KL(p || q)` in nats over `p`'s listed tokens plus one
/// tail atom.
///
/// `q` is projected onto `p`'s partition: tokens `p` lists are looked up
/// in `q` (missing ones count as zero), and everything else `q` holds
/// (its tail and tokens `p` does not list) forms `q`'s tail atom. `q`
/// values are floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &TokenDistribution, q: &TokenDistribution) -> f64 {
    let mut kl = 0.0;
    for &(id, pp) in &p.entries {
        if pp > 0.0 {
            let qq = q.prob(id).unwrap_or(0.0).max(KL_FLOOR);
            kl += pp * (pp / qq).ln();
        }
    }
    if p.tail > 0.0 {
        let unlisted: f64 = q
            .entries
            .iter()
            .filter(|(id, _)| p.prob(*id).is_none())
            .map(|&(_, v)| v)
            .sum();
        let q_tail = (q.tail + unlisted).max(KL_FLOOR);
        kl += p.tail * (p.tail / q_tail).ln();
    }
    kl.max(0.0)
}

/// CLP: KL between the unperturbed and the perturbed next-token
/// distributions, summed (or averaged) over a unit's positions.
pub fn clp_table(
    backend: &dyn ScoringBackend,
    example: &Example,
    ablation: &Ablation,
    opts: &ScoringOptions,
) -> Result<AttributionTable> {
    let responses = perturbed_responses(backend, example, ablation, opts, true)?;
    let dists: Vec<&Vec<Vec<TokenDistribution>>> = responses
        .iter()
        .map(|r| r.distributions.as_ref().ok_or(Error::DistributionsUnavailable))
        .collect::<Result<_>>()?;
    let p = example.prompt_len();
    let t_len = example.total_len();
    let full = dists[0];
    let mut values = vec![0.0; example.generated_len() * t_len];
    for (t, row) in values.chunks_mut(t_len).enumerate() {
        for (j, cell) in row.iter_mut().enumerate().take(p + t) {
            let ablated = &dists[j + 1][t];
            if ablated.len() != full[t].len() {
                return Err(Error::dim(format!(
                    "unit {} has {} positions unperturbed but {} with unit {} replaced",
                    t + 1,
                    full[t].len(),
                    ablated.len(),
                    j + 1
                )));
            }
            let sum: f64 = full[t].iter().zip(ablated).map(|(a, b)| kl_divergence(a, b)).sum();
            *cell = if opts.average_positions && !full[t].is_empty() {
                sum / full[t].len() as f64
            } else {
                sum
            };
        }
    }
    AttributionTable::new(p, t_len, values, "clp", UnitLevel::Sentence)
}

/// Loads a table computed elsewhere (integrated gradients, attention
/// products, ...). Causality violations are rejected with their position.
pub fn import_table(path: &Path) -> Result<AttributionTable> {
    AttributionTable::load(path)
}
