// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation of context attributions: ground-truth coverage and
//! deletion-curve faithfulness.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::attribution::ContextAttribution;
use crate::baseattr::Ablation;
use crate::error::{Error, Result};
use crate::modelclient::{score_batch, ScoreRequest, ScoringBackend};
use crate::sequence::Example;

/// Attribution coverage: the fraction of ground-truth units whose share of
/// the total attribution lies in `[0.5 / |GT|, 1.5 / |GT|]`.
///
/// Shares are taken against the sum over all prompt units. An attribution
/// summing to zero has no meaningful shares and scores 0.
pub fn attribution_coverage(a: &ContextAttribution, gt: &BTreeSet<usize>) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::arg("ground truth is empty"));
    }
    if let Some(&g) = gt.iter().next_back() {
        if g >= a.len() {
            return Err(Error::arg(format!(
                "ground-truth index {} beyond {} prompt units",
                g + 1,
                a.len()
            )));
        }
    }
    let total = a.total();
    if total == 0.0 {
        return Ok(0.0);
    }
    let n = gt.len() as f64;
    let (lo, hi) = (0.5 / n, 1.5 / n);
    let hits = gt
        .iter()
        .filter(|&&j| {
            let r = a.scores()[j] / total;
            lo <= r && r <= hi
        })
        .count();
    Ok(hits as f64 / n)
}

/// How deletion-curve probabilities are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProbabilityScale {
    /// `exp(logprob_k - logprob_0)`: relative to the unperturbed output.
    #[default]
    Anchored,
    /// `exp(logprob_k)`: the output probability itself.
    Absolute,
}

impl ProbabilityScale {
    /// Metric name used in summaries.
    pub fn metric_name(self) -> &'static str {
        match self {
            ProbabilityScale::Anchored => "deletion_auc_anchored",
            ProbabilityScale::Absolute => "deletion_auc_absolute",
        }
    }
}

/// Options for [`deletion_curve`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeletionOptions {
    /// Replacement for deleted prompt units.
    pub ablation: Ablation,
    /// Probability normalization.
    pub scale: ProbabilityScale,
    /// Concurrent scoring calls.
    pub max_in_flight: usize,
}

impl DeletionOptions {
    /// Anchored curves with the given ablation.
    pub fn new(ablation: Ablation) -> Self {
        Self { ablation, scale: ProbabilityScale::Anchored, max_in_flight: 4 }
    }
}

/// Output probability as prompt units are cumulatively deleted.
#[derive(Debug, Clone, PartialEq)]
pub struct DeletionCurve {
    /// `0, 1/P, ..., 1`.
    pub fractions: Vec<f64>,
    /// Probabilities clamped to `[0, 1]`; used for the area.
    pub probabilities: Vec<f64>,
    /// Unclamped probabilities.
    pub raw_probabilities: Vec<f64>,
    /// Output log-probability at each step.
    pub logprobs: Vec<f64>,
    /// Prompt units in deletion order; step `k` has the first `k` deleted.
    pub order: Vec<usize>,
    /// Trapezoidal area under `probabilities`.
    pub auc: f64,
}

/// Trapezoidal area under `ys` sampled at `xs`.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

/// Deletes prompt units in descending attribution order (ties by index),
/// one more per step, and records the total log-probability of the
/// attribution's output units after each step.
pub fn deletion_curve(
    backend: &dyn ScoringBackend,
    example: &Example,
    attribution: &ContextAttribution,
    opts: &DeletionOptions,
) -> Result<DeletionCurve> {
    let p = example.prompt_len();
    if attribution.len() != p {
        return Err(Error::dim(format!(
            "attribution has {} scores for {p} prompt units",
            attribution.len()
        )));
    }
    let outputs = attribution.output_indices();
    if outputs.is_empty() {
        return Err(Error::arg("attribution has an empty output set"));
    }
    if let Some(&o) = outputs.last() {
        if o >= example.generated_len() {
            return Err(Error::arg(format!("output index {} out of range", o + 1)));
        }
    }
    let order = attribution.ranking();
    let units = example.unit_texts();
    let mut requests = Vec::with_capacity(p + 1);
    let mut current = units.clone();
    requests.push(ScoreRequest::new(current.clone(), p));
    for &j in &order {
        current[j] = opts.ablation.replace(&units[j]);
        requests.push(ScoreRequest::new(current.clone(), p));
    }
    let responses = score_batch(backend, &requests, opts.max_in_flight)?;
    let logprobs: Vec<f64> = responses
        .iter()
        .map(|r| outputs.iter().map(|&o| r.unit_logprobs[o]).sum())
        .collect();
    let anchor = match opts.scale {
        ProbabilityScale::Anchored => logprobs[0],
        ProbabilityScale::Absolute => 0.0,
    };
    let raw_probabilities: Vec<f64> = logprobs.iter().map(|lp| (lp - anchor).exp()).collect();
    let probabilities: Vec<f64> = raw_probabilities.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let fractions: Vec<f64> = (0..=p).map(|k| k as f64 / p as f64).collect();
    let auc = trapezoid(&fractions, &probabilities);
    Ok(DeletionCurve { fractions, probabilities, raw_probabilities, logprobs, order, auc })
}

/// One row of an evaluation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    /// Attribution method, e.g. `cage(pert)`.
    pub method: String,
    /// Normalization mode, or `-`.
    pub mode: String,
    /// Metric name.
    pub metric: String,
    /// Mean over examples.
    pub mean: f64,
    /// Population standard deviation.
    pub stdev: f64,
    /// Number of examples.
    pub n: usize,
}

/// Mean and population standard deviation.
pub fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Summarizes one metric over examples.
pub fn summarize(method: &str, mode: &str, metric: &str, values: &[f64]) -> Result<SummaryRow> {
    if values.is_empty() {
        return Err(Error::arg(format!("no values for {method}/{mode}/{metric}")));
    }
    let (mean, stdev) = mean_stdev(values);
    Ok(SummaryRow {
        method: method.to_string(),
        mode: mode.to_string(),
        metric: metric.to_string(),
        mean,
        stdev,
        n: values.len(),
    })
}

/// Attributions of one method/mode pair, aligned with the examples.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionSet {
    /// Method label.
    pub method: String,
    /// Mode label.
    pub mode: String,
    /// One attribution per example.
    pub attributions: Vec<ContextAttribution>,
}

/// Deletion curves for every example under every attribution set.
/// Returns one summary row per set, in input order, plus the curves.
pub fn faithfulness_suite(
    backend: &dyn ScoringBackend,
    examples: &[Example],
    sets: &[AttributionSet],
    opts: &DeletionOptions,
) -> Result<(Vec<SummaryRow>, Vec<Vec<DeletionCurve>>)> {
    if examples.is_empty() || sets.is_empty() {
        return Err(Error::arg("faithfulness suite needs examples and attributions"));
    }
    let mut rows = Vec::with_capacity(sets.len());
    let mut curves = Vec::with_capacity(sets.len());
    for set in sets {
        if set.attributions.len() != examples.len() {
            return Err(Error::dim(format!(
                "{}/{}: {} attributions for {} examples",
                set.method,
                set.mode,
                set.attributions.len(),
                examples.len()
            )));
        }
        let set_curves = examples
            .iter()
            .zip(&set.attributions)
            .map(|(ex, a)| deletion_curve(backend, ex, a, opts))
            .collect::<Result<Vec<_>>>()?;
        let aucs: Vec<f64> = set_curves.iter().map(|c| c.auc).collect();
        rows.push(summarize(&set.method, &set.mode, opts.scale.metric_name(), &aucs)?);
        curves.push(set_curves);
    }
    Ok((rows, curves))
}

/// Tab-separated summary with header `method mode metric mean stdev n`.
pub fn summary_to_tsv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("method\tmode\tmetric\tmean\tstdev\tn\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
            r.method, r.mode, r.metric, r.mean, r.stdev, r.n
        );
    }
    out
}
