// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scoring backends: teacher-forced log-probabilities (and optionally
//! truncated next-token distributions) for a fixed unit sequence.
//!
//! Two implementations ship with the crate: [`HttpBackend`] speaks a small
//! JSON request/response protocol to a remote inference shim, and
//! [`MockBackend`] answers from a known dependency matrix so that every
//! downstream number can be checked exactly.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{spans_from_texts, Example, UnitLevel};
use crate::table::AttributionTable;

/// Tolerance on `sum(probabilities) + tail == 1`.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// Default end-of-sequence text used as the ablation unit.
pub const DEFAULT_EOS: &str = "</s>";

/// Teacher-forced scoring request. Wire field names are fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    /// Full sequence, prompt units then generated units.
    pub units: Vec<String>,
    /// Number of leading prompt units.
    pub prompt_len: usize,
    /// Ask for per-position next-token distributions.
    #[serde(default)]
    pub want_distributions: bool,
    /// Distribution truncation.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_top_k() -> usize {
    1
}

impl ScoreRequest {
    /// Log-probability-only request.
    pub fn new(units: Vec<String>, prompt_len: usize) -> Self {
        Self { units, prompt_len, want_distributions: false, top_k: 1 }
    }

    /// Also request distributions truncated to `top_k` entries.
    pub fn with_distributions(mut self, top_k: usize) -> Self {
        self.want_distributions = true;
        self.top_k = top_k;
        self
    }

    /// Number of generated units in the request.
    pub fn generated_len(&self) -> usize {
        self.units.len().saturating_sub(self.prompt_len)
    }

    /// Checks the request invariants.
    pub fn validate(&self) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::arg("score request has no units"));
        }
        if self.prompt_len == 0 || self.prompt_len >= self.units.len() {
            return Err(Error::arg(format!(
                "prompt_len {} must be in 1..{}",
                self.prompt_len,
                self.units.len()
            )));
        }
        if self.want_distributions && self.top_k == 0 {
            return Err(Error::arg("top_k must be at least 1"));
        }
        Ok(())
    }
}

/// Truncated next-token distribution: `(token id, probability)` pairs plus
/// the mass of everything not listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    /// Listed tokens, most probable first.
    pub entries: Vec<(u32, f64)>,
    /// Residual mass of unlisted tokens.
    pub tail: f64,
}

impl TokenDistribution {
    /// Probability of `id`, if listed.
    pub fn prob(&self, id: u32) -> Option<f64> {
        self.entries.iter().find(|(t, _)| *t == id).map(|&(_, p)| p)
    }

    /// Checks ranges and normalization.
    pub fn validate(&self) -> Result<()> {
        let mut sum = self.tail;
        if !(0.0..=1.0 + DISTRIBUTION_TOLERANCE).contains(&self.tail) {
            return Err(Error::Backend(format!("tail mass {} outside [0, 1]", self.tail)));
        }
        for &(id, p) in &self.entries {
            if !(0.0..=1.0 + DISTRIBUTION_TOLERANCE).contains(&p) {
                return Err(Error::Backend(format!("token {id} has probability {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::Backend(format!("distribution sums to {sum}")));
        }
        Ok(())
    }
}

/// Scores for every generated unit of a request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    /// Total log-probability of each generated unit given everything before it.
    pub unit_logprobs: Vec<f64>,
    /// Per generated unit, one distribution per token position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distributions: Option<Vec<Vec<TokenDistribution>>>,
}

impl ScoreResponse {
    /// Checks the response against the request that produced it.
    pub fn validate(&self, request: &ScoreRequest) -> Result<()> {
        let y = request.generated_len();
        if self.unit_logprobs.len() != y {
            return Err(Error::Backend(format!(
                "{} logprobs for {y} generated units",
                self.unit_logprobs.len()
            )));
        }
        if let Some(k) = self.unit_logprobs.iter().position(|v| !v.is_finite()) {
            return Err(Error::Backend(format!("non-finite logprob for unit {}", k + 1)));
        }
        match (&self.distributions, request.want_distributions) {
            (Some(d), _) => {
                if d.len() != y {
                    return Err(Error::Backend(format!(
                        "distributions for {} units, expected {y}",
                        d.len()
                    )));
                }
                d.iter().flatten().try_for_each(TokenDistribution::validate)?;
            }
            (None, true) => return Err(Error::DistributionsUnavailable),
            (None, false) => {}
        }
        Ok(())
    }
}

/// Anything that can teacher-force score a unit sequence.
pub trait ScoringBackend: Send + Sync {
    /// Scores the exact sequence in `request`.
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse>;

    /// Text of the end-of-sequence marker, used as the default ablation unit.
    fn eos_text(&self) -> String {
        DEFAULT_EOS.to_string()
    }
}

/// Validates the request, calls the backend and validates the response.
pub fn score(backend: &dyn ScoringBackend, request: &ScoreRequest) -> Result<ScoreResponse> {
    request.validate()?;
    let response = backend.score(request)?;
    response.validate(request)?;
    Ok(response)
}

/// Scores many requests with at most `max_in_flight` concurrent calls.
/// Results are returned in request order; the first failing request (by
/// index) determines the error.
pub fn score_batch(
    backend: &dyn ScoringBackend,
    requests: &[ScoreRequest],
    max_in_flight: usize,
) -> Result<Vec<ScoreResponse>> {
    let workers = max_in_flight.max(1).min(requests.len());
    if workers <= 1 {
        return requests.iter().map(|r| score(backend, r)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ScoreResponse>>>> =
        Mutex::new((0..requests.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(req) = requests.get(k) else { break };
                let res = score(backend, req);
                slots.lock().expect("score slots poisoned")[k] = Some(res);
            });
        }
    });
    slots
        .into_inner()
        .expect("score slots poisoned")
        .into_iter()
        .map(|r| r.expect("every request is scored"))
        .collect()
}

// ---------------------------------------------------------------------------
// Remote backend
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct WireError {
    error: String,
}

/// JSON-over-HTTP backend.
///
/// `POST {base_url}/score` with a [`ScoreRequest`] body; a `200` response
/// carries a [`ScoreResponse`]. Errors are `{"error": "..."}` bodies; a
/// `422` whose message mentions distributions means the backend cannot
/// return them.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    token: Option<String>,
    eos: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Environment variable holding the backend base address.
    pub const URL_ENV: &'static str = "CAGE_BACKEND_URL";
    /// Environment variable holding the bearer token.
    pub const TOKEN_ENV: &'static str = "CAGE_BACKEND_TOKEN";

    /// Backend at `base_url` with a 120 s request timeout.
    pub fn new(base_url: &str) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build();
        Self {
            endpoint: format!("{}/score", base_url.trim_end_matches('/')),
            token: None,
            eos: DEFAULT_EOS.to_string(),
            agent: config.into(),
        }
    }

    /// Backend configured from [`Self::URL_ENV`] and [`Self::TOKEN_ENV`].
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(Self::URL_ENV).ok().filter(|u| !u.is_empty())?;
        let backend = Self::new(&url);
        Some(match std::env::var(Self::TOKEN_ENV) {
            Ok(t) if !t.is_empty() => backend.with_token(t),
            _ => backend,
        })
    }

    /// Sends `Authorization: Bearer <token>`.
    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    /// Overrides the end-of-sequence text.
    pub fn with_eos(mut self, eos: impl Into<String>) -> Self {
        self.eos = eos.into();
        self
    }

    /// Full scoring URL.
    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

fn transport(e: ureq::Error) -> Error {
    let retryable = !matches!(e, ureq::Error::BadUri(_) | ureq::Error::Http(_));
    Error::Transport { message: e.to_string(), retryable }
}

impl ScoringBackend for HttpBackend {
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(request).map_err(transport)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(transport)?;
        if status == 200 {
            return Ok(serde_json::from_str(&body)?);
        }
        let message = serde_json::from_str::<WireError>(&body)
            .map(|w| w.error)
            .unwrap_or(body);
        match status {
            422 if message.contains("distributions") => Err(Error::DistributionsUnavailable),
            429 | 500..=599 => Err(Error::Transport {
                message: format!("HTTP {status}: {message}"),
                retryable: true,
            }),
            _ => Err(Error::Backend(format!("HTTP {status}: {message}"))),
        }
    }

    fn eos_text(&self) -> String {
        self.eos.clone()
    }
}

// ---------------------------------------------------------------------------
// Mock backend
// ---------------------------------------------------------------------------

/// Grid the mock quantizes its weights to, so that sums and differences
/// of log-probabilities are exact in `f64`.
pub const MOCK_GRID: f64 = 4_294_967_296.0; // 2^32

/// Largest absolute per-unit sum `|base| + sum |D|` the mock accepts.
pub const MOCK_MAX_MAGNITUDE: f64 = 2_097_152.0; // 2^21

fn quantize(x: f64) -> f64 {
    (x * MOCK_GRID).round() / MOCK_GRID
}

/// Dependency structure of a mock model.
///
/// `dependency` is `Y x T` with the causal shape of an attribution table;
/// entry `(t, j)` is how much unit `j` adds to the log-probability of
/// generated unit `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MockSpecFile", into = "MockSpecFile")]
pub struct MockModelSpec {
    prompt_len: usize,
    total_len: usize,
    dependency: Vec<f64>,
    base_logprob: Vec<f64>,
    templates: Vec<String>,
}

/// On-disk layout of a mock spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSpecFile {
    /// `P`.
    pub prompt_len: usize,
    /// `T`.
    pub total_len: usize,
    /// Row-major `Y x T` dependency matrix.
    pub dependency: Vec<f64>,
    /// One base log-probability per generated unit.
    pub base_logprob: Vec<f64>,
    /// Generated-unit text templates; `{pK}` expands to prompt unit `K` (1-based).
    #[serde(default)]
    pub templates: Vec<String>,
}

impl MockModelSpec {
    /// Validates and quantizes a spec.
    pub fn new(
        prompt_len: usize,
        total_len: usize,
        dependency: Vec<f64>,
        base_logprob: Vec<f64>,
        templates: Vec<String>,
    ) -> Result<Self> {
        let shape = AttributionTable::new(prompt_len, total_len, dependency, "mock", UnitLevel::Sentence)?;
        let y = shape.generated_len();
        if base_logprob.len() != y {
            return Err(Error::dim(format!("{} base logprobs for {y} units", base_logprob.len())));
        }
        if !templates.is_empty() && templates.len() != y {
            return Err(Error::dim(format!("{} templates for {y} units", templates.len())));
        }
        for (t, row) in shape.rows().enumerate() {
            if let Some(j) = row.iter().position(|&v| v < 0.0) {
                return Err(Error::arg(format!("negative dependency at row {t}, column {j}")));
            }
            let magnitude = base_logprob[t].abs() + row.iter().sum::<f64>();
            if !magnitude.is_finite() || magnitude >= MOCK_MAX_MAGNITUDE {
                return Err(Error::arg(format!("row {t} magnitude {magnitude} too large for exact scoring")));
            }
        }
        Ok(Self {
            prompt_len,
            total_len,
            dependency: shape.values().iter().map(|&v| quantize(v)).collect(),
            base_logprob: base_logprob.into_iter().map(quantize).collect(),
            templates,
        })
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

    /// Dependency row of generated unit `t`.
    pub fn dependency_row(&self, t: usize) -> &[f64] {
        &self.dependency[t * self.total_len..(t + 1) * self.total_len]
    }

    /// The dependency matrix as an attribution table.
    pub fn dependency_table(&self) -> AttributionTable {
        AttributionTable::new(
            self.prompt_len,
            self.total_len,
            self.dependency.clone(),
            "mock",
            UnitLevel::Sentence,
        )
        .expect("validated at construction")
    }

    /// Base log-probabilities.
    pub fn base_logprob(&self) -> &[f64] {
        &self.base_logprob
    }

    /// Generated-unit templates.
    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    /// Serializes to the mock spec file format.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses the mock spec file format.
    pub fn from_json(text: &str) -> Result<Self> {
        let f: MockSpecFile = serde_json::from_str(text)?;
        Self::try_from(f)
    }
}

impl TryFrom<MockSpecFile> for MockModelSpec {
    type Error = Error;

    fn try_from(f: MockSpecFile) -> Result<Self> {
        Self::new(f.prompt_len, f.total_len, f.dependency, f.base_logprob, f.templates)
    }
}

impl From<MockModelSpec> for MockSpecFile {
    fn from(s: MockModelSpec) -> Self {
        MockSpecFile {
            prompt_len: s.prompt_len,
            total_len: s.total_len,
            dependency: s.dependency,
            base_logprob: s.base_logprob,
            templates: s.templates,
        }
    }
}

fn render_template(template: &str, prompt: &[String]) -> String {
    let mut out = template.to_string();
    // Highest index first so {p1} does not clobber {p10}.
    for (k, text) in prompt.iter().enumerate().rev() {
        out = out.replace(&format!("{{p{}}}", k + 1), text);
    }
    out
}

/// Produces the example a mock model "generates" for `prompt_units`.
///
/// Generated texts come from the spec's templates (or `Generated unit K.`
/// when there are none). The output is the last generated unit.
pub fn mock_generate<S: AsRef<str>>(spec: &MockModelSpec, prompt_units: &[S]) -> Result<Example> {
    if prompt_units.len() != spec.prompt_len() {
        return Err(Error::dim(format!(
            "spec expects {} prompt units, got {}",
            spec.prompt_len(),
            prompt_units.len()
        )));
    }
    let prompt: Vec<String> = prompt_units.iter().map(|s| s.as_ref().to_string()).collect();
    let generated: Vec<String> = (0..spec.generated_len())
        .map(|t| match spec.templates().get(t) {
            Some(tpl) => render_template(tpl, &prompt),
            None => format!("Generated unit {}.", t + 1),
        })
        .collect();
    Example::new(
        spans_from_texts(&prompt),
        spans_from_texts(&generated),
        [spec.generated_len() - 1].into_iter().collect(),
        None,
        UnitLevel::Sentence,
    )
}

/// How the mock treats generated units whose own inputs were ablated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MockSemantics {
    /// Score exactly the text given. A unit contributes its full weight
    /// whenever its text is intact, so log-probabilities are linear and
    /// additive in the ablated set.
    #[default]
    TeacherForced,
    /// A generated unit only carries the share of its own dependency mass
    /// that survives the ablation, recursively, as if it had been produced
    /// again from the perturbed context. Influence then flows along every
    /// path of the dependency graph.
    Regenerating,
}

/// Deterministic scoring oracle built from a [`MockModelSpec`].
#[derive(Debug)]
pub struct MockBackend {
    spec: MockModelSpec,
    reference: Vec<String>,
    word_counts: Vec<usize>,
    semantics: MockSemantics,
    distributions: bool,
    eos: String,
    calls: AtomicUsize,
}

/// Vocabulary size of the mock's next-token distributions.
const MOCK_VOCAB: u32 = 16;

impl MockBackend {
    /// Mock whose unperturbed sequence is `reference` (prompt then generation).
    pub fn new(spec: MockModelSpec, reference: Vec<String>) -> Result<Self> {
        if reference.len() != spec.total_len() {
            return Err(Error::dim(format!(
                "reference has {} units, spec has {}",
                reference.len(),
                spec.total_len()
            )));
        }
        let word_counts = reference[spec.prompt_len()..]
            .iter()
            .map(|t| t.split_whitespace().count().max(1))
            .collect();
        Ok(Self {
            spec,
            reference,
            word_counts,
            semantics: MockSemantics::TeacherForced,
            distributions: true,
            eos: DEFAULT_EOS.to_string(),
            calls: AtomicUsize::new(0),
        })
    }

    /// Mock for an example generated from `spec`.
    pub fn for_example(spec: MockModelSpec, example: &Example) -> Result<Self> {
        Self::new(spec, example.unit_texts())
    }

    /// Switches the scoring semantics.
    pub fn with_semantics(mut self, semantics: MockSemantics) -> Self {
        self.semantics = semantics;
        self
    }

    /// Makes the mock refuse distribution requests.
    pub fn without_distributions(mut self) -> Self {
        self.distributions = false;
        self
    }

    /// The underlying spec.
    pub fn spec(&self) -> &MockModelSpec {
        &self.spec
    }

    /// Number of `score` calls served so far.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Log-probability of every generated unit given which units are intact.
    pub fn logprobs(&self, present: &[bool]) -> Vec<f64> {
        let p = self.spec.prompt_len();
        let y = self.spec.generated_len();
        match self.semantics {
            MockSemantics::TeacherForced => (0..y)
                .map(|t| {
                    let row = self.spec.dependency_row(t);
                    let mut lp = self.spec.base_logprob[t];
                    for j in 0..p + t {
                        if present[j] {
                            lp += row[j];
                        }
                    }
                    lp
                })
                .collect(),
            MockSemantics::Regenerating => {
                let mut eff: Vec<f64> = present.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let mut out = Vec::with_capacity(y);
                for t in 0..y {
                    let row = self.spec.dependency_row(t);
                    let carried: f64 = row[..p + t].iter().zip(&eff).map(|(d, e)| d * e).sum();
                    let mass: f64 = row[..p + t].iter().sum();
                    out.push(self.spec.base_logprob[t] + carried);
                    if mass > 0.0 {
                        eff[p + t] *= carried / mass;
                    }
                }
                out
            }
        }
    }

    fn distribution(&self, unit: usize, pos: usize, logprob: f64, top_k: usize) -> TokenDistribution {
        let n = self.word_counts[unit] as f64;
        let correct = ((unit * 7 + pos * 3) as u32) % MOCK_VOCAB;
        let p_correct = (logprob.min(0.0) / n).exp();
        let rest = 1.0 - p_correct;
        let norm: f64 = (0..MOCK_VOCAB - 1).map(|m| 0.5f64.powi(m as i32 + 1)).sum();
        let mut probs: Vec<(u32, f64)> = Vec::with_capacity(MOCK_VOCAB as usize);
        probs.push((correct, p_correct));
        let others = (0..MOCK_VOCAB).filter(|&id| id != correct);
        for (m, id) in others.enumerate() {
            probs.push((id, rest * 0.5f64.powi(m as i32 + 1) / norm));
        }
        probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let keep = top_k.min(probs.len());
        let tail = probs[keep..].iter().map(|&(_, p)| p).sum();
        probs.truncate(keep);
        TokenDistribution { entries: probs, tail }
    }
}

impl ScoringBackend for MockBackend {
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if request.units.len() != self.reference.len() || request.prompt_len != self.spec.prompt_len() {
            return Err(Error::dim(format!(
                "mock expects {} units with prompt_len {}, got {} with {}",
                self.reference.len(),
                self.spec.prompt_len(),
                request.units.len(),
                request.prompt_len
            )));
        }
        if request.want_distributions && !self.distributions {
            return Err(Error::DistributionsUnavailable);
        }
        let present: Vec<bool> =
            request.units.iter().zip(&self.reference).map(|(a, b)| a == b).collect();
        let unit_logprobs = self.logprobs(&present);
        let distributions = request.want_distributions.then(|| {
            unit_logprobs
                .iter()
                .enumerate()
                .map(|(t, &lp)| {
                    (0..self.word_counts[t])
                        .map(|pos| self.distribution(t, pos, lp, request.top_k))
                        .collect()
                })
                .collect()
        });
        Ok(ScoreResponse { unit_logprobs, distributions })
    }

    fn eos_text(&self) -> String {
        self.eos.clone()
    }
}
