// SPDX-License-Identifier: MIT OR Apache-2.0

//! Units of a prompt/generation pair: spans, rule-based sentence
//! segmentation and the [`Example`] record.
//!
//! Indices are 0-based in memory. The line-oriented example record format
//! uses 1-based `output_indices` and `gt_indices`, converted at the file
//! boundary.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Granularity of the units a table or example is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UnitLevel {
    /// One unit per model token.
    Token,
    /// One unit per sentence.
    #[default]
    Sentence,
}

impl UnitLevel {
    /// Lowercase name used in files and messages.
    pub fn as_str(self) -> &'static str {
        match self {
            UnitLevel::Token => "token",
            UnitLevel::Sentence => "sentence",
        }
    }
}

impl fmt::Display for UnitLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A contiguous unit of text, `[start, end)` in the offsets of whatever
/// produced it (bytes for [`segment_text`], tokens for table aggregation).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSpan {
    /// Inclusive start offset.
    pub start: usize,
    /// Exclusive end offset.
    pub end: usize,
    /// The unit's text.
    pub text: String,
}

impl UnitSpan {
    /// Creates a span, rejecting empty ranges.
    pub fn new(start: usize, end: usize, text: impl Into<String>) -> Result<Self> {
        if start >= end {
            return Err(Error::arg(format!("empty span [{start}, {end})")));
        }
        Ok(Self { start, end, text: text.into() })
    }

    /// Number of offsets covered.
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    /// Always false for a validated span.
    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Checks that spans are non-empty, ordered, disjoint and end at or before `limit`.
pub(crate) fn check_spans(spans: &[UnitSpan], limit: usize, what: &str) -> Result<()> {
    let mut prev_end = 0;
    for (k, s) in spans.iter().enumerate() {
        if s.start >= s.end {
            return Err(Error::dim(format!("{what} span {k} is empty")));
        }
        if s.start < prev_end {
            return Err(Error::dim(format!("{what} span {k} overlaps or is out of order")));
        }
        if s.end > limit {
            return Err(Error::dim(format!(
                "{what} span {k} ends at {} beyond length {limit}",
                s.end
            )));
        }
        prev_end = s.end;
    }
    Ok(())
}

/// Splits text into sentence units.
///
/// Lines are split on `'\n'` first; each line is then cut after every
/// `.`, `?` or `!` that is directly followed by whitespace. Pieces are
/// trimmed and empty pieces dropped. Offsets are byte offsets into `text`.
pub fn segment_text(text: &str) -> Result<Vec<UnitSpan>> {
    let mut spans = Vec::new();
    let mut line_offset = 0;
    for line in text.split('\n') {
        split_line(line, line_offset, &mut spans);
        line_offset += line.len() + 1;
    }
    if spans.is_empty() {
        return Err(Error::NoUnits);
    }
    Ok(spans)
}

fn split_line(line: &str, offset: usize, out: &mut Vec<UnitSpan>) {
    let mut seg_start = 0;
    let mut chars = line.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '?' | '!') {
            if let Some(&(_, next)) = chars.peek() {
                if next.is_whitespace() {
                    let cut = i + c.len_utf8();
                    push_trimmed(line, offset, seg_start, cut, out);
                    seg_start = cut;
                }
            }
        }
    }
    push_trimmed(line, offset, seg_start, line.len(), out);
}

fn push_trimmed(line: &str, offset: usize, from: usize, to: usize, out: &mut Vec<UnitSpan>) {
    let piece = &line[from..to];
    let lead = piece.len() - piece.trim_start().len();
    let trimmed = piece.trim();
    if trimmed.is_empty() {
        return;
    }
    let start = offset + from + lead;
    out.push(UnitSpan { start, end: start + trimmed.len(), text: trimmed.to_string() });
}

/// Builds spans for already-split unit texts. Offsets are byte offsets in
/// the newline-joined text of the units.
pub fn spans_from_texts<S: AsRef<str>>(texts: &[S]) -> Vec<UnitSpan> {
    let mut offset = 0;
    texts
        .iter()
        .map(|t| {
            let t = t.as_ref();
            // Empty texts still occupy one offset so the span is non-empty.
            let len = t.len().max(1);
            let span = UnitSpan { start: offset, end: offset + len, text: t.to_string() };
            offset += len + 1;
            span
        })
        .collect()
}

/// One prompt/generation pair to be explained.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    prompt_units: Vec<UnitSpan>,
    generated_units: Vec<UnitSpan>,
    output_indices: BTreeSet<usize>,
    gt_indices: Option<BTreeSet<usize>>,
    unit_level: UnitLevel,
}

impl Example {
    /// Validates and builds an example. `output_indices` are 0-based
    /// generation indices, `gt_indices` 0-based prompt indices.
    pub fn new(
        prompt_units: Vec<UnitSpan>,
        generated_units: Vec<UnitSpan>,
        output_indices: BTreeSet<usize>,
        gt_indices: Option<BTreeSet<usize>>,
        unit_level: UnitLevel,
    ) -> Result<Self> {
        if prompt_units.is_empty() {
            return Err(Error::arg("example has no prompt units"));
        }
        if generated_units.is_empty() {
            return Err(Error::arg("example has no generated units"));
        }
        if output_indices.is_empty() {
            return Err(Error::arg("output set is empty"));
        }
        if let Some(&o) = output_indices.iter().next_back() {
            if o >= generated_units.len() {
                return Err(Error::arg(format!(
                    "output index {} exceeds generated unit count {}",
                    o + 1,
                    generated_units.len()
                )));
            }
        }
        if let Some(gt) = &gt_indices {
            if let Some(&g) = gt.iter().next_back() {
                if g >= prompt_units.len() {
                    return Err(Error::arg(format!(
                        "ground-truth index {} exceeds prompt unit count {}",
                        g + 1,
                        prompt_units.len()
                    )));
                }
            }
        }
        Ok(Self { prompt_units, generated_units, output_indices, gt_indices, unit_level })
    }

    /// Sentence-level example from plain unit texts.
    pub fn from_texts<S: AsRef<str>>(
        prompt: &[S],
        generated: &[S],
        output_indices: impl IntoIterator<Item = usize>,
        gt_indices: Option<Vec<usize>>,
    ) -> Result<Self> {
        Self::new(
            spans_from_texts(prompt),
            spans_from_texts(generated),
            output_indices.into_iter().collect(),
            gt_indices.map(|g| g.into_iter().collect()),
            UnitLevel::Sentence,
        )
    }

    /// Prompt units in order.
    pub fn prompt_units(&self) -> &[UnitSpan] {
        &self.prompt_units
    }

    /// Generated units in order.
    pub fn generated_units(&self) -> &[UnitSpan] {
        &self.generated_units
    }

    /// The explained output, as 0-based generation indices.
    pub fn output_indices(&self) -> &BTreeSet<usize> {
        &self.output_indices
    }

    /// Ground-truth prompt indices (0-based), if known.
    pub fn gt_indices(&self) -> Option<&BTreeSet<usize>> {
        self.gt_indices.as_ref()
    }

    /// Unit granularity.
    pub fn unit_level(&self) -> UnitLevel {
        self.unit_level
    }

    /// Prompt unit count `P`.
    pub fn prompt_len(&self) -> usize {
        self.prompt_units.len()
    }

    /// Generated unit count `Y`.
    pub fn generated_len(&self) -> usize {
        self.generated_units.len()
    }

    /// `P + Y`.
    pub fn total_len(&self) -> usize {
        self.prompt_len() + self.generated_len()
    }

    /// All unit texts, prompt first.
    pub fn unit_texts(&self) -> Vec<String> {
        self.prompt_units
            .iter()
            .chain(&self.generated_units)
            .map(|u| u.text.clone())
            .collect()
    }

    /// Serializable record form (1-based indices).
    pub fn to_record(&self) -> ExampleRecord {
        ExampleRecord {
            prompt_units: self.prompt_units.iter().map(|u| u.text.clone()).collect(),
            generated_units: self.generated_units.iter().map(|u| u.text.clone()).collect(),
            output_indices: self.output_indices.iter().map(|i| i + 1).collect(),
            gt_indices: self.gt_indices.as_ref().map(|g| g.iter().map(|i| i + 1).collect()),
            unit_level: Some(self.unit_level),
        }
    }
}

/// One line of an examples file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    /// Prompt unit texts.
    pub prompt_units: Vec<String>,
    /// Generated unit texts.
    pub generated_units: Vec<String>,
    /// 1-based generation indices of the output.
    pub output_indices: Vec<usize>,
    /// 1-based prompt indices of the ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_indices: Option<Vec<usize>>,
    /// Defaults to sentence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_level: Option<UnitLevel>,
}

impl TryFrom<ExampleRecord> for Example {
    type Error = Error;

    fn try_from(rec: ExampleRecord) -> Result<Self> {
        let to_zero = |v: &[usize], what: &str| -> Result<BTreeSet<usize>> {
            v.iter()
                .map(|&i| {
                    i.checked_sub(1)
                        .ok_or_else(|| Error::arg(format!("{what} indices are 1-based; found 0")))
                })
                .collect()
        };
        let outputs = to_zero(&rec.output_indices, "output")?;
        let gt = rec.gt_indices.as_deref().map(|g| to_zero(g, "ground-truth")).transpose()?;
        Example::new(
            spans_from_texts(&rec.prompt_units),
            spans_from_texts(&rec.generated_units),
            outputs,
            gt,
            rec.unit_level.unwrap_or_default(),
        )
    }
}

/// Parses an examples file: one JSON record per line, blank lines skipped.
pub fn parse_examples(text: &str, path: &Path) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: k + 1,
            message,
        };
        let rec: ExampleRecord =
            serde_json::from_str(line).map_err(|e| record_err(e.to_string()))?;
        out.push(Example::try_from(rec).map_err(|e| record_err(e.to_string()))?);
    }
    Ok(out)
}

/// Renders examples in the line-oriented record format.
pub fn examples_to_string(examples: &[Example]) -> Result<String> {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(&ex.to_record())?);
        s.push('\n');
    }
    Ok(s)
}
