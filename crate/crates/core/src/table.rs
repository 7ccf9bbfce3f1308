// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution tables: raw influence of every preceding unit on every
//! generated unit, plus token-to-sentence aggregation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{check_spans, UnitLevel, UnitSpan};

/// Dense `Y x T` table of raw base-attribution scores.
///
/// Row `i` holds the scores of generated unit `i` (global node `P + i`)
/// against all `T` units. Entries at column `P + i` and beyond are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableFile", into = "TableFile")]
pub struct AttributionTable {
    prompt_len: usize,
    total_len: usize,
    values: Vec<f64>,
    method_tag: String,
    unit_level: UnitLevel,
}

/// On-disk layout of a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableFile {
    /// `P`.
    pub prompt_len: usize,
    /// `T = P + Y`.
    pub total_len: usize,
    /// Unit granularity.
    pub unit_level: UnitLevel,
    /// Base method that produced the scores.
    pub method_tag: String,
    /// Row-major `Y x T` values.
    pub values: Vec<f64>,
}

impl AttributionTable {
    /// Validates shape, finiteness and strict causality.
    pub fn new(
        prompt_len: usize,
        total_len: usize,
        values: Vec<f64>,
        method_tag: impl Into<String>,
        unit_level: UnitLevel,
    ) -> Result<Self> {
        if prompt_len == 0 {
            return Err(Error::dim("table needs at least one prompt unit"));
        }
        if total_len <= prompt_len {
            return Err(Error::dim(format!(
                "total_len {total_len} must exceed prompt_len {prompt_len}"
            )));
        }
        let rows = total_len - prompt_len;
        if values.len() != rows * total_len {
            return Err(Error::dim(format!(
                "expected {rows}x{total_len} = {} values, found {}",
                rows * total_len,
                values.len()
            )));
        }
        for (i, row) in values.chunks(total_len).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
                if j >= prompt_len + i && v != 0.0 {
                    return Err(Error::Causality { row: i, col: j, value: v });
                }
            }
        }
        Ok(Self { prompt_len, total_len, values, method_tag: method_tag.into(), unit_level })
    }

    /// Builds a table from per-row vectors. Short rows are zero-padded.
    pub fn from_rows(
        prompt_len: usize,
        rows: &[Vec<f64>],
        method_tag: impl Into<String>,
        unit_level: UnitLevel,
    ) -> Result<Self> {
        let total_len = prompt_len + rows.len();
        let mut values = vec![0.0; rows.len() * total_len];
        for (i, r) in rows.iter().enumerate() {
            if r.len() > total_len {
                return Err(Error::dim(format!("row {i} has {} entries, max {total_len}", r.len())));
            }
            values[i * total_len..i * total_len + r.len()].copy_from_slice(r);
        }
        Self::new(prompt_len, total_len, values, method_tag, unit_level)
    }

    /// `P`.
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// `T`.
    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// `Y = T - P`.
    pub fn generated_len(&self) -> usize {
        self.total_len - self.prompt_len
    }

    /// Base-method tag.
    pub fn method_tag(&self) -> &str {
        &self.method_tag
    }

    /// Unit granularity.
    pub fn unit_level(&self) -> UnitLevel {
        self.unit_level
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Full row `i` (length `T`).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.total_len..(i + 1) * self.total_len]
    }

    /// Entry at generated row `i`, global column `j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.total_len + j]
    }

    /// Iterator over rows.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.total_len)
    }

    /// Returns a copy with a different method tag.
    pub fn with_method_tag(mut self, tag: impl Into<String>) -> Self {
        self.method_tag = tag.into();
        self
    }

    /// True if every entry in the generated-unit columns is zero.
    pub fn has_empty_intergenerational_block(&self) -> bool {
        self.rows().all(|r| r[self.prompt_len..].iter().all(|&v| v == 0.0))
    }

    /// Serializes to the table file format.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses the table file format, enforcing causality.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: TableFile = serde_json::from_str(text)?;
        Self::try_from(file)
    }

    /// Writes the table file.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Reads a table file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl TryFrom<TableFile> for AttributionTable {
    type Error = Error;

    fn try_from(f: TableFile) -> Result<Self> {
        Self::new(f.prompt_len, f.total_len, f.values, f.method_tag, f.unit_level)
    }
}

impl From<AttributionTable> for TableFile {
    fn from(t: AttributionTable) -> Self {
        TableFile {
            prompt_len: t.prompt_len,
            total_len: t.total_len,
            unit_level: t.unit_level,
            method_tag: t.method_tag,
            values: t.values,
        }
    }
}

/// Averages a token-level table into a sentence-level one.
///
/// `prompt_seg` spans index prompt tokens `[0, P)`; `gen_seg` spans index
/// generated tokens `[0, Y)`. Tokens not covered by any span (whitespace)
/// are ignored, but each segmentation must reach the end of its region.
///
/// Entry `(i, j)` of the result is the mean of the token scores where a
/// token of generated sentence `i` is influenced by a token of sentence
/// `j`, over the cells that lie strictly below the token diagonal. The
/// block of a sentence with itself sits on the sentence-level diagonal and
/// is not stored.
pub fn aggregate_to_sentences(
    table: &AttributionTable,
    prompt_seg: &[UnitSpan],
    gen_seg: &[UnitSpan],
) -> Result<AttributionTable> {
    if table.unit_level() != UnitLevel::Token {
        return Err(Error::UnitLevel { expected: "token", found: table.unit_level().as_str() });
    }
    let p_tok = table.prompt_len();
    let y_tok = table.generated_len();
    check_spans(prompt_seg, p_tok, "prompt")?;
    check_spans(gen_seg, y_tok, "generated")?;
    match (prompt_seg.last(), gen_seg.last()) {
        (Some(p), Some(g)) if p.end == p_tok && g.end == y_tok => {}
        (Some(_), Some(_)) => {
            return Err(Error::dim(format!(
                "segmentation does not cover the table ({p_tok} prompt + {y_tok} generated tokens)"
            )))
        }
        _ => return Err(Error::dim("segmentation is empty")),
    }

    // Global token ranges of every sentence, prompt first.
    let col_ranges: Vec<(usize, usize)> = prompt_seg
        .iter()
        .map(|s| (s.start, s.end))
        .chain(gen_seg.iter().map(|s| (p_tok + s.start, p_tok + s.end)))
        .collect();

    let p_sent = prompt_seg.len();
    let t_sent = col_ranges.len();
    let mut values = vec![0.0; gen_seg.len() * t_sent];
    for (i, g) in gen_seg.iter().enumerate() {
        for (j, &(c0, c1)) in col_ranges.iter().enumerate().take(p_sent + i) {
            let mut sum = 0.0;
            let mut n = 0usize;
            for r in g.start..g.end {
                let diag = p_tok + r;
                for c in c0..c1.min(diag) {
                    sum += table.get(r, c);
                    n += 1;
                }
            }
            if n > 0 {
                values[i * t_sent + j] = sum / n as f64;
            }
        }
    }
    AttributionTable::new(p_sent, t_sent, values, table.method_tag(), UnitLevel::Sentence)
}
