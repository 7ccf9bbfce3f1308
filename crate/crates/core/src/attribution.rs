// SPDX-License-Identifier: MIT OR Apache-2.0

//! Context attributions: one score per prompt unit for a chosen output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizationMode;

/// Scores over prompt units explaining a set of generated units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AttributionFile", into = "AttributionFile")]
pub struct ContextAttribution {
    scores: Vec<f64>,
    output_indices: Vec<usize>,
    method_tag: String,
    mode: Option<NormalizationMode>,
}

/// On-disk layout of an attribution. `output_indices` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionFile {
    /// One score per prompt unit.
    pub scores: Vec<f64>,
    /// 1-based generation indices of the explained output.
    pub output_indices: Vec<usize>,
    /// Producing method, e.g. `cage(pert)` or `row(pert)`.
    pub method_tag: String,
    /// Graph normalization; `null` for row attributions.
    pub mode: Option<NormalizationMode>,
}

impl ContextAttribution {
    /// Builds an attribution. `output_indices` are 0-based and are sorted
    /// and deduplicated.
    pub fn new(
        scores: Vec<f64>,
        output_indices: impl IntoIterator<Item = usize>,
        method_tag: impl Into<String>,
        mode: Option<NormalizationMode>,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::arg("attribution has no prompt units"));
        }
        if let Some(k) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { row: 0, col: k });
        }
        let mut output_indices: Vec<usize> = output_indices.into_iter().collect();
        output_indices.sort_unstable();
        output_indices.dedup();
        Ok(Self { scores, output_indices, method_tag: method_tag.into(), mode })
    }

    /// Scores, one per prompt unit.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Number of prompt units.
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    /// Never true for a constructed attribution.
    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Explained generation indices (0-based, ascending).
    pub fn output_indices(&self) -> &[usize] {
        &self.output_indices
    }

    /// Producing method.
    pub fn method_tag(&self) -> &str {
        &self.method_tag
    }

    /// Normalization mode of the source graph, if any.
    pub fn mode(&self) -> Option<NormalizationMode> {
        self.mode
    }

    /// Returns a copy with a different method tag.
    pub fn with_method_tag(mut self, tag: impl Into<String>) -> Self {
        self.method_tag = tag.into();
        self
    }

    /// Sum of all scores.
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }

    /// Prompt indices by descending score; ties go to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }

    /// Serializes to the attribution file format.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses the attribution file format.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes the attribution file.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Reads an attribution file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl TryFrom<AttributionFile> for ContextAttribution {
    type Error = Error;

    fn try_from(f: AttributionFile) -> Result<Self> {
        let outputs = f
            .output_indices
            .iter()
            .map(|&i| i.checked_sub(1).ok_or_else(|| Error::arg("output indices are 1-based")))
            .collect::<Result<Vec<_>>>()?;
        Self::new(f.scores, outputs, f.method_tag, f.mode)
    }
}

impl From<ContextAttribution> for AttributionFile {
    fn from(a: ContextAttribution) -> Self {
        AttributionFile {
            scores: a.scores,
            output_indices: a.output_indices.iter().map(|i| i + 1).collect(),
            method_tag: a.method_tag,
            mode: a.mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_breaks_ties_by_index() {
        let a = ContextAttribution::new(vec![0.1, 0.5, 0.1, 0.5], [0], "x", None).unwrap();
        assert_eq!(a.ranking(), vec![1, 3, 0, 2]);
    }

    #[test]
    fn file_uses_one_based_outputs() {
        let a = ContextAttribution::new(vec![1.0], [2, 0, 2], "x", Some(NormalizationMode::RowStochastic))
            .unwrap();
        assert_eq!(a.output_indices(), &[0, 2]);
        let json = a.to_json().unwrap();
        assert!(json.contains("\"sum1\""));
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["output_indices"], serde_json::json!([1, 3]));
        assert_eq!(ContextAttribution::from_json(&json).unwrap(), a);
    }
}
