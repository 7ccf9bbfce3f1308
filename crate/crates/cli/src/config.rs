// SPDX-License-Identifier: MIT OR Apache-2.0

//! Optional TOML configuration. Every key mirrors a command-line flag;
//! flags given on the command line take precedence.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cage_core::NormalizationMode;
use serde::Deserialize;

use crate::{BaseMethod, SemanticsArg};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub method: Option<BaseMethod>,
    pub mode: Option<Modes>,
    pub threshold: Option<f64>,
    pub normalize_by_output: Option<bool>,
    pub top_k: Option<usize>,
    pub seed: Option<u64>,
    pub backend_url: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub max_in_flight: Option<usize>,
    pub mock_semantics: Option<SemanticsArg>,
}

/// `mode = "sum1"` or `mode = ["sum1", "none"]`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum Modes {
    One(NormalizationMode),
    Many(Vec<NormalizationMode>),
}

impl Modes {
    pub fn into_vec(self) -> Vec<NormalizationMode> {
        match self {
            Modes::One(m) => vec![m],
            Modes::Many(v) => v,
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
