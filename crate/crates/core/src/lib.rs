// SPDX-License-Identifier: MIT OR Apache-2.0

//! Context attribution through attribution graphs.
//!
//! A base method fills an [`AttributionTable`] with the influence of every
//! earlier unit on every generated unit. The table is normalized into an
//! [`AttributionGraph`], and influence is marginalized over all paths from
//! the prompt to the chosen output units, so prompt units that act through
//! intermediate generations are credited.
//!
//! ```
//! use cage_core::{attribute_output, build_graph, AttributionTable, NormalizationMode, UnitLevel};
//!
//! // Two prompt units, two generated units; g2 leans on g1, g1 on p1.
//! let table = AttributionTable::from_rows(
//!     2,
//!     &[vec![1.0, 0.0], vec![0.0, 0.0, 1.0]],
//!     "demo",
//!     UnitLevel::Sentence,
//! )
//! .unwrap();
//! let graph = build_graph(&table, NormalizationMode::RowStochastic);
//! let cage = attribute_output(&graph, &[1], false).unwrap();
//! assert_eq!(cage.scores(), &[1.0, 0.0]);
//! ```

pub mod attribution;
pub mod baseattr;
pub mod datagen;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod modelclient;
pub mod propagation;
pub mod sequence;
pub mod table;

pub use attribution::ContextAttribution;
pub use baseattr::{clp_table, import_table, perturbation_table, Ablation, ScoringOptions};
pub use error::{Error, Result};
pub use graph::{build_graph, export_dot, prune_view, AttributionGraph, Edge, NormalizationMode};
pub use metrics::{attribution_coverage, deletion_curve, DeletionCurve, DeletionOptions, ProbabilityScale};
pub use modelclient::{HttpBackend, MockBackend, MockModelSpec, MockSemantics, ScoringBackend};
pub use propagation::{attribute_output, attribute_token, row_attribution, total_influence};
pub use sequence::{segment_text, Example, UnitLevel, UnitSpan};
pub use table::{aggregate_to_sentences, AttributionTable};
