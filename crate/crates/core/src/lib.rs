//! Causal tracing of factual knowledge in GPT-2 models, grouped by concept
//! category.
//!
//! The pipeline: tokenize fact prompts ([`tokenizer`]), load weights
//! ([`checkpoint`]), run the forward pass with interventions ([`model`]),
//! trace facts and aggregate per subcategory ([`tracing`]), compare
//! layer-importance orderings ([`locality`]) and render tables and figures
//! ([`report`]). [`darc`] and [`factgen`] cover the fact dataset itself.

pub mod checkpoint;
pub mod darc;
pub mod factgen;
pub mod locality;
pub mod model;
pub mod report;
pub mod tokenizer;
pub mod tracing;

pub use darc::{CategoryManifest, FactRecord, RelationKind};
pub use locality::{CorrelationMatrix, LayerImportanceVector};
pub use model::{ActivationCache, Component, Gpt2, InterventionSet, ModelConfig, ModelWeights, Site};
pub use tokenizer::{Bucket, TokenSpan, Vocab};
pub use tracing::{CategoryAggregate, FactTrace, TraceConfig};
