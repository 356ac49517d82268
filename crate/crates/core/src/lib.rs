//! Discourse-weighted low-rank adaptation for summarization.
//!
//! RST parser output is turned into an EDU importance distribution, projected
//! onto token positions as a γ matrix, and used to scale the input of LoRA
//! adapters injected into a small transformer backbone.

pub mod ablation;
pub mod backbone;
pub mod container;
pub mod distribution;
pub mod error;
pub mod experiment;
pub mod gamma;
pub mod lora;
pub mod metrics;
pub mod parser_io;
pub mod scalar;
pub mod tokenizer;
pub mod trainer;
pub mod util;

pub use backbone::{attach_lora, AdaptedModel, Architecture, AttachOptions, Backbone, BackboneConfig};
pub use distribution::{make_variant, MergeOptions, RstDistribution, Variant};
pub use error::{Error, Result};
pub use gamma::{project_gamma, ChannelLayout, GammaMatrix};
pub use lora::{LoraAdapter, LoraConfig};
pub use parser_io::{EduSegmentation, LabelMap, ParseOutput};
pub use scalar::{Field, Precision, Rational, Scalar};

pub type ParseF64 = ParseOutput<f64>;
pub type ExactParse = ParseOutput<Rational>;
pub type ExactDistribution = RstDistribution<Rational>;
pub type DistributionF64 = RstDistribution<f64>;
pub type GammaF32 = GammaMatrix<f32>;
pub type GammaF64 = GammaMatrix<f64>;
pub type AdapterF32 = LoraAdapter<f32>;
pub type AdapterF64 = LoraAdapter<f64>;
pub type ModelF32 = AdaptedModel<f32>;
pub type ModelF64 = AdaptedModel<f64>;
