//! OCR-free multi-page document question answering.
//!
//! A question is rendered to pixels and stacked on top of each page image;
//! the fused image is cut into 16x16 patches and encoded by a small
//! transformer. A self-attention scoring head rates every page of a
//! document independently, the best page is selected, and a character
//! decoder generates the answer from that page's encoder feature.
//!
//! The numeric core is generic over the floating-point type ([`Scalar`]:
//! `f32` or `f64`); the aliases below fix it to `f64`, the precision used
//! for training and gradient checks, with `…32` variants for `f32`.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod render;
pub mod scalar;
pub mod scorer;
pub mod tensor;
pub mod training;

pub use data::{Dataset, Document, PageRef, QASample, SynthConfig};
pub use error::{Error, Result};
pub use eval::{MetricsReport, PageScores, QuestionResult};
pub use model::{ModelConfig, TokenSeq, Vocab};
pub use render::{GlyphFont, InputLayout, RasterImage};
pub use scalar::Scalar;
pub use scorer::{Aggregation, RelevanceScore, ScorerConfig};
pub use training::{History, TrainConfig};

pub type Model = model::VqaModel<f64>;
pub type Scorer = scorer::PageScorer<f64>;
pub type Feature = model::EncoderFeature<f64>;
pub type Patches = render::PatchGrid<f64>;
pub type Pipeline<'a> = eval::Pipeline<'a, f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;

pub type Model32 = model::VqaModel<f32>;
pub type Scorer32 = scorer::PageScorer<f32>;
pub type Feature32 = model::EncoderFeature<f32>;
pub type Patches32 = render::PatchGrid<f32>;
pub type Pipeline32<'a> = eval::Pipeline<'a, f32>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
