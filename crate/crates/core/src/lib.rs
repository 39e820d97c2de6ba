//! Two-stage multimodal chain-of-thought: a rationale model followed by an
//! answer model, with rationale training hardened by rule-generated soft
//! negatives and a bidirectional margin loss on a cosine-similarity gap.
//!
//! Everything numeric runs on the small reverse-mode engine in
//! [`autodiff`]; the model, loss, sampler, training driver and evaluation
//! harness are built on top of it.

pub mod autodiff;
pub mod contrastive;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod tensor;
pub mod text;

pub use autodiff::{Graph, Var};
pub use contrastive::{BmlMode, ContrastiveBatch, Margins};
pub use corpus::{Record, Split};
pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, GradCheck};
pub use model::{ModelConfig, ModelParams, VisionFeatures};
pub use pipeline::TrainConfig;
pub use sampler::{Lexicons, Method, SamplerConfig, SoftNegative};
pub use tensor::Tensor;
pub use text::Vocab;
