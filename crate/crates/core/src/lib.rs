//! Black-box auditing of OpenAI-compatible LLM gateways.
//!
//! The crate measures four behavioral dimensions of a gateway: which model
//! actually answers (response-signature classification), multi-turn memory
//! retention, billing accuracy and latency stability. Numeric code is generic
//! over [`Scalar`]; the aliases below fix it to `f64`.

pub mod billing;
pub mod client;
pub mod conversation;
mod error;
pub mod gbdt;
pub mod identifier;
pub mod jsonl;
pub mod latency;
pub mod probe;
pub mod scalar;
pub mod signature;
pub mod tokens;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type LatencyStats = latency::Stats<f64>;
pub type BaseFeatures = signature::BaseFeatures<f64>;
pub type SignatureMatrix = signature::SignatureMatrix<f64>;
pub type SignatureRow = signature::SignatureRow<f64>;
pub type ReferenceSet = signature::ReferenceSet<f64>;
pub type Ensemble = gbdt::Ensemble<f64>;
pub type ModelClassifier = identifier::ModelClassifier<f64>;
pub type DatasetSplit = identifier::DatasetSplit<f64>;
