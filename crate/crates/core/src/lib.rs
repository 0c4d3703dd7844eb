//! ON-LSTM and dependency-GCN model for target-oriented opinion word
//! extraction.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gcn;
pub mod model;
pub mod objective;
pub mod onlstm;
pub mod params;
pub mod syntax;
pub mod tape;
pub mod trainer;

pub use corpus::{decode_bio, encode_bio, Bio, Sentence, Span, SpanSet};
pub use error::{Error, Result};
pub use objective::{AblationMask, LossBreakdown, RegPool, Variant};
pub use syntax::DepTree;
pub use model::{Example, Model, ModelConfig};
pub use checkpoint::Checkpoint;
pub use trainer::{evaluate, train, Metrics, TrainConfig};
