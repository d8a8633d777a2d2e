//! Skimming–intensive long-text classification.
//!
//! A cheap "lite" encoder skims every segment of a long document and scores
//! each one with self-adaptive attention; the highest-scoring segment (plus
//! context) is handed to a "strong" encoder for intensive classification.
//! The crate carries everything needed to train and evaluate that pipeline
//! on a single desktop core: a dense f64 tensor library with hand-written
//! backward passes, transformer encoder stacks, the skim/select/intensive
//! model, the staged training loop, truncation/head-tail/slide-window
//! baselines, and a cost-scaling benchmark harness.

pub mod baselines;
pub mod checkpoint;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod model;
pub mod tensor;
pub mod textio;
pub mod training;

pub use encoder::{EncoderConfig, EncoderParams};
pub use error::{CoreError, Result};
pub use model::{KeySegment, SkimOutput, SkinParams};
pub use tensor::{AdamState, Tensor};
pub use textio::{SegmentedDoc, SynthSpec, TestSet, TrainSet, Vocab};
pub use training::{EvalReport, TrainConfig};
