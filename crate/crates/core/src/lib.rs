//! Dynamic visual-token exit for decoder-only multimodal transformers.
//!
//! A small laboratory around one idea: once the text tokens of a multimodal
//! prompt have absorbed what they need from the image, every visual token can
//! be dropped for the remaining layers. Per-layer gate networks read the text
//! token status and decide when that point has been reached.
//!
//! * [`tensor`], [`rng`]: dense `f64` kernels and portable seeded randomness.
//! * [`model`]: the decoder with traces, a KV cache and the exit operation.
//! * [`attn_stats`]: attention block statistics, entropies, stage boundaries.
//! * [`gate`]: token-status features, gate networks and gated inference.
//! * [`training`]: weak labels and gate optimisation.
//! * [`flops`]: analytic operation counts with and without exit.
//! * [`baselines`]: fixed-layer exit, attention-rank pruning, combinations.
//! * [`synth`]: synthetic grid tasks and the desk-scale model trainer.
//! * [`io`]: checkpoint containers and CSV/JSON artifacts.

pub mod attn_stats;
pub mod baselines;
pub mod error;
pub mod flops;
pub mod gate;
pub mod io;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Inputs, Model, ModelConfig};
pub use rng::SeededRng;
pub use tensor::Matrix;

/// Version stamped into every CSV and JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;
