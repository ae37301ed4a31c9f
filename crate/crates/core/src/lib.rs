//! Memory-budgeted int8 encoder inference.
//!
//! The engine executes a BERT-style encoder with every activation buffer
//! drawn from a fixed-capacity [`arena::Arena`] that stands in for MCU SRAM.
//! Weights live outside the arena (they model Flash residency).
//!
//! Module map:
//! - [`qcore`]: affine int8 quantization arithmetic.
//! - [`arena`]: budgeted activation allocator with peak tracking and trace.
//! - [`kernels`]: register-blocked matmul, layout-fused attention matmuls,
//!   softmax / layernorm / GELU epilogues.
//! - [`embed`]: clustered low-rank token embedding runtime.
//! - [`sched`]: token-tiled MLP and head/token-tiled MHA executors, the
//!   analytic peak-memory model and the tile-size planner.
//! - [`format`]: the `.mcub` binary model format.

pub mod arena;
pub mod embed;
pub mod error;
pub mod format;
pub mod kernels;
pub mod model;
pub mod qcore;
pub mod sched;

pub use arena::{AllocEvent, Arena, ArenaStats, EventKind, Region};
pub use embed::{cluster_of, embed_lookup, embedding_param_count, ClusterSpec, ClusteredEmbedding, FactorPair};
pub use error::{Error, Result};
pub use format::{encoded_size, load_model, load_model_file, model_from_bytes, model_to_bytes, write_model, write_model_file};
pub use kernels::{LayoutDescriptor, MicroKernelShape, OpCounts};
pub use model::{EncoderConfig, EncoderModel, LayerNormParams, LayerQuant, LayerWeights, Linear, ParamCounts};
pub use qcore::{QTensor, QuantParams};
pub use sched::{
    peak_memory_model, plan_tile_size, run_encoder, run_encoder_naive, EncoderOutput, Mode, SchedulePlan, StagePeaks,
};
