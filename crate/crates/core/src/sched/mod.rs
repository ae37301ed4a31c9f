//! Memory-aware scheduling: the peak-memory model, the tile-size planner and
//! the tiled / naive encoder executors.

pub mod exec;
pub mod memory;

pub use exec::{
    run_embedding, run_encoder, run_encoder_naive, run_layernorm, run_mha_naive, run_mha_tiled, run_mlp_naive,
    run_mlp_tiled, Activation, EncoderOutput,
};
pub use memory::{peak_memory_model, plan_tile_size, Mode, SchedulePlan, StagePeaks};
