//! Compute primitives. None of these allocate arena memory: every kernel
//! writes into a caller-provided region, and every reshape or transpose is
//! a [`LayoutDescriptor`] over an existing buffer.

pub mod layout;
pub mod matmul;
pub mod nonlinear;

pub use layout::{LayoutDescriptor, MatMut, MatRef};
pub use matmul::{
    attention_scores, attention_scores_into, matmul_into, matmul_reference, matmul_reference_into, matmul_tiled,
    Epilogue, MicroKernelShape, OpCounts,
};
pub use nonlinear::{
    gelu, gelu_f32, layernorm_rows, layernorm_rows_inplace, residual_add_inplace, softmax_rows, softmax_rows_inplace,
    Addend, GeluLut, LAYERNORM_EPS,
};
