//! FP8 post-training quantization toolkit.
//!
//! - [`tensor`] / [`container`]: tensor model, binary16 rounding and the RQTF file format
//! - [`fp8`]: bit-exact E4M3 codec
//! - [`quantizer`]: absmax scaling at tensor, channel, token and block granularity
//! - [`qgemm`]: FP16 and FP8 linear layers and the block-wise grouped GEMM
//! - [`topk`]: radix top-k selection
//! - [`stats`]: variance / AbsMax / AbsP99 analysis
//! - [`pipeline`]: a toy attention + dense FFN + MoE block runnable in both precisions
//! - [`bench`]: stage-level timing reports
//! - [`cli`]: the `recquant` command line

pub mod bench;
pub mod cli;
pub mod container;
pub mod error;
pub mod fp8;
pub mod pipeline;
pub mod qgemm;
pub mod quantizer;
pub mod stats;
pub mod tensor;
pub mod topk;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
