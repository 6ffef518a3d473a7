//! Blockified sparse attention for long-sequence diffusion transformers.
//!
//! The crate provides exact dense and blockwise attention, an online block-mask
//! search that reuses cached log-sum-exp values across denoising steps,
//! head-adaptive sparsity allocation, block-sparse execution, a synthetic
//! multi-step workload, and the schedule that ties them together.

pub mod blocks;
pub mod cli;
pub mod error;
pub mod flash;
pub mod layout;
pub mod oracle;
pub mod pipeline;
pub mod search;
pub mod sparse;
pub mod tensor;
pub mod workload;

pub use blocks::{BlockGrid, BlockMask, BlockScoreMatrix, ElementMask};
pub use error::{Error, Result};
pub use flash::{flash_forward, FlashResult};
pub use layout::{block_index_of, make_layout, SequenceLayout};
pub use oracle::{dense_attention, masked_dense_attention, AttnWeights, DenseAttnResult, MaskBias, PatternKind};
pub use search::{fused_online_search, lse_cached_search, select_topk_mask, SparsityConfig};
pub use sparse::{block_sparse_forward, flop_count, SparseAttnResult};
pub use tensor::{seeded_tensor, AttnTensor, LseVector, Precision, Role};
