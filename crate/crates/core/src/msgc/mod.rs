//! The gating mechanism: mask generation, binarisation, attention, masked
//! grouped convolution and MAC accounting.

pub mod binarize;
pub mod block;
mod config;
pub mod filters;
pub mod grouped;
pub mod macs;
pub mod saliency;

pub use binarize::{binarize_eval, binarize_train, binarize_with_noise, Relaxation, SampledGate};
pub use config::{MsgcBlockConfig, DEFAULT_GUMBEL_TEMPERATURE};
pub use filters::{plug_in, plug_in_store, GroupFilterBank, GroupFilters};
pub use grouped::{grouped_conv_backward, grouped_conv_forward, masked_grouped_conv};
pub use macs::{compute_block_macs, BlockMacModel, LayerCost, MacLedger};
pub use block::{BasicBlock, BlockCache, BlockGate, BlockOutput, GateSpec, GateState, MaskRule};
pub use saliency::{MaskGenerator, MaskMlp, SaliencySet};
