//! Convolution through pre-calculated inference lookup tables.
//!
//! For activations of small cardinality every product `f(w, a)` a filter can
//! ever produce is computed once and stored in a per-weight table. Inference
//! then turns each multiplication into a memory read addressed by the
//! activation value. The crate provides:
//!
//! - [`tensor`] / [`qtf`]: quantized tensors, filters and their file format
//! - [`reference`]: the direct-multiplication oracle
//! - [`conv_fn`]: functions the tables can be filled with
//! - [`pcilt`]: per-tap tables and lookup convolution
//! - [`packing`]: multi-tap segment tables addressed by packed activations
//! - [`shared`]: table deduplication, prefix sharing and value indirection
//! - [`learned`]: tables as trainable parameters
//! - [`cost`]: closed-form operation and memory accounting
//! - [`bankfile`]: bank serialization
//! - [`bench`]: equivalence checking and timing harness

pub mod bankfile;
pub mod bench;
pub mod conv_fn;
pub mod cost;
pub mod error;
pub mod learned;
pub mod num;
pub mod packing;
pub mod pcilt;
pub mod qtf;
pub mod reference;
pub mod shared;
pub mod tensor;

pub use conv_fn::{ConvFn, ValueGrid};
pub use error::{Error, Result};
pub use learned::{reconstruct_filter, train, Granularity, LearnedBank, TrainConfig};
pub use num::{Acc, EntryWidth, Weight};
pub use packing::{
    build_segment_bank, build_split_bank, compile_plan, pack_window, packed_conv2d, packed_conv2d_counted,
    split_conv2d, SegmentBank, SegmentPlan, SplitBank,
};
pub use pcilt::{
    build_bank, build_bank_with, build_pcilt, fold_input_weight, pcilt_conv2d, pcilt_conv2d_counted,
    BuildOptions, Pcilt, PciltBank,
};
pub use qtf::{load_qtf, save_qtf, AnyFilter, QtfRecord};
pub use reference::{dm_conv2d, dm_conv2d_counted, dm_mult_count, ConvGeometry, OpCounts};
pub use shared::{dedup, prefix_check, value_indirection, BankRef, Indirection, IndirectionMode, SharedBank};
pub use tensor::{
    rescale_to_common_cardinality, AccTensor, Cardinality, Filter, QTensor, RescaleTarget, WeightKind,
};
