//! Masked-token text-to-image generator over VQ grids.

mod decode;
mod model;
mod schedule;

pub use decode::{decode_iterative, guide, DecodeConfig, DecodeTrace};
pub use model::{
    drop_caption, train_t2i, CaptionEmbedding, Condition, T2iConfig, T2iExample, T2iModel, T2iStepRecord,
    T2iTrainConfig,
};
pub use schedule::{apply_mask, mask_count, masked_count_at_step, sample_mask};
