//! Desk-scale vision-language model with a reverse-mode tape, caption
//! loss, gradient checking and a frozen-backbone training loop.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_params, read_entries, save_params, write_entries, TensorEntry};
pub use gradcheck::{finite_diff_check, numeric_gradient, relative_error, GradCheckReport};
pub use model::{
    caption_loss, caption_loss_from_logits, cross_modal_attention, forward, patch_embed, patchify,
    total_loss, AlignTargets, AttentionParams, CaptionLoss, ItemOutput, ParamGroup, ParamId,
    TokenSeq, ToyModelConfig, ToyVlmParams, TrainItem,
};
pub use schedule::lr_at;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Matrix;
pub use train::{
    split_indices, synthetic_dataset, train, AdamW, StepRecord, TrainConfig, TrainReport,
};
