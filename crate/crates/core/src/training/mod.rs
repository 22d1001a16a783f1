//! Loss, optimizer, gradient checks and the two training pipelines.

pub mod gradcheck;
mod loss;
mod optim;
mod pipeline;

pub use loss::{cross_entropy, loss_mse_pearson, loss_mse_pearson_grad, masked_loss, pearson_with_grad, LossConfig, LossParts};
pub use optim::{adamw_step, AdamW};
pub use pipeline::{
    argmax, finetune_cls, format_log, is_frozen_for_finetune, predict_cls, pretrain_ssl, ClsOutcome, EpochMetrics,
    SslOutcome, TrainConfig, METRICS_HEADER,
};

/// Derives an independent seed from `seed` and a stream label (splitmix64).
pub fn mix_seed(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
