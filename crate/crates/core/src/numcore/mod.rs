//! Tensors, a small batch-normalized classifier, and losses with exact
//! gradients.

mod gradcheck;
mod loss;
mod model;
mod tensor;

pub use gradcheck::{grad_check, FD_STEP};
pub use loss::{
    bn_regularizer, bn_regularizer_loss, cross_entropy, kl_divergence, kl_to_targets, through_model, total_variation,
    BnRegularizer, LossValue,
};
pub use model::{
    ArchSpec, BatchNormState, BnMode, BnStatGrad, BnStats, Grads, LayerSpec, Model, Trace, BN_EPS, BN_TRAIN_MOMENTUM,
    BN_VAR_FLOOR,
};
pub use tensor::{argmax, dot, entropy, log_softmax, softmax, softmax_into, Tensor};
