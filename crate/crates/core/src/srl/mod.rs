//! Semi-supervised representation learning over feature vectors.
//!
//! A tanh encoder feeds a softmax classifier and a unit-normalized
//! projection head. Training minimizes a supervised loss on the selected
//! clean samples, a confidence-gated weak/strong agreement loss on the
//! rest, and an instance-similarity consistency loss against sampled
//! anchors. Gradients are derived by hand.

mod augment;
mod loss;
mod model;
mod train;

pub use augment::{augment_strong, augment_weak, featurewise_std, perturb_rows};
pub use loss::{
    instance_similarity, loss_consistency, loss_labeled, loss_unlabeled, loss_unlabeled_with, srl_total_loss, LossParts,
    SrlBatch, UnlabeledTarget,
};
pub use model::{Gradients, Layer, SrlModel};
pub use train::{predict, train_srl, SrlConfig, SrlEpoch};
