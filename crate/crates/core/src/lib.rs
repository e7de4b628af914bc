//! Noisy meta label correction over embedding matrices.
//!
//! The pipeline alternates three stages: closed-form meta-gradient
//! correction of soft labels against randomly sampled noisy validation
//! splits ([`meta`]), KNN-based selection of likely-clean samples
//! ([`select`]), and a small semi-supervised trainer ([`srl`]) whose
//! encoder supplies the embeddings for the next correction round.

pub mod data;
pub mod error;
pub mod io;
pub mod meta;
pub mod noise;
pub mod numerics;
pub mod oracle;
pub mod pipeline;
pub mod select;
pub mod srl;
pub mod synth;

pub use data::{harden, label_agreement, one_hot, Dataset, FeatureMatrix, HardLabelVector, SoftLabelMatrix, SplitIndices};
pub use error::{Result, StctError};
pub use meta::{meta_label_update, required_sampling_times, run_nmc, NmcConfig, NmcOutcome, NmcTrace};
pub use pipeline::{run_stct, RunConfig, RunOutput, RunReport};
pub use noise::{inject_noise, make_asymmetric_t, make_symmetric_t, Convention, NoiseTransitionMatrix};
pub use select::{knn_pseudo_labels, select_clean, SelectionConfig};
pub use synth::{gaussian_mixture, MixtureSpec};
