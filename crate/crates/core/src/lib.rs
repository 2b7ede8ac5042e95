//! Cross-modal adaptation of a small LayerNorm CNN-Transformer.
//!
//! A source-trained embedding network is adapted to a second imaging
//! modality by unfreezing selected parameter groups and minimizing a
//! λ-weighted sum of a cosine contrastive loss and a self-distillation
//! loss against a frozen copy of itself.
//!
//! | module | contents |
//! |---|---|
//! | [`gradcore`] | f64 tensors, reverse-mode autodiff, finite-difference checker |
//! | [`miniedge`] | the backbone, parameter groups, complexity accounting |
//! | [`partition`] | LayerNorm / adapted / frozen split and the frozen check |
//! | [`losses`] | contrastive, self-distillation and combined objectives |
//! | [`syndata`] | deterministic two-modality synthetic identities |
//! | [`trainer`] | Adam, source pretraining, adaptation, evaluation |
//! | [`metrics`] | AUC, EER, Rank-1, VR@FAR, fold aggregation |
//! | [`cli`] | run config, weights format and the `hfr` subcommands |

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod gradcore;
pub mod losses;
pub mod metrics;
pub mod miniedge;
pub mod partition;
pub mod syndata;
pub mod trainer;

pub use error::{Error, Result};
pub use gradcore::{finite_diff_check, Graph, NodeId, Tensor};
pub use losses::LossWeights;
pub use metrics::{EvalReport, FoldSummary};
pub use miniedge::{BackboneConfig, Model, ParameterGroup};
pub use partition::{AdaptConfig, PartitionReport};
pub use syndata::{Dataset, Modality, PairBatch};
pub use trainer::{AdamState, Protocol, TrainConfig, TrainLog};
