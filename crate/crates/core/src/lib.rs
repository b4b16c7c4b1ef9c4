//! Weakly-supervised video anomaly detection from pre-extracted snippet
//! features.
//!
//! A video is a bag of `T` snippet feature vectors carrying only a
//! video-level label. The [`model`] refines each bag with a temporal
//! attention layer and scores snippets with a small classifier; the
//! [`objective`] separates abnormal from normal bags through the magnitudes
//! of their top-k snippet features. Gradients come from the reverse-mode
//! [`graph`], verified by [`gradcheck`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod training;

pub use data::{crop_reduce, CropMode, Dataset, FeatureFile, FeatureRecord, Manifest, ManifestEntry, SynthConfig, Video};
pub use error::{Error, Result};
pub use evaluation::{auc, evaluate, roc_curve, snippet_to_frame_scores, EvalReport, RocPoint};
pub use graph::{Graph, Var};
pub use model::ModelParams;
pub use objective::{BagScores, Label, LossBreakdown, LossWeights};
pub use tensor::{Parameter, Tensor};
pub use training::{AdamConfig, Checkpoint, TrainConfig};
