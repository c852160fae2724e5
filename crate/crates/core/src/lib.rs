//! Multimodal ensembles trained with multiple choice learning.
//!
//! One small classifier per input modality is trained jointly: each sample is
//! won by the network with the lowest loss on it, and the variants differ in
//! what the losing networks learn from that sample. The distillation
//! variants let losers imitate the winner's softened prediction, which keeps
//! every network useful on its own when other modalities go missing.
//!
//! Modules:
//! - [`math`]: tensors and the reverse-mode tape
//! - [`net`]: per-modality classifiers and checkpoints
//! - [`losses`]: cross-entropy plus the soft-target and KL terms
//! - [`engine`]: winner selection and training variants
//! - [`data`]: synthetic multimodal datasets
//! - [`eval`]: accuracy reports and the kNN probe

mod codec;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod losses;
pub mod math;
pub mod net;
pub mod parallel;
pub mod rng;

pub use data::{Batch, MultimodalDataset, SeparabilityProfile, Split};
pub use engine::{train, train_step, EvalSchedule, StepOutcome, TrainConfig, TrainRun, Variant};
pub use error::{Error, Result};
pub use eval::{evaluate, knn_probe, EvalReport, KnnTable, Subset};
pub use math::Tensor;
pub use net::{Ensemble, ModalityNetwork};
