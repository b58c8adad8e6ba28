//! Certified pairwise-margin bounds for feed-forward networks under
//! element-wise weight perturbation, with robust training, weight-space
//! attacks and generalization statistics.

pub mod analysis;
pub mod attack;
pub mod bounds;
pub mod data;
mod error;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod network;
pub mod trainer;

pub use analysis::{BoundStatistics, GeneralizationBound};
pub use attack::{AttackConfig, RobustCurve};
pub use bounds::{MarginCertificate, PerturbationSpec};
pub use data::Dataset;
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use losses::{ClassificationLoss, LossConfig, Regularizer};
pub use network::{Activation, ForwardTrace, Network, NetworkSpec};
pub use trainer::{RunRecord, TrainConfig};
