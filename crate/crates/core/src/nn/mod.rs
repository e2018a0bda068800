//! Cornering-stiffness estimator: a small MLP, its training loop and the
//! simulator-backed dataset it learns from.

pub mod dataset;
pub mod mlp;
pub mod train;

pub use dataset::{generate_dataset, secant_stiffness, DatasetRow, ManeuverPlan, StiffnessDataset};
pub use mlp::{FeatureVector, MlpModel, Standardizer, DEFAULT_LAYERS, N_FEATURES, N_OUTPUTS};
pub use train::{r2_score, train, LossHistory, TrainConfig};
