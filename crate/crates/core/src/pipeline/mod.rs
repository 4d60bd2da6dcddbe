//! Training, evaluation, persistence and the command-line front end.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod experiments;
pub mod optim;
pub mod report;
pub mod train;

pub use augment::{augment_batch, augment_sample, flip_sample, Sample};
pub use config::{AugmentConfig, Config, DataConfig, StageConfig, SEED_ENV};
pub use data::{derive_seed, quadrant_split, Dataset};
pub use optim::{lr_schedule, Adam};
pub use train::{train_coarse, train_fine, train_regressor, CoarseEpoch, CoarseRun, FineEpoch, FineRun};
