//! Semi-weakly supervised multiple instance learning on pre-extracted
//! feature bags: attention MIL with adaptive pseudo-bag assignment, MergeUp
//! augmentation and a mean-teacher consistency loop.

pub mod adapse;
pub mod bagcore;
pub mod cli;
pub mod error;
pub mod iis;
pub mod mergeup;
pub mod metrics;
pub mod milmodel;
pub mod seed;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use bagcore::{Bag, ClassPriority, Dataset, PseudoBag, Split, Status};
pub use error::{Error, Result};
pub use milmodel::{MilParams, Prediction};
pub use trainer::{train, TrainConfig, TrainOutcome, TrainReport};
