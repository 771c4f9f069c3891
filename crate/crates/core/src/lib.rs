//! Multi-view contrastive self-supervised pretraining for paired ultrasound
//! views, with fine-tuning, evaluation and representation analysis.

pub mod analysis;
pub mod augment;
pub mod backend;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod image;
pub mod memory_bank;
pub mod models;
pub mod pretrain;
pub mod rng;

pub use config::RunConfig;
pub use error::{Error, Result};
