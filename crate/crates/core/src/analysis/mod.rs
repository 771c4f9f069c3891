//! Metrics, activation-map analysis, layer similarity and significance
//! testing.

pub mod activation;
pub mod cka;
pub mod metrics;
pub mod report;
pub mod stats;

pub use activation::{actmap_dice, activation_from_features, activation_maps, mean_actmap_dice, ActivationMap, ActivationMapConfig, DEFAULT_THRESHOLDS};
pub use cka::{checkpoint_cka, checkpoint_layers, cka_map, linear_cka, CkaGrid};
pub use metrics::{auc, binarize, dice_score, mean};
pub use report::{sha256_hex, MetricsReport};
pub use stats::{paired_t_test, student_t_two_sided, TTest};
