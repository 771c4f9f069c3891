//! Encoder backbone, projection head and the downstream network shapes.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod encoder_set;
pub mod heads;
pub mod layers;
pub mod networks;
pub mod segmentation;

pub use backbone::{Backbone, BackboneOutput};
pub use checkpoint::Checkpoint;
pub use config::EncoderConfig;
pub use encoder_set::EncoderSet;
pub use heads::{Classifier, ProjectionHead};
pub use layers::{Ctx, Mode, StatUpdates};
pub use networks::{
    classify, encode, eval_pass, probe_features, project, seg_forward, ClassifierNet, Encoded, EncoderArch,
    MncLogits, Projection,
};
pub use segmentation::{build_segmentation_net, DecoderConfig, SegmentationNet};
