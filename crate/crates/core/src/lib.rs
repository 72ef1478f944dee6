//! Post-processing for multi-object tracking and segmentation.
//!
//! Detections from several sources are fused into disjoint masks, linked
//! frame to frame into tracklets with optical-flow warping and appearance
//! gating, and tracklets are merged into long-term tracks by constrained
//! agglomerative clustering. The appearance thresholds for both stages are
//! estimated from the unlabelled video itself. Triplet sampling for
//! fine-tuning an appearance model on the target video is included, as is a
//! synthetic scene generator with ground truth.

pub mod assignment;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod io;
pub mod mask;
pub mod merger;
pub mod pipeline;
pub mod short_tracker;
pub mod synth;
pub mod triplets;
pub mod types;

pub use config::{PipelineConfig, Settings};
pub use error::{Error, Result};
pub use features::{Embedding, EmbeddingStore, Thresholds};
pub use fusion::{Detection, FusionConfig};
pub use mask::{decode_rle, encode_rle, BinaryMask, FlowField, RleMask};
pub use pipeline::{run_pipeline, run_videos, VideoData, VideoOutcome};
pub use types::{FrameObservations, FrameRange, Observation, ObservationKey, Tracklet};
