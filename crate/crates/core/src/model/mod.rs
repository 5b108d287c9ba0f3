//! The Part and Context Network detector.

pub mod anchors;
pub mod config;
pub mod detection;
pub mod network;

pub use anchors::{generate_anchors, propose, scale_roi, ProposalSettings};
pub use config::ModelConfig;
pub use detection::{assemble, by_image, format_detections, fuse, parse_detections, read_detections, write_detections, Detection};
pub use network::{Backbone, OriginalOutput, Pcn, BBOX_STD, CLASSES};
