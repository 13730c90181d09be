//! Flow-based future instance segmentation at desk scale: forecast dense
//! optical flow autoregressively with a UNet + ConvLSTM model, warp current
//! instance masks into future frames with a learned warping network, and
//! aggregate warped instances into future semantic maps. A deterministic
//! synthetic moving-scene generator supplies data and analytic ground truth.

pub mod aggregate;
pub mod error;
pub mod fields;
pub mod harness;
pub mod masknet;
pub mod metrics;
pub mod nn;
pub mod ofnet;
pub mod plot;
pub mod synthgen;
pub mod tracker;
pub mod warpop;

pub use error::{Error, Result};
