//! Label rotary cross-attention for binding several audio streams to the
//! people in a latent video, together with the machinery around it: the audio
//! adapter, attention-map person localization, the four injection schemes, a
//! toy trainable cross-attention block, the long-video chunk planner and the
//! experiment harness behind the `lrope-lab` tool.

pub mod audio;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod harness;
pub mod injection;
pub mod invariants;
pub mod localization;
pub mod longvideo;
pub mod lrope;
pub mod numerics;
pub mod tensor_io;
pub mod toy_model;

pub use error::{Error, Result};
pub use grid::TokenGrid;
pub use numerics::{Matrix, Rng};
