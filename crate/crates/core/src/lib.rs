//! Diffusion-inversion preprocessing for visual observations.
//!
//! Observations are pushed part of the way along a diffusion inversion so that
//! low-level appearance detail (texture, lighting) is washed out while coarse
//! scene structure survives. A policy trained on the inverted observations is
//! then deployed on the original ones.
//!
//! The crate works directly in pixel space: an image is a `3 x H x W`
//! [`Latent`] in `[-1, 1]`. Besides the inversion kernels it carries the
//! attribute-loss analysis that predicts when two images become
//! indistinguishable, aggregate distance tools, a deterministic parallel batch
//! pipeline, and a small synthetic imitation task used to check the
//! train-on-inverted / test-on-original protocol end to end.

pub mod analysis;
pub mod attribute;
pub mod codec;
pub mod container;
pub mod error;
pub mod harness;
pub mod inversion;
pub mod latent;
pub mod noise;
pub mod pipeline;
pub mod schedule;

pub use error::{Error, Result};
pub use latent::Latent;
pub use noise::{draw_noise, NoiseKey};
pub use schedule::{NoiseSchedule, ScheduleKind};
