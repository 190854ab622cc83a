//! Multi-instance Siamese self-supervised learning at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with reverse-mode differentiation
//! * [`views`]: IoU-constrained view pair sampling and rendering
//! * [`align`]: flip-back, RoI alignment and coordinate offset maps
//! * [`network`]: online/target networks, self-attentive prediction, EMA
//! * [`objective`]: intra-image K-means targets and every loss
//! * [`trainer`]: optimizers, schedules, training loop, checkpoints
//! * [`corpus`]: synthetic multi-instance scenes with ground-truth masks
//! * [`probe`]: clustering probes (ARI) and cluster-map rendering
//! * [`verify`]: finite-difference checks of every differentiable operation

pub mod align;
pub mod config;
pub mod corpus;
pub mod error;
pub mod network;
pub mod objective;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod views;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
