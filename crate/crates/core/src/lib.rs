//! Point-cloud reinforcement learning with patch tokenization.
//!
//! A point cloud is split into overlapping patches (farthest point sampling
//! plus k-nearest-neighbour grouping), each patch is embedded by a small
//! PointNet, and the token sequence is processed by a transformer. The
//! pooled embedding feeds a Soft Actor-Critic agent; the same encoder is
//! additionally trained by reconstructing masked patches in Morton order.
//!
//! Modules, bottom-up:
//!
//! - [`geometry`]: sampling, grouping, Morton ordering, voxel grids, and the
//!   observation preprocessing pipeline.
//! - [`autodiff`]: a small reverse-mode tensor engine with an Adam optimizer.
//! - [`tokenizer`], [`transformer`], [`losses`]: the model and its objectives.
//! - [`sac`]: agent, replay buffer and checkpoints.
//! - [`envs`]: synthetic point-cloud control tasks.
//! - [`harness`]: configuration, training loop, evaluation and CLI plumbing.

pub mod autodiff;
pub mod envs;
mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod sac;
pub mod tokenizer;
pub mod transformer;

pub use error::{Error, Result};
