//! Multi-branch correlation filter tracking engine.
//!
//! The tracker learns one independent correlation filter bank per feature
//! hierarchy level, fuses the per-branch score maps through an adaptively
//! weighted quadratic program over the probability simplex, and stabilizes
//! localization with a constant-velocity Kalman motion model that centers
//! the search region and gates features around the predicted position.
//!
//! Module map:
//!
//! - [`signal`]: DFTs, cyclic correlation, windows, Gaussian labels.
//! - [`frame`]: grayscale frames, boxes, search-patch extraction.
//! - [`features`]: per-layer feature stacks, PCA, external feature files.
//! - [`filter`]: per-branch ridge objective, normal equations, CG solver,
//!   sample memory.
//! - [`motion`]: Kalman prediction/correction and the motion map.
//! - [`fusion`]: branch energies, simplex-QP weights, score fusion,
//!   sub-cell localization.
//! - [`scale`]: multi-scale search over a geometric size pyramid.
//! - [`tracker`]: the per-frame pipeline tying everything together.

// Validation guards use `!(x > 0.0)` so NaN parameters are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod features;
pub mod filter;
pub mod frame;
pub mod fusion;
pub mod motion;
pub mod scale;
pub mod signal;
pub mod tracker;

pub use error::{Error, Result};
pub use frame::{BoundingBox, Frame};
pub use tracker::{Tracker, TrackerConfig};
