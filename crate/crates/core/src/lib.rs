//! Strain-based crack localization with Bayesian graph networks.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! - [`sim`] generates surface strain time series for a tube with an
//!   elliptical defect (a rank-controlled healthy response plus a localized
//!   strain concentration).
//! - [`pca`] fits healthy-structure bases and contrasts sparse sensor
//!   readings against them, leaving residuals that expose the defect.
//! - [`graph`] places sensors, computes node and edge features and connects
//!   nearest neighbours into a symmetric sensor graph.
//! - [`layers`] and [`graphnet`] define the network: a temporal CNN input
//!   block, message-passing core blocks with variational layers, and a
//!   graph-to-global output head.
//! - [`training`] optimizes the ELBO (or a least-squares loss for the
//!   deterministic baseline) with early stopping.
//! - [`eval`] draws posterior-predictive samples and computes NRMSE.
//!
//! Everything is built on the small autodiff engine in [`tensor`]; [`io`]
//! holds the on-disk formats.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod graphnet;
pub mod io;
pub mod layers;
pub mod pca;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
