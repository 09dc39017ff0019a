//! Fuzzy multi-view classification with conflict-aware fusion and a staged
//! training pipeline that detects and down-weights conflicting views.
//!
//! The crate is organized around the data flow of a multi-view classifier:
//!
//! * [`fuzzy`] — logits to memberships, credibility, uncertainty, conflict;
//! * [`fusion`] — combining per-view opinions into one decision;
//! * [`loss`] — credibility learning losses and their robust variants;
//! * [`net`] — a small seeded MLP engine with exact gradients ([`grad`]);
//! * [`gmm`] — two-component mixture fitting over per-view loss statistics;
//! * [`pipeline`] — the four-stage robust training loop and its manifest;
//! * [`data`] — multi-view datasets, synthetic generation, corruption;
//! * [`metrics`] — accuracy, FPR95, division quality, density exports.

pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod fuzzy;
pub mod gmm;
pub mod grad;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod net;
pub mod pipeline;

pub use error::{Error, Result};
