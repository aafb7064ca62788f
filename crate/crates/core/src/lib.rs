//! Desk-scale laboratory for summary-conditioned preference learning.

pub mod adam;
pub mod artifacts;
pub mod bench;
pub mod cli;
pub mod config;
pub mod gradcheck;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod reward;
pub mod tape;
pub mod tensor;
pub mod models;
pub mod world;
pub mod trainer;
