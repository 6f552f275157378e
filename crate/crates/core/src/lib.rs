//! Desk-scale continual fine-tuning laboratory.

pub mod corpus;
pub mod engine;
pub mod rng;
pub mod strategies;
pub mod similarity;
pub mod eval;
pub mod drift;
pub mod linalg;
pub mod svg;
pub mod study;
