//! Tribal Theater Model: budgeted chat rooms whose speaking resources are
//! reallocated after every action by a pluggable allocator.

pub mod cli;
pub mod domain;
pub mod engine;
pub mod matrix;
pub mod sentiment;
pub mod service;
pub mod simulator;
pub mod ttransformer;
pub mod vectorizer;
