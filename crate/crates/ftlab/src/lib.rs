//! Desk-scale fine-tuning laboratory.
//!
//! A micro decoder-only transformer classifier built on an in-crate
//! reverse-mode autodiff engine, plus the machinery to compare five
//! fine-tuning strategies (vanilla, pattern-based, adaptive freezing,
//! LoRA adapters, context distillation) under a seeded few-shot
//! protocol and to emit in-domain / out-of-domain accuracy tables.

pub mod adapt;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
