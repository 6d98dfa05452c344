//! Batch commands and the local preview service over `rescreen_core`.

pub mod commands;
pub mod service;
