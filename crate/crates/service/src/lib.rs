//! REST API and command line over the fairloop engine.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod jobs;
pub mod sessions;
pub mod views;
