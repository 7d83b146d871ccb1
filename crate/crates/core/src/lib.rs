pub mod cli;
pub mod data;
pub mod engine;
pub mod metrics;
pub mod reporting;
pub mod service;
pub mod types;
