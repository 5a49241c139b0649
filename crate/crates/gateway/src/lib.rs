//! Command line and HTTP front end for the obfusgate pipelines.

pub mod cli;
pub mod config;
pub mod server;
pub mod services;

pub use config::GatewayConfig;
pub use services::Services;
