//! Telemetry and exposure analytics for low-cost PM2.5 sensor networks.

pub mod wire;
pub mod timeseries;
pub mod calibration;
pub mod analytics;
pub mod exposure;
pub mod config;
pub mod scenario;
pub mod pipeline;
