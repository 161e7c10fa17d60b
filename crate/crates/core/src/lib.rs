//! Low-cost weather station pipeline: simulated acquisition, store-and-forward
//! telemetry, hourly processing, comparison metrics, and regression-based
//! sensor calibration against a reference station.

pub mod calibration;
pub mod client;
pub mod metrics;
pub mod model;
pub mod processing;
pub mod server;
pub mod sim;
pub mod store;
