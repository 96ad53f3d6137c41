pub mod bench;
pub mod calibrate;
pub mod config;
pub mod metrics;
pub mod motor;
pub mod scenario;
pub mod sim;
pub mod trace;
