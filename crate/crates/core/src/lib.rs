//! Orchestration service for Wizard-of-Oz pilot studies with optical
//! see-through head-mounted displays.

pub mod analyzer;
pub mod cli;
pub mod harness;
pub mod ids;
pub mod media;
pub mod server;
pub mod session;
pub mod sim;
pub mod store;
pub mod sync;
pub mod time;

pub use time::Timestamp;
