//! Cycle-approximate performance model and bit-exact functional model of the
//! Lupulus CNN accelerator.
//!
//! The pipeline is `LayerSpec` → [`mapper`] → [`schedule`] → either
//! [`functional`] (integer results) or [`timing`] (latency breakdown).

pub mod calibrate;
pub mod compare;
pub mod config;
pub mod error;
pub mod fetch;
pub mod functional;
pub mod layer;
pub mod mapper;
pub mod schedule;
pub mod tensor;
pub mod timing;

pub use config::HwConfig;
pub use error::{Error, Result};
pub use layer::{LayerKind, LayerSpec, NetworkSpec};
pub use mapper::{map_layer, MappingPlan};
pub use schedule::{build_schedule, Schedule};
pub use tensor::Tensor;
pub use timing::{simulate_timing, TimingReport};
