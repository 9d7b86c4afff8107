//! Secure broadcast two-way ranging over narrowband channels.
//!
//! Signal processing is generic over [`Real`] (`f32` or `f64`); the
//! protocol, adversary and scenario layers run in `f64`.

pub mod adversary;
pub mod channel;
pub mod detector;
pub mod error;
pub mod filters;
pub mod num;
pub mod protocol;
pub mod ranging;
pub mod scenarios;
pub mod sequences;
pub mod sic;
pub mod signal;

pub use error::{Error, Result};
pub use num::Real;

pub type Complex64 = num_complex::Complex<f64>;
pub type Signal = signal::BasebandSignal<f64>;
pub type Signal32 = signal::BasebandSignal<f32>;
pub type Series = detector::CorrelationSeries<f64>;
pub type Detection = detector::DetectionResult<f64>;
pub type Observation = ranging::RangingObservation<f64>;
pub type Batch = ranging::BatchEstimate<f64>;
pub type Report = sic::SicReport<f64>;
