//! Time-of-flight arithmetic, batch estimation and latency calibration.

use crate::error::{Error, Result};
use crate::num::Real;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Timings of one request/response exchange on the initiator clock.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangingObservation<T> {
    pub sent: T,
    pub received: T,
    pub waiting: T,
    pub response_duration: T,
    pub timing_error: T,
    pub hardware_latency: T,
}

impl<T: Real> RangingObservation<T> {
    /// Observation an ideal exchange with the given ToF would produce.
    pub fn from_tof(
        tof: T,
        sent: T,
        waiting: T,
        response_duration: T,
        timing_error: T,
        hardware_latency: T,
    ) -> Self {
        let two = T::of(2.0);
        let rtt = two * (tof + timing_error) + waiting + response_duration + hardware_latency;
        Self {
            sent,
            received: sent + rtt,
            waiting,
            response_duration,
            timing_error,
            hardware_latency,
        }
    }

    pub fn round_trip(&self) -> T {
        self.received - self.sent
    }
}

pub fn compute_tof<T: Real>(obs: &RangingObservation<T>) -> T {
    T::of(0.5) * (obs.received - obs.sent - obs.waiting - obs.response_duration - obs.hardware_latency)
        - obs.timing_error
}

pub fn tof_to_distance<T: Real>(tof: T) -> T {
    tof * T::of(SPEED_OF_LIGHT)
}

pub fn distance_to_tof<T: Real>(distance: T) -> T {
    distance / T::of(SPEED_OF_LIGHT)
}

/// Median with the mean of the middle pair for even lengths.
pub fn median<T: Real>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * T::of(0.5)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchEstimate<T> {
    pub received: Vec<T>,
    pub batch_size_sent: usize,
    /// Indices into `received`, ascending.
    pub subset: Vec<usize>,
    pub final_distance: T,
}

/// Average the estimates nearest the median. Returns `None` when nothing
/// was received.
pub fn batch_estimate<T: Real>(estimates: &[T], batch_size_sent: usize) -> Result<Option<BatchEstimate<T>>> {
    if estimates.len() > batch_size_sent {
        return Err(Error::invalid(format!(
            "{} estimates exceed the batch size {batch_size_sent}",
            estimates.len()
        )));
    }
    let Some(med) = median(estimates) else {
        return Ok(None);
    };
    let k = (batch_size_sent / 2).min(estimates.len()).max(1);
    let mut order: Vec<usize> = (0..estimates.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (estimates[a] - med).abs();
        let db = (estimates[b] - med).abs();
        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut subset: Vec<usize> = order.into_iter().take(k).collect();
    subset.sort_unstable();
    let sum = subset.iter().fold(T::zero(), |acc, &i| acc + estimates[i]);
    Ok(Some(BatchEstimate {
        received: estimates.to_vec(),
        batch_size_sent,
        subset: subset.clone(),
        final_distance: sum / T::of(subset.len() as f64),
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyFit<T> {
    pub hardware_latency: T,
    /// Fitted seconds of raw ToF per metre.
    pub slope: T,
    pub intercept: T,
}

/// Straight-line fit of raw ToF against true distance; the intercept is
/// half the hardware latency.
pub fn calibrate_hardware_latency<T: Real>(pairs: &[(T, T)]) -> Result<LatencyFit<T>> {
    if pairs.len() < 2 {
        return Err(Error::invalid("need at least two calibration pairs"));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0.to_f64_lossy()).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1.to_f64_lossy()).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in pairs {
        let dx = x.to_f64_lossy() - mx;
        sxx += dx * dx;
        sxy += dx * (y.to_f64_lossy() - my);
    }
    if !(sxx > 0.0) || !sxx.is_finite() {
        return Err(Error::invalid("calibration distances must not all be equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    Ok(LatencyFit {
        hardware_latency: T::of(2.0 * intercept),
        slope: T::of(slope),
        intercept: T::of(intercept),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tof_examples() {
        let obs = RangingObservation {
            sent: 0.0f64,
            received: 2000e-9,
            waiting: 500e-9,
            response_duration: 1000e-9,
            timing_error: 0.0,
            hardware_latency: 0.0,
        };
        assert!((compute_tof(&obs) - 250e-9).abs() < 1e-18);
        let obs = RangingObservation { timing_error: 5e-9, ..obs };
        assert!((compute_tof(&obs) - 245e-9).abs() < 1e-18);
    }

    #[test]
    fn distance_conversions() {
        assert_eq!(tof_to_distance(0.0), 0.0);
        assert!((tof_to_distance(10e-9f64) - 2.998).abs() < 1e-3);
        assert!((tof_to_distance(-1e-9f64) + 0.2998).abs() < 1e-4);
    }

    #[test]
    fn batch_examples() {
        let b = batch_estimate(&[10.0; 7], 10).unwrap().unwrap();
        assert_eq!(b.subset.len(), 5);
        assert_eq!(b.final_distance, 10.0);
        let b = batch_estimate(&[10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 90.0], 10).unwrap().unwrap();
        assert!(!b.subset.contains(&6));
        assert_eq!(b.final_distance, 10.0);
        assert_eq!(batch_estimate::<f64>(&[], 10).unwrap(), None);
        assert!(batch_estimate(&[1.0, 2.0], 1).is_err());
        assert_eq!(batch_estimate(&[4.0], 1).unwrap().unwrap().final_distance, 4.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn two_point_fit_is_exact() {
        let fit = calibrate_hardware_latency(&[(1.0f64, 1e-7), (4.0, 1.3e-7)]).unwrap();
        assert!((fit.intercept - 0.9e-7).abs() < 1e-20);
        assert!(calibrate_hardware_latency(&[(2.0, 1e-7), (2.0, 2e-7)]).is_err());
    }
}
