//! Line-of-sight channel: free-space loss, carrier phase, fractional delay
//! and additive white Gaussian noise.

use std::f64::consts::PI;

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{self, FRACTIONAL_DELAY_TAPS};
use crate::num::Real;
use crate::ranging::SPEED_OF_LIGHT;
use crate::signal::BasebandSignal;

const INTEGER_DELAY_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const ORIGIN: Position = Position { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn planar(x: f64, y: f64) -> Self {
        Self { x, y, z: 0.0 }
    }

    pub fn distance_to(&self, other: &Position) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimedEmission<T> {
    pub signal: BasebandSignal<T>,
    /// Global time of the first sample.
    pub start_time: f64,
    pub source: Position,
    pub source_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    pub carrier_hz: f64,
    pub sample_rate_hz: f64,
    /// Complex noise power per sample in watts.
    pub noise_power: f64,
    pub rng_seed: u64,
}

impl ChannelConfig {
    pub fn new(carrier_hz: f64, sample_rate_hz: f64, noise_power: f64, rng_seed: u64) -> Result<Self> {
        if !(carrier_hz > 0.0 && carrier_hz.is_finite()) {
            return Err(Error::invalid("carrier frequency must be positive"));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if !(noise_power >= 0.0 && noise_power.is_finite()) {
            return Err(Error::invalid("noise power must be non-negative"));
        }
        Ok(Self {
            carrier_hz,
            sample_rate_hz,
            noise_power,
            rng_seed,
        })
    }

    pub fn sample_period(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        Self { rng_seed, ..*self }
    }
}

/// Amplitude gain of free-space propagation over `distance`.
pub fn free_space_gain(distance: f64, carrier_hz: f64) -> f64 {
    SPEED_OF_LIGHT / (4.0 * PI * distance * carrier_hz)
}

/// Noise power giving `snr_db` for a transmit power `signal_power` received
/// from `reference_distance`.
pub fn noise_power_for_snr(signal_power: f64, reference_distance: f64, snr_db: f64, carrier_hz: f64) -> f64 {
    let g = free_space_gain(reference_distance, carrier_hz);
    signal_power * g * g / 10f64.powf(snr_db / 10.0)
}

/// An emission as it appears at one receiver.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagated<T> {
    pub samples: Vec<Complex<T>>,
    /// Global sample index of `samples[0]`; may be negative.
    pub start_index: i64,
    pub arrival_time: f64,
    pub source_id: u32,
}

impl<T: Real> Propagated<T> {
    pub fn end_index(&self) -> i64 {
        self.start_index + self.samples.len() as i64
    }

    pub fn energy(&self) -> T {
        crate::signal::energy(&self.samples)
    }
}

pub fn propagate<T: Real>(emission: &TimedEmission<T>, rx: &Position, cfg: &ChannelConfig) -> Result<Propagated<T>> {
    let d = emission.source.distance_to(rx);
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::invalid("transmitter and receiver must be apart"));
    }
    if !(emission.start_time >= 0.0) {
        return Err(Error::invalid("emission start time must be non-negative"));
    }
    let fs = cfg.sample_rate_hz;
    let tof = d / SPEED_OF_LIGHT;
    let position = emission.start_time * fs + tof * fs;
    let mut whole = position.floor();
    let mut mu = position - whole;
    if mu > 1.0 - INTEGER_DELAY_TOLERANCE {
        whole += 1.0;
        mu = 0.0;
    }
    let gain = Complex::from_polar(
        free_space_gain(d, cfg.carrier_hz),
        -2.0 * PI * cfg.carrier_hz * tof,
    );
    let gain = Complex::new(T::of(gain.re), T::of(gain.im));
    let src = emission.signal.samples();
    let (samples, start_index) = if mu < INTEGER_DELAY_TOLERANCE {
        (src.iter().map(|s| s * gain).collect(), whole as i64)
    } else {
        let h = filters::windowed_sinc(FRACTIONAL_DELAY_TAPS, 1.0, mu);
        let y = filters::convolve(src, &h);
        let half = (FRACTIONAL_DELAY_TAPS - 1) / 2;
        (y.into_iter().map(|s| s * gain).collect(), whole as i64 - half as i64)
    };
    Ok(Propagated {
        samples,
        start_index,
        arrival_time: emission.start_time + tof,
        source_id: emission.source_id,
    })
}

/// Add `p` into `buf`, where `buf[0]` sits at global index `origin`.
pub fn superpose<T: Real>(buf: &mut [Complex<T>], origin: i64, p: &Propagated<T>) {
    let lo = p.start_index.max(origin);
    let hi = p.end_index().min(origin + buf.len() as i64);
    for g in lo..hi {
        buf[(g - origin) as usize] = buf[(g - origin) as usize] + p.samples[(g - p.start_index) as usize];
    }
}

/// Circularly symmetric complex Gaussian noise of total power `power`.
pub fn add_noise<T: Real, R: rand::Rng + ?Sized>(buf: &mut [Complex<T>], power: f64, rng: &mut R) {
    if power <= 0.0 {
        return;
    }
    let sigma = T::of((power / 2.0).sqrt());
    for s in buf.iter_mut() {
        let re = T::gaussian(rng);
        let im = T::gaussian(rng);
        *s = *s + Complex::new(re * sigma, im * sigma);
    }
}

/// Sum of the propagated signals over `[0, duration)` plus receiver noise.
pub fn mix<T: Real>(propagated: &[Propagated<T>], duration: f64, cfg: &ChannelConfig) -> Result<BasebandSignal<T>> {
    if !(duration >= 0.0) {
        return Err(Error::invalid("duration must be non-negative"));
    }
    let n = (duration * cfg.sample_rate_hz).round() as usize;
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    for p in propagated {
        superpose(&mut buf, 0, p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    add_noise(&mut buf, cfg.noise_power, &mut rng);
    let t = T::of(cfg.sample_period());
    BasebandSignal::new(buf, t, T::one() / t)
}
