use num_complex::Complex;

use crate::error::{Error, Result};
use crate::num::Real;

/// Complex baseband samples at a fixed sample period.
#[derive(Clone, Debug, PartialEq)]
pub struct BasebandSignal<T> {
    samples: Vec<Complex<T>>,
    sample_period: T,
    bandwidth: T,
}

impl<T: Real> BasebandSignal<T> {
    pub fn new(samples: Vec<Complex<T>>, sample_period: T, bandwidth: T) -> Result<Self> {
        if !(sample_period > T::zero()) || !sample_period.is_finite() {
            return Err(Error::invalid("sample period must be positive and finite"));
        }
        if !(bandwidth > T::zero()) {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        let limit = T::one() / sample_period;
        if bandwidth > limit * T::of(1.0 + 1e-9) {
            return Err(Error::invalid("bandwidth exceeds the sample rate"));
        }
        if samples.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::invalid("signal contains non-finite samples"));
        }
        Ok(Self {
            samples,
            sample_period,
            bandwidth,
        })
    }

    /// Full-band silence.
    pub fn zeros(len: usize, sample_period: T) -> Result<Self> {
        Self::new(vec![Complex::new(T::zero(), T::zero()); len], sample_period, T::one() / sample_period)
    }

    pub(crate) fn from_parts(samples: Vec<Complex<T>>, sample_period: T, bandwidth: T) -> Self {
        debug_assert!(samples.iter().all(|s| s.re.is_finite() && s.im.is_finite()));
        Self {
            samples,
            sample_period,
            bandwidth,
        }
    }

    pub fn samples(&self) -> &[Complex<T>] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex<T>> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_period(&self) -> T {
        self.sample_period
    }

    pub fn sample_rate(&self) -> T {
        T::one() / self.sample_period
    }

    pub fn bandwidth(&self) -> T {
        self.bandwidth
    }

    pub fn duration(&self) -> T {
        self.sample_period * T::of(self.samples.len() as f64)
    }

    pub fn energy(&self) -> T {
        energy(&self.samples)
    }

    /// Mean power per sample; zero for an empty signal.
    pub fn power(&self) -> T {
        if self.samples.is_empty() {
            T::zero()
        } else {
            self.energy() / T::of(self.samples.len() as f64)
        }
    }

    pub fn scaled(&self, gain: Complex<T>) -> Self {
        Self::from_parts(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_period,
            self.bandwidth,
        )
    }

    /// Same samples, different rate metadata.
    pub fn with_samples(&self, samples: Vec<Complex<T>>) -> Result<Self> {
        Self::new(samples, self.sample_period, self.bandwidth)
    }
}

pub(crate) fn energy<T: Real>(x: &[Complex<T>]) -> T {
    x.iter().fold(T::zero(), |acc, s| acc + s.norm_sqr())
}
