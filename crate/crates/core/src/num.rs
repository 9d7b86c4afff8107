use std::fmt::Debug;

use num_traits::{Float, FloatConst};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftNum;

/// Floating-point scalar used throughout the signal path.
pub trait Real: Float + FloatConst + FftNum + Debug + Default + Send + Sync + 'static {
    fn of(v: f64) -> Self;

    /// One draw from the standard normal distribution.
    fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> Self {
                <StandardNormal as Distribution<$t>>::sample(&StandardNormal, rng)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);
