//! FIR kernels shared by the transmit chain, the channel and the canceller.

use std::f64::consts::PI;

use num_complex::Complex;

use crate::num::Real;

/// Taps of the channel fractional-delay interpolator.
pub const FRACTIONAL_DELAY_TAPS: usize = 63;

/// Taps per polyphase branch of the upsampling interpolator.
pub const UPSAMPLE_TAPS_PER_PHASE: usize = 64;

pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Hamming-windowed sinc low-pass with `cutoff` as a fraction of Nyquist,
/// centred on `(taps - 1) / 2 + shift`.
pub fn windowed_sinc(taps: usize, cutoff: f64, shift: f64) -> Vec<f64> {
    let half = (taps as f64 - 1.0) / 2.0;
    let span = half + 1.0;
    (0..taps)
        .map(|k| {
            let x = k as f64 - half - shift;
            let w = if x.abs() >= span {
                0.0
            } else {
                0.54 + 0.46 * (PI * x / span).cos()
            };
            cutoff * sinc(cutoff * x) * w
        })
        .collect()
}

/// Full linear convolution with a real kernel.
pub fn convolve<T: Real>(x: &[Complex<T>], h: &[f64]) -> Vec<Complex<T>> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let h: Vec<T> = h.iter().map(|&v| T::of(v)).collect();
    let mut y = vec![Complex::new(T::zero(), T::zero()); x.len() + h.len() - 1];
    for (i, &xi) in x.iter().enumerate() {
        if xi.re == T::zero() && xi.im == T::zero() {
            continue;
        }
        for (k, &hk) in h.iter().enumerate() {
            y[i + k] = y[i + k] + xi * hk;
        }
    }
    y
}

/// Shift `x` by `mu` samples (positive delays) through a band-limited
/// interpolator, keeping the original length and alignment.
pub fn shift_same<T: Real>(x: &[Complex<T>], mu: f64, cutoff: f64, taps: usize) -> Vec<Complex<T>> {
    let h = windowed_sinc(taps, cutoff, mu);
    let half = (taps - 1) / 2;
    let full = convolve(x, &h);
    full.into_iter().skip(half).take(x.len()).collect()
}

/// Rescale `y` so its energy matches `target`.
pub fn match_energy<T: Real>(y: &mut [Complex<T>], target: T) {
    let e = crate::signal::energy(y);
    if e > T::zero() && target > T::zero() {
        let g = (target / e).sqrt();
        for s in y.iter_mut() {
            *s = *s * g;
        }
    }
}

/// Zero-stuff by `factor` and interpolate with a Hamming-windowed sinc of
/// `64 * factor + 1` taps. Output has `factor * x.len()` samples.
pub fn interpolate<T: Real>(x: &[Complex<T>], factor: usize) -> Vec<Complex<T>> {
    let u = factor;
    let n_taps = UPSAMPLE_TAPS_PER_PHASE * u + 1;
    let centre = (n_taps - 1) / 2;
    let h: Vec<T> = (0..n_taps)
        .map(|m| {
            let w = 0.54 - 0.46 * (2.0 * PI * m as f64 / (n_taps - 1) as f64).cos();
            T::of(sinc((m as f64 - centre as f64) / u as f64) * w)
        })
        .collect();
    let out_len = x.len() * u;
    let mut y = vec![Complex::new(T::zero(), T::zero()); out_len];
    for (n, out) in y.iter_mut().enumerate() {
        // y[n] = sum_j x[j] h[n - u j + centre]
        let num = n + centre;
        let j_hi = (num / u).min(x.len().saturating_sub(1));
        let j_lo = num.saturating_sub(n_taps - 1).div_ceil(u);
        let mut acc = Complex::new(T::zero(), T::zero());
        if j_lo <= j_hi {
            for j in j_lo..=j_hi {
                acc = acc + x[j] * h[num - u * j];
            }
        }
        *out = acc;
    }
    y
}
