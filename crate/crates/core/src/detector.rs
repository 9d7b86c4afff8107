//! Normalized cross-correlation, peak qualification and sub-sample timing.

use std::ops::Range;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::num::Real;
use crate::signal::BasebandSignal;

/// Window energies below this floor correlate to zero.
pub const ENERGY_FLOOR: f64 = 1e-30;

/// Windows this much weaker than the segment are recomputed directly to
/// keep FFT round-off from dominating their normalization.
const DIRECT_FALLBACK_RATIO: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationSeries<T> {
    values: Vec<Complex<T>>,
    first_lag: usize,
    pattern_len: usize,
    pattern_energy: T,
}

impl<T: Real> CorrelationSeries<T> {
    pub fn from_values(values: Vec<Complex<T>>, first_lag: usize, pattern_len: usize, pattern_energy: T) -> Self {
        Self {
            values,
            first_lag,
            pattern_len,
            pattern_energy,
        }
    }

    pub fn values(&self) -> &[Complex<T>] {
        &self.values
    }

    /// Lag of `values()[0]` within the received stream.
    pub fn first_lag(&self) -> usize {
        self.first_lag
    }

    pub fn lags(&self) -> Range<usize> {
        self.first_lag..self.first_lag + self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn pattern_len(&self) -> usize {
        self.pattern_len
    }

    pub fn pattern_energy(&self) -> T {
        self.pattern_energy
    }

    pub fn get(&self, lag: usize) -> Option<Complex<T>> {
        lag.checked_sub(self.first_lag).and_then(|i| self.values.get(i).copied())
    }

    pub fn magnitude(&self, lag: usize) -> Option<T> {
        self.get(lag).map(|c| c.norm())
    }
}

fn check_pattern<T: Real>(pattern: &[Complex<T>]) -> Result<T> {
    if pattern.is_empty() {
        return Err(Error::invalid("pattern must not be empty"));
    }
    let e = crate::signal::energy(pattern);
    if !(e.to_f64_lossy() > ENERGY_FLOOR) {
        return Err(Error::invalid("pattern has zero energy"));
    }
    Ok(e)
}

/// FFT correlator for one pattern over windows of a fixed number of lags.
pub struct Correlator<T: Real> {
    pattern: Vec<Complex<T>>,
    pattern_energy: T,
    n_lags: usize,
    fft_len: usize,
    spectrum: Vec<Complex<T>>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> Correlator<T> {
    pub fn new(pattern: &[Complex<T>], n_lags: usize, planner: &mut FftPlanner<T>) -> Result<Self> {
        let pattern_energy = check_pattern(pattern)?;
        if n_lags == 0 {
            return Err(Error::invalid("correlator needs at least one lag"));
        }
        let fft_len = (n_lags + pattern.len() - 1).next_power_of_two();
        let forward = planner.plan_fft_forward(fft_len);
        let inverse = planner.plan_fft_inverse(fft_len);
        let mut spectrum = vec![Complex::new(T::zero(), T::zero()); fft_len];
        spectrum[..pattern.len()].copy_from_slice(pattern);
        forward.process(&mut spectrum);
        for s in spectrum.iter_mut() {
            *s = s.conj();
        }
        Ok(Self {
            pattern: pattern.to_vec(),
            pattern_energy,
            n_lags,
            fft_len,
            spectrum,
            forward,
            inverse,
        })
    }

    pub fn pattern_len(&self) -> usize {
        self.pattern.len()
    }

    pub fn n_lags(&self) -> usize {
        self.n_lags
    }

    /// Correlate lags `first_lag .. first_lag + n` where `n` is the smaller of
    /// the configured lag count and what `received` can hold.
    pub fn correlate(&self, received: &[Complex<T>], first_lag: usize) -> CorrelationSeries<T> {
        let l = self.pattern.len();
        let avail = received.len().saturating_sub(first_lag);
        let n = if avail >= l { (avail - l + 1).min(self.n_lags) } else { 0 };
        if n == 0 {
            return CorrelationSeries::from_values(Vec::new(), first_lag, l, self.pattern_energy);
        }
        let seg = &received[first_lag..first_lag + n + l - 1];

        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.fft_len];
        buf[..seg.len()].copy_from_slice(seg);
        self.forward.process(&mut buf);
        for (b, s) in buf.iter_mut().zip(&self.spectrum) {
            *b = *b * *s;
        }
        self.inverse.process(&mut buf);
        let scale = T::one() / T::of(self.fft_len as f64);

        let mut prefix = Vec::with_capacity(seg.len() + 1);
        prefix.push(0.0f64);
        let mut acc = 0.0f64;
        for s in seg {
            acc += s.norm_sqr().to_f64_lossy();
            prefix.push(acc);
        }
        let seg_energy = acc;
        let ep = self.pattern_energy.to_f64_lossy();

        let values = (0..n)
            .map(|i| {
                let el = (prefix[i + l] - prefix[i]).max(0.0);
                if el < ENERGY_FLOOR {
                    return Complex::new(T::zero(), T::zero());
                }
                let num = if el < DIRECT_FALLBACK_RATIO * seg_energy {
                    direct_numerator(&seg[i..i + l], &self.pattern)
                } else {
                    buf[i] * scale
                };
                let c = num / T::of((el * ep).sqrt());
                let m = c.norm();
                if m > T::one() {
                    c / m
                } else {
                    c
                }
            })
            .collect();
        CorrelationSeries::from_values(values, first_lag, l, self.pattern_energy)
    }
}

fn direct_numerator<T: Real>(window: &[Complex<T>], pattern: &[Complex<T>]) -> Complex<T> {
    window
        .iter()
        .zip(pattern)
        .fold(Complex::new(T::zero(), T::zero()), |acc, (r, p)| acc + r * p.conj())
}

/// Correlate over the given lag range (clipped to the valid lags).
pub fn normalized_xcorr_range<T: Real>(
    received: &[Complex<T>],
    pattern: &[Complex<T>],
    lags: Range<usize>,
) -> Result<CorrelationSeries<T>> {
    check_pattern(pattern)?;
    if received.len() < pattern.len() {
        return Err(Error::invalid("received signal shorter than pattern"));
    }
    let last = received.len() - pattern.len() + 1;
    let start = lags.start.min(last);
    let end = lags.end.min(last);
    let n = end.saturating_sub(start).max(1);
    let mut planner = FftPlanner::new();
    let c = Correlator::new(pattern, n, &mut planner)?;
    let mut s = c.correlate(received, start);
    s.values.truncate(end.saturating_sub(start));
    Ok(s)
}

pub fn normalized_xcorr<T: Real>(
    received: &BasebandSignal<T>,
    pattern: &BasebandSignal<T>,
) -> Result<CorrelationSeries<T>> {
    normalized_xcorr_range(received.samples(), pattern.samples(), 0..usize::MAX)
}

/// Peak qualification parameters.
///
/// A peak at lag `M` qualifies when its power is at least `alpha` times the
/// median power over the vicinity `main_lobe < |l - M| <= vicinity`, and its
/// magnitude strictly exceeds every vicinity value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeakCriterion {
    pub alpha: f64,
    pub vicinity: usize,
    pub main_lobe: usize,
}

impl PeakCriterion {
    pub fn new(alpha: f64, vicinity: usize) -> Result<Self> {
        if !(alpha >= 1.0) {
            return Err(Error::invalid("alpha must be at least 1"));
        }
        if vicinity == 0 {
            return Err(Error::invalid("vicinity must be at least 1"));
        }
        Ok(Self {
            alpha,
            vicinity,
            main_lobe: 2,
        })
    }
}

impl Default for PeakCriterion {
    fn default() -> Self {
        Self {
            alpha: 50.0,
            vicinity: 256,
            main_lobe: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak<T> {
    pub index: usize,
    pub magnitude: T,
}

/// Argmax over `search` (absolute lags), lowest index on ties.
fn argmax<T: Real>(series: &CorrelationSeries<T>, search: Range<usize>) -> Option<Peak<T>> {
    let lags = series.lags();
    let lo = search.start.max(lags.start);
    let hi = search.end.min(lags.end);
    let mut best: Option<Peak<T>> = None;
    for lag in lo..hi {
        let m = series.values[lag - lags.start].norm();
        if best.is_none_or(|b| m > b.magnitude) {
            best = Some(Peak { index: lag, magnitude: m });
        }
    }
    best
}

fn qualifies<T: Real>(series: &CorrelationSeries<T>, peak: &Peak<T>, crit: &PeakCriterion, scratch: &mut Vec<f64>) -> bool {
    let lags = series.lags();
    let m = peak.index;
    let lo = m.saturating_sub(crit.vicinity).max(lags.start);
    let hi = (m + crit.vicinity + 1).min(lags.end);
    scratch.clear();
    let mut max_side = 0.0f64;
    for lag in lo..hi {
        if lag.abs_diff(m) <= crit.main_lobe {
            continue;
        }
        let v = series.values[lag - lags.start].norm_sqr().to_f64_lossy();
        max_side = max_side.max(v);
        scratch.push(v);
    }
    if scratch.is_empty() {
        return false;
    }
    let level = median_in_place(scratch);
    let p = peak.magnitude.to_f64_lossy();
    p * p >= crit.alpha * level && p * p > max_side
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (lower, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if n % 2 == 1 {
        m
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + m)
    }
}

/// Strongest qualified peak inside `search`, or `None`.
pub fn find_peak_in<T: Real>(
    series: &CorrelationSeries<T>,
    crit: &PeakCriterion,
    search: Range<usize>,
) -> Result<Option<Peak<T>>> {
    if series.is_empty() {
        return Err(Error::invalid("empty correlation series"));
    }
    let Some(peak) = argmax(series, search) else {
        return Ok(None);
    };
    let mut scratch = Vec::new();
    Ok(qualifies(series, &peak, crit, &mut scratch).then_some(peak))
}

pub fn find_peak<T: Real>(series: &CorrelationSeries<T>, alpha: f64, vicinity: usize) -> Result<Option<Peak<T>>> {
    let crit = PeakCriterion::new(alpha, vicinity)?;
    find_peak_in(series, &crit, 0..usize::MAX)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubsampleEstimate<T> {
    pub timing_error: T,
    pub degenerate: bool,
}

/// Gaussian three-point fit around a correlation peak. A positive result
/// means the sample-aligned peak is late relative to the true arrival.
pub fn subsample_timing_error<T: Real>(cm1: T, c0: T, cp1: T, sample_period: T) -> SubsampleEstimate<T> {
    let degenerate = SubsampleEstimate {
        timing_error: T::zero(),
        degenerate: true,
    };
    let ok = |v: T| v.is_finite() && v > T::zero();
    if !(ok(cm1) && ok(c0) && ok(cp1)) {
        return degenerate;
    }
    let (lm, l0, lp) = (cm1.ln(), c0.ln(), cp1.ln());
    let two = T::of(2.0);
    let den = T::of(4.0) * l0 - two * lm - two * lp;
    if den.abs() < T::of(1e-12) {
        return degenerate;
    }
    let te = -sample_period * (lp - lm) / den;
    if !te.is_finite() || te.abs() >= sample_period {
        return degenerate;
    }
    SubsampleEstimate {
        timing_error: te,
        degenerate: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionResult<T> {
    pub peak_index: usize,
    pub peak_magnitude: T,
    pub timing_error: T,
    pub qualified: bool,
    /// Set when the interpolation fell back to zero.
    pub degenerate: bool,
}

impl<T: Real> DetectionResult<T> {
    /// Arrival estimate `M*T - T_E` in seconds from stream start.
    pub fn arrival(&self, sample_period: T) -> T {
        T::of(self.peak_index as f64) * sample_period - self.timing_error
    }
}

/// Evaluate the strongest lag inside `search`, qualified or not.
pub fn evaluate<T: Real>(
    series: &CorrelationSeries<T>,
    crit: &PeakCriterion,
    search: Range<usize>,
    sample_period: T,
) -> Option<DetectionResult<T>> {
    let mut scratch = Vec::new();
    evaluate_with(series, crit, search, sample_period, &mut scratch)
}

pub(crate) fn evaluate_with<T: Real>(
    series: &CorrelationSeries<T>,
    crit: &PeakCriterion,
    search: Range<usize>,
    sample_period: T,
    scratch: &mut Vec<f64>,
) -> Option<DetectionResult<T>> {
    let peak = argmax(series, search)?;
    let qualified = qualifies(series, &peak, crit, scratch);
    let m = peak.index;
    let est = match (m.checked_sub(1).and_then(|i| series.magnitude(i)), series.magnitude(m + 1)) {
        (Some(a), Some(b)) => subsample_timing_error(a, peak.magnitude, b, sample_period),
        _ => SubsampleEstimate {
            timing_error: T::zero(),
            degenerate: true,
        },
    };
    Some(DetectionResult {
        peak_index: m,
        peak_magnitude: peak.magnitude,
        timing_error: est.timing_error,
        qualified,
        degenerate: est.degenerate,
    })
}

pub fn detect_pattern<T: Real>(
    received: &BasebandSignal<T>,
    pattern: &BasebandSignal<T>,
    alpha: f64,
    vicinity: usize,
) -> Result<Option<DetectionResult<T>>> {
    let crit = PeakCriterion::new(alpha, vicinity)?;
    let series = normalized_xcorr(received, pattern)?;
    Ok(evaluate(&series, &crit, 0..usize::MAX, received.sample_period()).filter(|d| d.qualified))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex<f64> {
        Complex::new(re, 0.0)
    }

    #[test]
    fn zero_energy_windows_are_zero() {
        let mut r = vec![c(0.0); 20];
        r[15] = c(1.0);
        let p = vec![c(1.0), c(-1.0)];
        let s = normalized_xcorr_range(&r, &p, 0..usize::MAX).unwrap();
        assert_eq!(s.len(), 19);
        assert_eq!(s.values()[0], c(0.0));
        assert!((s.magnitude(15).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_zero_pattern() {
        let r = vec![c(1.0); 8];
        assert!(normalized_xcorr_range(&r, &[c(0.0); 3], 0..usize::MAX).is_err());
    }

    #[test]
    fn equal_peaks_fail() {
        let mut v = vec![c(0.01); 64];
        v[10] = c(0.9);
        v[20] = c(0.9);
        let s = CorrelationSeries::from_values(v, 0, 16, 16.0);
        assert_eq!(find_peak(&s, 50.0, 256).unwrap(), None);
        assert!(find_peak(&s, 0.5, 256).is_err());
    }

    #[test]
    fn single_peak_qualifies() {
        let mut v = vec![c(0.01); 64];
        v[30] = c(0.9);
        let s = CorrelationSeries::from_values(v, 0, 16, 16.0);
        assert_eq!(find_peak(&s, 50.0, 256).unwrap().map(|p| p.index), Some(30));
    }

    #[test]
    fn gaussian_symmetry_and_degeneracy() {
        let e = subsample_timing_error(0.5, 1.0, 0.5, 1e-8);
        assert_eq!(e.timing_error, 0.0);
        assert!(!e.degenerate);
        assert!(subsample_timing_error(0.0, 1.0, 0.5, 1e-8).degenerate);
        assert!(subsample_timing_error(1.0, 1.0, 1.0, 1e-8).degenerate);
    }
}
