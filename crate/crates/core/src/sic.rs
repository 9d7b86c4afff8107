//! Successive interference cancellation over a set of known patterns.

use std::ops::Range;

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::detector::{evaluate_with, Correlator, DetectionResult, PeakCriterion};
use crate::error::{Error, Result};
use crate::filters;
use crate::num::Real;
use crate::signal::{energy, BasebandSignal};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelEstimate<T> {
    pub gamma: Complex<T>,
    pub peak_index: usize,
    pub id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SicDetection<T> {
    pub id: usize,
    pub detection: DetectionResult<T>,
    pub channel: ChannelEstimate<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SicReport<T> {
    /// In extraction order.
    pub detections: Vec<SicDetection<T>>,
    /// Residual energy before the first and after every cancellation.
    pub residual_energy: Vec<T>,
    pub residual: Vec<Complex<T>>,
}

impl<T: Real> SicReport<T> {
    pub fn find(&self, id: usize) -> Option<&SicDetection<T>> {
        self.detections.iter().find(|d| d.id == id)
    }
}

/// Waveform subtracted for an extracted response.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replica {
    /// The pattern itself, aligned at the integer peak.
    #[default]
    Pattern,
    /// The pattern shifted by the interpolated sub-sample offset.
    Subsample,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SicConfig {
    pub criterion: PeakCriterion,
    pub enabled: bool,
    pub replica: Replica,
}

impl Default for SicConfig {
    fn default() -> Self {
        Self {
            criterion: PeakCriterion::default(),
            enabled: true,
            replica: Replica::Pattern,
        }
    }
}

/// One candidate pattern and the lags at which its peak may lie.
#[derive(Clone, Debug)]
pub struct SicPattern<'a, T> {
    pub id: usize,
    pub pattern: &'a [Complex<T>],
    pub search: Range<usize>,
}

fn check_alignment<T>(received_len: usize, pattern: &[Complex<T>], m: usize) -> Result<()> {
    if pattern.is_empty() {
        return Err(Error::invalid("pattern must not be empty"));
    }
    if m + pattern.len() > received_len {
        return Err(Error::OutOfRange {
            index: m + pattern.len(),
            len: received_len,
        });
    }
    Ok(())
}

fn project<T: Real>(received: &[Complex<T>], pattern: &[Complex<T>], m: usize) -> Result<Complex<T>> {
    check_alignment(received.len(), pattern, m)?;
    let ep = energy(pattern);
    if !(ep > T::zero()) {
        return Err(Error::invalid("pattern has zero energy"));
    }
    let num = received[m..m + pattern.len()]
        .iter()
        .zip(pattern)
        .fold(Complex::new(T::zero(), T::zero()), |acc, (r, p)| acc + r * p.conj());
    Ok(num / ep)
}

fn subtract<T: Real>(samples: &mut [Complex<T>], pattern: &[Complex<T>], m: usize, gamma: Complex<T>) -> Result<()> {
    check_alignment(samples.len(), pattern, m)?;
    for (r, p) in samples[m..m + pattern.len()].iter_mut().zip(pattern) {
        *r = *r - gamma * p;
    }
    Ok(())
}

/// Least-squares complex gain of `pattern` aligned at `m`.
pub fn estimate_attenuation<T: Real>(
    received: &BasebandSignal<T>,
    pattern: &BasebandSignal<T>,
    m: usize,
) -> Result<Complex<T>> {
    project(received.samples(), pattern.samples(), m)
}

pub fn cancel<T: Real>(
    received: &BasebandSignal<T>,
    pattern: &BasebandSignal<T>,
    m: usize,
    gamma: Complex<T>,
) -> Result<BasebandSignal<T>> {
    let mut out = received.samples().to_vec();
    subtract(&mut out, pattern.samples(), m, gamma)?;
    received.with_samples(out)
}

struct Slot<'a, T: Real> {
    id: usize,
    pattern: &'a [Complex<T>],
    search: Range<usize>,
    first_lag: usize,
    correlator: Correlator<T>,
}

impl<T: Real> Slot<'_, T> {
    fn data_span(&self) -> Range<usize> {
        self.first_lag..self.first_lag + self.correlator.n_lags() + self.pattern.len() - 1
    }

    fn evaluate(&self, residual: &[Complex<T>], crit: &PeakCriterion, sample_period: T) -> Option<DetectionResult<T>> {
        let series = self.correlator.correlate(residual, self.first_lag);
        let mut scratch = Vec::with_capacity(2 * crit.vicinity);
        evaluate_with(&series, crit, self.search.clone(), sample_period, &mut scratch)
    }
}

fn build_slots<'a, T: Real>(
    len: usize,
    patterns: &[SicPattern<'a, T>],
    crit: &PeakCriterion,
) -> Result<Vec<Option<Slot<'a, T>>>> {
    let mut planner = FftPlanner::new();
    let mut ids = std::collections::HashSet::new();
    patterns
        .iter()
        .map(|p| {
            if !ids.insert(p.id) {
                return Err(Error::invalid(format!("duplicate pattern id {}", p.id)));
            }
            if p.pattern.is_empty() || p.pattern.len() > len {
                return Ok(None);
            }
            let last = len - p.pattern.len() + 1;
            let s0 = p.search.start.min(last);
            let s1 = p.search.end.min(last);
            if s0 >= s1 {
                return Ok(None);
            }
            let margin = crit.vicinity + 1;
            let first_lag = s0.saturating_sub(margin);
            let end_lag = (s1 + margin).min(last);
            let correlator = Correlator::new(p.pattern, end_lag - first_lag, &mut planner)?;
            Ok(Some(Slot {
                id: p.id,
                pattern: p.pattern,
                search: s0..s1,
                first_lag,
                correlator,
            }))
        })
        .collect()
}

/// Iteratively extract the strongest qualified pattern, estimate its gain,
/// cancel it and re-examine the patterns its footprint touched.
pub fn detect_all_with<T: Real>(
    received: &[Complex<T>],
    sample_period: T,
    patterns: &[SicPattern<'_, T>],
    cfg: &SicConfig,
) -> Result<SicReport<T>> {
    if patterns.is_empty() {
        return Err(Error::invalid("at least one pattern is required"));
    }
    let crit = cfg.criterion;
    let slots = build_slots(received.len(), patterns, &crit)?;
    let mut residual = received.to_vec();
    let mut state: Vec<Option<DetectionResult<T>>> = slots
        .par_iter()
        .map(|s| s.as_ref().and_then(|s| s.evaluate(&residual, &crit, sample_period)))
        .collect();
    let mut done = vec![false; slots.len()];
    let mut report = SicReport {
        detections: Vec::new(),
        residual_energy: vec![energy(&residual)],
        residual: Vec::new(),
    };

    if !cfg.enabled {
        let mut order: Vec<usize> = (0..slots.len())
            .filter(|&k| state[k].is_some_and(|d| d.qualified))
            .collect();
        order.sort_by(|&a, &b| {
            let (da, db) = (state[a].unwrap(), state[b].unwrap());
            db.peak_magnitude.partial_cmp(&da.peak_magnitude).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        for k in order {
            let slot = slots[k].as_ref().expect("evaluated slot");
            let d = state[k].unwrap();
            let gamma = project(&residual, slot.pattern, d.peak_index)?;
            report.detections.push(SicDetection {
                id: slot.id,
                detection: d,
                channel: ChannelEstimate {
                    gamma,
                    peak_index: d.peak_index,
                    id: slot.id,
                },
            });
        }
        report.residual = residual;
        return Ok(report);
    }

    loop {
        let mut best: Option<usize> = None;
        for k in 0..slots.len() {
            if done[k] {
                continue;
            }
            if let Some(d) = state[k].filter(|d| d.qualified) {
                if best.is_none_or(|b| d.peak_magnitude > state[b].unwrap().peak_magnitude) {
                    best = Some(k);
                }
            }
        }
        let Some(k) = best else { break };
        let slot = slots[k].as_ref().expect("qualified slot exists");
        let d = state[k].unwrap();
        let replica: Vec<Complex<T>> = match cfg.replica {
            Replica::Pattern => slot.pattern.to_vec(),
            Replica::Subsample => {
                let delay = -(d.timing_error / sample_period).to_f64_lossy();
                filters::shift_same(slot.pattern, delay, 1.0, filters::FRACTIONAL_DELAY_TAPS)
            }
        };
        let gamma = project(&residual, &replica, d.peak_index)?;
        subtract(&mut residual, &replica, d.peak_index, gamma)?;
        done[k] = true;
        report.residual_energy.push(energy(&residual));
        report.detections.push(SicDetection {
            id: slot.id,
            detection: d,
            channel: ChannelEstimate {
                gamma,
                peak_index: d.peak_index,
                id: slot.id,
            },
        });

        let hit = d.peak_index..d.peak_index + replica.len();
        let stale: Vec<usize> = (0..slots.len())
            .filter(|&j| !done[j])
            .filter(|&j| {
                slots[j]
                    .as_ref()
                    .is_some_and(|s| {
                        let span = s.data_span();
                        span.start < hit.end && hit.start < span.end
                    })
            })
            .collect();
        let fresh: Vec<Option<DetectionResult<T>>> = stale
            .par_iter()
            .map(|&j| slots[j].as_ref().and_then(|s| s.evaluate(&residual, &crit, sample_period)))
            .collect();
        for (j, r) in stale.into_iter().zip(fresh) {
            state[j] = r;
        }
    }
    report.residual = residual;
    Ok(report)
}

/// Run detection over whole-stream searches; pattern ids are list positions.
pub fn detect_all<T: Real>(
    received: &BasebandSignal<T>,
    patterns: &[BasebandSignal<T>],
    alpha: f64,
    vicinity: usize,
    enabled: bool,
) -> Result<SicReport<T>> {
    let cfg = SicConfig {
        criterion: PeakCriterion::new(alpha, vicinity)?,
        enabled,
        replica: Replica::Pattern,
    };
    let specs: Vec<SicPattern<'_, T>> = patterns
        .iter()
        .enumerate()
        .map(|(id, p)| SicPattern {
            id,
            pattern: p.samples(),
            search: 0..usize::MAX,
        })
        .collect();
    detect_all_with(received.samples(), received.sample_period(), &specs, &cfg)
}
