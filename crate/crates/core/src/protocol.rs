//! Initiator and reflector behaviour and full broadcast ranging sessions.

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adversary::Adversary;
use crate::channel::{self, ChannelConfig, Position, Propagated, TimedEmission};
use crate::detector::{evaluate, normalized_xcorr_range, DetectionResult, PeakCriterion};
use crate::error::{Error, Result};
use crate::ranging::{self, BatchEstimate, RangingObservation, SPEED_OF_LIGHT};
use crate::sequences::{
    self, decode_sync_payload, derive_sequence, derive_waiting_period, EpochIndex, SequenceLabel, SharedKey,
    TransmitChain,
};
use crate::sic::{detect_all_with, Replica, SicConfig, SicPattern};
use crate::signal::BasebandSignal;

/// Silent samples before the request leaves the initiator.
pub const REQUEST_LEAD: usize = 64;
/// Extra lags a reflector scans for the request beyond the ToF bound.
const REQUEST_SLACK: usize = 64;
/// Tolerance on the early side of each response search window.
const EARLY_SLACK: usize = 2;

pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) mod stream {
    pub const REQUEST_NOISE: u64 = 1;
    pub const INITIATOR_NOISE: u64 = 2;
    pub const SYNC_NOISE: u64 = 3;
    pub const ADVERSARY: u64 = 4;
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NodeClock {
    pub drift_ppm: f64,
    pub offset: f64,
    pub processing_delay: f64,
}

impl NodeClock {
    pub const MAX_DRIFT_PPM: f64 = 1000.0;

    pub fn new(drift_ppm: f64, offset: f64, processing_delay: f64) -> Result<Self> {
        if !(drift_ppm.abs() <= Self::MAX_DRIFT_PPM) {
            return Err(Error::invalid(format!("clock drift {drift_ppm} ppm exceeds ±1000 ppm")));
        }
        if !offset.is_finite() || !(processing_delay >= 0.0) {
            return Err(Error::invalid("clock offset must be finite and processing delay non-negative"));
        }
        Ok(Self {
            drift_ppm,
            offset,
            processing_delay,
        })
    }

    pub fn local_time(&self, t_global: f64) -> f64 {
        t_global * (1.0 + self.drift_ppm * 1e-6) + self.offset
    }

    /// Global time at which the clock reads `local`.
    pub fn global_time(&self, local: f64) -> f64 {
        (local - self.offset) / (1.0 + self.drift_ppm * 1e-6)
    }
}

pub fn check_epoch(clock: &NodeClock, t_global: f64, epoch_duration: f64) -> Result<EpochIndex> {
    EpochIndex::at(clock.local_time(t_global), epoch_duration)
}

/// Seconds until drift `drift_ppm` accumulates half an epoch of error.
pub fn resync_period(epoch_duration: f64, drift_ppm: f64) -> f64 {
    if drift_ppm == 0.0 {
        return f64::INFINITY;
    }
    0.5 * epoch_duration / (drift_ppm.abs() * 1e-6)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub sequence_length: usize,
    pub criterion: PeakCriterion,
    pub waiting_window: u32,
    pub batch_size: usize,
    pub sample_rate_hz: f64,
    pub upsample_factor: usize,
    /// Occupied band as a fraction of the sample rate.
    pub mask_fraction: f64,
    pub epoch_duration: f64,
    pub tof_max: f64,
    /// Latency the initiator subtracts from every round trip.
    pub hardware_latency: f64,
    pub sic: bool,
    pub replica: Replica,
    pub subsample_interpolation: bool,
    pub carrier_hz: f64,
    pub noise_power: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            sequence_length: 512,
            criterion: PeakCriterion::default(),
            waiting_window: 1000,
            batch_size: 10,
            sample_rate_hz: 100e6,
            upsample_factor: 1,
            mask_fraction: DEFAULT_MASK_FRACTION,
            epoch_duration: 1.0,
            tof_max: 1e-6,
            hardware_latency: 0.0,
            sic: true,
            replica: Replica::Pattern,
            subsample_interpolation: true,
            carrier_hz: 2.45e9,
            noise_power: 0.0,
        }
    }
}

/// Default transmit spectral mask as a fraction of the sample rate.
pub const DEFAULT_MASK_FRACTION: f64 = 0.62;

impl ProtocolConfig {
    pub fn sample_period(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn chain(&self) -> Result<TransmitChain> {
        TransmitChain::new(self.sample_period(), self.upsample_factor, self.mask_fraction)
    }

    /// Samples per request or response waveform.
    pub fn waveform_samples(&self) -> usize {
        self.sequence_length * self.upsample_factor
    }

    pub fn response_duration(&self) -> f64 {
        self.waveform_samples() as f64 * self.sample_period()
    }

    /// Largest round-trip excess, in samples, an in-range reflector can add.
    pub fn max_tof_samples(&self) -> usize {
        (self.tof_max * self.sample_rate_hz).ceil() as usize
    }

    pub fn hardware_latency_samples(&self) -> usize {
        (self.hardware_latency * self.sample_rate_hz).ceil().max(0.0) as usize
    }

    /// Worst-case time from session start to the last response sample.
    pub fn session_span(&self) -> f64 {
        let n = self.waveform_samples() as f64;
        let per = (f64::from(self.waiting_window) + n) * self.batch_size as f64;
        (REQUEST_LEAD as f64 + n + per + 2.0 * self.max_tof_samples() as f64 + self.hardware_latency_samples() as f64)
            * self.sample_period()
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.sequence_length == 0 {
            v.push("sequence_length must be at least 1".into());
        }
        if !(self.criterion.alpha >= 1.0) {
            v.push("alpha must be at least 1".into());
        }
        if self.criterion.vicinity == 0 {
            v.push("vicinity must be at least 1".into());
        }
        if self.waiting_window == 0 {
            v.push("waiting_window must be at least 1".into());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be at least 1".into());
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            v.push("sample_rate_hz must be positive".into());
        }
        if self.upsample_factor == 0 {
            v.push("upsampling factor must be at least 1".into());
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            v.push("tx_mask_fraction must lie in (0, 1]".into());
        }
        if !(self.epoch_duration > 0.0 && self.epoch_duration.is_finite()) {
            v.push("epoch_duration_s must be positive".into());
        }
        if !(self.tof_max > 0.0 && self.tof_max.is_finite()) {
            v.push("tof_max_s must be positive".into());
        }
        if !(self.hardware_latency >= 0.0 && self.hardware_latency.is_finite()) {
            v.push("hardware_latency_s must be non-negative".into());
        }
        if !(self.carrier_hz > 0.0 && self.carrier_hz.is_finite()) {
            v.push("carrier_hz must be positive".into());
        }
        if !(self.noise_power >= 0.0 && self.noise_power.is_finite()) {
            v.push("noise power must be non-negative".into());
        }
        if v.is_empty() && self.session_span() >= self.epoch_duration {
            v.push(format!(
                "session needs {:.6} s but the epoch lasts only {} s",
                self.session_span(),
                self.epoch_duration
            ));
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct InitiatorNode {
    pub id: u32,
    pub position: Position,
    pub clock: NodeClock,
    pub key: SharedKey,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReflectorState {
    #[default]
    Idle,
    Scanning,
    Responding,
}

#[derive(Clone, Debug)]
pub struct ReflectorNode {
    pub id: u32,
    pub position: Position,
    pub clock: NodeClock,
    pub key: SharedKey,
    /// Epoch adopted at the last successful SYNC.
    pub current_epoch: Option<u64>,
    pub state: ReflectorState,
    /// Receive-path latency of this reflector, in samples.
    pub turnaround_samples: usize,
}

impl ReflectorNode {
    pub fn new(id: u32, position: Position, key: SharedKey) -> Self {
        Self {
            id,
            position,
            clock: NodeClock::default(),
            key,
            current_epoch: None,
            state: ReflectorState::Idle,
            turnaround_samples: 0,
        }
    }

    /// Already synchronized to the initiator clock.
    pub fn synchronized(mut self) -> Self {
        self.current_epoch = Some(0);
        self.state = ReflectorState::Scanning;
        self
    }

    pub fn is_synchronized(&self) -> bool {
        self.current_epoch.is_some()
    }

    /// Epoch of a session beginning near global time `t`: sessions start on
    /// epoch boundaries, so the nearest boundary on the local clock wins.
    pub fn session_epoch(&self, t_global: f64, epoch_duration: f64) -> u64 {
        let v = (self.clock.local_time(t_global) / epoch_duration + 0.5).floor();
        if v > 0.0 {
            v as u64
        } else {
            0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyncOutcome {
    pub reflector_id: u32,
    pub synchronized: bool,
    /// Clock mismatch left after synchronization, in seconds.
    pub mismatch: Option<f64>,
    pub needs_resync: bool,
}

/// Broadcast a SYNC frame at the start of the initiator's current epoch.
/// Reflectors that find the postamble and decrypt the payload adopt the
/// epoch and align their clocks, lagging by the residual mismatch.
pub fn run_sync(
    initiator: &InitiatorNode,
    reflectors: &mut [ReflectorNode],
    cfg: &ProtocolConfig,
    t_global: f64,
    seed: u64,
    adversary: Option<&Adversary>,
) -> Result<Vec<SyncOutcome>> {
    let epoch = check_epoch(&initiator.clock, t_global, cfg.epoch_duration)?;
    let chain = cfg.chain()?;
    let postamble = sequences::postamble();
    let symbols = sequences::sync_frame_symbols(&initiator.key, initiator.id, &epoch, &postamble)?;
    let frame: BasebandSignal<f64> = chain.render_symbols(&symbols)?;
    let post_wave: BasebandSignal<f64> = chain.render(&postamble)?;
    let u = cfg.upsample_factor;
    let payload_chips = symbols.len() - postamble.len();
    let payload_samples = payload_chips * u;
    let t = cfg.sample_period();
    let ch = ChannelConfig::new(cfg.carrier_hz, cfg.sample_rate_hz, cfg.noise_power, seed)?;
    let emission = TimedEmission {
        signal: frame.clone(),
        start_time: REQUEST_LEAD as f64 * t,
        source: initiator.position,
        source_id: initiator.id,
    };
    let n_max = cfg.max_tof_samples();
    let buf_len = REQUEST_LEAD + frame.len() + n_max + REQUEST_SLACK + cfg.criterion.vicinity;
    let jam = match adversary {
        Some(a) => a.request_phase(cfg, initiator, derive_seed(seed, stream::ADVERSARY, 0), buf_len)?,
        None => Vec::new(),
    };

    let mut out = Vec::with_capacity(reflectors.len());
    for (k, r) in reflectors.iter_mut().enumerate() {
        let mut buf = vec![Complex::new(0.0, 0.0); buf_len];
        let p = channel::propagate(&emission, &r.position, &ch)?;
        channel::superpose(&mut buf, 0, &p);
        for e in &jam {
            channel::superpose(&mut buf, 0, &channel::propagate(e, &r.position, &ch)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::SYNC_NOISE, k as u64));
        channel::add_noise(&mut buf, cfg.noise_power, &mut rng);

        let first = REQUEST_LEAD + payload_samples;
        let series = normalized_xcorr_range(&buf, post_wave.samples(), 0..buf_len)?;
        let det = evaluate(&series, &cfg.criterion, first..first + n_max + REQUEST_SLACK, t).filter(|d| d.qualified);
        let decoded = det.and_then(|d| {
            let start = d.peak_index.checked_sub(payload_samples)?;
            let gamma = crate::sic::estimate_attenuation(
                &BasebandSignal::new(buf.clone(), t, 1.0 / t).ok()?,
                &post_wave,
                d.peak_index,
            )
            .ok()?;
            let soft: Vec<f64> = (0..payload_chips)
                .map(|j| (buf[start + j * u] * gamma.conj()).re)
                .collect();
            let chips = sequences::combine_sync_chips(&soft);
            decode_sync_payload(&r.key, &chips).map(|x| (x, d))
        });
        match decoded {
            Some(((id, tau), d)) if id == initiator.id => {
                let arrival_true = p.arrival_time + payload_samples as f64 * t;
                let te = d.peak_index as f64 * t - arrival_true;
                let tof = p.arrival_time - emission.start_time;
                let mismatch = initiator.clock.processing_delay + r.clock.processing_delay + tof + te;
                let lag_local = initiator.clock.local_time(t_global) - mismatch;
                r.clock.offset += lag_local - r.clock.local_time(t_global);
                r.current_epoch = Some(tau);
                r.state = ReflectorState::Scanning;
                out.push(SyncOutcome {
                    reflector_id: r.id,
                    synchronized: true,
                    mismatch: Some(mismatch),
                    needs_resync: false,
                });
            }
            _ => out.push(SyncOutcome {
                reflector_id: r.id,
                synchronized: false,
                mismatch: None,
                needs_resync: true,
            }),
        }
    }
    Ok(out)
}

/// One response as the reflector emitted it.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduledResponse {
    pub reflector_index: usize,
    pub reflector_id: u32,
    pub n: u32,
    pub waiting_slots: u64,
    /// Global sample index of the first emitted sample.
    pub start_index: usize,
    pub emission: TimedEmission<f64>,
}

/// What the initiator saw for one expected response.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResponseCandidate {
    /// Global sample index of the correlation peak.
    pub peak_index: usize,
    pub magnitude: f64,
    pub timing_error: f64,
    pub distance: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReflectorTrace {
    pub reflector_id: u32,
    pub participated: bool,
    /// Global index of the request peak the reflector locked onto.
    pub request_peak: Option<usize>,
    /// Waiting slots the initiator expects for each response.
    pub expected_waiting: Vec<u64>,
    /// Per response, every qualified copy found, earliest first.
    pub candidates: Vec<Vec<ResponseCandidate>>,
    pub duplicates_rejected: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionTrace {
    pub epoch: u64,
    /// Global sample index of the last request sample.
    pub sent_index: usize,
    pub sample_period: f64,
    pub responses: Vec<ScheduledResponse>,
    pub reflectors: Vec<ReflectorTrace>,
    pub adversary_triggered: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReflectorOutcome {
    pub reflector_id: u32,
    pub true_distance: f64,
    pub estimate: Option<BatchEstimate<f64>>,
    /// Final estimate minus truth.
    pub error: Option<f64>,
    pub failed: bool,
    pub n_responses_received: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionResult {
    pub reflectors: Vec<ReflectorOutcome>,
    pub session_duration: f64,
    pub trace: SessionTrace,
}

impl SessionResult {
    pub fn failure_rate(&self) -> f64 {
        if self.reflectors.is_empty() {
            return 0.0;
        }
        self.reflectors.iter().filter(|r| r.failed).count() as f64 / self.reflectors.len() as f64
    }

    pub fn distances(&self) -> Vec<Option<f64>> {
        self.reflectors.iter().map(|r| r.estimate.as_ref().map(|e| e.final_distance)).collect()
    }
}

/// Parameters of one session that are not node state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SessionEnv {
    pub epoch: u64,
    pub seed: u64,
}

/// Read-only view handed to adversaries.
pub struct SessionContext<'a> {
    pub cfg: &'a ProtocolConfig,
    pub initiator: &'a InitiatorNode,
    pub reflectors: &'a [ReflectorNode],
    pub epoch: u64,
    pub seed: u64,
    pub sent_index: usize,
    pub total_samples: usize,
}

fn response_waveforms(
    key: &SharedKey,
    chain: &TransmitChain,
    ids: &[u32],
    epoch: u64,
    cfg: &ProtocolConfig,
) -> Result<Vec<Vec<Vec<Complex<f64>>>>> {
    ids.par_iter()
        .map(|&id| {
            (0..cfg.batch_size as u32)
                .map(|n| {
                    let seq = derive_sequence(key, &SequenceLabel::response(id, epoch, n), cfg.sequence_length)?;
                    Ok(chain.render::<f64>(&seq)?.into_samples())
                })
                .collect()
        })
        .collect()
}

fn waiting_schedule(key: &SharedKey, id: u32, epoch: u64, cfg: &ProtocolConfig) -> Result<Vec<u64>> {
    (0..cfg.batch_size as u32)
        .map(|n| derive_waiting_period(key, id, epoch, n, cfg.waiting_window, cfg.sample_period()).map(|w| w.slots))
        .collect()
}

fn propagate_clipped(
    e: &TimedEmission<f64>,
    rx: &Position,
    ch: &ChannelConfig,
    window: std::ops::Range<i64>,
) -> Result<Option<Propagated<f64>>> {
    let fs = ch.sample_rate_hz;
    let start = (e.start_time * fs).round() as i64;
    let delay = (e.source.distance_to(rx) / SPEED_OF_LIGHT * fs).floor() as i64;
    let margin = crate::filters::FRACTIONAL_DELAY_TAPS as i64;
    let lo = (window.start - delay - margin - start).max(0);
    let hi = (window.end - delay + margin - start).min(e.signal.len() as i64);
    if lo >= hi {
        return Ok(None);
    }
    if lo == 0 && hi == e.signal.len() as i64 {
        return channel::propagate(e, rx, ch).map(Some);
    }
    let cropped = TimedEmission {
        signal: e.signal.with_samples(e.signal.samples()[lo as usize..hi as usize].to_vec())?,
        start_time: (start + lo) as f64 / fs,
        source: e.source,
        source_id: e.source_id,
    };
    channel::propagate(&cropped, rx, ch).map(Some)
}

/// Simulate one broadcast ranging session on a shared sample grid whose
/// index 0 is the epoch boundary on the initiator clock.
pub fn run_session(
    initiator: &InitiatorNode,
    reflectors: &[ReflectorNode],
    cfg: &ProtocolConfig,
    env: &SessionEnv,
    adversary: Option<&Adversary>,
) -> Result<SessionResult> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    let t = cfg.sample_period();
    let chain = cfg.chain()?;
    let epoch = env.epoch;
    let n_wave = cfg.waveform_samples();
    let n_max = cfg.max_tof_samples();
    let ch = ChannelConfig::new(cfg.carrier_hz, cfg.sample_rate_hz, cfg.noise_power, env.seed)?;
    let t_session = initiator.clock.global_time(epoch as f64 * cfg.epoch_duration);

    let req_seq = derive_sequence(&initiator.key, &SequenceLabel::request(initiator.id, epoch), cfg.sequence_length)?;
    let req: BasebandSignal<f64> = chain.render(&req_seq)?;
    let sent_index = REQUEST_LEAD + n_wave - 1;
    let total_samples = (cfg.session_span() * cfg.sample_rate_hz).ceil() as usize + n_max + cfg.criterion.vicinity + 64;
    let ctx = SessionContext {
        cfg,
        initiator,
        reflectors,
        epoch,
        seed: env.seed,
        sent_index,
        total_samples,
    };
    let adv_seed = derive_seed(env.seed, stream::ADVERSARY, 0);
    let early_jam = match adversary {
        Some(a) => a.request_phase(cfg, initiator, adv_seed, total_samples)?,
        None => Vec::new(),
    };
    let req_emission = TimedEmission {
        signal: req.clone(),
        start_time: REQUEST_LEAD as f64 * t,
        source: initiator.position,
        source_id: initiator.id,
    };

    // Reflectors: detect the request and schedule the batch.
    let req_buf_len = REQUEST_LEAD + n_wave + n_max + REQUEST_SLACK + cfg.criterion.vicinity + 1;
    let req_search = 0..REQUEST_LEAD + n_max + REQUEST_SLACK;
    let ids: Vec<u32> = reflectors.iter().map(|r| r.id).collect();
    let legit_waves = response_waveforms(&initiator.key, &chain, &ids, epoch, cfg)?;

    let per_reflector: Vec<Result<(Option<usize>, Vec<ScheduledResponse>)>> = reflectors
        .par_iter()
        .enumerate()
        .map(|(k, r)| {
            if !r.is_synchronized() {
                return Ok((None, Vec::new()));
            }
            let r_epoch = r.session_epoch(t_session, cfg.epoch_duration);
            let own_req = if r.key == initiator.key && r_epoch == epoch {
                req.clone()
            } else {
                let s = derive_sequence(&r.key, &SequenceLabel::request(initiator.id, r_epoch), cfg.sequence_length)?;
                chain.render(&s)?
            };
            let mut buf = vec![Complex::new(0.0, 0.0); req_buf_len];
            channel::superpose(&mut buf, 0, &channel::propagate(&req_emission, &r.position, &ch)?);
            for e in &early_jam {
                if let Some(p) = propagate_clipped(e, &r.position, &ch, 0..req_buf_len as i64)? {
                    channel::superpose(&mut buf, 0, &p);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(env.seed, stream::REQUEST_NOISE, k as u64));
            channel::add_noise(&mut buf, cfg.noise_power, &mut rng);
            let series = normalized_xcorr_range(&buf, own_req.samples(), 0..req_buf_len)?;
            let Some(det) = evaluate(&series, &cfg.criterion, req_search.clone(), t).filter(|d| d.qualified) else {
                return Ok((None, Vec::new()));
            };
            let waits = waiting_schedule(&r.key, r.id, r_epoch, cfg)?;
            let waves = if r.key == initiator.key && r_epoch == epoch {
                legit_waves[k].clone()
            } else {
                response_waveforms(&r.key, &chain, &[r.id], r_epoch, cfg)?.remove(0)
            };
            let mut prev_end = det.peak_index + n_wave - 1 + r.turnaround_samples;
            let mut out = Vec::with_capacity(cfg.batch_size);
            for (n, (w, wave)) in waits.iter().zip(waves).enumerate() {
                let start = prev_end + *w as usize + 1;
                prev_end = start + n_wave - 1;
                out.push(ScheduledResponse {
                    reflector_index: k,
                    reflector_id: r.id,
                    n: n as u32,
                    waiting_slots: *w,
                    start_index: start,
                    emission: TimedEmission {
                        signal: BasebandSignal::new(wave, t, req.bandwidth())?,
                        start_time: start as f64 * t,
                        source: r.position,
                        source_id: r.id,
                    },
                });
            }
            Ok((Some(det.peak_index), out))
        })
        .collect();
    let mut request_peaks = Vec::with_capacity(reflectors.len());
    let mut responses = Vec::new();
    for r in per_reflector {
        let (peak, sched) = r?;
        request_peaks.push(peak);
        responses.extend(sched);
    }

    let (late, triggered) = match adversary {
        Some(a) => a.response_phase(&ctx, &responses, adv_seed)?,
        None => (Vec::new(), false),
    };

    // Initiator receive buffer starts right after its own request.
    let rx0 = sent_index + 1;
    let rx_len = total_samples - rx0;
    let window = rx0 as i64..total_samples as i64;
    let mut rx = vec![Complex::new(0.0, 0.0); rx_len];
    let props: Vec<Result<Option<Propagated<f64>>>> = responses
        .par_iter()
        .map(|s| propagate_clipped(&s.emission, &initiator.position, &ch, window.clone()))
        .collect();
    for p in props {
        if let Some(p) = p? {
            channel::superpose(&mut rx, rx0 as i64, &p);
        }
    }
    for e in early_jam.iter().chain(&late) {
        if let Some(p) = propagate_clipped(e, &initiator.position, &ch, window.clone())? {
            channel::superpose(&mut rx, rx0 as i64, &p);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(env.seed, stream::INITIATOR_NOISE, 0));
    channel::add_noise(&mut rx, cfg.noise_power, &mut rng);

    // Expected windows for every (reflector, n) under the initiator's key.
    let hw = cfg.hardware_latency_samples();
    let mut expected = Vec::with_capacity(reflectors.len());
    let mut specs = Vec::with_capacity(reflectors.len() * cfg.batch_size);
    for (k, r) in reflectors.iter().enumerate() {
        let waits = waiting_schedule(&initiator.key, r.id, epoch, cfg)?;
        let mut end = sent_index;
        for (n, w) in waits.iter().enumerate() {
            let start = end + *w as usize + 1;
            end = start + n_wave - 1;
            let lo = start.saturating_sub(EARLY_SLACK).saturating_sub(rx0);
            let hi = (start + 2 * n_max + hw + EARLY_SLACK + 1).saturating_sub(rx0);
            specs.push(SicPattern {
                id: k * cfg.batch_size + n,
                pattern: &legit_waves[k][n][..],
                search: lo..hi,
            });
        }
        expected.push(waits);
    }
    let sic_cfg = SicConfig {
        criterion: cfg.criterion,
        enabled: cfg.sic,
        replica: cfg.replica,
    };
    let report = detect_all_with(&rx, t, &specs, &sic_cfg)?;

    // Copies still present in the residual, for the duplicate rule. The main
    // lobe widens with the upsampling factor.
    let lobe = cfg.criterion.main_lobe * cfg.upsample_factor.max(1);
    let extra: Vec<Option<DetectionResult<f64>>> = report
        .detections
        .par_iter()
        .map(|d| {
            let spec = &specs[d.id];
            let lo = spec.search.start.saturating_sub(cfg.criterion.vicinity + 1);
            let hi = spec.search.end + cfg.criterion.vicinity + 1;
            let series = normalized_xcorr_range(&report.residual, spec.pattern, lo..hi).ok()?;
            if series.is_empty() {
                return None;
            }
            evaluate(&series, &cfg.criterion, spec.search.clone(), t)
                .filter(|x| x.qualified && x.peak_index.abs_diff(d.detection.peak_index) > lobe)
        })
        .collect();

    let mut traces: Vec<ReflectorTrace> = reflectors
        .iter()
        .zip(&request_peaks)
        .zip(expected)
        .map(|((r, peak), waits)| ReflectorTrace {
            reflector_id: r.id,
            participated: peak.is_some(),
            request_peak: *peak,
            expected_waiting: waits,
            candidates: vec![Vec::new(); cfg.batch_size],
            duplicates_rejected: 0,
        })
        .collect();

    let t_s = sent_index as f64 * t;
    for (d, copy) in report.detections.iter().zip(extra) {
        let k = d.id / cfg.batch_size;
        let n = d.id % cfg.batch_size;
        let cumulative_wait: u64 = traces[k].expected_waiting[..=n].iter().sum();
        for det in std::iter::once(d.detection).chain(copy) {
            let m = det.peak_index + rx0;
            let te = if cfg.subsample_interpolation { det.timing_error } else { 0.0 };
            let obs = RangingObservation {
                sent: t_s,
                received: (m + n_wave - 1) as f64 * t,
                waiting: cumulative_wait as f64 * t,
                response_duration: ((n + 1) * n_wave) as f64 * t,
                timing_error: te,
                hardware_latency: cfg.hardware_latency,
            };
            traces[k].candidates[n].push(ResponseCandidate {
                peak_index: m,
                magnitude: det.peak_magnitude,
                timing_error: te,
                distance: ranging::tof_to_distance(ranging::compute_tof(&obs)),
                accepted: false,
            });
        }
    }

    let d_max = SPEED_OF_LIGHT * cfg.tof_max;
    let mut outcomes = Vec::with_capacity(reflectors.len());
    for (k, r) in reflectors.iter().enumerate() {
        let tr = &mut traces[k];
        let mut accepted = Vec::new();
        for cands in tr.candidates.iter_mut() {
            cands.sort_by_key(|c| c.peak_index);
            if let Some(first) = cands.first_mut() {
                if (0.0..=d_max).contains(&first.distance) {
                    first.accepted = true;
                    accepted.push(first.distance);
                }
            }
            tr.duplicates_rejected += cands.len().saturating_sub(1);
        }
        let estimate = ranging::batch_estimate(&accepted, cfg.batch_size)?;
        let true_distance = r.position.distance_to(&initiator.position);
        outcomes.push(ReflectorOutcome {
            reflector_id: r.id,
            true_distance,
            error: estimate.as_ref().map(|e| e.final_distance - true_distance),
            failed: estimate.is_none(),
            n_responses_received: accepted.len(),
            estimate,
        });
    }

    let last = responses
        .iter()
        .map(|s| s.start_index + n_wave)
        .max()
        .unwrap_or(sent_index + 1);
    Ok(SessionResult {
        reflectors: outcomes,
        session_duration: last as f64 * t,
        trace: SessionTrace {
            epoch,
            sent_index,
            sample_period: t,
            responses,
            reflectors: traces,
            adversary_triggered: triggered,
        },
    })
}
