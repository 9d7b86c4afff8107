//! Attack models: blind and detect-then-jam jamming, record-and-replay
//! distance enlargement and passive sniffing.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, free_space_gain, ChannelConfig, Position, TimedEmission};
use crate::detector::{evaluate, normalized_xcorr_range};
use crate::error::{Error, Result};
use crate::protocol::{
    run_session, InitiatorNode, ProtocolConfig, ReflectorNode, ScheduledResponse, SessionContext,
    SessionEnv, SessionResult, REQUEST_LEAD,
};
use crate::ranging::SPEED_OF_LIGHT;
use crate::sequences::{derive_sequence, SequenceLabel, SharedKey};
use crate::signal::BasebandSignal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JamMode {
    Continuous,
    Intermittent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JammerConfig {
    pub mode: JamMode,
    /// Transmit power in watts.
    pub power: f64,
    #[serde(default = "one")]
    pub duty_cycle: f64,
    #[serde(default = "default_pulse")]
    pub pulse_length: usize,
    pub position: Position,
}

fn one() -> f64 {
    1.0
}

fn default_pulse() -> usize {
    64
}

impl JammerConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.power >= 0.0 && self.power.is_finite()) {
            v.push("jammer power must be non-negative".into());
        }
        if !(self.duty_cycle >= 0.0 && self.duty_cycle <= 1.0) {
            v.push("jammer duty_cycle must lie in [0, 1]".into());
        }
        if self.mode == JamMode::Intermittent && self.pulse_length == 0 {
            v.push("jammer pulse_length must be at least 1".into());
        }
        if !self.position.is_finite() {
            v.push("jammer position must be finite".into());
        }
        v
    }
}

/// Sample grid an attack is generated on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timeline {
    pub samples: usize,
    pub sample_rate_hz: f64,
}

fn noise_burst(len: usize, power: f64, sample_period: f64, rng: &mut ChaCha8Rng) -> Result<BasebandSignal<f64>> {
    let mut s = vec![Complex::new(0.0, 0.0); len];
    channel::add_noise(&mut s, power, rng);
    BasebandSignal::new(s, sample_period, 1.0 / sample_period)
}

/// Jamming emissions over the timeline: one continuous noise stream, or
/// noise bursts at uniformly random starts totalling `duty_cycle`.
pub fn jam(cfg: &JammerConfig, timeline: &Timeline, seed: u64) -> Result<Vec<TimedEmission<f64>>> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    let t = 1.0 / timeline.sample_rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emission = |signal, start: usize| TimedEmission {
        signal,
        start_time: start as f64 * t,
        source: cfg.position,
        source_id: u32::MAX,
    };
    match cfg.mode {
        JamMode::Continuous if cfg.duty_cycle > 0.0 && timeline.samples > 0 => Ok(vec![emission(
            noise_burst(timeline.samples, cfg.power, t, &mut rng)?,
            0,
        )]),
        JamMode::Continuous => Ok(Vec::new()),
        JamMode::Intermittent => {
            let len = cfg.pulse_length.min(timeline.samples);
            if len == 0 {
                return Ok(Vec::new());
            }
            let pulses = (cfg.duty_cycle * timeline.samples as f64 / len as f64).round() as usize;
            (0..pulses)
                .map(|_| {
                    let start = rng.random_range(0..=timeline.samples - len);
                    Ok(emission(noise_burst(len, cfg.power, t, &mut rng)?, start))
                })
                .collect()
        }
    }
}

/// A jammer that only fires after recognising the request, which it must
/// guess without the shared key.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectiveJammer {
    pub position: Position,
    pub power: f64,
    /// Seeds the key the jammer guesses.
    #[serde(default)]
    pub key_guess_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayAttacker {
    /// Prefix length recorded and replayed, in samples.
    pub record_length: usize,
    pub position: Position,
    #[serde(default)]
    pub replay_delay: usize,
    /// Transmit power of the replay and the overshadowing noise.
    pub jam_power: f64,
    /// Reflector whose responses are attacked.
    pub target: u32,
}

impl ReplayAttacker {
    /// Largest prefix that can be replayed without the estimate leaving the
    /// accepted range.
    pub fn max_replayable(cfg: &ProtocolConfig) -> usize {
        cfg.max_tof_samples()
    }

    pub fn flagged_detectable(&self, cfg: &ProtocolConfig) -> bool {
        self.record_length > Self::max_replayable(cfg)
    }

    /// Transmit power that lands at `rx` with the same power a response
    /// of power `response_power` from `source` does.
    pub fn matched_power(&self, response_power: f64, source: &Position, rx: &Position, carrier_hz: f64) -> f64 {
        let gs = free_space_gain(source.distance_to(rx), carrier_hz);
        let ga = free_space_gain(self.position.distance_to(rx), carrier_hz);
        response_power * (gs / ga).powi(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnifferObserver {
    pub position: Position,
    #[serde(default)]
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Adversary {
    Jammer(JammerConfig),
    SelectiveJammer(SelectiveJammer),
    Replay(ReplayAttacker),
    Sniffer(SnifferObserver),
}

impl Adversary {
    pub fn validate(&self) -> Vec<String> {
        match self {
            Adversary::Jammer(j) => j.validate(),
            Adversary::SelectiveJammer(s) if !(s.power >= 0.0 && s.power.is_finite()) => {
                vec!["selective jammer power must be non-negative".into()]
            }
            Adversary::Replay(r) if r.record_length == 0 || !(r.jam_power >= 0.0) => {
                vec!["replay attacker needs record_length >= 1 and non-negative jam_power".into()]
            }
            _ => Vec::new(),
        }
    }

    /// Emissions independent of the reflectors' behaviour.
    pub fn request_phase(
        &self,
        cfg: &ProtocolConfig,
        _initiator: &InitiatorNode,
        seed: u64,
        total_samples: usize,
    ) -> Result<Vec<TimedEmission<f64>>> {
        match self {
            Adversary::Jammer(j) => jam(
                j,
                &Timeline {
                    samples: total_samples,
                    sample_rate_hz: cfg.sample_rate_hz,
                },
                seed,
            ),
            _ => Ok(Vec::new()),
        }
    }

    /// Emissions that react to the request and responses on air; the flag
    /// reports whether a reactive adversary fired.
    pub fn response_phase(
        &self,
        ctx: &SessionContext<'_>,
        responses: &[ScheduledResponse],
        seed: u64,
    ) -> Result<(Vec<TimedEmission<f64>>, bool)> {
        match self {
            Adversary::SelectiveJammer(s) => selective_response(s, ctx, seed),
            Adversary::Replay(r) => replay_response(r, ctx, responses, seed).map(|e| (e, false)),
            _ => Ok((Vec::new(), false)),
        }
    }
}

fn selective_response(
    s: &SelectiveJammer,
    ctx: &SessionContext<'_>,
    seed: u64,
) -> Result<(Vec<TimedEmission<f64>>, bool)> {
    let cfg = ctx.cfg;
    let chain = cfg.chain()?;
    let t = cfg.sample_period();
    let ch = ChannelConfig::new(cfg.carrier_hz, cfg.sample_rate_hz, cfg.noise_power, seed)?;

    // What is on air: the request under the real key.
    let real = derive_sequence(
        &ctx.initiator.key,
        &SequenceLabel::request(ctx.initiator.id, ctx.epoch),
        cfg.sequence_length,
    )?;
    let real = chain.render::<f64>(&real)?;
    let guess_key = SharedKey::random(&mut ChaCha8Rng::seed_from_u64(s.key_guess_seed));
    let guess = derive_sequence(&guess_key, &SequenceLabel::request(ctx.initiator.id, ctx.epoch), cfg.sequence_length)?;
    let guess = chain.render::<f64>(&guess)?;

    let n = cfg.waveform_samples();
    let len = REQUEST_LEAD + n + cfg.max_tof_samples() + cfg.criterion.vicinity + 64;
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    let e = TimedEmission {
        signal: real,
        start_time: REQUEST_LEAD as f64 * t,
        source: ctx.initiator.position,
        source_id: ctx.initiator.id,
    };
    if s.position.distance_to(&ctx.initiator.position) > 0.0 {
        channel::superpose(&mut buf, 0, &channel::propagate(&e, &s.position, &ch)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    channel::add_noise(&mut buf, cfg.noise_power, &mut rng);
    let series = normalized_xcorr_range(&buf, guess.samples(), 0..len)?;
    let fired = evaluate(&series, &cfg.criterion, 0..len, t).is_some_and(|d| d.qualified);
    if !fired {
        return Ok((Vec::new(), false));
    }
    let start = len;
    let samples = ctx.total_samples.saturating_sub(start);
    let burst = noise_burst(samples.max(1), s.power, t, &mut rng)?;
    Ok((
        vec![TimedEmission {
            signal: burst,
            start_time: start as f64 * t,
            source: s.position,
            source_id: u32::MAX,
        }],
        true,
    ))
}

fn replay_response(
    r: &ReplayAttacker,
    ctx: &SessionContext<'_>,
    responses: &[ScheduledResponse],
    seed: u64,
) -> Result<Vec<TimedEmission<f64>>> {
    let cfg = ctx.cfg;
    let t = cfg.sample_period();
    let fs = cfg.sample_rate_hz;
    let ch = ChannelConfig::new(cfg.carrier_hz, fs, 0.0, seed)?;
    let n_wave = cfg.waveform_samples();
    let n_rec = r.record_length.min(n_wave);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in responses.iter().filter(|s| s.reflector_id == r.target) {
        let p = channel::propagate(&s.emission, &r.position, &ch)?;
        let rec_start = (p.arrival_time * fs - 1e-9).ceil() as i64;
        let mut x: Vec<Complex<f64>> = (rec_start..rec_start + n_rec as i64)
            .map(|g| {
                let i = g - p.start_index;
                if i >= 0 && (i as usize) < p.samples.len() {
                    p.samples[i as usize]
                } else {
                    Complex::new(0.0, 0.0)
                }
            })
            .collect();
        let power = crate::signal::energy(&x) / n_rec.max(1) as f64;
        if power > 0.0 {
            let g = (r.jam_power / power).sqrt();
            x.iter_mut().for_each(|v| *v *= g);
        }
        let mut tail = vec![Complex::new(0.0, 0.0); n_wave - n_rec + crate::filters::FRACTIONAL_DELAY_TAPS];
        channel::add_noise(&mut tail, r.jam_power, &mut rng);
        x.extend(tail);
        let start = rec_start + n_rec as i64 + r.replay_delay as i64;
        out.push(TimedEmission {
            signal: BasebandSignal::new(x, t, 1.0 / t)?,
            start_time: start as f64 * t,
            source: r.position,
            source_id: u32::MAX - 1,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttackOutcome {
    pub x_detected: bool,
    pub y_detected: bool,
    pub enlarged_accepted: bool,
    /// Responses of the target that were attacked.
    pub responses: usize,
    pub x_detections: usize,
    pub y_detections: usize,
    /// Lowest accepted estimate minus truth, over the target's responses.
    pub min_accepted_error: Option<f64>,
}

/// Run one session under the replay attack and classify what the
/// initiator detected.
pub fn enlargement_attack(
    attacker: &ReplayAttacker,
    initiator: &InitiatorNode,
    reflectors: &[ReflectorNode],
    cfg: &ProtocolConfig,
    env: &SessionEnv,
) -> Result<(AttackOutcome, SessionResult)> {
    let adv = Adversary::Replay(*attacker);
    let result = run_session(initiator, reflectors, cfg, env, Some(&adv))?;
    let fs = cfg.sample_rate_hz;
    let Some(k) = reflectors.iter().position(|r| r.id == attacker.target) else {
        return Err(Error::invalid(format!("no reflector with id {}", attacker.target)));
    };
    let refl = &reflectors[k];
    let d_ri = refl.position.distance_to(&initiator.position);
    let d_ra = refl.position.distance_to(&attacker.position);
    let d_ai = attacker.position.distance_to(&initiator.position);
    let n_rec = attacker.record_length.min(cfg.waveform_samples());
    let tol = cfg.criterion.main_lobe as f64;
    let mut out = AttackOutcome::default();
    let trace = &result.trace.reflectors[k];
    for s in result.trace.responses.iter().filter(|s| s.reflector_id == attacker.target) {
        out.responses += 1;
        let y_at = s.start_index as f64 + d_ri / SPEED_OF_LIGHT * fs;
        let rec_start = (s.start_index as f64 + d_ra / SPEED_OF_LIGHT * fs - 1e-9).ceil();
        let x_at = rec_start + (n_rec + attacker.replay_delay) as f64 + d_ai / SPEED_OF_LIGHT * fs;
        let cands = &trace.candidates[s.n as usize];
        let near = |at: f64| cands.iter().any(|c| (c.peak_index as f64 - at).abs() <= tol + 1.0);
        if near(x_at) {
            out.x_detections += 1;
        }
        if near(y_at) {
            out.y_detections += 1;
        }
        for c in cands.iter().filter(|c| c.accepted) {
            let err = c.distance - d_ri;
            out.min_accepted_error = Some(out.min_accepted_error.map_or(err, |m: f64| m.min(err)));
            if err > SPEED_OF_LIGHT * cfg.sample_period() {
                out.enlarged_accepted = true;
            }
        }
    }
    out.x_detected = out.x_detections > 0;
    out.y_detected = out.responses > 0 && out.y_detections == out.responses;
    Ok((out, result))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnifferKnowledge {
    /// The adversary learned the waiting period by some oracle.
    pub waiting_known: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnifferEstimate {
    pub reflector_id: u32,
    pub true_tof: f64,
    pub estimated_tof: f64,
}

impl SnifferEstimate {
    pub fn distance_error(&self) -> f64 {
        (self.estimated_tof - self.true_tof) * SPEED_OF_LIGHT
    }
}

/// Passive estimate from the energy edges of the request and first
/// response. Without the waiting period the adversary uses the window
/// mean; without the reflector's position it assumes the reflector-to-
/// observer flight equals the initiator-to-reflector flight.
pub fn sniffer_estimate(
    observer: &SnifferObserver,
    initiator: &InitiatorNode,
    reflectors: &[ReflectorNode],
    cfg: &ProtocolConfig,
    result: &SessionResult,
    knowledge: SnifferKnowledge,
) -> Vec<SnifferEstimate> {
    let t = cfg.sample_period();
    let tof_ia = observer.position.distance_to(&initiator.position) / SPEED_OF_LIGHT;
    let t_s_hat = result.trace.sent_index as f64 * t + tof_ia;
    let n_wave = cfg.waveform_samples() as f64;
    result
        .trace
        .responses
        .iter()
        .filter(|s| s.n == 0)
        .map(|s| {
            let r = &reflectors[s.reflector_index];
            let tof = r.position.distance_to(&initiator.position) / SPEED_OF_LIGHT;
            let tof_ra = r.position.distance_to(&observer.position) / SPEED_OF_LIGHT;
            let t_r_hat = (s.start_index as f64 + n_wave - 1.0) * t + tof_ra;
            let waiting = if knowledge.waiting_known {
                s.waiting_slots as f64 * t
            } else {
                0.5 * f64::from(cfg.waiting_window - 1) * t
            };
            let est = 0.5 * (t_r_hat - t_s_hat - waiting - n_wave * t + tof_ia);
            SnifferEstimate {
                reflector_id: r.id,
                true_tof: tof,
                estimated_tof: est,
            }
        })
        .collect()
}
