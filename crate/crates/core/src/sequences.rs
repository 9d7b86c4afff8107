//! Keyed sequence derivation, BPSK modulation and the transmit chain.

use aes::cipher::{BlockCipherDecrypt, BlockCipherEncrypt};
use aes::Aes128;
use hmac::{Hmac, KeyInit, Mac};
use num_complex::Complex;
use rand::Rng;
use sha2::Sha256;

use crate::error::{Error, Result};
use crate::filters;
use crate::num::Real;
use crate::signal::BasebandSignal;

type HmacSha256 = Hmac<Sha256>;

/// Payload octets carried by a SYNC frame.
pub const SYNC_PAYLOAD_OCTETS: usize = 16;
pub const POSTAMBLE_LEN: usize = 64;
/// Chips sent per payload bit of a SYNC frame.
pub const SYNC_CHIPS_PER_BIT: usize = 2;
pub const MIN_KEY_OCTETS: usize = 16;

const WAIT_TAG: u8 = 0x04;
const SYNC_KEY_INFO: &[u8] = b"rangesim sync cipher key";

#[derive(Clone, PartialEq, Eq)]
pub struct SharedKey(Vec<u8>);

impl SharedKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(Error::EmptyKey);
        }
        if bytes.len() < MIN_KEY_OCTETS {
            return Err(Error::invalid(format!(
                "shared key needs at least {MIN_KEY_OCTETS} octets, got {}",
                bytes.len()
            )));
        }
        Ok(Self(bytes))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut b = vec![0u8; 32];
        rng.fill(&mut b[..]);
        Self(b)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    fn mac(&self) -> HmacSha256 {
        <HmacSha256 as KeyInit>::new_from_slice(&self.0).expect("hmac accepts any key length")
    }
}

impl std::fmt::Debug for SharedKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SharedKey({} octets)", self.0.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochIndex {
    pub value: u64,
    pub duration: f64,
}

impl EpochIndex {
    pub fn new(value: u64, duration: f64) -> Result<Self> {
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(Error::invalid("epoch duration must be positive"));
        }
        Ok(Self { value, duration })
    }

    /// Epoch containing local time `t` (negative times clamp to epoch 0).
    pub fn at(t: f64, duration: f64) -> Result<Self> {
        let e = Self::new(0, duration)?;
        let v = (t / duration).floor();
        Ok(Self {
            value: if v > 0.0 { v as u64 } else { 0 },
            ..e
        })
    }

    pub fn start_time(&self) -> f64 {
        self.value as f64 * self.duration
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Request,
    Response,
    Postamble,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Request => 0x01,
            Role::Response => 0x02,
            Role::Postamble => 0x03,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SequenceLabel {
    pub role: Role,
    pub owner: u32,
    pub epoch: u64,
    pub counter: Option<u32>,
}

impl SequenceLabel {
    pub fn request(initiator: u32, epoch: u64) -> Self {
        Self {
            role: Role::Request,
            owner: initiator,
            epoch,
            counter: None,
        }
    }

    pub fn response(reflector: u32, epoch: u64, n: u32) -> Self {
        Self {
            role: Role::Response,
            owner: reflector,
            epoch,
            counter: Some(n),
        }
    }

    pub fn postamble() -> Self {
        Self {
            role: Role::Postamble,
            owner: 0,
            epoch: 0,
            counter: None,
        }
    }

    /// Fixed-width big-endian encoding: role, owner, epoch and, when present, the counter.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17);
        out.push(self.role.tag());
        out.extend_from_slice(&self.owner.to_be_bytes());
        out.extend_from_slice(&self.epoch.to_be_bytes());
        if let Some(n) = self.counter {
            out.extend_from_slice(&n.to_be_bytes());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolSequence {
    symbols: Vec<i8>,
    label: SequenceLabel,
}

impl SymbolSequence {
    pub fn from_symbols(symbols: Vec<i8>, label: SequenceLabel) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::invalid("sequence must not be empty"));
        }
        if symbols.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::invalid("symbols must be +1 or -1"));
        }
        Ok(Self { symbols, label })
    }

    pub fn symbols(&self) -> &[i8] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn label(&self) -> &SequenceLabel {
        &self.label
    }

    pub fn hamming_distance(&self, other: &Self) -> usize {
        self.symbols
            .iter()
            .zip(&other.symbols)
            .filter(|(a, b)| a != b)
            .count()
            + self.symbols.len().abs_diff(other.symbols.len())
    }
}

fn bits_to_symbols(bytes: &[u8], take: usize, out: &mut Vec<i8>) {
    for byte in bytes {
        for bit in (0..8).rev() {
            if out.len() == take {
                return;
            }
            out.push(if (byte >> bit) & 1 == 0 { 1 } else { -1 });
        }
    }
}

fn symbols_to_bits(symbols: &[i8]) -> Vec<u8> {
    symbols
        .chunks(8)
        .map(|c| c.iter().fold(0u8, |acc, &s| (acc << 1) | u8::from(s < 0)))
        .collect()
}

pub fn derive_sequence(key: &SharedKey, label: &SequenceLabel, len: usize) -> Result<SymbolSequence> {
    if len == 0 {
        return Err(Error::invalid("sequence length must be at least 1"));
    }
    let prefix = label.encode();
    let mut symbols = Vec::with_capacity(len);
    let mut block: u32 = 0;
    while symbols.len() < len {
        let mut mac = key.mac();
        mac.update(&prefix);
        mac.update(&block.to_be_bytes());
        bits_to_symbols(&mac.finalize().into_bytes(), len, &mut symbols);
        block += 1;
    }
    Ok(SymbolSequence {
        symbols,
        label: *label,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaitingPeriod {
    /// Whole sample periods waited.
    pub slots: u64,
    pub value: f64,
    pub window: u32,
    pub index: u32,
}

pub fn derive_waiting_period(
    key: &SharedKey,
    reflector_id: u32,
    epoch: u64,
    n: u32,
    window: u32,
    sample_period: f64,
) -> Result<WaitingPeriod> {
    if window == 0 {
        return Err(Error::invalid("waiting window must be at least 1"));
    }
    if !(sample_period > 0.0) {
        return Err(Error::invalid("sample period must be positive"));
    }
    let mut mac = key.mac();
    mac.update(&[WAIT_TAG]);
    mac.update(&reflector_id.to_be_bytes());
    mac.update(&epoch.to_be_bytes());
    mac.update(&n.to_be_bytes());
    mac.update(&window.to_be_bytes());
    let out = mac.finalize().into_bytes();
    let h = u64::from_be_bytes(out[..8].try_into().expect("8 octets"));
    let slots = h % u64::from(window);
    Ok(WaitingPeriod {
        slots,
        value: slots as f64 * sample_period,
        window,
        index: n,
    })
}

pub fn modulate_symbols<T: Real>(symbols: &[i8], sample_period: T) -> Result<BasebandSignal<T>> {
    if symbols.is_empty() {
        return Err(Error::invalid("cannot modulate an empty sequence"));
    }
    let samples = symbols
        .iter()
        .map(|&s| Complex::new(T::of(f64::from(s)), T::zero()))
        .collect();
    BasebandSignal::new(samples, sample_period, T::one() / sample_period)
}

pub fn modulate_bpsk<T: Real>(seq: &SymbolSequence, sample_period: T) -> Result<BasebandSignal<T>> {
    modulate_symbols(seq.symbols(), sample_period)
}

/// Hard decisions on the real part.
pub fn demodulate_bpsk<T: Real>(sig: &BasebandSignal<T>) -> Vec<i8> {
    sig.samples()
        .iter()
        .map(|s| if s.re < T::zero() { -1 } else { 1 })
        .collect()
}

/// Interpolate by `factor` at the same sample period, dividing the bandwidth.
pub fn upsample<T: Real>(sig: &BasebandSignal<T>, factor: usize) -> Result<BasebandSignal<T>> {
    if factor == 0 {
        return Err(Error::invalid("upsampling factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(sig.clone());
    }
    let mut y = filters::interpolate(sig.samples(), factor);
    filters::match_energy(&mut y, sig.energy());
    BasebandSignal::new(y, sig.sample_period(), sig.bandwidth() / T::of(factor as f64))
}

/// Restrict the occupied band to `fraction` of the sample rate (energy kept).
/// Signals already inside the mask pass unchanged.
pub fn band_limit<T: Real>(sig: &BasebandSignal<T>, fraction: f64) -> Result<BasebandSignal<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("spectral mask fraction must lie in (0, 1]"));
    }
    let mask = sig.sample_rate() * T::of(fraction);
    if sig.bandwidth() <= mask * T::of(1.0 + 1e-9) {
        return Ok(sig.clone());
    }
    let mut y = filters::shift_same(sig.samples(), 0.0, fraction, filters::FRACTIONAL_DELAY_TAPS);
    filters::match_energy(&mut y, sig.energy());
    BasebandSignal::new(y, sig.sample_period(), mask)
}

/// Symbol sequence to emitted waveform: BPSK, optional upsampling, spectral mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransmitChain {
    pub sample_period: f64,
    pub upsample_factor: usize,
    pub mask_fraction: f64,
}

impl TransmitChain {
    pub fn new(sample_period: f64, upsample_factor: usize, mask_fraction: f64) -> Result<Self> {
        if !(sample_period > 0.0) {
            return Err(Error::invalid("sample period must be positive"));
        }
        if upsample_factor == 0 {
            return Err(Error::invalid("upsampling factor must be at least 1"));
        }
        if !(mask_fraction > 0.0 && mask_fraction <= 1.0) {
            return Err(Error::invalid("spectral mask fraction must lie in (0, 1]"));
        }
        Ok(Self {
            sample_period,
            upsample_factor,
            mask_fraction,
        })
    }

    pub fn render_symbols<T: Real>(&self, symbols: &[i8]) -> Result<BasebandSignal<T>> {
        let s = modulate_symbols(symbols, T::of(self.sample_period))?;
        let s = upsample(&s, self.upsample_factor)?;
        band_limit(&s, self.mask_fraction)
    }

    pub fn render<T: Real>(&self, seq: &SymbolSequence) -> Result<BasebandSignal<T>> {
        self.render_symbols(seq.symbols())
    }

    /// Samples occupied by a sequence of `symbols` chips.
    pub fn samples_for(&self, symbols: usize) -> usize {
        symbols * self.upsample_factor
    }
}

/// The system-wide public postamble: a length-63 m-sequence (x^6 + x + 1)
/// extended by its first chip to 64 symbols.
pub fn postamble() -> SymbolSequence {
    let mut state: u8 = 0b11_1111;
    let mut symbols = Vec::with_capacity(POSTAMBLE_LEN);
    for _ in 0..63 {
        let out = state & 1;
        symbols.push(if out == 0 { 1 } else { -1 });
        let fb = (state ^ (state >> 1)) & 1;
        state = (state >> 1) | (fb << 5);
    }
    symbols.push(symbols[0]);
    SymbolSequence {
        symbols,
        label: SequenceLabel::postamble(),
    }
}

fn sync_cipher(key: &SharedKey) -> Aes128 {
    let mut mac = key.mac();
    mac.update(SYNC_KEY_INFO);
    let k = mac.finalize().into_bytes();
    let mut aes_key = [0u8; 16];
    aes_key.copy_from_slice(&k[..16]);
    Aes128::new(&aes_key.into())
}

/// Encrypted SYNC payload as symbols (128 chips, MSB first).
pub fn sync_payload(key: &SharedKey, initiator_id: u32, epoch: u64) -> Result<Vec<i8>> {
    let mut block = [0u8; SYNC_PAYLOAD_OCTETS];
    block[..4].copy_from_slice(&initiator_id.to_be_bytes());
    block[4..12].copy_from_slice(&epoch.to_be_bytes());
    let mut b = block.into();
    sync_cipher(key).encrypt_block(&mut b);
    let mut out = Vec::with_capacity(8 * SYNC_PAYLOAD_OCTETS);
    bits_to_symbols(&b, 8 * SYNC_PAYLOAD_OCTETS, &mut out);
    Ok(out)
}

/// Recover `(initiator_id, epoch)` from payload symbols; `None` when the
/// key is wrong or the payload is corrupted.
pub fn decode_sync_payload(key: &SharedKey, symbols: &[i8]) -> Option<(u32, u64)> {
    if symbols.len() != 8 * SYNC_PAYLOAD_OCTETS {
        return None;
    }
    let bytes = symbols_to_bits(symbols);
    let mut b: [u8; SYNC_PAYLOAD_OCTETS] = bytes.try_into().ok()?;
    let mut block = b.into();
    sync_cipher(key).decrypt_block(&mut block);
    b.copy_from_slice(&block);
    if b[12..] != [0, 0, 0, 0] {
        return None;
    }
    let id = u32::from_be_bytes(b[..4].try_into().ok()?);
    let epoch = u64::from_be_bytes(b[4..12].try_into().ok()?);
    Some((id, epoch))
}

/// Hard decisions on payload bits from per-chip soft values.
pub fn combine_sync_chips(soft: &[f64]) -> Vec<i8> {
    soft.chunks(SYNC_CHIPS_PER_BIT)
        .map(|c| if c.iter().sum::<f64>() < 0.0 { -1 } else { 1 })
        .collect()
}

/// Symbols of a full SYNC frame: encrypted payload, each bit repeated
/// over `SYNC_CHIPS_PER_BIT` chips, then postamble.
pub fn sync_frame_symbols(
    key: &SharedKey,
    initiator_id: u32,
    epoch: &EpochIndex,
    postamble: &SymbolSequence,
) -> Result<Vec<i8>> {
    if postamble.symbols() != self::postamble().symbols() {
        return Err(Error::invalid("SYNC frames must end with the public postamble"));
    }
    let mut symbols: Vec<i8> = sync_payload(key, initiator_id, epoch.value)?
        .into_iter()
        .flat_map(|c| std::iter::repeat_n(c, SYNC_CHIPS_PER_BIT))
        .collect();
    symbols.extend_from_slice(postamble.symbols());
    Ok(symbols)
}

pub fn build_sync_frame<T: Real>(
    key: &SharedKey,
    initiator_id: u32,
    epoch: &EpochIndex,
    postamble: &SymbolSequence,
    sample_period: T,
) -> Result<BasebandSignal<T>> {
    modulate_symbols(&sync_frame_symbols(key, initiator_id, epoch, postamble)?, sample_period)
}
