//! Frozen reference values produced by `tools/oracle_vectors.py`.

use num_complex::Complex;
use rangesim::detector::{normalized_xcorr, subsample_timing_error};
use rangesim::sequences::{
    decode_sync_payload, derive_sequence, derive_waiting_period, sync_payload, SequenceLabel, SharedKey,
};
use rangesim::Signal;

fn key() -> SharedKey {
    SharedKey::new((0x10u8..0x30).collect::<Vec<_>>()).unwrap()
}

fn bits(symbols: &[i8]) -> String {
    symbols.iter().map(|&s| if s < 0 { '1' } else { '0' }).collect()
}

#[test]
fn request_sequence_matches_reference() {
    let s = derive_sequence(&key(), &SequenceLabel::request(1, 5), 96).unwrap();
    assert_eq!(
        bits(s.symbols()),
        "100111111101011001000011001111101100100010101000000110110001010110100001100100101010010100101110"
    );
}

#[test]
fn response_sequences_match_reference() {
    let s0 = derive_sequence(&key(), &SequenceLabel::response(7, 5, 0), 96).unwrap();
    let s1 = derive_sequence(&key(), &SequenceLabel::response(7, 5, 1), 96).unwrap();
    assert_eq!(
        bits(s0.symbols()),
        "010011110001111110100011101011010001000000100101001100100100000001100001011000100101000001010000"
    );
    assert_eq!(
        bits(s1.symbols()),
        "000011110100101010000101111010101110111110110000011100000011110111101100111111001000101111110010"
    );
}

#[test]
fn counter_mode_crosses_block_boundary() {
    let s = derive_sequence(&key(), &SequenceLabel::response(7, 5, 0), 300).unwrap();
    assert_eq!(&bits(s.symbols())[256..], "00111100101100000010010011000000011101010010");
}

#[test]
fn waiting_periods_match_reference() {
    let got: Vec<u64> = (0..10)
        .map(|n| derive_waiting_period(&key(), 7, 5, n, 1000, 10e-9).unwrap().slots)
        .collect();
    assert_eq!(got, [547, 252, 549, 964, 607, 64, 209, 449, 603, 241]);
}

#[test]
fn sync_payload_matches_reference() {
    let chips = sync_payload(&key(), 3, 42).unwrap();
    let hex: String = chips
        .chunks(8)
        .map(|c| c.iter().fold(0u8, |a, &s| (a << 1) | u8::from(s < 0)))
        .map(|b| format!("{b:02x}"))
        .collect();
    assert_eq!(hex, "e6b6345776b611faac79ea27c9d7e23e");
    assert_eq!(decode_sync_payload(&key(), &chips), Some((3, 42)));
}

#[test]
fn gaussian_fit_matches_high_precision_reference() {
    let cases = [
        (-0.45, 0.45),
        (-0.3, 0.30000000000000004),
        (0.0, 0.0),
        (0.1, -0.10000000000000002),
        (0.3, -0.30000000000000004),
        (0.49, -0.49),
    ];
    for (b, expected) in cases {
        let g = |x: f64| (-(x - b) * (x - b) / 2.0).exp();
        let est = subsample_timing_error(g(-1.0), g(0.0), g(1.0), 1.0);
        assert!(!est.degenerate);
        assert!((est.timing_error - expected).abs() <= 1e-9 * expected.abs().max(1e-3), "b={b}");
    }
}

#[test]
fn correlation_matches_direct_reference() {
    let c = Complex::new;
    let r = vec![c(1.0, 0.0), c(2.0, -1.0), c(-1.0, 0.5), c(0.25, 0.0), c(3.0, -2.0), c(-0.5, -0.5), c(1.0, 1.0)];
    let p = vec![c(1.0, 0.0), c(-1.0, 1.0), c(0.5, -0.5)];
    let expected = [
        (-0.5459208336840116, -0.24814583349273253),
        (0.7712111380932557, -0.07978046256137128),
        (0.17661119983645746, 0.10596671990187446),
        (-0.6894292608581768, -0.21771450342889795),
        (0.4073065399812783, 0.0),
    ];
    let rs = Signal::new(r, 1e-8, 1e8).unwrap();
    let ps = Signal::new(p, 1e-8, 1e8).unwrap();
    let series = normalized_xcorr(&rs, &ps).unwrap();
    assert_eq!(series.len(), expected.len());
    for (v, (re, im)) in series.values().iter().zip(expected) {
        assert!((v.re - re).abs() < 1e-9 && (v.im - im).abs() < 1e-9, "{v} vs {re}+{im}i");
    }
}
