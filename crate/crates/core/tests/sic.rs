use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rangesim::channel::add_noise;
use rangesim::detector::{detect_pattern, evaluate, normalized_xcorr, PeakCriterion};
use rangesim::filters::shift_same;
use rangesim::sequences::{derive_sequence, SequenceLabel, SharedKey, TransmitChain};
use rangesim::sic::*;
use rangesim::{Complex64, Signal};

const T: f64 = 1e-8;

fn zero() -> Complex64 {
    Complex::new(0.0, 0.0)
}

fn patterns(seed: u64, n: usize) -> Vec<Signal> {
    let key = SharedKey::random(&mut ChaCha8Rng::seed_from_u64(seed));
    let chain = TransmitChain::new(T, 1, 0.62).unwrap();
    (0..n)
        .map(|i| chain.render(&derive_sequence(&key, &SequenceLabel::response(i as u32 + 1, 1, 0), 512).unwrap()).unwrap())
        .collect()
}

fn place(buf: &mut [Complex64], p: &Signal, at: usize, gain: Complex64) {
    for (b, s) in buf[at..at + p.len()].iter_mut().zip(p.samples()) {
        *b += s * gain;
    }
}

#[test]
fn attenuation_of_noiseless_copy_is_exact() {
    let p = &patterns(1, 1)[0];
    let g = Complex::from_polar(0.5, std::f64::consts::FRAC_PI_4);
    let mut buf = vec![zero(); 1500];
    place(&mut buf, p, 300, g);
    let r = p.with_samples(buf).unwrap();
    assert!((estimate_attenuation(&r, p, 300).unwrap() - g).norm() < 1e-9);
    assert!(estimate_attenuation(&r, p, 1000).is_err());
    let z = Signal::zeros(1500, T).unwrap();
    assert_eq!(estimate_attenuation(&z, p, 300).unwrap(), zero());
}

#[test]
fn attenuation_with_independent_interferer() {
    let bound = 5.0 / 512f64.sqrt();
    let mut ok = 0;
    for s in 0..200 {
        let ps = patterns(100 + s, 2);
        let mut buf = vec![zero(); 512];
        place(&mut buf, &ps[0], 0, Complex::new(1.0, 0.0));
        place(&mut buf, &ps[1], 0, Complex::new(1.0, 0.0));
        let r = ps[0].with_samples(buf).unwrap();
        if (estimate_attenuation(&r, &ps[0], 0).unwrap() - 1.0).norm() < bound {
            ok += 1;
        }
    }
    assert!(ok >= 198, "{ok}/200");
}

#[test]
fn cancellation_is_exact_and_local() {
    let p = &patterns(2, 1)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut buf = vec![zero(); 1500];
    add_noise(&mut buf, 0.01, &mut rng);
    let noise = buf.clone();
    place(&mut buf, p, 300, Complex::new(0.8, -0.3));
    let r = p.with_samples(buf.clone()).unwrap();
    let mut clean = vec![zero(); 1500];
    place(&mut clean, p, 300, Complex::new(0.8, -0.3));
    let clean = p.with_samples(clean).unwrap();
    let g = estimate_attenuation(&clean, p, 300).unwrap();
    let out = cancel(&clean, p, 300, g).unwrap();
    let before: f64 = clean.samples()[300..812].iter().map(|c| c.norm_sqr()).sum();
    let after: f64 = out.samples()[300..812].iter().map(|c| c.norm_sqr()).sum();
    assert!(after < 1e-12 * before);
    let out = cancel(&r, p, 300, Complex::new(0.8, -0.3)).unwrap();
    for i in (0..300).chain(812..1500) {
        assert_eq!(out.samples()[i], buf[i]);
    }
    for i in 300..812 {
        assert!((out.samples()[i] - noise[i]).norm() < 1e-12);
    }
    assert_eq!(cancel(&r, p, 300, zero()).unwrap(), r);
}

#[test]
fn cancelling_the_stronger_response_lifts_the_weaker() {
    let ps = patterns(3, 2);
    let mut buf = vec![zero(); 2000];
    place(&mut buf, &ps[0], 400, Complex::new(1.0, 0.0));
    place(&mut buf, &ps[1], 600, Complex::new(0.2, 0.1));
    let r = ps[0].with_samples(buf).unwrap();
    let weak_before = normalized_xcorr(&r, &ps[1]).unwrap().magnitude(600).unwrap();
    let g = estimate_attenuation(&r, &ps[0], 400).unwrap();
    let res = cancel(&r, &ps[0], 400, g).unwrap();
    let weak_after = normalized_xcorr(&res, &ps[1]).unwrap().magnitude(600).unwrap();
    assert!(weak_after > weak_before, "{weak_before} -> {weak_after}");
}

#[test]
fn single_pattern_matches_plain_detection() {
    let p = &patterns(4, 1)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut buf = vec![zero(); 1600];
    place(&mut buf, p, 500, Complex::from_polar(0.3, 1.0));
    add_noise(&mut buf, 0.01, &mut rng);
    let r = p.with_samples(shift_same(&buf, 0.4, 1.0, 63)).unwrap();
    let plain = detect_pattern(&r, p, 50.0, 256).unwrap().unwrap();
    let on = detect_all(&r, std::slice::from_ref(p), 50.0, 256, true).unwrap();
    let off = detect_all(&r, std::slice::from_ref(p), 50.0, 256, false).unwrap();
    assert_eq!(on.detections.len(), 1);
    assert_eq!(on.detections[0].detection, plain);
    assert_eq!(on.detections[0].detection, off.detections[0].detection);
}

#[test]
fn disjoint_responses_found_with_or_without_cancellation() {
    let ps = patterns(5, 3);
    let offsets = [100, 900, 1700];
    let mut buf = vec![zero(); 2600];
    for (p, &o) in ps.iter().zip(&offsets) {
        place(&mut buf, p, o, Complex::new(0.5, 0.0));
    }
    let r = ps[0].with_samples(buf).unwrap();
    for enabled in [true, false] {
        let rep = detect_all(&r, &ps, 50.0, 256, enabled).unwrap();
        assert_eq!(rep.detections.len(), 3);
        for (i, &o) in offsets.iter().enumerate() {
            assert_eq!(rep.find(i).unwrap().detection.peak_index, o);
        }
    }
}

#[test]
fn near_far_needs_cancellation() {
    let mut with = 0;
    let mut without = 0;
    for s in 0..200 {
        let ps = patterns(1000 + s, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut buf = vec![zero(); 1800];
        place(&mut buf, &ps[0], 500, Complex::new(1.0, 0.0));
        place(&mut buf, &ps[1], 700, Complex::from_polar(0.1, 2.0));
        add_noise(&mut buf, 1e-4, &mut rng);
        let r = ps[0].with_samples(buf).unwrap();
        let found = |enabled| {
            detect_all(&r, &ps, 50.0, 256, enabled)
                .unwrap()
                .find(1)
                .is_some_and(|d| d.detection.peak_index == 700)
        };
        with += usize::from(found(true));
        without += usize::from(found(false));
    }
    assert!(with > without, "with {with}, without {without}");
    assert!(with >= 190, "with {with}");
}

#[test]
fn residual_energy_never_grows_and_ids_are_unique() {
    let ps = patterns(6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut buf = vec![zero(); 2400];
    for (i, p) in ps.iter().enumerate() {
        place(&mut buf, p, 200 + 250 * i, Complex::from_polar(1.0 / (1.0 + i as f64), i as f64));
    }
    add_noise(&mut buf, 1e-3, &mut rng);
    let r = ps[0].with_samples(buf).unwrap();
    let rep = detect_all(&r, &ps, 50.0, 256, true).unwrap();
    assert_eq!(rep.residual_energy.len(), rep.detections.len() + 1);
    assert!(rep.residual_energy.windows(2).all(|w| w[1] <= w[0]));
    let mut ids: Vec<usize> = rep.detections.iter().map(|d| d.id).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), rep.detections.len());
}

#[test]
fn each_extraction_is_the_strongest_qualified_at_its_turn() {
    let ps = patterns(7, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut buf = vec![zero(); 2000];
    let gains = [0.3, 1.0, 0.05, 0.6, 0.15];
    for (i, p) in ps.iter().enumerate() {
        place(&mut buf, p, 150 + 200 * i, Complex::from_polar(gains[i], 0.5 * i as f64));
    }
    add_noise(&mut buf, 1e-4, &mut rng);
    let r = ps[0].with_samples(buf).unwrap();
    let rep = detect_all(&r, &ps, 50.0, 256, true).unwrap();
    assert_eq!(rep.detections.len(), 5);
    let crit = PeakCriterion::default();
    let mut residual = r.clone();
    let mut remaining: Vec<usize> = (0..ps.len()).collect();
    for d in &rep.detections {
        for &j in &remaining {
            let c = normalized_xcorr(&residual, &ps[j]).unwrap();
            let e = evaluate(&c, &crit, 0..usize::MAX, T).unwrap();
            if e.qualified {
                assert!(d.detection.peak_magnitude >= e.peak_magnitude - 1e-12);
            }
        }
        residual = cancel(&residual, &ps[d.id], d.channel.peak_index, d.channel.gamma).unwrap();
        remaining.retain(|&j| j != d.id);
    }
}

#[test]
fn duplicate_ids_are_rejected() {
    let ps = patterns(8, 1);
    let specs = [
        SicPattern { id: 3, pattern: ps[0].samples(), search: 0..10 },
        SicPattern { id: 3, pattern: ps[0].samples(), search: 0..10 },
    ];
    let r = vec![zero(); 2000];
    assert!(detect_all_with(&r, T, &specs, &SicConfig::default()).is_err());
    assert!(detect_all_with(&r, T, &[], &SicConfig::default()).is_err());
}

#[test]
fn empty_report_is_valid() {
    let ps = patterns(9, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut buf = vec![zero(); 1500];
    add_noise(&mut buf, 1.0, &mut rng);
    let r = ps[0].with_samples(buf).unwrap();
    let rep = detect_all(&r, &ps, 50.0, 256, true).unwrap();
    assert!(rep.detections.is_empty());
}

#[test]
fn subsample_replica_leaves_less_behind() {
    let p = &patterns(10, 1)[0];
    let mut buf = vec![zero(); 1600];
    place(&mut buf, p, 500, Complex::new(1.0, 0.0));
    let r = p.with_samples(shift_same(&buf, 0.45, 1.0, 63)).unwrap();
    let spec = [SicPattern { id: 0, pattern: p.samples(), search: 0..usize::MAX }];
    let mut cfg = SicConfig::default();
    let literal = detect_all_with(r.samples(), T, &spec, &cfg).unwrap();
    cfg.replica = Replica::Subsample;
    let shifted = detect_all_with(r.samples(), T, &spec, &cfg).unwrap();
    assert!(shifted.residual_energy[1] < literal.residual_energy[1]);
}
