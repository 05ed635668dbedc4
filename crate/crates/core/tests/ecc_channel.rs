use latentmark::ecc::{RscCode, RscConfig};
use latentmark::BitMessage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flip_iid(cw: &BitMessage, p: f64, rng: &mut impl Rng) -> BitMessage {
    let mut out = cw.clone();
    for i in 0..out.len() {
        if rng.random_bool(p) {
            out.flip(i);
        }
    }
    out
}

#[test]
fn exhaustive_roundtrip_small_payloads() {
    for len in 1..=12usize {
        let code = RscCode::new(RscConfig::default_for_payload(len)).unwrap();
        for v in 0..(1u64 << len) {
            let m = BitMessage::from_u64(v, len);
            let cw = code.encode(&m).unwrap();
            let (decoded, errs) = code.decode(&cw.bits).unwrap();
            assert_eq!((decoded, errs), (m, 0));
        }
    }
}

#[test]
fn every_single_flip_corrected_at_16_bits() {
    let code = RscCode::new(RscConfig::default_for_payload(16)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..8 {
        let m = BitMessage::random(16, &mut rng);
        let cw = code.encode(&m).unwrap().bits;
        for i in 0..cw.len() {
            let mut r = cw.clone();
            r.flip(i);
            let (decoded, errs) = code.decode(&r).unwrap();
            assert_eq!(decoded, m, "flip at {i}");
            assert_eq!(errs, 1);
        }
    }
}

#[test]
fn ten_percent_channel_recovery_48_bit_payload() {
    let code = RscCode::new(RscConfig::default_for_payload(48)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x10);
    let trials = 1000;
    let ok = (0..trials)
        .filter(|_| {
            let m = BitMessage::random(48, &mut rng);
            let cw = code.encode(&m).unwrap().bits;
            code.decode(&flip_iid(&cw, 0.10, &mut rng)).unwrap().0 == m
        })
        .count();
    let rate = ok as f64 / trials as f64;
    println!("payload recovery at 10% flips: {rate}");
    assert!(rate >= 0.99, "recovery {rate}");
}
