//! Recursive systematic convolutional (RSC) codes with hard-decision
//! Viterbi decoding.
//!
//! Generator polynomials are given as integers of `K` bits (usually written
//! in octal). The most significant bit is the tap on the current register
//! input, the least significant bit the tap `K - 1` steps back. For input
//! bit `u` with register contents `r_1..r_{K-1}` the encoder computes
//!
//! ```text
//! a        = u ^ sum_i fb_i r_i
//! parity_j = ff_j,0 a ^ sum_i ff_j,i r_i
//! ```
//!
//! and shifts `a` into the register. Codewords are laid out as the
//! systematic stream followed by each parity stream in turn. The trellis is
//! terminated with `K - 1` tail steps whose inputs drive the register to zero.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Error, Result};
use crate::message::BitMessage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RscConfig {
    pub constraint_length: usize,
    pub feedback: u32,
    /// One polynomial per parity stream; code rate is `1 / (1 + feedforward.len())`.
    pub feedforward: Vec<u32>,
    pub payload_length: usize,
}

impl RscConfig {
    /// Rate 1/3, K = 7, feedback 0o171, feedforward 0o133 and 0o165.
    pub fn default_for_payload(payload_length: usize) -> Self {
        Self {
            constraint_length: 7,
            feedback: 0o171,
            feedforward: vec![0o133, 0o165],
            payload_length,
        }
    }

    /// Rate 1/2, K = 7, feedback 0o171, feedforward 0o133.
    pub fn half_rate_for_payload(payload_length: usize) -> Self {
        Self {
            constraint_length: 7,
            feedback: 0o171,
            feedforward: vec![0o133],
            payload_length,
        }
    }

    /// Picks the default code whose codeword is exactly `k` bits long,
    /// preferring rate 1/3.
    pub fn for_watermark_length(k: usize) -> Result<Self> {
        for n in [3usize, 2] {
            if k.is_multiple_of(n) && k / n > 6 {
                let payload = k / n - 6;
                return Ok(if n == 3 {
                    Self::default_for_payload(payload)
                } else {
                    Self::half_rate_for_payload(payload)
                });
            }
        }
        Err(Error::Config(format!(
            "no rate-1/2 or rate-1/3 K=7 code produces a {k}-bit codeword"
        )))
    }

    pub fn streams(&self) -> usize {
        1 + self.feedforward.len()
    }

    /// Trellis steps including the termination tail.
    pub fn steps(&self) -> usize {
        self.payload_length + self.constraint_length - 1
    }

    pub fn codeword_length(&self) -> usize {
        self.streams() * self.steps()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.constraint_length;
        if !(2..=16).contains(&k) {
            return Err(Error::Config(format!("constraint length {k} outside 2..=16")));
        }
        if !(1..=2).contains(&self.feedforward.len()) {
            return Err(Error::Config("RSC rate must be 1/2 or 1/3".into()));
        }
        let top = 1u32 << (k - 1);
        if self.feedback & top == 0 || self.feedback >= top << 1 {
            return Err(Error::Config(format!(
                "feedback polynomial {:o} must have exactly {k} bits",
                self.feedback
            )));
        }
        for &g in &self.feedforward {
            if g == 0 || g >= top << 1 {
                return Err(Error::Config(format!(
                    "feedforward polynomial {g:o} does not fit in {k} bits"
                )));
            }
        }
        if self.payload_length == 0 {
            return Err(Error::Config("payload length must be positive".into()));
        }
        Ok(())
    }
}

/// Precomputed state machine. State bit `i` holds register cell `r_{i+1}`.
#[derive(Debug, Clone)]
struct Trellis {
    memory: usize,
    num_states: usize,
    /// `[state][input] -> next state`.
    next: Vec<[usize; 2]>,
    /// `[state][input] -> output bits packed (systematic in bit 0)`.
    output: Vec<[u32; 2]>,
    /// Input that keeps the feedback bit at zero (termination input).
    tail_input: Vec<u8>,
    streams: usize,
}

fn parity(x: u32) -> u8 {
    (x.count_ones() & 1) as u8
}

/// Register taps of polynomial `g` as a state mask (bit i = tap on r_{i+1}).
fn register_mask(g: u32, k: usize) -> u32 {
    (1..k).fold(0, |m, i| m | (((g >> (k - 1 - i)) & 1) << (i - 1)))
}

impl Trellis {
    fn new(cfg: &RscConfig) -> Self {
        let k = cfg.constraint_length;
        let memory = k - 1;
        let num_states = 1usize << memory;
        let mask = (num_states - 1) as u32;
        let fb_mask = register_mask(cfg.feedback, k);
        let ff: Vec<(u8, u32)> = cfg
            .feedforward
            .iter()
            .map(|&g| (((g >> (k - 1)) & 1) as u8, register_mask(g, k)))
            .collect();
        let mut next = Vec::with_capacity(num_states);
        let mut output = Vec::with_capacity(num_states);
        let mut tail_input = Vec::with_capacity(num_states);
        for s in 0..num_states as u32 {
            let fb = parity(s & fb_mask);
            tail_input.push(fb);
            let mut nx = [0usize; 2];
            let mut out = [0u32; 2];
            for u in 0..2u8 {
                let a = u ^ fb;
                let mut bits = u as u32;
                for (j, &(head, m)) in ff.iter().enumerate() {
                    let p = (head & a) ^ parity(s & m);
                    bits |= (p as u32) << (j + 1);
                }
                nx[u as usize] = (((s << 1) | a as u32) & mask) as usize;
                out[u as usize] = bits;
            }
            next.push(nx);
            output.push(out);
        }
        Self {
            memory,
            num_states,
            next,
            output,
            tail_input,
            streams: cfg.streams(),
        }
    }
}

/// Systematic block followed by parity blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codeword {
    pub bits: BitMessage,
}

/// Convolutional encoder/decoder for one configuration.
#[derive(Debug, Clone)]
pub struct RscCode {
    cfg: RscConfig,
    trellis: Trellis,
}

impl RscCode {
    pub fn new(cfg: RscConfig) -> Result<Self> {
        cfg.validate()?;
        let trellis = Trellis::new(&cfg);
        Ok(Self { cfg, trellis })
    }

    pub fn config(&self) -> &RscConfig {
        &self.cfg
    }

    pub fn encode(&self, payload: &BitMessage) -> Result<Codeword> {
        ensure_contract(payload.len() == self.cfg.payload_length, || {
            format!(
                "payload has {} bits, code expects {}",
                payload.len(),
                self.cfg.payload_length
            )
        })?;
        let steps = self.cfg.steps();
        let n = self.trellis.streams;
        let mut bits = vec![0u8; n * steps];
        let mut state = 0usize;
        for t in 0..steps {
            let u = if t < payload.len() {
                payload.bits()[t]
            } else {
                self.trellis.tail_input[state]
            };
            let out = self.trellis.output[state][u as usize];
            for j in 0..n {
                bits[j * steps + t] = ((out >> j) & 1) as u8;
            }
            state = self.trellis.next[state][u as usize];
        }
        debug_assert_eq!(state, 0, "tail must terminate the trellis");
        Ok(Codeword {
            bits: BitMessage::new(bits).expect("bits are 0/1"),
        })
    }

    /// Maximum-likelihood decoding under the Hamming metric.
    ///
    /// Returns the payload and the Hamming distance between `received` and
    /// the re-encoded decision.
    pub fn decode(&self, received: &BitMessage) -> Result<(BitMessage, usize)> {
        let steps = self.cfg.steps();
        let n = self.trellis.streams;
        ensure_contract(received.len() == n * steps, || {
            format!(
                "received word has {} bits, code produces {}",
                received.len(),
                n * steps
            )
        })?;
        let tr = &self.trellis;
        let rx = received.bits();
        let unreachable = u32::MAX / 2;
        let mut metric = vec![unreachable; tr.num_states];
        metric[0] = 0;
        // survivor[t][next_state] = (previous state, input)
        let mut survivor = vec![vec![(0usize, 0u8); tr.num_states]; steps];
        let mut next_metric = vec![unreachable; tr.num_states];
        for t in 0..steps {
            let mut symbol = 0u32;
            for j in 0..n {
                symbol |= (rx[j * steps + t] as u32) << j;
            }
            next_metric.fill(unreachable);
            let in_tail = t >= self.cfg.payload_length;
            for s in 0..tr.num_states {
                let m = metric[s];
                if m >= unreachable {
                    continue;
                }
                for u in 0..2u8 {
                    if in_tail && u != tr.tail_input[s] {
                        continue;
                    }
                    let ns = tr.next[s][u as usize];
                    let cand = m + (tr.output[s][u as usize] ^ symbol).count_ones();
                    // ties keep the lowest-numbered predecessor for determinism
                    if cand < next_metric[ns] {
                        next_metric[ns] = cand;
                        survivor[t][ns] = (s, u);
                    }
                }
            }
            std::mem::swap(&mut metric, &mut next_metric);
        }
        debug_assert!(tr.memory > 0);
        let mut state = 0usize;
        let mut inputs = vec![0u8; steps];
        for t in (0..steps).rev() {
            let (prev, u) = survivor[t][state];
            inputs[t] = u;
            state = prev;
        }
        inputs.truncate(self.cfg.payload_length);
        let payload = BitMessage::new(inputs).expect("bits are 0/1");
        let reencoded = self.encode(&payload)?;
        let distance = reencoded.bits.hamming(received)?;
        Ok((payload, distance))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent shift-register simulation written directly from the
    /// polynomial definition, one delay cell per variable.
    fn shift_register_k3(payload: &[u8]) -> (Vec<u8>, Vec<u8>) {
        // feedback 7 = 1 + D + D^2, feedforward 5 = 1 + D^2
        let (mut d1, mut d2) = (0u8, 0u8);
        let mut sys = Vec::new();
        let mut par = Vec::new();
        let mut push = |u: u8, d1: &mut u8, d2: &mut u8| {
            let a = u ^ *d1 ^ *d2;
            sys.push(u);
            par.push(a ^ *d2);
            *d2 = *d1;
            *d1 = a;
        };
        for &u in payload {
            push(u, &mut d1, &mut d2);
        }
        for _ in 0..2 {
            let u = d1 ^ d2;
            push(u, &mut d1, &mut d2);
        }
        assert_eq!((d1, d2), (0, 0));
        (sys, par)
    }

    fn k3_code(len: usize) -> RscCode {
        RscCode::new(RscConfig {
            constraint_length: 3,
            feedback: 0o7,
            feedforward: vec![0o5],
            payload_length: len,
        })
        .unwrap()
    }

    #[test]
    fn matches_shift_register_oracle() {
        let payload: BitMessage = "10110".parse().unwrap();
        let (sys, par) = shift_register_k3(payload.bits());
        // hand-stepped register values for 10110 plus two tail steps
        assert_eq!(sys, vec![1, 0, 1, 1, 0, 1, 0]);
        assert_eq!(par, vec![1, 1, 0, 0, 1, 1, 0]);
        let cw = k3_code(5).encode(&payload).unwrap();
        let expected: Vec<u8> = sys.into_iter().chain(par).collect();
        assert_eq!(cw.bits.bits(), expected.as_slice());
    }

    #[test]
    fn zero_payload_gives_zero_codeword() {
        let code = RscCode::new(RscConfig::default_for_payload(16)).unwrap();
        let cw = code.encode(&BitMessage::zeros(16)).unwrap();
        assert_eq!(cw.bits, BitMessage::zeros(3 * 22));
    }

    #[test]
    fn codeword_length_formula() {
        let cfg = RscConfig::default_for_payload(10);
        assert_eq!(cfg.codeword_length(), 48);
        assert_eq!(RscConfig::for_watermark_length(48).unwrap(), cfg);
        assert_eq!(RscConfig::for_watermark_length(32).unwrap().payload_length, 10);
        assert_eq!(RscConfig::for_watermark_length(16).unwrap().payload_length, 2);
        assert!(RscConfig::for_watermark_length(15).is_err());
    }

    #[test]
    fn length_mismatch_is_a_contract_error() {
        let code = k3_code(5);
        assert!(matches!(code.encode(&BitMessage::zeros(4)), Err(Error::Contract(_))));
        assert!(matches!(code.decode(&BitMessage::zeros(13)), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = RscConfig::default_for_payload(8);
        cfg.feedback = 0o71;
        assert!(RscCode::new(cfg.clone()).is_err());
        cfg.feedback = 0o171;
        cfg.feedforward = vec![0o133, 0o165, 0o117];
        assert!(RscCode::new(cfg).is_err());
    }

    #[test]
    fn noiseless_decode_reports_zero_corrections() {
        let code = RscCode::new(RscConfig::default_for_payload(16)).unwrap();
        let m: BitMessage = "1100101000111101".parse().unwrap();
        let cw = code.encode(&m).unwrap();
        assert_eq!(code.decode(&cw.bits).unwrap(), (m, 0));
    }

    #[test]
    fn corrects_two_spread_errors() {
        let code = RscCode::new(RscConfig::default_for_payload(16)).unwrap();
        let m: BitMessage = "0110101000111001".parse().unwrap();
        let mut rx = code.encode(&m).unwrap().bits;
        rx.flip(2);
        rx.flip(40);
        let (dec, corrected) = code.decode(&rx).unwrap();
        assert_eq!(dec, m);
        assert_eq!(corrected, 2);
    }

    #[test]
    fn decoding_degrades_monotonically_with_flip_rate() {
        let code = RscCode::new(RscConfig::default_for_payload(48)).unwrap();
        let mut last = f64::INFINITY;
        for (i, p) in [0.0, 0.05, 0.10, 0.15, 0.20].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
            let trials = 300;
            let ok = (0..trials)
                .filter(|_| {
                    let m = BitMessage::random(48, &mut rng);
                    let mut rx = code.encode(&m).unwrap().bits;
                    for j in 0..rx.len() {
                        if rng.random_bool(p) {
                            rx.flip(j);
                        }
                    }
                    code.decode(&rx).unwrap().0 == m
                })
                .count() as f64
                / trials as f64;
            assert!(ok <= last, "recovery {ok} at p={p} exceeds {last}");
            last = ok;
        }
    }

    proptest! {
        #[test]
        fn code_is_linear(a in proptest::collection::vec(0u8..=1, 20), b in proptest::collection::vec(0u8..=1, 20)) {
            let code = RscCode::new(RscConfig::default_for_payload(20)).unwrap();
            let a = BitMessage::new(a).unwrap();
            let b = BitMessage::new(b).unwrap();
            let lhs = code.encode(&a.xor(&b).unwrap()).unwrap().bits;
            let rhs = code.encode(&a).unwrap().bits.xor(&code.encode(&b).unwrap().bits).unwrap();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn decode_inverts_encode(bits in proptest::collection::vec(0u8..=1, 1..64)) {
            let code = RscCode::new(RscConfig::default_for_payload(bits.len())).unwrap();
            let m = BitMessage::new(bits).unwrap();
            let cw = code.encode(&m).unwrap();
            prop_assert_eq!(&cw.bits.bits()[..m.len()], m.bits());
            prop_assert_eq!(code.decode(&cw.bits).unwrap(), (m, 0));
        }
    }
}
