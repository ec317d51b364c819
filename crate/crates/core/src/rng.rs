//! Seeded, splittable random streams.
//!
//! The generator is ChaCha8 (a counter-based stream cipher RNG with a 256-bit
//! key), so a stream's position is addressable and identical seeds produce
//! identical output on every platform. Independent streams are derived by
//! *splitting*: `split(label)` mixes the caller-chosen label into each 64-bit
//! word of the parent key with the SplitMix64 finalizer and seeds a fresh
//! generator from the result. Splitting reads only the parent's key — never
//! its position — so it does not consume parent state, and the same
//! `(parent, label)` pair always yields the same child. Each logical sampling
//! chain (a PCD particle, a generated image, the data pass) owns exactly one
//! stream; streams are never shared between chains.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// SplitMix64 state advance + finalizer (Steele, Lea, Flood 2014).
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key_from_u64(seed: u64) -> [u8; 32] {
    let mut s = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    key
}

fn derive_key(parent: &[u8; 32], label: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, (src, dst)) in parent.chunks(8).zip(out.chunks_mut(8)).enumerate() {
        let word = u64::from_le_bytes(src.try_into().unwrap());
        let mut s = word ^ label ^ splitmix64(&mut (i as u64));
        dst.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    out
}

/// Snapshot of a stream, sufficient to resume it bit-exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub key: [u8; 32],
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> RngStream {
        RngStream {
            rng: ChaCha8Rng::from_seed(key_from_u64(seed)),
        }
    }

    /// Derives an independent child stream; see the module docs.
    pub fn split(&self, label: u64) -> RngStream {
        RngStream {
            rng: ChaCha8Rng::from_seed(derive_key(&self.rng.get_seed(), label)),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// `true` with probability `p` (compared in f64).
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform01() < p
    }

    /// Standard normal via the cosine branch of Box–Muller; the sine value
    /// is discarded so each draw consumes exactly two uniforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64); // (0, 1]
        let u2 = self.uniform01();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform index in `[0, bound)`. Uses a plain modulus; the bias is
    /// below 2^-50 for any bound this crate uses.
    pub fn index(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle(&mut self, xs: &mut [u32]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            key: self.rng.get_seed(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(state: &RngState) -> RngStream {
        let mut rng = ChaCha8Rng::from_seed(state.key);
        rng.set_word_pos(state.word_pos);
        RngStream { rng }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngStream::from_seed(42);
        let mut b = RngStream::from_seed(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn golden_values_pin_the_stream_across_platforms() {
        // Frozen once from this implementation; a change here means seeded
        // runs are no longer reproducible against existing artifacts.
        let mut r = RngStream::from_seed(7);
        let got: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
        assert_eq!(
            got,
            vec![
                7387829322293334546,
                14283834251474640193,
                9360588686666418927,
                1237130957598863625,
            ]
        );
    }

    #[test]
    fn split_is_independent_of_consumption_and_label_sensitive() {
        let mut parent = RngStream::from_seed(3);
        let child_before = parent.split(5);
        parent.next_u64();
        let child_after = parent.split(5);
        assert_eq!(child_before.state(), child_after.state());
        assert_ne!(parent.split(5).state(), parent.split(6).state());
        assert_ne!(parent.split(5).state(), parent.state());
    }

    #[test]
    fn state_roundtrip_resumes_exactly() {
        let mut r = RngStream::from_seed(9);
        for _ in 0..17 {
            r.next_u64();
        }
        let snap = r.state();
        let ahead: Vec<u64> = (0..8).map(|_| r.next_u64()).collect();
        let mut resumed = RngStream::restore(&snap);
        let replay: Vec<u64> = (0..8).map(|_| resumed.next_u64()).collect();
        assert_eq!(ahead, replay);
    }

    #[test]
    fn uniform_and_normal_have_sane_moments() {
        let mut r = RngStream::from_seed(1234);
        let n = 100_000;
        let mean_u: f64 = (0..n).map(|_| r.uniform01()).sum::<f64>() / n as f64;
        assert!((mean_u - 0.5).abs() < 0.005, "uniform mean {mean_u}");
        let normals: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean_n = normals.iter().sum::<f64>() / n as f64;
        let var_n = normals.iter().map(|x| (x - mean_n) * (x - mean_n)).sum::<f64>() / n as f64;
        assert!(mean_n.abs() < 0.02, "normal mean {mean_n}");
        assert!((var_n - 1.0).abs() < 0.03, "normal var {var_n}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = RngStream::from_seed(5);
        let mut xs: Vec<u32> = (0..100).collect();
        r.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<u32>>());
        assert_ne!(xs, (0..100).collect::<Vec<u32>>());
    }
}
