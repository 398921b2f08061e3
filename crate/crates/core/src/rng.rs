//! Counter-based deterministic randomness.
//!
//! Every random draw in the crate comes from [`StreamRng`], a SplitMix64
//! stream generator: draw `i` of a stream with key `k` is
//! `mix64(k + (i+1) * GOLDEN)` where `mix64` is the SplitMix64 finalizer
//! (Steele et al. constants `0xbf58476d1ce4e5b9` / `0x94d049bb133111eb`,
//! shifts 30/27/31). Streams are split by hashing a label (FNV-1a 64) or an
//! index into the key. Because the output depends only on `(key, counter)`,
//! any consumer in any language can reproduce a draw without replaying the
//! sequence.
//!
//! Uniform doubles take the top 53 bits of a draw; normals use Box-Muller on
//! two draws; truncated normals rejection-sample at two standard deviations,
//! which is the convention used for all weight initialization here.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A splittable counter-based random stream.
#[derive(Debug, Clone)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        StreamRng {
            key: mix64(seed ^ GOLDEN),
            counter: 0,
        }
    }

    /// Child stream identified by a label; independent of this stream's
    /// position.
    pub fn derive(&self, label: &str) -> Self {
        StreamRng {
            key: mix64(self.key ^ fnv1a(label.as_bytes())),
            counter: 0,
        }
    }

    /// Child stream identified by an index (e.g. per-example, per-step).
    pub fn derive_index(&self, index: u64) -> Self {
        StreamRng {
            key: mix64(self.key ^ mix64(index ^ GOLDEN)),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        // Desk-scale ranges are tiny compared to 2^64; modulo bias is far
        // below anything observable here.
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller (consumes two draws).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal with standard deviation `sigma`, resampled until within two
    /// standard deviations.
    pub fn next_trunc_normal(&mut self, sigma: f64) -> f64 {
        loop {
            let z = self.next_normal();
            if z.abs() <= 2.0 {
                return z * sigma;
            }
        }
    }
}
