//! Deterministic random number generation.
//!
//! Everything stochastic in the pipeline (weight init, dataset synthesis,
//! augmentation, shuffling, patch fallback) draws from [`RngState`]. A state is
//! fully determined by a 64-bit seed plus a named sub-stream, so identical
//! (seed, stream, call sequence) triples reproduce bit-identical values on any
//! platform: the generator core is pure integer arithmetic (xoshiro256**) and
//! floating-point outputs are built from the mantissa bits directly.

/// FNV-1a hash, used to fold stream names into the seed.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded, stream-addressed RNG (xoshiro256** core).
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: String,
    s: [u64; 4],
}

impl RngState {
    /// Root state for a seed, on the default stream.
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, "root")
    }

    /// State addressed by (seed, stream name).
    pub fn with_stream(seed: u64, stream: &str) -> Self {
        let mut sm = seed ^ fnv1a(stream.as_bytes());
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        RngState {
            seed,
            stream: stream.to_string(),
            s,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> &str {
        &self.stream
    }

    /// Derive an independent child state; `tag` and `indices` address it.
    /// Forking does not advance `self`.
    pub fn fork(&self, tag: &str, indices: &[u64]) -> RngState {
        let mut name = format!("{}/{}", self.stream, tag);
        for i in indices {
            name.push_str(&format!("/{i}"));
        }
        RngState::with_stream(self.seed, &name)
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n) without modulo bias (rejection sampling).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Approximately standard-normal deviate via the Irwin–Hall sum of twelve
    /// uniforms. Exact moments up to order 3, tails truncated at ±6; built
    /// from additions only so results are bit-identical across platforms.
    pub fn normal(&mut self) -> f64 {
        let mut acc = 0.0;
        for _ in 0..12 {
            acc += self.uniform();
        }
        acc - 6.0
    }

    /// Normal with given mean and standard deviation.
    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        if items.len() < 2 {
            return;
        }
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
