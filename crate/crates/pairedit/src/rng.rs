//! Deterministic random numbers: xoshiro256++ seeded through splitmix64.
//!
//! The generator state is exactly `[u64; 4]`, so it serializes into
//! checkpoints without auxiliary fields (no cached Gaussian spare, no
//! counters). Independent streams are carved out of one experiment seed
//! with [`derive_seed`], which folds a list of tags into the base seed;
//! every consumer (weight init groups, the training loop, each dataset
//! task, each eval instance) owns its own stream so that reordering or
//! parallelizing one consumer cannot perturb another.

/// Splitmix64 finalizer: a cheap, well-mixed u64 -> u64 bijection.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Fold `tags` into `base`, one splitmix step per tag. Order-sensitive:
/// `derive_seed(s, &[a, b]) != derive_seed(s, &[b, a])` in general.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = mix(base.wrapping_add(GOLDEN));
    for &t in tags {
        s = mix(s.wrapping_add(GOLDEN).wrapping_add(mix(t.wrapping_add(GOLDEN))));
    }
    s
}

/// Stream tags. Keeping them in one place guarantees no two consumers
/// collide on the same derived seed.
pub mod tag {
    pub const INIT_BASE: u64 = 1;
    pub const INIT_ADAPTER: u64 = 2;
    pub const INIT_LORA: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const DATA_TASK: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const SAMPLE: u64 = 7;
    pub const INIT_PROMPT: u64 = 8;
    pub const DATA_BASE: u64 = 9;
    pub const DATA_SHUFFLE: u64 = 10;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        let mut sm = seed;
        let mut next = || {
            sm = sm.wrapping_add(GOLDEN);
            mix(sm)
        };
        let mut s = [next(), next(), next(), next()];
        if s == [0; 4] {
            s[0] = 1;
        }
        Rng { s }
    }

    pub fn from_state(s: [u64; 4]) -> Self {
        Rng { s }
    }

    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    /// xoshiro256++ step.
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller. One value per call, nothing cached,
    /// so the state stays a plain `[u64; 4]`.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1], ln is finite
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Integer in [0, n) by the multiply-shift reduction.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
