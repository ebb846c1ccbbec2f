//! Counter-based random streams for data generation.
//!
//! Every sampling decision is derived from a (key, counter) pair fed through
//! splitmix64, so a stream is a pure function of the seed and its tag path.
//! Streams for different utterances never share state, which makes
//! generation order-independent. All probability decisions compare integer
//! draws against integer thresholds; floats enter only where a float value
//! is the actual output.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One independent random stream.
#[derive(Debug, Clone)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    /// Stream addressed by a root seed and a tag path, e.g.
    /// `[SPLIT_TAG, utterance_index]`.
    pub fn for_stream(seed: u64, tags: &[u64]) -> Self {
        let mut key = splitmix64(seed);
        for &tag in tags {
            key = splitmix64(key ^ splitmix64(tag));
        }
        StreamRng { key, counter: 0 }
    }

    /// Child stream independent of this one and of the parent's position.
    pub fn split(&self, tag: u64) -> Self {
        StreamRng { key: splitmix64(self.key ^ splitmix64(tag)), counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)));
        self.counter += 1;
        out
    }

    /// Uniform integer in `[0, n)` by rejection (unbiased).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is meaningless");
        let zone = (u64::MAX / n) * n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Bernoulli draw. The probability is frozen into a 53-bit integer
    /// threshold so the comparison itself is integer-only.
    pub fn coin(&mut self, p: f64) -> bool {
        let threshold = probability_threshold(p);
        (self.next_u64() >> 11) < threshold
    }

    /// Uniform float in `[0, 1)` with 53 random bits.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Index drawn from a cumulative 53-bit fixed-point table (as built by
    /// [`cumulative_table`]): the first index whose cumulative bound
    /// exceeds the draw.
    pub fn from_cumulative(&mut self, table: &[u64]) -> usize {
        assert!(!table.is_empty(), "empty cumulative table");
        let draw = self.next_u64() >> 11;
        table.partition_point(|&bound| bound <= draw)
    }
}

/// Stable string tag (FNV-1a) for addressing streams by utterance id.
pub fn tag_from_str(s: &str) -> u64 {
    let mut hash: u64 = 0xCBF2_9CE4_8422_2325;
    for byte in s.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

const FIXED_ONE: u64 = 1 << 53;

/// Probability as a 53-bit fixed-point threshold.
fn probability_threshold(p: f64) -> u64 {
    assert!((0.0..=1.0).contains(&p) && p.is_finite(), "probability {p} outside [0,1]");
    (p * FIXED_ONE as f64).round() as u64
}

/// Fixed-point cumulative distribution over nonnegative weights. The last
/// entry is pinned to exactly 2^53 so every draw lands somewhere.
pub fn cumulative_table(weights: &[f64]) -> Vec<u64> {
    assert!(!weights.is_empty(), "empty weight vector");
    let total: f64 = weights.iter().sum();
    assert!(total > 0.0 && total.is_finite(), "weights must sum to a positive finite value");
    let mut table = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        assert!(w >= 0.0 && w.is_finite(), "negative or non-finite weight {w}");
        acc += w;
        table.push(((acc / total) * FIXED_ONE as f64).round() as u64);
    }
    *table.last_mut().expect("non-empty") = FIXED_ONE;
    table
}
