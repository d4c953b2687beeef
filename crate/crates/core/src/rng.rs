//! Counter-based, splittable random streams.
//!
//! A stream is identified by `(seed, stream)` and positioned by a word
//! counter, so its full state is three integers. Children are derived from the
//! parent's identity (not its position), which keeps each worker's draws
//! independent of how many draws any other context has made.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Serializable position of an [`RngState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::restore(RngSnapshot {
            seed,
            stream: 0,
            word_pos: 0,
        })
    }

    pub fn restore(snapshot: RngSnapshot) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(snapshot.seed);
        inner.set_stream(snapshot.stream);
        inner.set_word_pos(snapshot.word_pos);
        Self {
            seed: snapshot.seed,
            inner,
        }
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives the `index`-th child stream. The result depends only on this
    /// stream's identity and `index`, never on how far it has been advanced.
    pub fn split(&self, index: u64) -> Self {
        let parent = self.inner.get_stream();
        let child = splitmix64(splitmix64(parent) ^ index.wrapping_add(1));
        Self::restore(RngSnapshot {
            seed: self.seed,
            stream: child,
            word_pos: 0,
        })
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform draw in `[low, high)`.
    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..n`; `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Value-style draw: returns the sample together with the advanced state.
pub fn rng_uniform(rng: RngState) -> (f64, RngState) {
    let mut rng = rng;
    let u = rng.uniform();
    (u, rng)
}
