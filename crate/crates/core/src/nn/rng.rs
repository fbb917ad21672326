use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded random stream.
///
/// Two states built from the same seed produce identical draws for an
/// identical call sequence. `fork` derives an independent stream so that
/// unrelated consumers (dropout, masking, init) do not perturb each other.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Child stream determined by this state's seed and `stream` alone, so
    /// forks of different forks never coincide.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(splitmix(self.seed ^ splitmix(stream.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
