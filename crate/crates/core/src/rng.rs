//! Counter-based random streams.
//!
//! Every source of randomness in a run is a [`RngStream`] identified by
//! `(seed, stream_id, path)`. The stream is a ChaCha8 keystream whose key is
//! built from those three words, so two streams never share state and any
//! value can be regenerated by seeking to its counter position.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamId {
    Init,
    DataOrder,
    Dropout,
    /// Minibatch draws for the gradient-noise analysis.
    Noise,
    /// Synthetic datasets and test fixtures.
    Fixture,
}

impl StreamId {
    fn tag(self) -> u64 {
        match self {
            StreamId::Init => 0x696e_6974,
            StreamId::DataOrder => 0x6f72_6465_72,
            StreamId::Dropout => 0x6472_6f70,
            StreamId::Noise => 0x6e6f_6973_65,
            StreamId::Fixture => 0x6669_7874,
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: StreamId,
    path: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: StreamId) -> Self {
        Self::with_path(seed, stream, 0)
    }

    fn with_path(seed: u64, stream: StreamId, path: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&stream.tag().to_le_bytes());
        key[16..24].copy_from_slice(&path.to_le_bytes());
        Self {
            seed,
            stream,
            path,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Stream positioned at `counter` 32-bit words into `(seed, stream)`.
    pub fn at(seed: u64, stream: StreamId, counter: u64) -> Self {
        let mut s = Self::new(seed, stream);
        s.inner.set_word_pos(counter as u128);
        s
    }

    /// Independent child stream, e.g. one per epoch or per noise draw.
    /// The parent's counter does not influence the child.
    pub fn substream(&self, index: u64) -> Self {
        let path = mix(self.path.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ mix(index.wrapping_add(1)));
        Self::with_path(self.seed, self.stream, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> StreamId {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std)
            .expect("finite normal parameters")
            .sample(&mut self.inner)
    }

    pub fn student_t(&mut self, df: f64) -> f64 {
        StudentT::new(df)
            .expect("positive degrees of freedom")
            .sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// `amount` distinct indices from `0..length`.
    pub fn sample_indices(&mut self, length: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, length, amount).into_vec()
    }
}

impl RngCore for RngStream {
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
