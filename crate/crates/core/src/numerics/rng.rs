use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Counter-based random stream: identical `(seed, stream_id)` pairs yield
/// identical draw sequences on every platform.
///
/// Child streams are derived by hashing the parent stream id with a purpose
/// tag, so independent components (datagen, init, shuffling, noise cells)
/// never share a sequence and stay reproducible when evaluated in parallel.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

// FNV-1a; fixed here so stream derivation never depends on std hasher
// internals changing between releases.
fn fnv1a(init: u64, bytes: &[u8]) -> u64 {
    let mut h = init ^ 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, 0)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream for a named purpose. Same parent + same tag = same child.
    pub fn derive(&self, tag: &str) -> RngStream {
        let id = fnv1a(self.stream_id, tag.as_bytes());
        RngStream::new(self.seed, id)
    }

    /// Indexed child stream, for per-item work inside a named family.
    pub fn derive_indexed(&self, tag: &str, index: u64) -> RngStream {
        let id = fnv1a(self.stream_id, tag.as_bytes());
        let id = fnv1a(id, &index.to_le_bytes());
        RngStream::new(self.seed, id)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p >= 1.0 {
            return true;
        }
        if p <= 0.0 {
            return false;
        }
        self.rng.random::<f64>() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// Uniform direction on the unit sphere in `dim` dimensions.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}
