//! Seeded sub-streams.
//!
//! Every random quantity in an experiment is drawn from a ChaCha12 stream
//! keyed by `(experiment seed, stream kind, index)`. Streams of different
//! kinds or indices never share key material, so channel draws, symbol
//! draws, Gumbel noise and weight initialisation are mutually independent
//! and individually reproducible regardless of evaluation order or thread
//! count.
//!
//! Gaussian variates use the ziggurat sampler of `rand_distr`. Datasets are
//! only portable across implementations through the persisted files, not
//! through seed equality.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Kind of random stream; part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Channel = 1,
    Symbol = 2,
    Gumbel = 3,
    Init = 4,
    LloydInit = 5,
    Angle = 6,
    Shuffle = 7,
}

pub type StreamRng = ChaCha12Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for one `(seed, stream, index)` triple.
pub fn substream(seed: u64, stream: Stream, index: u64) -> StreamRng {
    let mut state = seed ^ (stream as u64).rotate_left(48) ^ index.rotate_left(17);
    let mut key = [0u8; 32];
    let words = [
        splitmix64(&mut state) ^ seed,
        splitmix64(&mut state) ^ stream as u64,
        splitmix64(&mut state) ^ index,
        splitmix64(&mut state),
    ];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// One circularly-symmetric CN(0, 1) draw.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}
