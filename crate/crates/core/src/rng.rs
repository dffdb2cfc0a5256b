//! The one random generator used everywhere: xoshiro256** seeded through
//! splitmix64.

use rand::{RngExt, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;

pub type Prng = Xoshiro256StarStar;

/// Recorded in every run manifest.
pub const PRNG_ID: &str = "xoshiro256**/splitmix64";

/// Independent purposes drawing from the same run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init,
    Data,
    Shuffle { epoch: u64 },
    Gradcheck,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Data => 2,
            Stream::Gradcheck => 3,
            Stream::Shuffle { epoch } => 0x100 + epoch,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `(seed, stream)`; `seed_from_u64` expands the mixed seed
/// with splitmix64.
pub fn stream(seed: u64, which: Stream) -> Prng {
    Prng::seed_from_u64(seed ^ splitmix64(which.tag()))
}

/// Uniform on `[0, 1)`.
pub fn unit(rng: &mut Prng) -> f64 {
    rng.random()
}

pub fn uniform(rng: &mut Prng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Integer in `0..n`.
pub fn below(rng: &mut Prng, n: usize) -> usize {
    rng.random_range(0..n)
}

pub fn normal(rng: &mut Prng) -> f64 {
    rng.sample(StandardNormal)
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Prng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
