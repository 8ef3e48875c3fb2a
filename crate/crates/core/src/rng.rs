//! Counter-based random streams.
//!
//! Every sample path owns a ChaCha8 stream selected by `(seed, path index)`.
//! The stream for a path does not depend on which worker draws it or in
//! which order paths are scheduled, so results are bit-identical for any
//! degree of parallelism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

pub type PathRng = ChaCha8Rng;

/// Random stream for one sample path.
pub fn path_rng(seed: u64, path: u64) -> PathRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Derive an independent seed for a named sub-experiment (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fill_normal(rng: &mut PathRng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// Map `f` over path indices in parallel, returning results in index order.
pub fn par_paths<T, F>(paths: std::ops::Range<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    paths.into_par_iter().map(f).collect()
}
