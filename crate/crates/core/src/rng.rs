//! Counter-based, splittable random streams.
//!
//! Every stochastic draw in the engine descends from a single root seed
//! through a path of labels (`root.split(TRAIN).split(step)`), so the
//! values drawn for one trajectory or one training step never depend on
//! how work was scheduled across threads. A key addresses a ChaCha8
//! keystream; splitting mixes the label into the key with SplitMix64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream labels used across the crate.
pub mod label {
    pub const DATASET: u64 = 0x0d47_a5e7;
    pub const INIT: u64 = 0x1417;
    pub const TRAIN: u64 = 0x7a41;
    pub const NOISE: u64 = 0x4e01;
    pub const PROBE: u64 = 0x9b0e;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Address of an independent random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(splitmix64(seed ^ 0x6d65_6d62_6173_696e))
    }

    /// Child stream addressed by `label`. Distinct labels give unrelated streams.
    pub fn split(self, label: u64) -> Self {
        StreamKey(splitmix64(self.0 ^ splitmix64(label.wrapping_add(0x632B_E59B_D9B4_E019))))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// `n` standard normal draws from this stream.
    pub fn normals(self, n: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_path_same_stream() {
        let a = StreamKey::root(7).split(3).split(11);
        let b = StreamKey::root(7).split(3).split(11);
        assert_eq!(a, b);
        assert_eq!(a.normals(5), b.normals(5));
    }

    #[test]
    fn labels_and_seeds_separate_streams() {
        let r = StreamKey::root(7);
        assert_ne!(r.split(1), r.split(2));
        assert_ne!(StreamKey::root(1), StreamKey::root(2));
        assert_ne!(r.split(1).split(2), r.split(2).split(1));
        let x: u64 = r.split(1).rng().gen();
        let y: u64 = r.split(2).rng().gen();
        assert_ne!(x, y);
    }

    #[test]
    fn normals_have_unit_moments() {
        let v = StreamKey::root(42).normals(20_000);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(m.abs() < 0.03, "mean {m}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
