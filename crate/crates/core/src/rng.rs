//! Seeded PRNG used everywhere randomness is needed.
//!
//! A splitmix64 step expands the user seed into the xoshiro256++ state, and
//! standard normals come from Box-Muller. These exact algorithms are pinned
//! so that a port in any language reproduces every dataset, initialization
//! and batch order bit for bit.

/// One splitmix64 step: advances `state` by the golden-ratio increment and
/// returns the mixed output. Also used to derive per-repeat seeds.
#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for repeat `index` of a run family rooted at `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut s = base.wrapping_add(index);
    splitmix64(&mut s)
}

/// xoshiro256++ stream with a cached Box-Muller tail.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    gauss_spare: Option<f64>,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng {
            s,
            gauss_spare: None,
        }
    }

    #[inline]
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

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Multiply-shift bounding; the bias is below
    /// 2^-64 per draw, which is irrelevant for batch selection but keeps the
    /// draw at one `next_u64` call so streams stay easy to reproduce.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller; the sine partner is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform01(); // (0, 1], keeps ln finite
        let u2 = self.uniform01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// FNV-1a over raw bytes; used for dataset identities and the frozen
/// top-layer checksum.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference outputs frozen from an independent implementation of the
    // published algorithms (splitmix64 seed-0 values are the widely cited
    // test vector).
    #[test]
    fn splitmix64_known_values() {
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(&mut s), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(splitmix64(&mut s), 0x06C4_5D18_8009_454F);
        let mut s = 1_234_567u64;
        assert_eq!(splitmix64(&mut s), 0x599E_D017_FB08_FC85);
        assert_eq!(splitmix64(&mut s), 0x2C73_F084_5854_0FA5);
    }

    #[test]
    fn xoshiro_known_values() {
        let mut rng = Rng::from_seed(42);
        assert_eq!(rng.next_u64(), 0xD076_4D4F_4476_689F);
        assert_eq!(rng.next_u64(), 0x519E_4174_576F_3791);
        assert_eq!(rng.next_u64(), 0xFBE0_7CFB_0C24_ED8C);
        let mut rng = Rng::from_seed(0);
        assert_eq!(rng.next_u64(), 0x5317_5D61_490B_23DF);
    }

    #[test]
    fn uniform_and_normal_known_values() {
        let mut rng = Rng::from_seed(42);
        assert_eq!(rng.uniform01(), 0.8143051451229099);
        assert_eq!(rng.uniform01(), 0.3188210400616611);
        let mut rng = Rng::from_seed(42);
        assert_eq!(rng.normal(), -0.7689930538210061);
        assert_eq!(rng.normal(), 1.6661184587142); // cached sine partner
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = Rng::from_seed(7);
        let n = 200_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn below_is_in_range_and_roughly_uniform() {
        let mut rng = Rng::from_seed(3);
        let mut counts = [0usize; 10];
        for _ in 0..100_000 {
            counts[rng.below(10) as usize] += 1;
        }
        for &c in &counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0, "count {c}");
        }
    }

    #[test]
    fn derive_seed_changes_with_index() {
        let a = derive_seed(99, 0);
        let b = derive_seed(99, 1);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(99, 0));
    }
}
