//! Seeded salt-and-pepper corruption and threshold-based impulse detection.
//!
//! Corruption draws from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`)
//! in row-major pixel order, two uniform `f64` draws per pixel: the first
//! decides corruption (`u < density`), the second salt vs pepper
//! (`u < salt_fraction`). The generator name is recorded in fixture metadata
//! as [`GENERATOR_NAME`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::{to_u8, GrayImage};

pub const GENERATOR_NAME: &str = "chacha8-seed_from_u64";

/// SplitMix64 finalizer over `master ^ stream`; used to split one master
/// seed into independent streams.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = (master ^ stream.rotate_left(32)).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a named item: FNV-1a 64 of the name, mixed with `master`.
pub fn name_seed(master: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    derive_seed(master, h)
}

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("density {0} outside [0, 1]")]
    Density(f64),
    #[error("salt fraction {0} outside [0, 1]")]
    SaltFraction(f64),
    #[error("detection threshold {0} outside [1, 127]")]
    Delta(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    density: f64,
    salt_fraction: f64,
    seed: u64,
}

impl NoiseSpec {
    pub fn new(density: f64, salt_fraction: f64, seed: u64) -> Result<Self, NoiseError> {
        if !(0.0..=1.0).contains(&density) {
            return Err(NoiseError::Density(density));
        }
        if !(0.0..=1.0).contains(&salt_fraction) {
            return Err(NoiseError::SaltFraction(salt_fraction));
        }
        Ok(Self {
            density,
            salt_fraction,
            seed,
        })
    }

    /// Equal salt/pepper split.
    pub fn balanced(density: f64, seed: u64) -> Result<Self, NoiseError> {
        Self::new(density, 0.5, seed)
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn salt_fraction(&self) -> f64 {
        self.salt_fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Per-pixel flags, row-major; `true` marks an impulse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseMask {
    width: usize,
    height: usize,
    flags: Vec<bool>,
}

impl NoiseMask {
    /// # Panics
    /// If `flags.len() != width * height`.
    pub fn new(width: usize, height: usize, flags: Vec<bool>) -> Self {
        assert_eq!(flags.len(), width * height, "mask size mismatch");
        Self {
            width,
            height,
            flags,
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    #[inline]
    pub fn is_flagged(&self, row: usize, col: usize) -> bool {
        self.flags[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn matches(&self, img: &GrayImage) -> bool {
        self.width == img.width() && self.height == img.height()
    }
}

/// Corrupts `img` and also returns which pixels were hit.
pub fn corrupt(img: &GrayImage, spec: &NoiseSpec) -> (GrayImage, NoiseMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = img.data().to_vec();
    let mut hit = vec![false; data.len()];
    for (v, h) in data.iter_mut().zip(hit.iter_mut()) {
        let corrupt: f64 = rng.gen();
        let salt: f64 = rng.gen();
        if corrupt < spec.density {
            *h = true;
            *v = if salt < spec.salt_fraction { 1.0 } else { 0.0 };
        }
    }
    let out = GrayImage::new(img.width(), img.height(), data).expect("values stay in range");
    (out, NoiseMask::new(img.width(), img.height(), hit))
}

pub fn inject(img: &GrayImage, spec: &NoiseSpec) -> GrayImage {
    corrupt(img, spec).0
}

/// Flags pixels whose 8-bit value lies in `[0, delta)` or `(255 - delta, 255]`.
pub fn detect(img: &GrayImage, delta: u32) -> Result<NoiseMask, NoiseError> {
    if !(1..=127).contains(&delta) {
        return Err(NoiseError::Delta(delta));
    }
    let flags = img
        .data()
        .iter()
        .map(|&v| {
            let b = u32::from(to_u8(v));
            b < delta || b > 255 - delta
        })
        .collect();
    Ok(NoiseMask::new(img.width(), img.height(), flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bytes_image(bytes: &[u8]) -> GrayImage {
        GrayImage::from_bytes(bytes.len(), 1, bytes).unwrap()
    }

    fn gradient(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |r, c| (1 + (r * 7 + c * 3) % 253) as f64 / 255.0).unwrap()
    }

    #[test]
    fn detect_delta_one_flags_extremes_only() {
        let img = bytes_image(&[0, 255, 128, 1, 254]);
        let m = detect(&img, 1).unwrap();
        assert_eq!(m.flags(), &[true, true, false, false, false]);
    }

    #[test]
    fn detect_delta_two() {
        let img = bytes_image(&[0, 255, 128, 1, 254]);
        let m = detect(&img, 2).unwrap();
        assert_eq!(m.flags(), &[true, true, false, true, true]);
    }

    #[test]
    fn detect_mid_gray_is_empty() {
        let img = GrayImage::filled(8, 8, 0.5).unwrap();
        assert_eq!(detect(&img, 1).unwrap().count(), 0);
    }

    #[test]
    fn detect_rejects_bad_delta() {
        let img = GrayImage::filled(2, 2, 0.5).unwrap();
        assert_eq!(detect(&img, 0), Err(NoiseError::Delta(0)));
        assert_eq!(detect(&img, 128), Err(NoiseError::Delta(128)));
    }

    #[test]
    fn spec_validation() {
        assert!(NoiseSpec::new(1.2, 0.5, 0).is_err());
        assert!(NoiseSpec::new(0.5, -0.1, 0).is_err());
        assert!(NoiseSpec::new(0.0, 1.0, 0).is_ok());
    }

    #[test]
    fn zero_density_is_identity() {
        let img = gradient(32, 16);
        let spec = NoiseSpec::balanced(0.0, 42).unwrap();
        assert_eq!(inject(&img, &spec), img);
    }

    #[test]
    fn full_salt_saturates() {
        let img = gradient(16, 16);
        let spec = NoiseSpec::new(1.0, 1.0, 3).unwrap();
        assert!(inject(&img, &spec).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn seed_controls_pattern() {
        let img = gradient(64, 64);
        let a = inject(&img, &NoiseSpec::balanced(0.3, 1).unwrap());
        let b = inject(&img, &NoiseSpec::balanced(0.3, 1).unwrap());
        let c = inject(&img, &NoiseSpec::balanced(0.3, 2).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn half_density_count_in_binomial_band() {
        let img = GrayImage::filled(512, 512, 0.5).unwrap();
        let (_, hit) = corrupt(&img, &NoiseSpec::balanced(0.5, 11).unwrap());
        let n = hit.count();
        assert!((129_641..=132_503).contains(&n), "count {n}");
    }

    proptest! {
        #[test]
        fn detection_recalls_every_corrupted_pixel(
            w in 1usize..40, h in 1usize..40, d in 0.0f64..=1.0, seed in any::<u64>()
        ) {
            let img = gradient(w, h);
            let (noisy, hit) = corrupt(&img, &NoiseSpec::balanced(d, seed).unwrap());
            let found = detect(&noisy, 1).unwrap();
            for (h, f) in hit.flags().iter().zip(found.flags()) {
                prop_assert!(!h || *f);
            }
        }
    }
}
