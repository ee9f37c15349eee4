//! The preprocessing chain from raw 3-channel ingest to model input:
//! invert -> grayscale -> optional seeded rotation -> resize -> scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::RgbImage;

/// Model input resolution (square).
pub const INPUT_SIZE: usize = 32;
/// Augmentation rotation bound in degrees.
pub const AUGMENT_MAX_DEG: f64 = 15.0;

/// Pipeline switches. `invert` off reproduces the raw-polarity comparison
/// run; augmentation applies one seeded rotation (training samples only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preprocess {
    pub invert: bool,
    pub augment_seed: Option<u64>,
}

impl Preprocess {
    pub fn standard(augment_seed: Option<u64>) -> Self {
        Preprocess { invert: true, augment_seed }
    }

    /// Grayscale + resize + scale only.
    pub fn raw() -> Self {
        Preprocess { invert: false, augment_seed: None }
    }
}

/// Produce the 1 x INPUT_SIZE x INPUT_SIZE float image in [0, 1].
pub fn run(image: &RgbImage, opts: &Preprocess) -> Vec<f32> {
    let inverted;
    let source = if opts.invert {
        inverted = ops::invert_colors(image);
        &inverted
    } else {
        image
    };
    let mut gray = ops::to_grayscale(source);
    if let Some(seed) = opts.augment_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angle = rng.random_range(-AUGMENT_MAX_DEG..AUGMENT_MAX_DEG);
        // Post-inversion background is 0, raw background is light.
        let fill = if opts.invert { 0 } else { gray.data[0] };
        gray = ops::rotate_with_fill(&gray, angle, fill);
    }
    let resized = ops::resize_bilinear(&gray, INPUT_SIZE, INPUT_SIZE);
    ops::to_unit_floats(&resized)
}

/// FNV-1a 64-bit over the parameters that define the pipeline's behaviour;
/// manifests carry it so a run can detect mismatched preprocessing.
pub fn fingerprint(opts: &Preprocess) -> u64 {
    let desc = format!(
        "gray=bt601;invert={};rotate<={AUGMENT_MAX_DEG};size={INPUT_SIZE};scale=255",
        opts.invert
    );
    fnv1a64(desc.as_bytes())
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
