//! Training-time augmentation: red-channel replication and horizontal flips.
//!
//! Both operations take an explicit `draw` in `[0, 1)` so they stay pure;
//! [`Augmenter`] owns the seeded stream that produces the draws.

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Probability of replacing (R, G, B) with (R, R, R).
    pub red_replicate_prob: f64,
    pub hflip_prob: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            red_replicate_prob: 0.5,
            hflip_prob: 0.5,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("red_replicate_prob", self.red_replicate_prob), ("hflip_prob", self.hflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Channel-first image (3 x H x W, R first). Replicates the red channel into
/// all three channels when `draw < red_replicate_prob`.
pub fn red_channel_augment(image: ArrayView3<f32>, draw: f64, config: &AugmentConfig) -> Array3<f32> {
    let mut out = image.to_owned();
    if draw < config.red_replicate_prob {
        let red = image.index_axis(Axis(0), 0);
        for c in 1..out.dim().0 {
            out.index_axis_mut(Axis(0), c).assign(&red);
        }
    }
    out
}

/// Mirrors about the vertical axis when `draw < hflip_prob`.
pub fn horizontal_flip(image: ArrayView3<f32>, draw: f64, config: &AugmentConfig) -> Array3<f32> {
    if draw < config.hflip_prob {
        image.slice(s![.., .., ..;-1]).to_owned()
    } else {
        image.to_owned()
    }
}

/// Seeded draw stream for one training run.
#[derive(Debug, Clone)]
pub struct Augmenter {
    config: AugmentConfig,
    red_enabled: bool,
    rng: ChaCha8Rng,
}

impl Augmenter {
    pub fn new(config: AugmentConfig, red_enabled: bool) -> Self {
        Augmenter {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            red_enabled,
        }
    }

    /// Two draws are consumed per image regardless of which branches fire,
    /// so the stream position only depends on the number of images seen.
    pub fn apply(&mut self, image: ArrayView3<f32>) -> Array3<f32> {
        let red_draw: f64 = self.rng.random();
        let flip_draw: f64 = self.rng.random();
        let flipped = horizontal_flip(image, flip_draw, &self.config);
        if self.red_enabled {
            red_channel_augment(flipped.view(), red_draw, &self.config)
        } else {
            flipped
        }
    }
}
