use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::seed::rng_from_seed;
use crate::tensor::{Dataset, Dims, Image, LabeledSample, Mask};

/// Quadrant-patch dataset: label `c` puts a bright square somewhere inside
/// quadrant `c` (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right)
/// of a noisy dark background. The patch pixels are the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub side: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub patch: usize,
    /// Additive `Uniform[0, noise)` on every value.
    pub noise: f32,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            side: 32,
            channels: 3,
            num_classes: 4,
            patch: 8,
            noise: 0.8,
            samples: 1000,
            seed: 0,
        }
    }
}

/// Patch base brightness lies in `[PATCH_MIN, 1]`.
pub const PATCH_MIN: f32 = 0.9;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.num_classes) {
            return arg_err("synthetic data supports 2 to 4 classes (one per quadrant)");
        }
        if self.side < 2 || self.side % 2 != 0 {
            return arg_err("image side must be even and at least 2");
        }
        if self.patch == 0 || self.patch > self.side / 2 {
            return arg_err(format!(
                "patch side {} must fit inside a {}-pixel quadrant",
                self.patch,
                self.side / 2
            ));
        }
        if self.channels == 0 {
            return arg_err("channel count must be positive");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return arg_err("noise amplitude must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.side, self.side, self.channels)
    }
}

pub fn synth_dataset(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let dims = config.dims();
    let half = config.side / 2;
    let mut rng = rng_from_seed(config.seed);
    let samples = (0..config.samples)
        .map(|i| {
            let label = i % config.num_classes;
            let (qy, qx) = ((label / 2) * half, (label % 2) * half);
            let top = qy + rng.gen_range(0..=half - config.patch);
            let left = qx + rng.gen_range(0..=half - config.patch);
            let brightness = rng.gen_range(PATCH_MIN..=1.0);
            let mut data = vec![0.0f32; dims.len()];
            let mut keep = vec![true; dims.pixels()];
            for y in 0..config.side {
                for x in 0..config.side {
                    let inside = (top..top + config.patch).contains(&y)
                        && (left..left + config.patch).contains(&x);
                    if inside {
                        keep[y * config.side + x] = false;
                    }
                    let base = if inside { brightness } else { 0.0 };
                    for c in 0..config.channels {
                        let v = base + config.noise * rng.gen::<f32>();
                        data[dims.index(y, x, c)] = v.min(1.0);
                    }
                }
            }
            LabeledSample {
                image: Image::new(dims, data).expect("values clamped to [0, 1]"),
                label,
                ground_truth: Some(Mask::new(config.side, config.side, keep).expect("mask dims")),
            }
        })
        .collect();
    Dataset::new(samples, config.num_classes)
}
