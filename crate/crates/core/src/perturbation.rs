//! Alternative-image generators used to replace masked pixels, and the
//! blur-strength calibration sweep.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::model::Classifier;
use crate::seed::rng_from_seed;
use crate::tensor::{Dataset, Dims, Image};

/// How the constant fill value is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ChannelMean {
    /// Each channel is filled with its own mean.
    #[default]
    PerChannel,
    /// All channels are filled with the mean over every value.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Perturbation {
    Uniform,
    Constant(ChannelMean),
    Blur { sigma: f64 },
}

impl Perturbation {
    pub fn blur(sigma: f64) -> Result<Self> {
        let p = Perturbation::Blur { sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Perturbation::Blur { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                arg_err(format!("blur sigma must be positive, got {sigma}"))
            }
            _ => Ok(()),
        }
    }

    /// Deterministic perturbations ignore the seed.
    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Perturbation::Uniform)
    }

    /// Short label used in output files.
    pub fn tag(&self) -> String {
        match self {
            Perturbation::Uniform => "uniform".to_owned(),
            Perturbation::Constant(ChannelMean::PerChannel) => "constant".to_owned(),
            Perturbation::Constant(ChannelMean::Global) => "constant-global".to_owned(),
            Perturbation::Blur { sigma } => format!("blur-{sigma}"),
        }
    }

    /// The replacement image for `image`. `seed` is only used by `Uniform`.
    pub fn alternative(&self, image: &Image, seed: u64) -> Result<Image> {
        match *self {
            Perturbation::Uniform => Ok(uniform_alternative(image.dims(), seed)),
            Perturbation::Constant(mode) => Ok(constant_alternative(image, mode)),
            Perturbation::Blur { sigma } => gaussian_blur(image, sigma),
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// Every value drawn independently from `Uniform[0, 1)`.
pub fn uniform_alternative(dims: Dims, seed: u64) -> Image {
    let mut rng = rng_from_seed(seed);
    let data = (0..dims.len()).map(|_| rng.gen::<f32>()).collect();
    Image::new(dims, data).expect("uniform samples lie in [0, 1)")
}

pub fn constant_alternative(image: &Image, mode: ChannelMean) -> Image {
    let dims = image.dims();
    let c = dims.channels;
    let mut sums = vec![0.0f64; c];
    for px in image.data().chunks_exact(c) {
        for (s, v) in sums.iter_mut().zip(px) {
            *s += *v as f64;
        }
    }
    let means: Vec<f32> = match mode {
        ChannelMean::PerChannel => sums
            .iter()
            .map(|s| (s / dims.pixels() as f64) as f32)
            .collect(),
        ChannelMean::Global => {
            vec![(sums.iter().sum::<f64>() / dims.len() as f64) as f32; c]
        }
    };
    let data = (0..dims.pixels())
        .flat_map(|_| means.iter().copied())
        .collect();
    Image::from_clamped(dims, data).expect("means of [0, 1] values")
}

/// Normalized 1-D Gaussian weights for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return arg_err(format!("blur sigma must be positive, got {sigma}"));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut weights: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(weights)
}

/// Symmetric reflection (`d c b a | a b c d | d c b a`) of an arbitrary
/// offset into `0..len`.
pub fn reflect_index(i: i64, len: usize) -> usize {
    let n = len as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Separable Gaussian blur of an interleaved `H x W x C` buffer in 64-bit
/// precision with reflected borders.
pub fn gaussian_blur_f64(data: &[f64], dims: Dims, sigma: f64) -> Result<Vec<f64>> {
    if data.len() != dims.len() {
        return Err(Error::Shape(format!(
            "buffer of {} values does not match {dims}",
            data.len()
        )));
    }
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as i64;
    let (h, w, c) = (dims.height, dims.width, dims.channels);

    let mut horizontal = vec![0.0f64; data.len()];
    for y in 0..h {
        for x in 0..w {
            let out = &mut horizontal[dims.index(y, x, 0)..dims.index(y, x, 0) + c];
            for (k, wt) in kernel.iter().enumerate() {
                let sx = reflect_index(x as i64 + k as i64 - radius, w);
                let src = dims.index(y, sx, 0);
                for ch in 0..c {
                    out[ch] += wt * data[src + ch];
                }
            }
        }
    }

    let mut out = vec![0.0f64; data.len()];
    for y in 0..h {
        for (k, wt) in kernel.iter().enumerate() {
            let sy = reflect_index(y as i64 + k as i64 - radius, h);
            let src_row = &horizontal[dims.index(sy, 0, 0)..dims.index(sy, 0, 0) + w * c];
            let dst_row = &mut out[dims.index(y, 0, 0)..dims.index(y, 0, 0) + w * c];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += wt * s;
            }
        }
    }
    Ok(out)
}

pub fn gaussian_blur(image: &Image, sigma: f64) -> Result<Image> {
    let input: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let blurred = gaussian_blur_f64(&input, image.dims(), sigma)?;
    Image::from_clamped(
        image.dims(),
        blurred.into_iter().map(|v| v as f32).collect(),
    )
}

/// Outcome of a blur-strength sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurCalibration {
    pub sigma: f64,
    /// Accuracy threshold `1/K + chance_margin` the chosen sigma satisfies.
    pub threshold: f64,
    /// `(sigma, accuracy on fully blurred images)` for every grid entry.
    pub curve: Vec<(f64, f64)>,
}

/// Default sweep for 32x32 inputs.
pub const DEFAULT_SIGMA_GRID: [f64; 7] = [1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0];
pub const DEFAULT_CHANCE_MARGIN: f64 = 0.10;

/// Accuracy of `model` on every image of `dataset` blurred in full.
pub fn full_blur_accuracy<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    sigma: f64,
) -> Result<f64> {
    dataset.require_nonempty()?;
    let correct = dataset
        .samples()
        .par_iter()
        .map(|s| -> Result<usize> {
            let blurred = gaussian_blur(&s.image, sigma)?;
            Ok((model.predict(&blurred)? == s.label) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / dataset.len() as f64)
}

/// Picks the smallest sigma whose full-blur accuracy is at most
/// `1/K + chance_margin`. The whole grid is always evaluated.
pub fn calibrate_blur_sigma<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    sigma_grid: &[f64],
    chance_margin: f64,
) -> Result<BlurCalibration> {
    if sigma_grid.is_empty() {
        return arg_err("sigma grid is empty");
    }
    if sigma_grid.windows(2).any(|w| w[0] >= w[1]) {
        return arg_err("sigma grid must be strictly ascending");
    }
    let threshold = 1.0 / dataset.num_classes() as f64 + chance_margin;
    let curve = sigma_grid
        .iter()
        .map(|&sigma| Ok((sigma, full_blur_accuracy(model, dataset, sigma)?)))
        .collect::<Result<Vec<_>>>()?;
    match curve.iter().find(|(_, acc)| *acc <= threshold) {
        Some(&(sigma, _)) => Ok(BlurCalibration {
            sigma,
            threshold,
            curve,
        }),
        None => Err(Error::CalibrationFailed { threshold, curve }),
    }
}
