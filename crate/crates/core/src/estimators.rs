//! Gradient-based importance estimators and the random baseline.
//!
//! Every estimator produces a signed `H x W x C` tensor which is reduced to
//! a per-pixel map by summing absolute values over channels.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::model::{Classifier, ScoreKind};
use crate::seed::{derive_seed, rng_from_seed, tag_hash};
use crate::tensor::{Image, SaliencyMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    /// Vanilla gradient.
    Vanilla,
    /// Integrated gradients.
    Integrated,
    /// SmoothGrad.
    Smooth,
    /// SmoothGrad with per-sample squaring.
    SquaredSmooth,
    /// Uniform random scores.
    Random,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::Vanilla,
        Estimator::Integrated,
        Estimator::Smooth,
        Estimator::SquaredSmooth,
        Estimator::Random,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Estimator::Vanilla => "VG",
            Estimator::Integrated => "IG",
            Estimator::Smooth => "SG",
            Estimator::SquaredSmooth => "SQ-SG",
            Estimator::Random => "random",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.tag().eq_ignore_ascii_case(tag))
    }

    pub fn is_gradient_based(self) -> bool {
        self != Estimator::Random
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Reference input for integrated gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum Baseline {
    #[default]
    Black,
    Constant(f32),
}

impl Baseline {
    fn value(self) -> f32 {
        match self {
            Baseline::Black => 0.0,
            Baseline::Constant(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Riemann steps `m` for integrated gradients.
    pub ig_steps: usize,
    pub ig_baseline: Baseline,
    /// Noisy copies `n` averaged by SmoothGrad.
    pub sg_samples: usize,
    /// Noise standard deviation as a fraction of the `[0, 1]` value range.
    pub sg_noise_sigma: f64,
    /// Clamp noisy SmoothGrad inputs back into `[0, 1]`.
    pub clamp_noisy: bool,
    pub score_kind: ScoreKind,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            ig_steps: 25,
            ig_baseline: Baseline::Black,
            sg_samples: 15,
            sg_noise_sigma: 0.15,
            clamp_noisy: false,
            score_kind: ScoreKind::Logit,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ig_steps == 0 || self.sg_samples == 0 {
            return arg_err("ig_steps and sg_samples must be at least 1");
        }
        if !(self.sg_noise_sigma >= 0.0 && self.sg_noise_sigma.is_finite()) {
            return arg_err("sg_noise_sigma must be non-negative");
        }
        Ok(())
    }

    /// Copy whose seed is derived from `(seed, sample_index, estimator)`,
    /// so a sample's noise does not depend on evaluation order.
    pub fn for_sample(&self, sample_index: usize, estimator: Estimator) -> Self {
        Self {
            seed: derive_seed(self.seed, &[sample_index as u64, tag_hash(estimator.tag())]),
            ..self.clone()
        }
    }
}

/// Per-pixel sum of absolute values over channels.
pub fn reduce_channels(grad: &Tensor) -> SaliencyMap {
    let dims = grad.dims();
    let scores = grad
        .data()
        .chunks_exact(dims.channels)
        .map(|px| px.iter().map(|v| v.abs() as f64).sum::<f64>() as f32)
        .collect();
    SaliencyMap::new(dims.height, dims.width, scores).expect("sums of absolute values")
}

fn gradient_tensor<M: Classifier + ?Sized>(
    model: &M,
    input: Tensor,
    class: usize,
    kind: ScoreKind,
) -> Result<Tensor> {
    model.input_gradient(&input, class, kind)
}

pub fn vanilla_gradient<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    class: usize,
    cfg: &EstimatorConfig,
) -> Result<SaliencyMap> {
    let grad = gradient_tensor(model, image.to_tensor(), class, cfg.score_kind)?;
    Ok(reduce_channels(&grad))
}

/// Signed attributions `(x - x0) * (1/m) * sum_{k=1..m} grad S_c(x0 + k/m (x - x0))`.
pub fn integrated_gradients_attributions<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    class: usize,
    cfg: &EstimatorConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    model.check_dims(image.dims())?;
    model.check_class(class)?;
    let x = image.data();
    let base = cfg.ig_baseline.value();
    let m = cfg.ig_steps;
    let mut sum = vec![0.0f64; x.len()];
    for k in 1..=m {
        let alpha = k as f32 / m as f32;
        let point: Vec<f32> = x.iter().map(|&v| base + alpha * (v - base)).collect();
        let g = model.score_gradient_unchecked(&point, class, cfg.score_kind);
        for (s, gv) in sum.iter_mut().zip(g) {
            *s += gv as f64;
        }
    }
    let attr = x
        .iter()
        .zip(sum)
        .map(|(&v, s)| ((v - base) as f64 * s / m as f64) as f32)
        .collect();
    Tensor::new(image.dims(), attr)
}

pub fn integrated_gradients<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    class: usize,
    cfg: &EstimatorConfig,
) -> Result<SaliencyMap> {
    Ok(reduce_channels(&integrated_gradients_attributions(
        model, image, class, cfg,
    )?))
}

/// Mean over `n` noisy copies of the gradient, or of its square.
fn noisy_gradient_mean<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    class: usize,
    cfg: &EstimatorConfig,
    squared: bool,
) -> Result<Tensor> {
    cfg.validate()?;
    model.check_dims(image.dims())?;
    model.check_class(class)?;
    let x = image.data();
    let sigma = cfg.sg_noise_sigma as f32;
    let mut rng = rng_from_seed(cfg.seed);
    let mut sum = vec![0.0f64; x.len()];
    for _ in 0..cfg.sg_samples {
        let noisy: Vec<f32> = x
            .iter()
            .map(|&v| {
                let z: f32 = rng.sample(StandardNormal);
                let n = v + sigma * z;
                if cfg.clamp_noisy {
                    n.clamp(0.0, 1.0)
                } else {
                    n
                }
            })
            .collect();
        let g = model.score_gradient_unchecked(&noisy, class, cfg.score_kind);
        for (s, gv) in sum.iter_mut().zip(g) {
            let gv = gv as f64;
            *s += if squared { gv * gv } else { gv };
        }
    }
    let n = cfg.sg_samples as f64;
    Tensor::new(
        image.dims(),
        sum.into_iter().map(|s| (s / n) as f32).collect(),
    )
}

/// Signed mean gradient over noisy inputs, before channel reduction.
pub fn smoothgrad_mean_gradient<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    class: usize,
    cfg: &EstimatorConfig,
) -> Result<Tensor> {
    noisy_gradient_mean(model, image, class, cfg, false)
}

pub fn smoothgrad<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    class: usize,
    cfg: &EstimatorConfig,
) -> Result<SaliencyMap> {
    Ok(reduce_channels(&noisy_gradient_mean(
        model, image, class, cfg, false,
    )?))
}

pub fn squared_smoothgrad<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    class: usize,
    cfg: &EstimatorConfig,
) -> Result<SaliencyMap> {
    Ok(reduce_channels(&noisy_gradient_mean(
        model, image, class, cfg, true,
    )?))
}

/// I.i.d. `Uniform[0, 1)` scores.
pub fn random_saliency(height: usize, width: usize, seed: u64) -> Result<SaliencyMap> {
    let mut rng = rng_from_seed(seed);
    SaliencyMap::new(
        height,
        width,
        (0..height * width).map(|_| rng.gen::<f32>()).collect(),
    )
}

/// Runs `estimator` for the sample at `sample_index`, deriving its seed
/// from `cfg.seed`.
pub fn compute_saliency<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    class: usize,
    estimator: Estimator,
    cfg: &EstimatorConfig,
    sample_index: usize,
) -> Result<SaliencyMap> {
    let cfg = cfg.for_sample(sample_index, estimator);
    match estimator {
        Estimator::Vanilla => vanilla_gradient(model, image, class, &cfg),
        Estimator::Integrated => integrated_gradients(model, image, class, &cfg),
        Estimator::Smooth => smoothgrad(model, image, class, &cfg),
        Estimator::SquaredSmooth => squared_smoothgrad(model, image, class, &cfg),
        Estimator::Random => {
            let d = image.dims();
            random_saliency(d.height, d.width, cfg.seed)
        }
    }
}

/// Min-max normalization to `[0, 1]`; constant maps become all zeros.
pub fn normalize_scores(map: &SaliencyMap) -> SaliencyMap {
    let scores = map.scores();
    let (lo, hi) = scores
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    let range = hi as f64 - lo as f64;
    let normalized = if range > 0.0 {
        scores
            .iter()
            .map(|&s| ((s as f64 - lo as f64) / range) as f32)
            .collect()
    } else {
        vec![0.0; scores.len()]
    };
    SaliencyMap::new(map.height(), map.width(), normalized).expect("values in [0, 1]")
}

/// Counts of normalized scores in `bins` equal-width bins over `[0, 1]`;
/// the last bin is closed on the right.
pub fn score_histogram<'a>(
    maps: impl IntoIterator<Item = &'a SaliencyMap>,
    bins: usize,
) -> Vec<u64> {
    let mut counts = vec![0u64; bins.max(1)];
    let last = counts.len() - 1;
    for map in maps {
        for &s in normalize_scores(map).scores() {
            let b = ((s as f64 * counts.len() as f64) as usize).min(last);
            counts[b] += 1;
        }
    }
    counts
}
