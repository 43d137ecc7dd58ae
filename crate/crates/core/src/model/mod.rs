//! Differentiable image classifiers.
//!
//! [`ConvNet`] is a small trainable CNN; [`LinearModel`] is an analytic
//! glass-box classifier whose gradients are known in closed form. Both are
//! generic over the float type so gradient checks can run in 64-bit while
//! training and evaluation use 32-bit.

mod cnn;
mod linear;
mod persist;
mod synth;
mod train;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cnn::{Architecture, ConvNet, ConvSpec};
pub use linear::LinearModel;
pub use persist::{
    load_model, read_model, save_model, write_model, AnyModel, MODEL_FORMAT_VERSION, MODEL_MAGIC,
};
pub use synth::{synth_dataset, SynthConfig};
pub use train::{train, Optimizer, TrainConfig, TrainOutcome};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Dataset, Dims, Image, Tensor};

/// Float types the models can be evaluated in.
pub trait Scalar: num_traits::Float + Send + Sync + fmt::Debug + 'static {}

impl<T: num_traits::Float + Send + Sync + fmt::Debug + 'static> Scalar for T {}

pub(crate) fn cast<T: Scalar>(v: f64) -> T {
    T::from(v).expect("finite constant")
}

/// Which class score gradients are taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum ScoreKind {
    /// Pre-softmax class activation.
    #[default]
    Logit,
    /// Softmax probability of the class.
    Probability,
}

impl ScoreKind {
    pub fn tag(self) -> &'static str {
        match self {
            ScoreKind::Logit => "logit",
            ScoreKind::Probability => "probability",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "logit" => Some(ScoreKind::Logit),
            "probability" => Some(ScoreKind::Probability),
            _ => None,
        }
    }

    /// Upstream vector `dS_c / dlogits` for this score.
    pub(crate) fn upstream<T: Scalar>(self, logits: &[T], class: usize) -> Vec<T> {
        match self {
            ScoreKind::Logit => {
                let mut u = vec![T::zero(); logits.len()];
                u[class] = T::one();
                u
            }
            ScoreKind::Probability => {
                let p = softmax(logits);
                let pc = p[class];
                p.iter()
                    .enumerate()
                    .map(|(k, &pk)| {
                        let delta = if k == class { T::one() } else { T::zero() };
                        pc * (delta - pk)
                    })
                    .collect()
            }
        }
    }
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the first maximal entry.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
}

impl ForwardResult {
    pub fn from_logits(logits: Vec<f32>) -> Self {
        let wide: Vec<f64> = logits.iter().map(|&z| z as f64).collect();
        let probabilities = softmax(&wide).into_iter().map(|p| p as f32).collect();
        Self {
            logits,
            probabilities,
        }
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

pub trait Classifier: Send + Sync {
    fn input_dims(&self) -> Dims;

    fn num_classes(&self) -> usize;

    /// Logits for a buffer of exactly `input_dims().len()` values. Values
    /// are not range checked, so noisy inputs are allowed.
    fn logits_unchecked(&self, input: &[f32]) -> Vec<f32>;

    /// `dS_class / dinput` for a buffer of `input_dims().len()` values.
    fn score_gradient_unchecked(&self, input: &[f32], class: usize, kind: ScoreKind) -> Vec<f32>;

    fn forward(&self, image: &Image) -> Result<ForwardResult> {
        self.check_dims(image.dims())?;
        Ok(ForwardResult::from_logits(
            self.logits_unchecked(image.data()),
        ))
    }

    fn predict(&self, image: &Image) -> Result<usize> {
        self.check_dims(image.dims())?;
        Ok(argmax(&self.logits_unchecked(image.data())))
    }

    fn input_gradient(&self, input: &Tensor, class: usize, kind: ScoreKind) -> Result<Tensor> {
        self.check_dims(input.dims())?;
        self.check_class(class)?;
        Tensor::new(
            input.dims(),
            self.score_gradient_unchecked(input.data(), class, kind),
        )
    }

    fn check_dims(&self, dims: Dims) -> Result<()> {
        if dims != self.input_dims() {
            return shape_err(format!(
                "model expects {} inputs, got {dims}",
                self.input_dims()
            ));
        }
        Ok(())
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::InvalidClass {
                class,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }
}

/// Fraction of samples whose predicted class equals the label.
pub fn accuracy<M: Classifier + ?Sized>(model: &M, dataset: &Dataset) -> Result<f64> {
    dataset.require_nonempty()?;
    let hits = dataset
        .samples()
        .par_iter()
        .map(|s| Ok((model.predict(&s.image)? == s.label) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_normalizes_and_is_shift_invariant() {
        let z = [1.0f64, -2.0, 3.5, 0.25];
        let p = softmax(&z);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.0).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(argmax(&z), argmax(&p));
    }

    #[test]
    fn argmax_picks_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn forward_result_invariants() {
        let r = ForwardResult::from_logits(vec![10.0, -5.0, 3.0]);
        let total: f32 = r.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(r.probabilities.iter().all(|p| *p >= 0.0));
        assert_eq!(r.predicted(), argmax(&r.probabilities));
    }
}
