use rand::Rng;

use super::{Classifier, Scalar, ScoreKind};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::seed::rng_from_seed;
use crate::tensor::Dims;

/// Glass-box classifier with logits `S_c = w_c . flatten(x) + b_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<T = f32> {
    dims: Dims,
    num_classes: usize,
    /// Row-major `[class][input entry]`.
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Scalar> LinearModel<T> {
    pub fn new(dims: Dims, num_classes: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if num_classes == 0 || dims.is_empty() {
            return arg_err("linear model needs positive dims and class count");
        }
        if weights.len() != num_classes * dims.len() || bias.len() != num_classes {
            return shape_err(format!(
                "linear model {dims} with {num_classes} classes needs {} weights and {num_classes} biases",
                num_classes * dims.len()
            ));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return arg_err("parameters must be finite");
        }
        Ok(Self {
            dims,
            num_classes,
            weights,
            bias,
        })
    }

    pub fn zeros(dims: Dims, num_classes: usize) -> Self {
        Self {
            dims,
            num_classes,
            weights: vec![T::zero(); num_classes * dims.len()],
            bias: vec![T::zero(); num_classes],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.num_classes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    /// Weight vector of `class`, laid out like the input.
    pub fn class_weights(&self, class: usize) -> &[T] {
        let d = self.dims.len();
        &self.weights[class * d..(class + 1) * d]
    }

    pub fn logits(&self, input: &[T]) -> Result<Vec<T>> {
        self.check_input(input)?;
        Ok(self.logits_inner(input))
    }

    pub fn score_gradient(&self, input: &[T], class: usize, kind: ScoreKind) -> Result<Vec<T>> {
        self.check_input(input)?;
        if class >= self.num_classes {
            return Err(Error::InvalidClass {
                class,
                num_classes: self.num_classes,
            });
        }
        Ok(self.gradient_inner(input, class, kind))
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.dims.len() {
            return shape_err(format!(
                "model expects {} input values, got {}",
                self.dims.len(),
                input.len()
            ));
        }
        Ok(())
    }

    fn logits_inner(&self, input: &[T]) -> Vec<T> {
        (0..self.num_classes)
            .map(|k| {
                self.class_weights(k)
                    .iter()
                    .zip(input)
                    .fold(self.bias[k], |acc, (&w, &x)| acc + w * x)
            })
            .collect()
    }

    fn gradient_inner(&self, input: &[T], class: usize, kind: ScoreKind) -> Vec<T> {
        match kind {
            ScoreKind::Logit => self.class_weights(class).to_vec(),
            ScoreKind::Probability => {
                let upstream = kind.upstream(&self.logits_inner(input), class);
                let mut grad = vec![T::zero(); self.dims.len()];
                for (k, &u) in upstream.iter().enumerate() {
                    for (g, &w) in grad.iter_mut().zip(self.class_weights(k)) {
                        *g = *g + u * w;
                    }
                }
                grad
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> LinearModel<U> {
        let conv = |v: &T| U::from(*v).expect("finite parameter");
        LinearModel {
            dims: self.dims,
            num_classes: self.num_classes,
            weights: self.weights.iter().map(conv).collect(),
            bias: self.bias.iter().map(conv).collect(),
        }
    }
}

impl LinearModel<f32> {
    /// Weights drawn from `Uniform[-scale, scale)`, zero bias.
    pub fn random(dims: Dims, num_classes: usize, scale: f32, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let weights = (0..num_classes * dims.len())
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Self {
            dims,
            num_classes,
            weights,
            bias: vec![0.0; num_classes],
        }
    }
}

impl Classifier for LinearModel<f32> {
    fn input_dims(&self) -> Dims {
        self.dims
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits_unchecked(&self, input: &[f32]) -> Vec<f32> {
        self.logits_inner(input)
    }

    fn score_gradient_unchecked(&self, input: &[f32], class: usize, kind: ScoreKind) -> Vec<f32> {
        self.gradient_inner(input, class, kind)
    }
}
