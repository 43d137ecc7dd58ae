use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Architecture, ConvNet, ConvSpec};
use crate::error::{arg_err, Error, Result};
use crate::seed::{derive_seed, rng_from_seed};
use crate::tensor::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// L2 penalty coefficient applied to every parameter.
    pub weight_decay: f64,
    pub seed: u64,
    pub blocks: Vec<ConvSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 32,
            learning_rate: 0.02,
            optimizer: Optimizer::Momentum { beta: 0.9 },
            weight_decay: 0.0,
            seed: 0,
            blocks: Architecture::default_blocks(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return arg_err("epochs and batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return arg_err("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return arg_err("weight decay must be non-negative");
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return arg_err("momentum must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ConvNet<f32>,
    /// Mean cross-entropy over each epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch training with cross-entropy loss. Per-sample gradients are
/// computed in parallel and summed in batch order, so the result is
/// bit-identical for a fixed seed regardless of thread count.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dims = dataset.require_nonempty()?;
    let arch = Architecture::new(dims, config.blocks.clone(), dataset.num_classes())?;
    let mut model = ConvNet::init(arch, derive_seed(config.seed, &[0]))?;
    let mut velocity = vec![0.0f32; model.params().len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = rng_from_seed(derive_seed(config.seed, &[1]));
    let lr = config.learning_rate as f32;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let per_sample: Vec<(f32, Vec<f32>)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &dataset.samples()[i];
                    model.loss_and_param_grad(s.image.data(), s.label)
                })
                .collect();
            let mut grad = vec![0.0f32; velocity.len()];
            for (loss, g) in &per_sample {
                loss_sum += *loss as f64;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f32;
            let wd = config.weight_decay as f32;
            if wd > 0.0 {
                for (g, p) in grad.iter_mut().zip(model.params()) {
                    *g += wd * p / scale;
                }
            }
            match config.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in model.params_mut().iter_mut().zip(&grad) {
                        *p -= lr * g * scale;
                    }
                }
                Optimizer::Momentum { beta } => {
                    let beta = beta as f32;
                    for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
                        *v = beta * *v + g * scale;
                        *p -= lr * *v;
                    }
                }
            }
            if !loss_sum.is_finite() || model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
        }
        epoch_losses.push(loss_sum / dataset.len() as f64);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synth_dataset, Classifier, SynthConfig};
    use crate::tensor::{Dataset, LabeledSample};

    fn tiny_synth(samples: usize, seed: u64) -> Dataset {
        synth_dataset(&SynthConfig {
            side: 16,
            patch: 4,
            samples,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        let data = tiny_synth(64, 1);
        let cfg = TrainConfig {
            epochs: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn single_sample_overfits() {
        let data = tiny_synth(1, 2);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 1,
            learning_rate: 0.01,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&data, &cfg).unwrap();
        let s = &data.samples()[0];
        let p = out.model.forward(&s.image).unwrap().probabilities[s.label];
        assert!(-(p as f64).ln() < 0.01, "final loss {}", -(p as f64).ln());
    }

    #[test]
    fn loss_decreases() {
        let data = tiny_synth(256, 4);
        let out = train(
            &data,
            &TrainConfig {
                epochs: 3,
                seed: 5,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_synth(32, 6);
        let err = train(
            &data,
            &TrainConfig {
                epochs: 3,
                learning_rate: 1e300,
                optimizer: Optimizer::Sgd,
                ..TrainConfig::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn rejects_empty_and_bad_config() {
        let empty = Dataset::new(Vec::<LabeledSample>::new(), 4).unwrap();
        assert!(matches!(
            train(&empty, &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
        let data = tiny_synth(4, 7);
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train(&data, &bad).is_err());
    }
}
