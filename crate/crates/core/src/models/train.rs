use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use super::{Classifier, Model};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Drives minibatch shuffling; initialization is seeded by the caller.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.02,
            weight_decay: 5e-4,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("learning rate must be positive, weight decay non-negative, momentum in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn accuracy<M: Model<f32> + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for start in (0..data.len()).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(data.len())).collect();
        let batch = data.select(&idx);
        let pred = model.predict(&batch.images)?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Minibatch SGD with momentum on mean softmax cross-entropy.
pub fn train(model: &mut Classifier<f32>, train_set: &Dataset, test_set: &Dataset, cfg: &TrainConfig) -> Result<TrainMetrics> {
    cfg.validate()?;
    let lr = cfg.learning_rate as f32;
    let wd = cfg.weight_decay as f32;
    let mu = cfg.momentum as f32;
    let mut velocity: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.select(chunk);
            let (loss, grads) = model.param_grads(&batch.images, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("training diverged in epoch {epoch}")));
            }
            total += loss as f64;
            let scale = 1.0 / chunk.len() as f32;
            for ((param, grad), vel) in model.params_mut().into_iter().zip(&grads).zip(velocity.iter_mut()) {
                for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                    *v = mu * *v + g * scale + wd * *p;
                    *p -= lr * *v;
                }
            }
        }
        epoch_losses.push(total / train_set.len().max(1) as f64);
    }

    Ok(TrainMetrics {
        epoch_losses,
        train_accuracy: accuracy(model, train_set)?,
        test_accuracy: accuracy(model, test_set)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{generate_synthetic_dataset, Arch, SynthDatasetSpec};

    #[test]
    fn same_seed_same_weights() {
        let (tr, te) = generate_synthetic_dataset(&SynthDatasetSpec::new(2, 64, 20)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Classifier::new(Arch::SmallMlp, [3, 32, 32], 10, 1).unwrap();
            let metrics = train(&mut m, &tr, &te, &cfg).unwrap();
            (m, metrics)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn zero_epochs_leaves_weights_untouched() {
        let (tr, te) = generate_synthetic_dataset(&SynthDatasetSpec::new(2, 10, 10)).unwrap();
        let fresh = Classifier::new(Arch::SmallCnnA, [3, 32, 32], 10, 4).unwrap();
        let mut m = fresh.clone();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let metrics = train(&mut m, &tr, &te, &cfg).unwrap();
        assert_eq!(m, fresh);
        assert!(metrics.epoch_losses.is_empty());
    }

    #[test]
    fn divergence_is_reported() {
        let (tr, te) = generate_synthetic_dataset(&SynthDatasetSpec::new(2, 32, 4)).unwrap();
        let mut m = Classifier::new(Arch::SmallMlp, [3, 32, 32], 10, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 1e6,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut m, &tr, &te, &cfg), Err(Error::Numerical(_))));
    }
}
