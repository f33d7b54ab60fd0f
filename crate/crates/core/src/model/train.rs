use super::{images_to_tensor, loss_weight, Mode, UNet, DEFAULT_LOSS_A};
use crate::autodiff::{Float, Tape, Tensor};
use crate::dataset::{augment, AugmentConfig, PatchSample};
use crate::error::{Error, Result};
use crate::raster::PATCH_SIZE;
use crate::seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Scale `a` of the coverage loss weight.
    pub loss_a: f64,
    pub seed: u64,
    /// When false every sample weighs 1.
    pub weighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            loss_a: DEFAULT_LOSS_A,
            seed: 0,
            weighted: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate {} must be a non-negative number",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.loss_a > 0.0) {
            return Err(Error::Config(format!("loss_a {} must be positive", self.loss_a)));
        }
        Ok(())
    }
}

/// Mini-batch SGD on the coverage-weighted cross-entropy.
///
/// Every epoch reshuffles the set, augments each sample once and applies
/// `θ ← θ − lr·∇θ` after each batch (the last, partial batch included).
/// Returns the sample-weighted mean loss of every epoch.
pub fn train<T: Float>(
    model: &mut UNet<T>,
    train_set: &[PatchSample],
    config: &TrainConfig,
    augment_config: &AugmentConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    augment_config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let lr = T::from_f64(config.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let plane = PATCH_SIZE * PATCH_SIZE;

    for epoch in 0..config.epochs as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[epoch, 0]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;

        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<PatchSample> = batch
                .par_iter()
                .map(|&i| {
                    augment(
                        &train_set[i],
                        augment_config,
                        seed::derive(config.seed, &[epoch, 1, i as u64]),
                    )
                })
                .collect();
            let weights = samples
                .iter()
                .map(|s| {
                    if config.weighted {
                        loss_weight(&s.target, config.loss_a).map(T::from_f64)
                    } else {
                        Ok(T::one())
                    }
                })
                .collect::<Result<Vec<T>>>()?;
            let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
            let input = images_to_tensor::<T>(&images)?;
            let target = Tensor::new(
                &[samples.len(), 1, PATCH_SIZE, PATCH_SIZE],
                samples
                    .iter()
                    .flat_map(|s| s.target.values.iter().map(|&v| T::from_f64(v as f64)))
                    .collect(),
            )?;
            debug_assert_eq!(target.len(), samples.len() * plane);

            let mut tape = Tape::new();
            let params = model.register(&mut tape);
            let x = tape.constant(input);
            let mode = Mode::Train {
                seed: seed::derive(config.seed, &[epoch, 2, b as u64]),
            };
            let pred = model.forward(&mut tape, &params, x, mode)?;
            let loss = tape.bce_loss(pred, &target, &weights)?;
            let loss_value = tape.value(loss)?.data()[0].to_f64().unwrap();
            epoch_loss += loss_value * samples.len() as f64;

            let grads = tape.backward(loss)?;
            for (p, v) in model.params_mut().iter_mut().zip(&params) {
                let g = grads.get(*v).expect("every parameter is a trainable leaf");
                for (w, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *w = *w - lr * d;
                }
            }
        }
        let mean = epoch_loss / train_set.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        trace.push(mean);
    }
    Ok(trace)
}
