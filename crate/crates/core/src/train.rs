//! Mini-batch Adam training on the density MSE loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::{CountingModel, ModelConfig, PreparedSample};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::{pairwise_sum, Tensor};

/// Training hyper-parameters. Defaults follow the reference schedule:
/// Adam with `lr = 2e-5`, `eps = 4e-11`, batch 4, 200 epochs, and the
/// learning rate multiplied by 0.25 every 80 epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Drives parameter initialization and the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 200,
            batch_size: 4,
            lr: adam.lr,
            lr_decay: 0.25,
            lr_decay_every: 80,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and lr_decay_every must be at least 1".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config("lr_decay must be positive".into()));
        }
        self.adam().validate()?;
        self.model_config().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// The model configuration with the initialization seed taken from
    /// [`TrainConfig::seed`].
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            init_seed: self.seed,
            ..self.model.clone()
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Per-step and per-epoch losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// Mean batch loss of every optimizer step.
    pub steps: Vec<f64>,
    /// Mean sample loss of every epoch.
    pub epochs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CountingModel,
    pub curve: LossCurve,
}

fn abort(step: usize, err: Error, last_good: &ParamStore) -> Error {
    if err.is_numerical() {
        Error::TrainingAborted {
            step,
            msg: err.to_string(),
            last_good: Box::new(last_good.clone()),
        }
    } else {
        err
    }
}

/// Trains `model` in place of a fresh one. Sample order is reshuffled each
/// epoch from a generator seeded with `cfg.seed`; gradients are averaged
/// over each batch in a fixed order, so the result is a pure function of
/// `(model, data, cfg)`.
pub fn train_model(mut model: CountingModel, data: &[PreparedSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let mut adam = AdamState::new(cfg.adam(), model.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = LossCurve::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        adam.set_lr(cfg.lr_at(epoch));
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::with_capacity(data.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<Vec<Tensor>> = None;
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (loss, grads) = model
                    .loss_and_grads(&data[i])
                    .map_err(|e| abort(step, e, model.params()))?;
                if !loss.is_finite() {
                    return Err(abort(
                        step,
                        Error::NonFinite(format!("loss {loss} on sample {i}")),
                        model.params(),
                    ));
                }
                losses.push(loss);
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_assign(inv));
            let last_good = model.params().clone();
            adam.step(model.params_mut(), &grads)
                .map_err(|e| abort(step, e, &last_good))?;
            curve.steps.push(pairwise_sum(&losses) * inv);
            epoch_losses.extend(losses);
            step += 1;
        }
        let mean = pairwise_sum(&epoch_losses) / epoch_losses.len() as f64;
        curve.epochs.push(mean);
        log::info!("epoch {}/{} lr {:.3e} loss {mean:.6e}", epoch + 1, cfg.epochs, cfg.lr_at(epoch));
    }
    Ok(TrainOutcome { model, curve })
}

/// Builds a fresh model from `cfg` and trains it on prepared samples.
pub fn train(data: &[PreparedSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = CountingModel::new(cfg.model_config())?;
    train_model(model, data, cfg)
}

/// Runs the frozen backbone over a split once.
pub fn prepare_split(model: &CountingModel, manifest: &DatasetManifest, split: Split) -> Result<Vec<PreparedSample>> {
    manifest
        .load_split(split)?
        .iter()
        .map(|s| model.prepare(s))
        .collect()
}

/// Trains on the train split of a dataset directory.
pub fn train_on_manifest(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = CountingModel::new(cfg.model_config())?;
    let data = prepare_split(&model, manifest, Split::Train)?;
    train_model(model, &data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 2e-5);
        assert_eq!(c.adam_eps, 4e-11);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.epochs, 200);
        assert_eq!(c.model.refine.iterations, 4);
        assert_eq!(c.lr_at(0), 2e-5);
        assert_eq!(c.lr_at(79), 2e-5);
        assert_eq!(c.lr_at(80), 2e-5 * 0.25);
        assert_eq!(c.lr_at(160), 2e-5 * 0.0625);
    }

    #[test]
    fn seed_flows_into_model_init() {
        let c = TrainConfig {
            seed: 9,
            ..TrainConfig::default()
        };
        assert_eq!(c.model_config().init_seed, 9);
    }

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
            TrainConfig { lr_decay: 0.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn empty_data_is_input_error() {
        assert!(matches!(train(&[], &TrainConfig::default()), Err(Error::Input(_))));
    }
}
