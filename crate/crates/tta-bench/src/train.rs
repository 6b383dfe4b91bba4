//! Source-model training: cross-entropy with stochastic-depth
//! regularization and running-statistic maintenance.

use crate::dataset::DatasetBundle;
use crate::error::{BenchError, Result};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tta_core::{ArchConfig, Model, SgdMomentum, SubNetworkMask, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Running-statistic update factor for batch-norm layers.
    pub stat_momentum: f64,
    /// Stochastic-depth drop ratio used as training regularization.
    pub p_drop: f64,
    /// L2 weight decay; keeps logit scales moderate so the trained model
    /// stays reasonably calibrated.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 12,
            lr: 0.05,
            batch_size: 64,
            stat_momentum: 0.1,
            p_drop: 0.2,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(BenchError::config(format!("train.lr: must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(BenchError::config("train.batch_size: must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.stat_momentum) {
            return Err(BenchError::config("train.stat_momentum: must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(BenchError::config("train.p_drop: must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(BenchError::config("train.weight_decay: must be >= 0"));
        }
        Ok(())
    }
}

/// Train a freshly initialized model on the bundle's train split. Zero
/// epochs returns the untouched random initialization.
pub fn train_source(
    bundle: &DatasetBundle,
    arch: ArchConfig,
    settings: &TrainSettings,
) -> Result<Model> {
    settings.validate()?;
    let mut model = Model::init(arch, settings.seed).map_err(BenchError::Core)?;
    if settings.epochs == 0 {
        return Ok(model);
    }
    model.record_seed(settings.seed.wrapping_add(1));

    let keys = model.all_parameters();
    let mut opt = SgdMomentum::new(&model, keys.clone(), settings.lr, 0.9)
        .map_err(BenchError::Core)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(2));
    let n = bundle.train.len();
    let mut order: Vec<usize> = (0..n).collect();

    for _epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch_size) {
            let inputs = bundle
                .train
                .inputs
                .select_rows(chunk)
                .map_err(BenchError::Core)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| bundle.train.labels[i]).collect();
            let mask_seed = rng.gen::<u64>();
            let mask = SubNetworkMask::sample(model.n_blocks(), settings.p_drop, mask_seed)
                .map_err(BenchError::Core)?;

            let mut tape = Tape::new();
            let trace = model
                .forward_train(&mut tape, &inputs, Some(&mask), settings.stat_momentum)
                .map_err(BenchError::Core)?;
            let loss = tape
                .softmax_cross_entropy(trace.logits, &labels)
                .map_err(BenchError::Core)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(BenchError::Numeric(format!(
                    "training diverged (loss {loss_value})"
                )));
            }
            let mut grads = tape.backward(loss).map_err(BenchError::Core)?;
            let ordered: Vec<Option<Tensor>> = keys
                .iter()
                .map(|key| {
                    let g = trace
                        .bindings
                        .iter()
                        .find(|(k, _)| k == key)
                        .and_then(|(_, node)| grads.take(*node));
                    if settings.weight_decay == 0.0 {
                        return g;
                    }
                    let mut g = g?;
                    for (gv, pv) in g.data_mut().iter_mut().zip(model.param(*key).data()) {
                        *gv += settings.weight_decay * pv;
                    }
                    Some(g)
                })
                .collect();
            opt.step(&mut model, &ordered).map_err(BenchError::Core)?;
        }
    }
    Ok(model)
}

/// Accuracy of the frozen model (running statistics) on a split.
pub fn evaluate(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    tta_core::forgetting_probe(model, inputs, labels).map_err(BenchError::Core)
}
