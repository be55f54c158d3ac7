//! Minibatch gradient descent for [`ToyModel`] on mixed-content samples,
//! plus held-out evaluation under every score kind.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositor::{derive_seed, generate_mixed, PasteParams, TrainingSample};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::{composite_loss, LossPreset, LossReport, LossWeights};
use crate::metrics::{evaluate, BinaryEvalSet, ConfusionMatrix, MetricsReport};
use crate::model::{ModelDims, Params, ToyModel};
use crate::negatives::NegativePool;
use crate::scoring::{score_map, ScoreKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: LossPreset,
    /// Replaces the preset weights when set; `stop_ood_grad` still follows the preset.
    pub weights: Option<LossWeights>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub model_width: usize,
    pub model_seed: u64,
    pub data_seed: u64,
    pub paste: PasteParams,
    /// Worker threads for mixing and per-image gradients. Never affects results.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: LossPreset::Dh2,
            weights: None,
            epochs: 30,
            lr: 0.05,
            batch_size: 4,
            model_width: 16,
            model_seed: 0,
            data_seed: 0,
            paste: toy_paste_params(),
            workers: 1,
        }
    }
}

/// Paste settings for the shapes world. Histogram matching is off: the
/// toy ground is a single flat tone, and matching to it erases the pasted
/// content.
pub fn toy_paste_params() -> PasteParams {
    PasteParams {
        hist_match: false,
        ..PasteParams::default()
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        self.weights.unwrap_or_else(|| self.preset.weights())
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        self.paste.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.model_width == 0 {
            return Err(Error::InvalidParameter("batch_size and model_width must be positive".into()));
        }
        Ok(())
    }
}

/// Mean loss parts over one epoch's images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_seg: f64,
    pub l_ood: f64,
    pub l_x_in: f64,
    pub l_x_out: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub initial: ToyModel,
    pub model: ToyModel,
}

/// Loss and parameter gradient for one image.
pub fn sample_gradient(
    model: &ToyModel,
    sample: &TrainingSample,
    weights: LossWeights,
    stop_ood_grad: bool,
) -> Result<(LossReport, Params)> {
    let (volume, ood, cache) = model.forward_cached(&sample.image)?;
    let report = composite_loss(&volume, &ood, &sample.labels, weights, stop_ood_grad)?;
    let grad = model.backward(&cache, &report.grad_logits, &report.grad_ood);
    Ok((report, grad))
}

/// Mean loss and mean gradient over a batch. Per-image work may run on the
/// current rayon pool; the reduction runs in batch order.
pub fn batch_gradient(
    model: &ToyModel,
    batch: &[&TrainingSample],
    weights: LossWeights,
    stop_ood_grad: bool,
) -> Result<(EpochRecord, Params)> {
    let parts = batch
        .par_iter()
        .map(|s| sample_gradient(model, s, weights, stop_ood_grad))
        .collect::<Result<Vec<_>>>()?;
    let n = parts.len() as f64;
    let mut grad = Params::zeros(&model.dims);
    let mut rec = EpochRecord {
        epoch: 0,
        l_seg: 0.0,
        l_ood: 0.0,
        l_x_in: 0.0,
        l_x_out: 0.0,
        total: 0.0,
    };
    for (report, g) in &parts {
        grad.add_scaled(g, 1.0 / n);
        rec.l_seg += report.l_seg / n;
        rec.l_ood += report.l_ood / n;
        rec.l_x_in += report.l_x_in / n;
        rec.l_x_out += report.l_x_out / n;
        rec.total += report.total / n;
    }
    Ok((rec, grad))
}

fn check_finite(rec: &EpochRecord, params: &Params, epoch: usize, step: usize) -> Result<()> {
    let values = [rec.l_seg, rec.l_ood, rec.l_x_in, rec.l_x_out, rec.total];
    if values.iter().all(|v| v.is_finite()) && params.all_finite() {
        return Ok(());
    }
    Err(Error::Diverged {
        epoch,
        step,
        detail: format!(
            "l_seg={} l_ood={} l_x_in={} l_x_out={} total={} params_finite={}",
            rec.l_seg,
            rec.l_ood,
            rec.l_x_in,
            rec.l_x_out,
            rec.total,
            params.all_finite()
        ),
    })
}

/// Train from a fresh seeded model. With a negative pool every epoch sees a
/// freshly mixed copy of `train`; without one the samples are used as given.
pub fn train_toy(
    train: &[TrainingSample],
    num_classes: usize,
    pool: Option<&NegativePool>,
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let dims = ModelDims {
        width: config.model_width,
        num_classes,
    };
    let initial = ToyModel::init(dims, config.model_seed)?;
    let mut model = initial.clone();
    let weights = config.loss_weights();
    let stop = config.preset.stop_ood_grad();
    let workers = config.workers.max(1);
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build worker pool: {e}")))?;

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let epoch_seed = derive_seed(config.data_seed, epoch as u64);
        let mixed: Vec<TrainingSample> = match pool {
            Some(pool) => generate_mixed(train, pool, &config.paste, epoch_seed, workers)?
                .into_iter()
                .map(|m| TrainingSample {
                    image: m.image,
                    labels: m.labels,
                })
                .collect(),
            None => train.to_vec(),
        };
        let mut order: Vec<usize> = (0..mixed.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, u64::MAX)));

        let mut sum = EpochRecord {
            epoch,
            l_seg: 0.0,
            l_ood: 0.0,
            l_x_in: 0.0,
            l_x_out: 0.0,
            total: 0.0,
        };
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &mixed[i]).collect();
            let (rec, grad) = threads.install(|| batch_gradient(&model, &batch, weights, stop))?;
            model.params.add_scaled(&grad, -config.lr);
            check_finite(&rec, &model.params, epoch, step)?;
            let w = chunk.len() as f64 / mixed.len() as f64;
            sum.l_seg += rec.l_seg * w;
            sum.l_ood += rec.l_ood * w;
            sum.l_x_in += rec.l_x_in * w;
            sum.l_x_out += rec.l_x_out * w;
            sum.total += rec.total * w;
        }
        log::info!(
            "epoch {epoch}: total {:.5} seg {:.5} ood {:.5} x_in {:.5} x_out {:.5}",
            sum.total,
            sum.l_seg,
            sum.l_ood,
            sum.l_x_in,
            sum.l_x_out
        );
        history.push(sum);
    }
    Ok(TrainRun {
        config: config.clone(),
        history,
        initial,
        model,
    })
}

/// Pixel-level anomaly metrics for each requested score kind, each with the
/// inlier mIoU of the argmax prediction attached.
pub fn evaluate_model(
    model: &ToyModel,
    test: &[TrainingSample],
    kinds: &[ScoreKind],
) -> Result<Vec<(ScoreKind, MetricsReport)>> {
    let k = model.dims.num_classes;
    let mut sets: Vec<BinaryEvalSet> = kinds.iter().map(|_| BinaryEvalSet::default()).collect();
    let mut confusion = ConfusionMatrix::new(k);
    for sample in test {
        let (volume, ood) = model.forward(&sample.image)?;
        let pred = LabelMap::new(volume.height, volume.width, volume.argmax())?;
        confusion.add(&pred, &sample.labels)?;
        for (kind, set) in kinds.iter().zip(&mut sets) {
            let map = score_map(&volume, Some(&ood), *kind)?;
            set.extend_from_map(&map.values, &sample.labels, k)?;
        }
    }
    let (miou, per_class) = confusion.iou()?;
    kinds
        .iter()
        .zip(&sets)
        .map(|(kind, set)| Ok((*kind, evaluate(set)?.with_miou(miou, per_class.clone()))))
        .collect()
}
