//! Loss parts over a logit volume and OOD-head logits, with analytic
//! gradients, and their weighted composites.
//!
//! Populations come from the label map: inlier class ids, [`OUTLIER_ID`]
//! pixels, and [`IGNORE_ID`] pixels which contribute to nothing. Each
//! expectation is the arithmetic mean over its population in one image; an
//! empty population yields a zero term and sets a flag.
//!
//! [`OUTLIER_ID`]: crate::labels::OUTLIER_ID
//! [`IGNORE_ID`]: crate::labels::IGNORE_ID

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, Population};
use crate::scoring::{lse_unchecked, sigmoid, softmax_into, softplus, LogitVolume, OodLogitMap};

/// Bound on `lse(logits)` inside the likelihood terms. Beyond it the term is
/// constant and has zero gradient.
pub const LSE_CLAMP: f64 = 30.0;

/// Weights of the composite `b1 * L_x_out + b2 * L_x_in + b3 * L_ood + L_seg`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl LossWeights {
    pub fn new(beta1: f64, beta2: f64, beta3: f64) -> Result<Self> {
        let w = Self { beta1, beta2, beta3 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta3", self.beta3)] {
            if !b.is_finite() || b < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and non-negative, got {b}"
                )));
            }
        }
        Ok(())
    }

    /// Original DenseHybrid weighting `(beta, 0, 10 beta)`.
    pub fn dh(beta: f64) -> Self {
        Self {
            beta1: beta,
            beta2: 0.0,
            beta3: 10.0 * beta,
        }
    }

    /// Modified weighting with an explicit inlier-likelihood term.
    pub fn dh2() -> Self {
        Self {
            beta1: 0.01,
            beta2: 0.005,
            beta3: 0.2,
        }
    }

    /// Simplified detector `(beta, beta, 0)`; pair with a stopped OOD gradient.
    pub fn sd(beta: f64) -> Self {
        Self {
            beta1: beta,
            beta2: beta,
            beta3: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossPreset {
    Dh,
    Dh2,
    Sd,
}

impl LossPreset {
    pub const DEFAULT_BETA: f64 = 0.01;

    pub fn weights(self) -> LossWeights {
        match self {
            LossPreset::Dh => LossWeights::dh(Self::DEFAULT_BETA),
            LossPreset::Dh2 => LossWeights::dh2(),
            LossPreset::Sd => LossWeights::sd(Self::DEFAULT_BETA),
        }
    }

    pub fn stop_ood_grad(self) -> bool {
        self == LossPreset::Sd
    }

    pub fn name(self) -> &'static str {
        match self {
            LossPreset::Dh => "dh",
            LossPreset::Dh2 => "dh2",
            LossPreset::Sd => "sd",
        }
    }
}

impl std::str::FromStr for LossPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dh" => Ok(LossPreset::Dh),
            "dh2" => Ok(LossPreset::Dh2),
            "sd" => Ok(LossPreset::Sd),
            other => Err(Error::InvalidParameter(format!("unknown loss preset '{other}'"))),
        }
    }
}

/// One loss term and its gradient with respect to its input tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPart {
    pub value: f64,
    pub grad: Vec<f64>,
    /// The population this term averages over was empty (for `loss_ood`: at
    /// least one of the two).
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_seg: f64,
    pub l_ood: f64,
    pub l_x_in: f64,
    pub l_x_out: f64,
    pub total: f64,
    pub grad_logits: Vec<f64>,
    pub grad_ood: Vec<f64>,
    pub n_inlier: usize,
    pub n_outlier: usize,
    pub n_ignored: usize,
    pub no_inliers: bool,
    pub no_outliers: bool,
}

fn check_volume(volume: &LogitVolume, labels: &LabelMap) -> Result<()> {
    if volume.height != labels.height || volume.width != labels.width {
        return Err(Error::DimensionMismatch(format!(
            "logits {}x{} vs labels {}x{}",
            volume.height, volume.width, labels.height, labels.width
        )));
    }
    labels.validate(volume.num_classes)
}

fn population_size(labels: &LabelMap, k: usize, want: fn(Population) -> bool) -> usize {
    labels
        .ids
        .iter()
        .filter(|&&id| want(LabelMap::population(id, k)))
        .count()
}

fn is_inlier(p: Population) -> bool {
    matches!(p, Population::Inlier(_))
}

fn is_outlier(p: Population) -> bool {
    p == Population::Outlier
}

/// Mean cross-entropy over inlier pixels.
pub fn loss_seg(volume: &LogitVolume, labels: &LabelMap) -> Result<LossPart> {
    check_volume(volume, labels)?;
    let k = volume.num_classes;
    let n_in = population_size(labels, k, is_inlier);
    let mut grad = vec![0.0; volume.values.len()];
    if n_in == 0 {
        return Ok(LossPart {
            value: 0.0,
            grad,
            empty: true,
        });
    }
    let inv = 1.0 / n_in as f64;
    let mut sum = 0.0;
    for (i, &id) in labels.ids.iter().enumerate() {
        if let Population::Inlier(y) = LabelMap::population(id, k) {
            let logits = volume.pixel(i);
            sum += lse_unchecked(logits) - logits[y];
            let g = &mut grad[i * k..(i + 1) * k];
            softmax_into(logits, g);
            g[y] -= 1.0;
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
    }
    Ok(LossPart {
        value: sum * inv,
        grad,
        empty: false,
    })
}

/// Binary cross-entropy of the OOD head: inliers pushed towards `p(ood) = 0`,
/// outliers towards 1. The two expectations are averaged separately and
/// summed.
pub fn loss_ood(ood: &OodLogitMap, labels: &LabelMap, num_classes: usize) -> Result<LossPart> {
    if ood.height != labels.height || ood.width != labels.width {
        return Err(Error::DimensionMismatch(format!(
            "OOD logits {}x{} vs labels {}x{}",
            ood.height, ood.width, labels.height, labels.width
        )));
    }
    labels.validate(num_classes)?;
    let n_in = population_size(labels, num_classes, is_inlier);
    let n_out = population_size(labels, num_classes, is_outlier);
    let inv_in = if n_in > 0 { 1.0 / n_in as f64 } else { 0.0 };
    let inv_out = if n_out > 0 { 1.0 / n_out as f64 } else { 0.0 };
    let mut grad = vec![0.0; ood.values.len()];
    let (mut sum_in, mut sum_out) = (0.0, 0.0);
    for (i, (&id, &z)) in labels.ids.iter().zip(&ood.values).enumerate() {
        match LabelMap::population(id, num_classes) {
            Population::Inlier(_) => {
                // -ln(1 - sigmoid(z)) = softplus(z)
                sum_in += softplus(z);
                grad[i] = sigmoid(z) * inv_in;
            }
            Population::Outlier => {
                // -ln(sigmoid(z)) = softplus(-z)
                sum_out += softplus(-z);
                grad[i] = (sigmoid(z) - 1.0) * inv_out;
            }
            Population::Ignored => {}
        }
    }
    Ok(LossPart {
        value: sum_in * inv_in + sum_out * inv_out,
        grad,
        empty: n_in == 0 || n_out == 0,
    })
}

/// Shared body of the two likelihood terms: `sign * mean(clamp(lse))` over
/// one population.
fn likelihood_term(
    volume: &LogitVolume,
    labels: &LabelMap,
    want: fn(Population) -> bool,
    sign: f64,
) -> Result<LossPart> {
    check_volume(volume, labels)?;
    let k = volume.num_classes;
    let n = population_size(labels, k, want);
    let mut grad = vec![0.0; volume.values.len()];
    if n == 0 {
        return Ok(LossPart {
            value: 0.0,
            grad,
            empty: true,
        });
    }
    let inv = 1.0 / n as f64;
    let mut sum = 0.0;
    for (i, &id) in labels.ids.iter().enumerate() {
        if !want(LabelMap::population(id, k)) {
            continue;
        }
        let logits = volume.pixel(i);
        let lse = lse_unchecked(logits);
        if lse.abs() < LSE_CLAMP {
            sum += lse;
            let g = &mut grad[i * k..(i + 1) * k];
            softmax_into(logits, g);
            for v in g.iter_mut() {
                *v *= sign * inv;
            }
        } else {
            sum += lse.clamp(-LSE_CLAMP, LSE_CLAMP);
        }
    }
    Ok(LossPart {
        value: sign * sum * inv,
        grad,
        empty: false,
    })
}

/// Negative log unnormalized likelihood of inlier pixels, `mean(-lse)`.
pub fn loss_lx_in(volume: &LogitVolume, labels: &LabelMap) -> Result<LossPart> {
    likelihood_term(volume, labels, is_inlier, -1.0)
}

/// Log unnormalized likelihood of outlier pixels, `mean(+lse)`.
pub fn loss_lx_out(volume: &LogitVolume, labels: &LabelMap) -> Result<LossPart> {
    likelihood_term(volume, labels, is_outlier, 1.0)
}

/// All four parts, the weighted total and the accumulated gradients.
///
/// With `stop_ood_grad` the OOD-head gradient is zeroed whatever `beta3` is.
pub fn composite_loss(
    volume: &LogitVolume,
    ood: &OodLogitMap,
    labels: &LabelMap,
    weights: LossWeights,
    stop_ood_grad: bool,
) -> Result<LossReport> {
    weights.validate()?;
    let seg = loss_seg(volume, labels)?;
    let x_in = loss_lx_in(volume, labels)?;
    let x_out = loss_lx_out(volume, labels)?;
    let ood_part = loss_ood(ood, labels, volume.num_classes)?;

    let LossWeights { beta1, beta2, beta3 } = weights;
    let total = beta1 * x_out.value + beta2 * x_in.value + beta3 * ood_part.value + seg.value;

    let grad_logits: Vec<f64> = seg
        .grad
        .iter()
        .zip(&x_in.grad)
        .zip(&x_out.grad)
        .map(|((s, i), o)| beta1 * o + beta2 * i + s)
        .collect();
    let grad_ood = if stop_ood_grad {
        vec![0.0; ood.values.len()]
    } else {
        ood_part.grad.iter().map(|g| beta3 * g).collect()
    };

    let (n_inlier, n_outlier, n_ignored) = labels.counts(volume.num_classes);
    Ok(LossReport {
        l_seg: seg.value,
        l_ood: ood_part.value,
        l_x_in: x_in.value,
        l_x_out: x_out.value,
        total,
        grad_logits,
        grad_ood,
        n_inlier,
        n_outlier,
        n_ignored,
        no_inliers: n_inlier == 0,
        no_outliers: n_outlier == 0,
    })
}

/// Composite loss under a named preset.
pub fn preset_loss(
    volume: &LogitVolume,
    ood: &OodLogitMap,
    labels: &LabelMap,
    preset: LossPreset,
) -> Result<LossReport> {
    composite_loss(volume, ood, labels, preset.weights(), preset.stop_ood_grad())
}
