//! Per-pixel anomaly scores computed from segmentation logits and the
//! optional OOD-head logit. Every score follows the same polarity: higher
//! means more anomalous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel, per-class logits stored pixel-major (`[row][col][class]`).
#[derive(Clone, Debug, PartialEq)]
pub struct LogitVolume {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub values: Vec<f64>,
}

/// Pre-sigmoid OOD-head logits, one per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct OodLogitMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// One minus the maximum softmax probability.
    Msp,
    /// Negated maximum logit.
    #[serde(rename = "ml")]
    MaxLogit,
    /// Negative log of the unnormalized likelihood, `-lse(logits)`.
    #[serde(rename = "nll")]
    UnnormNll,
    /// `ln p(ood) - ln p_hat(x)`; needs the OOD head.
    Hybrid,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 4] = [
        ScoreKind::Msp,
        ScoreKind::MaxLogit,
        ScoreKind::UnnormNll,
        ScoreKind::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Msp => "msp",
            ScoreKind::MaxLogit => "ml",
            ScoreKind::UnnormNll => "nll",
            ScoreKind::Hybrid => "hybrid",
        }
    }

    pub fn needs_ood(self) -> bool {
        self == ScoreKind::Hybrid
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msp" => Ok(ScoreKind::Msp),
            "ml" | "maxlogit" | "max-logit" => Ok(ScoreKind::MaxLogit),
            "nll" | "unnorm-nll" | "likelihood" => Ok(ScoreKind::UnnormNll),
            "hybrid" | "dh" => Ok(ScoreKind::Hybrid),
            other => Err(Error::InvalidParameter(format!("unknown score kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl LogitVolume {
    pub fn new(height: usize, width: usize, num_classes: usize, values: Vec<f64>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if values.len() != height * width * num_classes {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width}x{num_classes} volume needs {} values, got {}",
                height * width * num_classes,
                values.len()
            )));
        }
        check_finite(&values, "logit volume")?;
        Ok(Self {
            height,
            width,
            num_classes,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            num_classes,
            values: vec![0.0; height * width * num_classes],
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Logits of pixel `i` in row-major order.
    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.num_classes)
    }

    /// Per-pixel argmax class.
    pub fn argmax(&self) -> Vec<u8> {
        self.pixels()
            .map(|p| {
                let mut best = 0;
                for (k, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

impl OodLogitMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} OOD map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        check_finite(&values, "OOD logits")?;
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} score map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        check_finite(&values, "score map")?;
        Ok(Self {
            height,
            width,
            values,
        })
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} at index {i}"))),
        None => Ok(()),
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 logits, got {}",
            logits.len()
        )));
    }
    check_finite(logits, "logits")
}

#[inline]
pub(crate) fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `ln(sum(exp(v)))` with the max shifted out.
#[inline]
pub(crate) fn lse_unchecked(v: &[f64]) -> f64 {
    let m = max_of(v);
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// `ln(1 + exp(x))`, stable for any finite `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `v` written into `out`.
#[inline]
pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    let m = max_of(v);
    let mut s = 0.0;
    for (o, x) in out.iter_mut().zip(v) {
        *o = (x - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub fn log_sum_exp(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Empty("logits".into()));
    }
    check_finite(logits, "logits")?;
    Ok(lse_unchecked(logits))
}

pub fn msp_score(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    Ok(msp_unchecked(logits))
}

#[inline]
fn msp_unchecked(logits: &[f64]) -> f64 {
    // max softmax = 1 / (1 + rest) where rest sums exp(v - max) over all but
    // one maximal entry, so 1 - max softmax = rest / (1 + rest)
    let m = max_of(logits);
    let argmax = logits.iter().position(|&x| x == m).unwrap_or(0);
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, x)| (x - m).exp())
        .sum();
    rest / (1.0 + rest)
}

pub fn max_logit_score(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    Ok(-max_of(logits))
}

pub fn unnorm_nll_score(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    Ok(-lse_unchecked(logits))
}

/// `ln sigmoid(z) - lse(logits)`, with `ln sigmoid(z)` taken as `-softplus(-z)`.
pub fn hybrid_score(ood_logit: f64, logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    if !ood_logit.is_finite() {
        return Err(Error::NonFinite("OOD logit".into()));
    }
    Ok(hybrid_unchecked(ood_logit, logits))
}

#[inline]
fn hybrid_unchecked(z: f64, logits: &[f64]) -> f64 {
    -softplus(-z) - lse_unchecked(logits)
}

/// Apply the chosen scalar score at every pixel.
pub fn score_map(volume: &LogitVolume, ood: Option<&OodLogitMap>, kind: ScoreKind) -> Result<ScoreMap> {
    if let Some(o) = ood {
        if o.height != volume.height || o.width != volume.width {
            return Err(Error::DimensionMismatch(format!(
                "OOD map {}x{} vs volume {}x{}",
                o.height, o.width, volume.height, volume.width
            )));
        }
    }
    check_finite(&volume.values, "logit volume")?;
    let values: Vec<f64> = match kind {
        ScoreKind::Msp => volume.pixels().map(msp_unchecked).collect(),
        ScoreKind::MaxLogit => volume.pixels().map(|p| -max_of(p)).collect(),
        ScoreKind::UnnormNll => volume.pixels().map(|p| -lse_unchecked(p)).collect(),
        ScoreKind::Hybrid => {
            let ood = ood.ok_or_else(|| {
                Error::InvalidParameter("hybrid score requires OOD-head logits".into())
            })?;
            check_finite(&ood.values, "OOD logits")?;
            volume
                .pixels()
                .zip(&ood.values)
                .map(|(p, &z)| hybrid_unchecked(z, p))
                .collect()
        }
    };
    Ok(ScoreMap {
        height: volume.height,
        width: volume.width,
        values,
    })
}
