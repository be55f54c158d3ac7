//! Dense anomaly-detection metrics (AP, FPR at a target TPR, AUROC) over
//! per-pixel scores, and mIoU over segmentation predictions.
//!
//! Positives are outlier pixels and higher scores mean more anomalous. Tied
//! scores always form a single threshold group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, Population};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BinaryEvalSet {
    pub scores: Vec<f64>,
    /// `true` = positive (outlier).
    pub labels: Vec<bool>,
}

impl BinaryEvalSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score at index {i}")));
        }
        Ok(Self { scores, labels })
    }

    /// Collect pixels of one score map against a label map: outlier pixels
    /// are positives, inlier pixels negatives, ignored pixels are skipped.
    pub fn extend_from_map(&mut self, scores: &[f64], labels: &LabelMap, num_classes: usize) -> Result<()> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} scores vs {} label pixels",
                scores.len(),
                labels.len()
            )));
        }
        for (&s, &id) in scores.iter().zip(&labels.ids) {
            match LabelMap::population(id, num_classes) {
                Population::Outlier => {
                    self.scores.push(s);
                    self.labels.push(true);
                }
                Population::Inlier(_) => {
                    self.scores.push(s);
                    self.labels.push(false);
                }
                Population::Ignored => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn counts(&self) -> (u64, u64) {
        let pos = self.labels.iter().filter(|&&l| l).count() as u64;
        (pos, self.labels.len() as u64 - pos)
    }

    /// Threshold groups in descending score order as (positives, negatives).
    fn descending_groups(&self) -> Vec<(u64, u64)> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_unstable_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(u64, u64)> = Vec::new();
        let mut prev: Option<f64> = None;
        for i in order {
            let s = self.scores[i];
            if prev != Some(s) {
                groups.push((0, 0));
                prev = Some(s);
            }
            let g = groups.last_mut().unwrap();
            if self.labels[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

/// Metrics from threshold groups given highest-score first.
pub(crate) struct GroupCurve {
    groups: Vec<(u64, u64)>,
    pos: u64,
    neg: u64,
}

impl GroupCurve {
    fn new(groups: Vec<(u64, u64)>) -> Self {
        let pos = groups.iter().map(|g| g.0).sum();
        let neg = groups.iter().map(|g| g.1).sum();
        Self { groups, pos, neg }
    }

    fn require_positive(&self) -> Result<()> {
        if self.pos == 0 {
            return Err(Error::Empty("no positive (outlier) samples".into()));
        }
        Ok(())
    }

    fn require_both(&self) -> Result<()> {
        self.require_positive()?;
        if self.neg == 0 {
            return Err(Error::Empty("no negative (inlier) samples".into()));
        }
        Ok(())
    }

    /// Non-interpolated step sum `sum (R_n - R_{n-1}) P_n`.
    fn average_precision(&self) -> Result<f64> {
        self.require_positive()?;
        let (mut tp, mut fp) = (0u64, 0u64);
        let mut ap = 0.0;
        for &(p, n) in &self.groups {
            tp += p;
            fp += n;
            if p > 0 {
                let recall_step = p as f64 / self.pos as f64;
                let precision = tp as f64 / (tp + fp) as f64;
                ap += recall_step * precision;
            }
        }
        Ok(ap)
    }

    fn fpr_at_tpr(&self, target_tpr: f64) -> Result<f64> {
        self.require_both()?;
        let (mut tp, mut fp) = (0u64, 0u64);
        for &(p, n) in &self.groups {
            tp += p;
            fp += n;
            if tp as f64 / self.pos as f64 >= target_tpr {
                return Ok(fp as f64 / self.neg as f64);
            }
        }
        Ok(1.0)
    }

    /// Mann-Whitney statistic with ties counted half.
    fn auroc(&self) -> Result<f64> {
        self.require_both()?;
        // walk from the lowest group upwards, counting negatives below
        let mut neg_below = 0u64;
        let mut wins = 0u128;
        let mut ties = 0u128;
        for &(p, n) in self.groups.iter().rev() {
            wins += p as u128 * neg_below as u128;
            ties += p as u128 * n as u128;
            neg_below += n;
        }
        let pairs = self.pos as f64 * self.neg as f64;
        Ok((wins as f64 + 0.5 * ties as f64) / pairs)
    }
}

pub fn average_precision(set: &BinaryEvalSet) -> Result<f64> {
    GroupCurve::new(set.descending_groups()).average_precision()
}

/// FPR at the first descending threshold whose TPR reaches `target_tpr`.
pub fn fpr_at_tpr(set: &BinaryEvalSet, target_tpr: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target_tpr) {
        return Err(Error::InvalidParameter(format!("target TPR {target_tpr} outside [0, 1]")));
    }
    GroupCurve::new(set.descending_groups()).fpr_at_tpr(target_tpr)
}

pub fn auroc(set: &BinaryEvalSet) -> Result<f64> {
    GroupCurve::new(set.descending_groups()).auroc()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub fpr_at_95: f64,
    pub auroc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class_iou: Option<Vec<Option<f64>>>,
    pub n_positive: u64,
    pub n_negative: u64,
    /// Scores were histogrammed rather than sorted exactly.
    pub approximate: bool,
    /// FPR@95 is taken at a discrete threshold without interpolation.
    pub fpr_convention: String,
}

pub const FPR_CONVENTION: &str = "discrete-first-threshold";

impl MetricsReport {
    fn from_curve(curve: &GroupCurve, approximate: bool) -> Result<Self> {
        Ok(Self {
            ap: curve.average_precision()?,
            fpr_at_95: curve.fpr_at_tpr(0.95)?,
            auroc: curve.auroc()?,
            miou: None,
            per_class_iou: None,
            n_positive: curve.pos,
            n_negative: curve.neg,
            approximate,
            fpr_convention: FPR_CONVENTION.to_string(),
        })
    }

    pub fn with_miou(mut self, miou: f64, per_class: Vec<Option<f64>>) -> Self {
        self.miou = Some(miou);
        self.per_class_iou = Some(per_class);
        self
    }
}

/// Exact AP, FPR@95 and AUROC from a full sort.
pub fn evaluate(set: &BinaryEvalSet) -> Result<MetricsReport> {
    MetricsReport::from_curve(&GroupCurve::new(set.descending_groups()), false)
}

/// K x K pixel counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
    /// Inlier ground-truth pixels predicted as something outside `0..K`.
    pub unassigned: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            unassigned: vec![0; num_classes],
        }
    }

    /// Accumulate pixels whose ground truth is an inlier class.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::DimensionMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
            if let Population::Inlier(g) = LabelMap::population(g, k) {
                match (p as usize) < k {
                    true => self.counts[g * k + p as usize] += 1,
                    false => self.unassigned[g] += 1,
                }
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unassigned.iter().sum::<u64>()
    }

    /// Per-class IoU (None where TP + FP + FN = 0) and their mean.
    pub fn iou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        if self.total() == 0 {
            return Err(Error::Empty("no evaluable pixels".into()));
        }
        let k = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let row: u64 = self.counts[c * k..(c + 1) * k].iter().sum::<u64>() + self.unassigned[c];
                let col: u64 = (0..k).map(|r| self.counts[r * k + c]).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        Ok((mean, per_class))
    }
}

pub fn miou(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt)?;
    cm.iou()
}

pub const DEFAULT_BINS: usize = 4096;

/// Equal-width histogram of positive/negative counts over a fixed score range.
/// Histograms over the same range merge by addition.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreHistogram {
    min: f64,
    max: f64,
    pos: Vec<u64>,
    neg: Vec<u64>,
}

impl ScoreHistogram {
    pub fn new(min: f64, max: f64, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidParameter("histogram needs at least one bin".into()));
        }
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(Error::InvalidParameter(format!("bad score range [{min}, {max}]")));
        }
        // a degenerate range collapses everything into one group
        let bins = if min == max { 1 } else { bins };
        Ok(Self {
            min,
            max,
            pos: vec![0; bins],
            neg: vec![0; bins],
        })
    }

    #[inline]
    pub fn bin(&self, score: f64) -> usize {
        let bins = self.pos.len();
        if bins == 1 {
            return 0;
        }
        let t = (score - self.min) / (self.max - self.min);
        ((t * bins as f64) as usize).min(bins - 1)
    }

    #[inline]
    pub fn add(&mut self, score: f64, positive: bool) {
        let b = self.bin(score);
        if positive {
            self.pos[b] += 1;
        } else {
            self.neg[b] += 1;
        }
    }

    pub fn merge(&mut self, other: &ScoreHistogram) -> Result<()> {
        if self.min != other.min || self.max != other.max || self.pos.len() != other.pos.len() {
            return Err(Error::InvalidParameter("histograms cover different ranges".into()));
        }
        for (a, b) in self.pos.iter_mut().zip(&other.pos) {
            *a += b;
        }
        for (a, b) in self.neg.iter_mut().zip(&other.neg) {
            *a += b;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let groups: Vec<(u64, u64)> = self
            .pos
            .iter()
            .zip(&self.neg)
            .rev()
            .filter(|(p, n)| **p + **n > 0)
            .map(|(&p, &n)| (p, n))
            .collect();
        MetricsReport::from_curve(&GroupCurve::new(groups), true)
    }
}

/// Two-pass streaming evaluation: range, then a histogram fill. Each bin is
/// one tied threshold group.
pub fn streaming_eval<I>(stream: I, bins: usize) -> Result<MetricsReport>
where
    I: IntoIterator<Item = (f64, bool)> + Clone,
{
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (s, _) in stream.clone() {
        if !s.is_finite() {
            return Err(Error::NonFinite("score in stream".into()));
        }
        min = min.min(s);
        max = max.max(s);
    }
    if min > max {
        return Err(Error::Empty("score stream".into()));
    }
    let mut hist = ScoreHistogram::new(min, max, bins)?;
    for (s, l) in stream {
        hist.add(s, l);
    }
    hist.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{IGNORE_ID, OUTLIER_ID};

    fn set(scores: &[f64], labels: &[bool]) -> BinaryEvalSet {
        BinaryEvalSet::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn ap_examples() {
        let s = set(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]);
        assert!((average_precision(&s).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        let perfect = set(&[3.0, 2.0, 1.0, 0.0], &[true, true, false, false]);
        assert_eq!(average_precision(&perfect).unwrap(), 1.0);
        let tied = set(&[1.0; 5], &[true, false, false, true, false]);
        assert!((average_precision(&tied).unwrap() - 0.4).abs() < 1e-15);
        assert!(average_precision(&set(&[1.0], &[false])).is_err());
    }

    #[test]
    fn fpr_examples() {
        let perfect = set(&[3.0, 2.0, 1.0, 0.0], &[true, true, false, false]);
        assert_eq!(fpr_at_tpr(&perfect, 0.95).unwrap(), 0.0);
        let s = set(&[5.0, 4.0, 3.0, 2.0, 3.5, 1.0], &[true, true, true, true, false, false]);
        assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), 0.5);
        let inverted = set(&[0.0, 1.0, 2.0, 3.0], &[true, true, false, false]);
        assert_eq!(fpr_at_tpr(&inverted, 0.95).unwrap(), 1.0);
        assert!(fpr_at_tpr(&set(&[1.0], &[true]), 0.95).is_err());
    }

    #[test]
    fn auroc_examples() {
        let s = set(&[2.0, 3.0, 1.0, 2.0], &[true, true, false, false]);
        assert_eq!(auroc(&s).unwrap(), 0.875);
        assert_eq!(auroc(&set(&[4.0; 6], &[true, false, true, false, false, false])).unwrap(), 0.5);
        let s = set(&[0.3, 0.9, 0.1, 0.5, 0.7], &[true, false, false, true, false]);
        let flipped = set(&[0.3, 0.9, 0.1, 0.5, 0.7], &[false, true, true, false, true]);
        assert!((auroc(&s).unwrap() + auroc(&flipped).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn miou_examples() {
        let gt = LabelMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
        assert_eq!(miou(&gt, &gt, 2).unwrap().0, 1.0);
        let pred = LabelMap::filled(2, 2, 0);
        let (m, per) = miou(&pred, &gt, 2).unwrap();
        assert_eq!(per, vec![Some(0.5), Some(0.0)]);
        assert_eq!(m, 0.25);
        let ignored = LabelMap::filled(2, 2, IGNORE_ID);
        assert!(matches!(miou(&pred, &ignored, 2), Err(Error::Empty(_))));
    }

    #[test]
    fn miou_skips_absent_classes_and_outliers() {
        let gt = LabelMap::new(1, 4, vec![0, 0, OUTLIER_ID, 1]).unwrap();
        let pred = LabelMap::new(1, 4, vec![0, 0, 2, 1]).unwrap();
        let (m, per) = miou(&pred, &gt, 3).unwrap();
        assert_eq!(per, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(m, 1.0);
    }

    #[test]
    fn extend_from_map_drops_ignored() {
        let labels = LabelMap::new(1, 4, vec![0, OUTLIER_ID, IGNORE_ID, 9]).unwrap();
        let mut s = BinaryEvalSet::default();
        s.extend_from_map(&[0.1, 0.2, 0.3, 0.4], &labels, 4).unwrap();
        assert_eq!(s.scores, vec![0.1, 0.2]);
        assert_eq!(s.labels, vec![false, true]);
    }

    #[test]
    fn streaming_constant_scores() {
        let data: Vec<(f64, bool)> = (0..10).map(|i| (2.5, i % 3 == 0)).collect();
        let r = streaming_eval(data.iter().copied(), DEFAULT_BINS).unwrap();
        assert!((r.ap - 0.4).abs() < 1e-15);
        assert_eq!(r.auroc, 0.5);
        assert!(r.approximate);
        let exact = evaluate(&set(&[2.5; 10], &data.iter().map(|d| d.1).collect::<Vec<_>>())).unwrap();
        assert_eq!(exact.ap, r.ap);
        assert_eq!(exact.fpr_at_95, r.fpr_at_95);
    }

    #[test]
    fn streaming_distinct_bins_is_exact() {
        let scores: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let labels: Vec<bool> = (0..50).map(|i| (i * 7) % 5 < 2).collect();
        let exact = evaluate(&set(&scores, &labels)).unwrap();
        let stream = streaming_eval(scores.iter().copied().zip(labels.iter().copied()), 64).unwrap();
        assert!((exact.ap - stream.ap).abs() < 1e-12);
        assert!((exact.auroc - stream.auroc).abs() < 1e-12);
        assert!((exact.fpr_at_95 - stream.fpr_at_95).abs() < 1e-12);
    }

    #[test]
    fn histogram_merge_is_order_free() {
        let mut a = ScoreHistogram::new(0.0, 1.0, 16).unwrap();
        let mut b = ScoreHistogram::new(0.0, 1.0, 16).unwrap();
        let mut whole = ScoreHistogram::new(0.0, 1.0, 16).unwrap();
        for i in 0..100 {
            let s = (i as f64 * 0.37) % 1.0;
            let l = i % 4 == 0;
            whole.add(s, l);
            if i % 2 == 0 { a.add(s, l) } else { b.add(s, l) }
        }
        let mut ab = a.clone();
        ab.merge(&b).unwrap();
        b.merge(&a).unwrap();
        assert_eq!(ab, whole);
        assert_eq!(b, whole);
        assert!(ab.merge(&ScoreHistogram::new(0.0, 2.0, 16).unwrap()).is_err());
    }
}
