//! Segmentation and diagnosis evaluation measures.
//!
//! Lesion / melanoma is the positive class throughout.

use crate::error::{shape_err, Error, Result};
use crate::morphology::BinaryMask;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(shape_err!(
            "prediction {}×{} vs ground truth {}×{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        ));
    }
    Ok(count(pred.bits().iter().copied().zip(gt.bits().iter().copied())))
}

pub fn confusion_labels(pred: &[usize], gt: &[usize]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(shape_err!("{} predictions for {} labels", pred.len(), gt.len()));
    }
    if pred.iter().chain(gt).any(|&l| l > 1) {
        return Err(Error::Value("labels must be 0 or 1".into()));
    }
    Ok(count(pred.iter().zip(gt).map(|(&p, &g)| (p == 1, g == 1))))
}

fn count(pairs: impl Iterator<Item = (bool, bool)>) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (p, g) in pairs {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    /// Jaccard index.
    pub ja: f64,
    /// Dice coefficient.
    pub di: f64,
    /// Pixel accuracy.
    pub ac: f64,
    /// Mean of sensitivity and specificity.
    pub gm: f64,
}

/// Segmentation scores from pixel counts.
///
/// When neither prediction nor ground truth has lesion pixels, JA = DI = 1.
/// Sensitivity (specificity) is taken as 1 when there are no positive
/// (negative) pixels at all.
pub fn seg_metrics(c: &ConfusionCounts) -> SegMetrics {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let union = tp + fp + fn_;
    let (ja, di) = if union == 0.0 {
        (1.0, 1.0)
    } else {
        (tp / union, 2.0 * tp / (2.0 * tp + fp + fn_))
    };
    let total = tp + fp + fn_ + tn;
    let ac = if total == 0.0 { 1.0 } else { (tp + tn) / total };
    let se = if tp + fn_ == 0.0 { 1.0 } else { tp / (tp + fn_) };
    let sp = if tn + fp == 0.0 { 1.0 } else { tn / (tn + fp) };
    SegMetrics {
        ja,
        di,
        ac,
        gm: (se + sp) / 2.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsMetrics {
    pub accuracy: f64,
    /// `None` when there are no melanoma cases.
    pub sensitivity: Option<f64>,
    /// `None` when there are no non-melanoma cases.
    pub specificity: Option<f64>,
}

pub fn cls_metrics(pred: &[usize], gt: &[usize]) -> Result<ClsMetrics> {
    if gt.is_empty() {
        return Err(Error::Undefined("classification metrics of an empty set".into()));
    }
    let c = confusion_labels(pred, gt)?;
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(ClsMetrics {
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(false-positive fraction, true-positive fraction)` from the strictest
    /// threshold to the loosest.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = format!("auc,{}\nfpr,tpr\n", self.auc);
        for (f, t) in &self.points {
            s.push_str(&format!("{f},{t}\n"));
        }
        s
    }
}

/// ROC by sweeping a threshold over the distinct scores; tied scores move
/// together, and the area is integrated with the trapezoid rule.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(shape_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Value("NaN score".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Value("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC needs both positive and negative cases".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x0, y0) = *points.last().unwrap();
        let (x1, y1) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
    }
    Ok(RocCurve { points, auc })
}

/// Mean over the defined values, `None` if there are none.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Dataset-level report: segmentation scores averaged per image, diagnosis
/// scores over all cases.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub seg: SegMetrics,
    pub auc: Option<f64>,
    pub cls: ClsMetrics,
    pub images: usize,
}

impl MetricReport {
    pub fn from_predictions(
        seg: &[SegMetrics],
        melanoma_scores: &[f64],
        predicted_labels: &[usize],
        labels: &[usize],
    ) -> Result<Self> {
        if seg.is_empty() {
            return Err(Error::Undefined("metric report of an empty set".into()));
        }
        let n = seg.len() as f64;
        let mean = |f: fn(&SegMetrics) -> f64| seg.iter().map(f).sum::<f64>() / n;
        let auc = match roc_auc(melanoma_scores, labels) {
            Ok(r) => Some(r.auc),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(MetricReport {
            seg: SegMetrics {
                ja: mean(|m| m.ja),
                di: mean(|m| m.di),
                ac: mean(|m| m.ac),
                gm: mean(|m| m.gm),
            },
            auc,
            cls: cls_metrics(predicted_labels, labels)?,
            images: seg.len(),
        })
    }

    /// `metric,value` rows; undefined values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        let rows = [
            ("JA", Some(self.seg.ja)),
            ("DI", Some(self.seg.di)),
            ("AC_s", Some(self.seg.ac)),
            ("GM", Some(self.seg.gm)),
            ("AUC", self.auc),
            ("AC_r", Some(self.cls.accuracy)),
            ("SE", self.cls.sensitivity),
            ("SP", self.cls.specificity),
        ];
        let mut s = String::from("metric,value\n");
        for (name, v) in rows {
            s.push_str(&format!("{name},{}\n", fmt(v)));
        }
        s
    }
}
