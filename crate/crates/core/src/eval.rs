// SPDX-License-Identifier: MIT OR Apache-2.0

//! Classification accuracy and heatmap segmentation metrics.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Published full-scale figures, kept for reports only; they are not
/// reproducible on a desk-scale subset.
pub mod reference {
    /// Sparse-head top-1 accuracy on ImageNet.
    pub const IMAGENET_SPARSE_TOP1: f64 = 0.7532;
    /// Zero-shot segmentation pixel accuracy.
    pub const SEG_PIXEL_ACCURACY: f64 = 0.7694;
    /// Zero-shot segmentation mIoU.
    pub const SEG_MIOU: f64 = 0.5830;
    /// Zero-shot segmentation mAP.
    pub const SEG_MAP: f64 = 0.8531;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Foreground where the value is at least the heatmap's own mean.
    #[default]
    MeanThreshold,
    Fixed { t: f64 },
}

impl std::str::FromStr for ThresholdPolicy {
    type Err = Error;

    /// `mean` or `fixed:<t>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "mean_threshold" => Ok(Self::MeanThreshold),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|t| t.parse::<f64>().ok())
                .filter(|t| t.is_finite())
                .map(|t| Self::Fixed { t })
                .ok_or_else(|| Error::Config(format!("unknown threshold policy {s:?}"))),
        }
    }
}

pub fn binarize(heatmap: ArrayView2<'_, f64>, policy: ThresholdPolicy) -> Array2<u8> {
    let t = match policy {
        ThresholdPolicy::MeanThreshold => heatmap.sum() / heatmap.len().max(1) as f64,
        ThresholdPolicy::Fixed { t } => t,
    };
    heatmap.mapv(|v| (v >= t) as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image_id: String,
    pub heatmap: Array2<f64>,
    /// Values in {0, 1}.
    pub gt: Array2<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &Array2<u8>, gt: &Array2<u8>) -> Self {
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn pixel_accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    /// `TP / (TP + FP + FN)`, 1 when the union is empty.
    pub fn fg_iou(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn bg_iou(&self) -> f64 {
        ratio_or_one(self.tn, self.tn + self.fp + self.fn_)
    }

    pub fn miou(&self) -> f64 {
        0.5 * (self.fg_iou() + self.bg_iou())
    }
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Average precision of `scores` against binary `labels`, summing
/// precision times recall increments over distinct score thresholds.
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l != 0).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += (labels[order[i]] != 0) as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(ap)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiouAggregation {
    /// Per-class IoU from dataset-wide confusion counts.
    #[default]
    Dataset,
    /// Mean over images of each image's two-class mIoU.
    PerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pixel_accuracy: f64,
    pub miou: f64,
    pub map: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub n_samples: usize,
    /// Samples contributing to mAP (those with any foreground).
    pub n_map_samples: usize,
    pub confusion: Confusion,
    pub threshold_policy: ThresholdPolicy,
    pub miou_aggregation: MiouAggregation,
}

pub fn seg_metrics(samples: &[SegSample], policy: ThresholdPolicy, aggregation: MiouAggregation) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::invalid("no segmentation samples"));
    }
    for s in samples {
        if s.heatmap.dim() != s.gt.dim() {
            return Err(Error::geometry(format!(
                "sample {}: heatmap {:?} vs mask {:?}",
                s.image_id,
                s.heatmap.dim(),
                s.gt.dim()
            )));
        }
        if s.gt.iter().any(|&v| v > 1) {
            return Err(Error::Data(format!("sample {}: mask is not binary", s.image_id)));
        }
        if s.heatmap.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("sample {}: heatmap is not finite", s.image_id)));
        }
    }
    let per: Vec<(Confusion, Option<f64>)> = samples
        .par_iter()
        .map(|s| {
            let c = Confusion::from_masks(&binarize(s.heatmap.view(), policy), &s.gt);
            let scores: Vec<f64> = s.heatmap.iter().copied().collect();
            let labels: Vec<u8> = s.gt.iter().copied().collect();
            (c, average_precision(&scores, &labels))
        })
        .collect();
    let confusion = per.iter().fold(Confusion::default(), |a, (c, _)| a.add(*c));
    // Sorted sums keep the result independent of sample order.
    let mut aps: Vec<f64> = per.iter().filter_map(|(_, ap)| *ap).collect();
    aps.sort_by(f64::total_cmp);
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    let miou = match aggregation {
        MiouAggregation::Dataset => confusion.miou(),
        MiouAggregation::PerImage => {
            let mut v: Vec<f64> = per.iter().map(|(c, _)| c.miou()).collect();
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(MetricsReport {
        pixel_accuracy: confusion.pixel_accuracy(),
        miou,
        map,
        fg_iou: confusion.fg_iou(),
        bg_iou: confusion.bg_iou(),
        n_samples: samples.len(),
        n_map_samples: aps.len(),
        confusion,
        threshold_policy: policy,
        miou_aggregation: aggregation,
    })
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        format!(
            "metric          value\n\
             pixel_accuracy  {:.4}\n\
             miou            {:.4}\n\
             map             {:.4}\n\
             fg_iou          {:.4}\n\
             bg_iou          {:.4}\n\
             samples         {}\n",
            self.pixel_accuracy, self.miou, self.map, self.fg_iou, self.bg_iou, self.n_samples
        )
    }
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub name: Option<String>,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub top1: f64,
    pub n: usize,
    pub correct: usize,
    pub per_class: Vec<ClassRow>,
}

impl ClassificationReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("top1 {:.4} ({}/{})\nclass  n  correct  accuracy\n", self.top1, self.correct, self.n);
        for r in &self.per_class {
            let name = r.name.as_deref().unwrap_or("");
            s.push_str(&format!("{} {}  {}  {}  {:.4}\n", r.class, name, r.n, r.correct, r.accuracy));
        }
        s
    }
}

/// Tallies predictions against labels; `ids` name samples in errors.
pub fn accuracy_report(
    predictions: &[usize],
    labels: &[usize],
    ids: &[String],
    class_names: &[String],
) -> Result<ClassificationReport> {
    let l = class_names.len();
    if predictions.len() != labels.len() {
        return Err(Error::geometry("predictions and labels differ in length"));
    }
    let mut rows: Vec<ClassRow> = (0..l)
        .map(|c| ClassRow { class: c, name: Some(class_names[c].clone()), n: 0, correct: 0, accuracy: 0.0 })
        .collect();
    for (i, (&p, &y)) in predictions.iter().zip(labels).enumerate() {
        if y >= l {
            let id = ids.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::Data(format!("sample {id}: label {y} outside 0..{l}")));
        }
        rows[y].n += 1;
        rows[y].correct += (p == y) as usize;
    }
    for r in &mut rows {
        r.accuracy = if r.n == 0 { 0.0 } else { r.correct as f64 / r.n as f64 };
    }
    let correct = rows.iter().map(|r| r.correct).sum();
    let n = labels.len();
    Ok(ClassificationReport { top1: if n == 0 { 0.0 } else { correct as f64 / n as f64 }, n, correct, per_class: rows })
}

/// Runs the bundle over each labeled image.
pub fn classification_accuracy(
    bundle: &crate::bundle::ModelBundle,
    entries: &[DatasetEntry],
) -> Result<ClassificationReport> {
    let l = bundle.head.num_classes();
    for (i, e) in entries.iter().enumerate() {
        if e.label >= l {
            return Err(Error::Data(format!("sample {}: label {} outside 0..{l}", e.id_or(i), e.label)));
        }
    }
    let preds: Vec<usize> = entries
        .par_iter()
        .map(|e| {
            let img = image::open(&e.image)?.to_rgb8();
            Ok(bundle.forward(&img)?.prediction.y_hat)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = entries.iter().map(|e| e.label).collect();
    let ids: Vec<String> = entries.iter().enumerate().map(|(i, e)| e.id_or(i)).collect();
    accuracy_report(&preds, &labels, &ids, &bundle.catalog.classes)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// One JSON line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub image: PathBuf,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl DatasetEntry {
    pub fn id_or(&self, index: usize) -> String {
        self.id.clone().unwrap_or_else(|| {
            self.image.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_else(|| format!("#{index}"))
        })
    }
}

/// Reads a JSON-lines manifest; relative paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<DatasetEntry>> {
    let text = String::from_utf8(crate::fsutil::read_artifact(path)?)
        .map_err(|_| Error::Data(format!("{} is not UTF-8", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut e: DatasetEntry = serde_json::from_str(line)
            .map_err(|err| Error::Data(format!("{} line {}: {err}", path.display(), i + 1)))?;
        if e.id.is_none() {
            e.id = Some(e.image.to_string_lossy().into_owned());
        }
        e.image = base.join(&e.image);
        e.mask = e.mask.map(|m| base.join(m));
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} lists no images", path.display())));
    }
    Ok(out)
}

/// Nonzero pixels become foreground.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| (img.get_pixel(x as u32, y as u32).0[0] != 0) as u8))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_parsing() {
        assert_eq!("mean".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::MeanThreshold);
        assert_eq!("fixed:0.25".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::Fixed { t: 0.25 });
        assert!("otsu".parse::<ThresholdPolicy>().is_err());
    }

    #[test]
    fn reference_constants_are_fractions() {
        for v in [reference::IMAGENET_SPARSE_TOP1, reference::SEG_PIXEL_ACCURACY, reference::SEG_MIOU, reference::SEG_MAP] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
