//! Segmentation evaluation: per-class and macro DSC, mIoU, and RVD.

use crate::error::{Error, Result};
use crate::jsonw::fmt_f64;
use crate::volume::Volume;

/// Tallies and scores for one class. Percent scales: DSC/IoU in [0, 100],
/// RVD >= 0. `rvd` is `None` when the class is absent from ground truth but
/// predicted (flagged, excluded from the mean).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub pred_voxels: u64,
    pub gt_voxels: u64,
    pub intersection: u64,
    pub dsc: f64,
    pub iou: f64,
    pub rvd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Classes present in prediction or ground truth, ascending.
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted means over classes present in ground truth.
    pub macro_dsc: f64,
    pub macro_miou: f64,
    pub mean_rvd: f64,
    pub classes_in_gt: usize,
}

/// Scores a predicted label map against ground truth. Macro averages run
/// over classes present in ground truth; classes absent from both volumes
/// are excluded entirely. `n_cls`, when given, bounds the admissible labels.
pub fn evaluate(pred: &Volume<u8>, gt: &Volume<u8>, n_cls: Option<usize>) -> Result<MetricReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimMismatch { a: pred.dims(), b: gt.dims() });
    }
    let max_label = pred
        .data()
        .iter()
        .chain(gt.data())
        .fold(0u8, |a, &b| a.max(b)) as usize;
    if let Some(n) = n_cls {
        if max_label > n {
            return Err(Error::LabelOutOfRange { label: max_label, max: n });
        }
    }
    let classes = n_cls.unwrap_or(max_label);

    let mut pred_counts = vec![0u64; classes + 1];
    let mut gt_counts = vec![0u64; classes + 1];
    let mut inter_counts = vec![0u64; classes + 1];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        pred_counts[p as usize] += 1;
        gt_counts[g as usize] += 1;
        if p == g {
            inter_counts[p as usize] += 1;
        }
    }

    let mut per_class = Vec::new();
    let mut dsc_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut rvd_sum = 0.0;
    let mut gt_classes = 0usize;
    for c in 1..=classes {
        let (p, g, i) = (pred_counts[c], gt_counts[c], inter_counts[c]);
        if p == 0 && g == 0 {
            continue;
        }
        let dsc = 200.0 * i as f64 / (p + g) as f64;
        let union = p + g - i;
        let iou = 100.0 * i as f64 / union as f64;
        let rvd = if g > 0 {
            Some(100.0 * (p as f64 - g as f64).abs() / g as f64)
        } else {
            None
        };
        if g > 0 {
            gt_classes += 1;
            dsc_sum += dsc;
            iou_sum += iou;
            rvd_sum += rvd.expect("defined when gt present");
        }
        per_class.push(ClassMetrics {
            class: c,
            pred_voxels: p,
            gt_voxels: g,
            intersection: i,
            dsc,
            iou,
            rvd,
        });
    }

    let denom = gt_classes.max(1) as f64;
    Ok(MetricReport {
        per_class,
        macro_dsc: if gt_classes > 0 { dsc_sum / denom } else { 0.0 },
        macro_miou: if gt_classes > 0 { iou_sum / denom } else { 0.0 },
        mean_rvd: if gt_classes > 0 { rvd_sum / denom } else { 0.0 },
        classes_in_gt: gt_classes,
    })
}

impl MetricReport {
    /// JSON report with stable key order.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{{\"macro\":{{\"dsc\":{},\"miou\":{},\"rvd\":{},\"classes_in_gt\":{}}},\"classes\":[",
            fmt_f64(self.macro_dsc),
            fmt_f64(self.macro_miou),
            fmt_f64(self.mean_rvd),
            self.classes_in_gt
        ));
        let rows: Vec<String> = self
            .per_class
            .iter()
            .map(|c| {
                let rvd = match c.rvd {
                    Some(v) => fmt_f64(v),
                    None => "null".to_string(),
                };
                format!(
                    "{{\"class\":{},\"dsc\":{},\"iou\":{},\"rvd\":{},\"rvd_flagged\":{},\"pred_voxels\":{},\"gt_voxels\":{},\"intersection\":{}}}",
                    c.class,
                    fmt_f64(c.dsc),
                    fmt_f64(c.iou),
                    rvd,
                    c.rvd.is_none(),
                    c.pred_voxels,
                    c.gt_voxels,
                    c.intersection
                )
            })
            .collect();
        s.push_str(&rows.join(","));
        s.push_str("]}");
        s
    }
}
