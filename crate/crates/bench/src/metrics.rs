//! OTB-style precision/success metrics and aggregation.

use std::collections::BTreeMap;

use mbcf_core::BoundingBox;
use serde::Serialize;

use crate::{BenchError, Result};

/// Precision thresholds 0..=50 px, one per pixel.
pub const PRECISION_POINTS: usize = 51;
/// Success thresholds 0..=1 in steps of 0.05.
pub const SUCCESS_POINTS: usize = 21;

/// Intersection-over-union of two boxes; disjoint boxes give 0, identical
/// boxes give 1.
pub fn iou(a: BoundingBox, b: BoundingBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Per-sequence metric bundle.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    /// Fraction of frames with center error <= t px, t = 0..=50.
    pub precision: Vec<f64>,
    /// Fraction of frames with IoU >= s, s = 0, 0.05, .., 1.
    pub success: Vec<f64>,
    /// Mean of the success samples.
    pub auc: f64,
    /// Success at IoU 0.5.
    pub op: f64,
    /// Mean IoU over all frames.
    pub accuracy: f64,
    /// Failure count; zero outside the restart protocol.
    pub robustness: usize,
}

/// Precision and success curves of a trajectory against ground truth.
pub fn otb_metrics(trajectory: &[BoundingBox], truth: &[BoundingBox]) -> Result<MetricReport> {
    if trajectory.len() != truth.len() {
        return Err(BenchError::Input(format!(
            "trajectory has {} boxes but truth has {}",
            trajectory.len(),
            truth.len()
        )));
    }
    if trajectory.is_empty() {
        return Err(BenchError::Input("empty trajectory".into()));
    }
    let n = trajectory.len() as f64;

    let mut precision = vec![0.0; PRECISION_POINTS];
    let mut success = vec![0.0; SUCCESS_POINTS];
    let mut iou_sum = 0.0;
    for (a, b) in trajectory.iter().zip(truth) {
        let (ca, cb) = (a.center(), b.center());
        let dist = ((ca.0 - cb.0).powi(2) + (ca.1 - cb.1).powi(2)).sqrt();
        for (t, slot) in precision.iter_mut().enumerate() {
            if dist <= t as f64 {
                *slot += 1.0;
            }
        }
        let overlap = iou(*a, *b);
        iou_sum += overlap;
        for (i, slot) in success.iter_mut().enumerate() {
            // Threshold i/20 is exact at both ends, so IoU >= 1 counts at s = 1.
            if overlap >= i as f64 / 20.0 {
                *slot += 1.0;
            }
        }
    }
    for v in &mut precision {
        *v /= n;
    }
    for v in &mut success {
        *v /= n;
    }
    let auc = success.iter().sum::<f64>() / SUCCESS_POINTS as f64;
    let op = success[10];
    Ok(MetricReport {
        precision,
        success,
        auc,
        op,
        accuracy: iou_sum / n,
        robustness: 0,
    })
}

/// Aggregate over a benchmark directory.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    pub sequences: BTreeMap<String, MetricReport>,
    pub mean_precision: Vec<f64>,
    pub mean_success: Vec<f64>,
    pub mean_auc: f64,
    pub mean_op: f64,
    pub precision_at_20: f64,
    /// Mean AUC per attribute tag, over the sequences carrying the tag.
    pub per_attribute_auc: BTreeMap<String, f64>,
}

/// Averages per-sequence reports; `attributes` maps sequence name to tags.
pub fn aggregate(
    reports: BTreeMap<String, MetricReport>,
    attributes: &BTreeMap<String, Vec<String>>,
) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(BenchError::Input("no sequences to aggregate".into()));
    }
    let n = reports.len() as f64;
    let mut mean_precision = vec![0.0; PRECISION_POINTS];
    let mut mean_success = vec![0.0; SUCCESS_POINTS];
    let mut mean_auc = 0.0;
    let mut mean_op = 0.0;
    for report in reports.values() {
        for (acc, v) in mean_precision.iter_mut().zip(&report.precision) {
            *acc += v / n;
        }
        for (acc, v) in mean_success.iter_mut().zip(&report.success) {
            *acc += v / n;
        }
        mean_auc += report.auc / n;
        mean_op += report.op / n;
    }

    let mut per_attribute: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (name, report) in &reports {
        if let Some(tags) = attributes.get(name) {
            for tag in tags {
                let entry = per_attribute.entry(tag.clone()).or_insert((0.0, 0));
                entry.0 += report.auc;
                entry.1 += 1;
            }
        }
    }
    let per_attribute_auc = per_attribute
        .into_iter()
        .map(|(tag, (sum, count))| (tag, sum / count as f64))
        .collect();

    let precision_at_20 = mean_precision[20];
    Ok(AggregateReport {
        sequences: reports,
        mean_precision,
        mean_success,
        mean_auc,
        mean_op,
        precision_at_20,
        per_attribute_auc,
    })
}

/// Renders a curve as two-column CSV.
pub fn curve_csv(header: (&str, &str), xs: impl Iterator<Item = f64>, ys: &[f64]) -> String {
    let mut out = format!("{},{}\n", header.0, header.1);
    for (x, y) in xs.zip(ys) {
        out.push_str(&format!("{x},{y:.6}\n"));
    }
    out
}
