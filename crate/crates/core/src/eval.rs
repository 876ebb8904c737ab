//! Precision, normalized precision and success metrics with per-modality
//! maxima and attribute slices.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bbox::BBox;
use crate::data::{read_annotations, RgbtSequence};
use crate::error::{CfbtError, Result};

/// Centre-error thresholds in pixels: 0, 1, ..., 50.
pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(|t| t as f64).collect()
}

/// Normalized centre-error thresholds: 0, 0.01, ..., 0.5.
pub fn npr_thresholds() -> Vec<f64> {
    (0..=50).map(|t| t as f64 / 100.0).collect()
}

/// IoU thresholds: 0.01, 0.02, ..., 1.0.
pub fn success_thresholds() -> Vec<f64> {
    (1..=100).map(|t| t as f64 / 100.0).collect()
}

pub const PR_INDEX: usize = 20;
pub const NPR_INDEX: usize = 20;

/// Intersection over union, 0 for boxes without area.
pub fn overlap(pred: &BBox, gt: &BBox) -> f64 {
    if !pred.is_valid() || !gt.is_valid() {
        return 0.0;
    }
    pred.iou(gt).clamp(0.0, 1.0)
}

pub fn center_error(pred: &BBox, gt: &BBox) -> f64 {
    pred.center_distance(gt)
}

/// Centre error with each axis divided by the ground-truth extent.
pub fn normalized_center_error(pred: &BBox, gt: &BBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    (((px - gx) / gt.w).powi(2) + ((py - gy) / gt.h).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    /// Frames counted in the denominators.
    pub frames: usize,
    pub pr: f64,
    pub npr: f64,
    pub sr: f64,
    pub mpr: f64,
    pub msr: f64,
    pub precision_curve: Vec<f64>,
    pub npr_curve: Vec<f64>,
    pub success_curve: Vec<f64>,
    pub max_precision_curve: Vec<f64>,
    pub max_success_curve: Vec<f64>,
    pub attributes: BTreeMap<String, MetricReport>,
}

/// Per-frame measurements for the frames that count.
struct Measures {
    err: Vec<f64>,
    nerr: Vec<f64>,
    iou: Vec<f64>,
    min_err: Vec<f64>,
    max_iou: Vec<f64>,
}

fn measure(pred: &[BBox], gt_rgb: &[BBox], gt_tir: &[BBox], keep: impl Fn(usize) -> bool) -> Measures {
    let mut m = Measures {
        err: vec![],
        nerr: vec![],
        iou: vec![],
        min_err: vec![],
        max_iou: vec![],
    };
    for i in 0..pred.len() {
        if !keep(i) {
            continue;
        }
        let (p, g) = (&pred[i], &gt_rgb[i]);
        if !g.is_valid() {
            continue;
        }
        m.err.push(center_error(p, g));
        m.nerr.push(normalized_center_error(p, g));
        m.iou.push(overlap(p, g));
        let t = &gt_tir[i];
        let (e, o) = if t.is_valid() {
            (center_error(p, g).min(center_error(p, t)), overlap(p, g).max(overlap(p, t)))
        } else {
            (center_error(p, g), overlap(p, g))
        };
        m.min_err.push(e);
        m.max_iou.push(o);
    }
    m
}

fn rate(values: &[f64], pass: impl Fn(f64) -> bool) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| pass(v)).count() as f64 / values.len() as f64
}

fn report_from(m: &Measures) -> MetricReport {
    let below = |vals: &[f64], ts: &[f64]| -> Vec<f64> { ts.iter().map(|&t| rate(vals, |v| v <= t)).collect() };
    let above = |vals: &[f64], ts: &[f64]| -> Vec<f64> { ts.iter().map(|&t| rate(vals, |v| v >= t)).collect() };
    let pt = precision_thresholds();
    let nt = npr_thresholds();
    let st = success_thresholds();
    let precision_curve = below(&m.err, &pt);
    let npr_curve = below(&m.nerr, &nt);
    let success_curve = above(&m.iou, &st);
    let max_precision_curve = below(&m.min_err, &pt);
    let max_success_curve = above(&m.max_iou, &st);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    MetricReport {
        frames: m.err.len(),
        pr: precision_curve[PR_INDEX],
        npr: npr_curve[NPR_INDEX],
        sr: mean(&success_curve),
        mpr: max_precision_curve[PR_INDEX],
        msr: mean(&max_success_curve),
        precision_curve,
        npr_curve,
        success_curve,
        max_precision_curve,
        max_success_curve,
        attributes: BTreeMap::new(),
    }
}

/// Metrics of one sequence. Frames whose RGB ground truth has no area are
/// left out; `attributes` slices are recomputed on their tagged frames.
pub fn compute_metrics(
    pred: &[BBox],
    gt_rgb: &[BBox],
    gt_tir: &[BBox],
    attributes: &BTreeMap<String, Vec<bool>>,
) -> Result<MetricReport> {
    if pred.len() != gt_rgb.len() || pred.len() != gt_tir.len() {
        return Err(CfbtError::Input(format!(
            "{} predictions for {} RGB and {} TIR annotations",
            pred.len(),
            gt_rgb.len(),
            gt_tir.len()
        )));
    }
    if let Some((tag, mask)) = attributes.iter().find(|(_, m)| m.len() != pred.len()) {
        return Err(CfbtError::Input(format!("attribute {tag} covers {} of {} frames", mask.len(), pred.len())));
    }
    let mut report = report_from(&measure(pred, gt_rgb, gt_tir, |_| true));
    for (tag, mask) in attributes {
        let m = measure(pred, gt_rgb, gt_tir, |i| mask[i]);
        if !m.err.is_empty() {
            report.attributes.insert(tag.clone(), report_from(&m));
        }
    }
    Ok(report)
}

pub fn evaluate_sequence(pred: &[BBox], seq: &RgbtSequence) -> Result<MetricReport> {
    compute_metrics(pred, &seq.gt_rgb, &seq.gt_tir, &seq.tags)
}

/// Reads a result file written by the tracker.
pub fn read_results(path: &Path) -> Result<Vec<BBox>> {
    read_annotations(path)
}

fn weighted(parts: &[(&MetricReport, f64)], f: impl Fn(&MetricReport) -> f64) -> f64 {
    let w: f64 = parts.iter().map(|p| p.1).sum();
    parts.iter().map(|(r, k)| f(r) * k).sum::<f64>() / w
}

fn weighted_curve(parts: &[(&MetricReport, f64)], f: impl Fn(&MetricReport) -> &Vec<f64>) -> Vec<f64> {
    let len = f(parts[0].0).len();
    (0..len).map(|i| weighted(parts, |r| f(r)[i])).collect()
}

/// Frame-weighted combination of per-sequence reports.
pub fn merge_reports(reports: &[MetricReport]) -> MetricReport {
    let parts: Vec<(&MetricReport, f64)> = reports.iter().filter(|r| r.frames > 0).map(|r| (r, r.frames as f64)).collect();
    if parts.is_empty() {
        return MetricReport::default();
    }
    let mut out = MetricReport {
        frames: parts.iter().map(|p| p.0.frames).sum(),
        pr: weighted(&parts, |r| r.pr),
        npr: weighted(&parts, |r| r.npr),
        sr: weighted(&parts, |r| r.sr),
        mpr: weighted(&parts, |r| r.mpr),
        msr: weighted(&parts, |r| r.msr),
        precision_curve: weighted_curve(&parts, |r| &r.precision_curve),
        npr_curve: weighted_curve(&parts, |r| &r.npr_curve),
        success_curve: weighted_curve(&parts, |r| &r.success_curve),
        max_precision_curve: weighted_curve(&parts, |r| &r.max_precision_curve),
        max_success_curve: weighted_curve(&parts, |r| &r.max_success_curve),
        attributes: BTreeMap::new(),
    };
    let mut tags: BTreeMap<&str, Vec<MetricReport>> = BTreeMap::new();
    for r in reports {
        for (t, sub) in &r.attributes {
            tags.entry(t.as_str()).or_default().push(sub.clone());
        }
    }
    for (t, subs) in tags {
        out.attributes.insert(t.to_string(), merge_reports(&subs));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn none() -> BTreeMap<String, Vec<bool>> {
        BTreeMap::new()
    }

    #[test]
    fn overlap_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(overlap(&a, &a), 1.0);
        assert!((overlap(&a, &BBox::new(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(overlap(&a, &BBox::new(20.0, 20.0, 3.0, 3.0)), 0.0);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt: Vec<BBox> = (0..10).map(|i| BBox::new(i as f64, 2.0, 10.0, 12.0)).collect();
        let r = compute_metrics(&gt, &gt, &gt, &none()).unwrap();
        for v in [r.pr, r.npr, r.sr, r.mpr, r.msr] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn far_predictions_score_zero() {
        let gt: Vec<BBox> = (0..5).map(|_| BBox::new(0.0, 0.0, 10.0, 10.0)).collect();
        let pred: Vec<BBox> = (0..5).map(|_| BBox::new(200.0, 0.0, 10.0, 10.0)).collect();
        let r = compute_metrics(&pred, &gt, &gt, &none()).unwrap();
        for v in [r.pr, r.npr, r.sr, r.mpr, r.msr] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn two_frame_hand_case() {
        let gt = vec![BBox::new(0.0, 0.0, 70.0, 70.0); 2];
        let pred = vec![BBox::new(0.0, 0.0, 70.0, 70.0), BBox::new(30.0, 0.0, 70.0, 70.0)];
        assert_eq!(overlap(&pred[1], &gt[1]), 0.4);
        let r = compute_metrics(&pred, &gt, &gt, &none()).unwrap();
        assert_eq!(r.pr, 0.5);
        // frame A passes all 100 thresholds, frame B the 40 up to 0.40
        assert_eq!(r.sr, 0.7);
        assert_eq!(r.precision_curve[29], 0.5);
        assert_eq!(r.precision_curve[30], 1.0);
    }

    #[test]
    fn excluded_frames_and_errors() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(0.0, 0.0, 0.0, 0.0)];
        let pred = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(90.0, 0.0, 10.0, 10.0)];
        let r = compute_metrics(&pred, &gt, &gt, &none()).unwrap();
        assert_eq!(r.frames, 1);
        assert_eq!(r.sr, 1.0);
        assert!(matches!(compute_metrics(&pred[..1], &gt, &gt, &none()), Err(CfbtError::Input(_))));
    }

    #[test]
    fn maximum_over_modalities() {
        let rgb = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let tir = vec![BBox::new(40.0, 0.0, 10.0, 10.0)];
        let pred = vec![BBox::new(40.0, 0.0, 10.0, 10.0)];
        let r = compute_metrics(&pred, &rgb, &tir, &none()).unwrap();
        assert_eq!(r.pr, 0.0);
        assert_eq!(r.mpr, 1.0);
        assert_eq!(r.msr, 1.0);
    }

    #[test]
    fn attribute_slices() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 4];
        let mut pred = gt.clone();
        pred[3] = BBox::new(100.0, 100.0, 10.0, 10.0);
        let mut tags = BTreeMap::new();
        tags.insert("HO".to_string(), vec![false, false, true, true]);
        tags.insert("LI".to_string(), vec![false; 4]);
        let r = compute_metrics(&pred, &gt, &gt, &tags).unwrap();
        assert_eq!(r.attributes["HO"].pr, 0.5);
        assert_eq!(r.attributes["HO"].frames, 2);
        assert!(!r.attributes.contains_key("LI"));
    }

    #[test]
    fn merge_weights_by_frames() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let a = compute_metrics(&[g; 3], &[g; 3], &[g; 3], &none()).unwrap();
        let b = compute_metrics(&[BBox::new(90.0, 0.0, 10.0, 10.0)], &[g], &[g], &none()).unwrap();
        let m = merge_reports(&[a, b]);
        assert_eq!(m.frames, 4);
        assert_eq!(m.pr, 0.75);
    }

    fn random_boxes(seed: u64, n: usize) -> (Vec<BBox>, Vec<BBox>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = || BBox::new(rng.random_range(0.0..60.0), rng.random_range(0.0..60.0), rng.random_range(1.0..40.0), rng.random_range(1.0..40.0));
        ((0..n).map(|_| b()).collect(), (0..n).map(|_| b()).collect())
    }

    proptest! {
        #[test]
        fn curves_are_monotone_and_reorder_invariant(seed in 0u64..1000, rot in 0usize..20) {
            let (p, g) = random_boxes(seed, 20);
            let r = compute_metrics(&p, &g, &g, &none()).unwrap();
            prop_assert!(r.precision_curve.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.success_curve.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(r.mpr >= r.pr && r.msr >= r.sr);
            let (mut p2, mut g2) = (p.clone(), g.clone());
            p2.rotate_left(rot);
            g2.rotate_left(rot);
            let r2 = compute_metrics(&p2, &g2, &g2, &none()).unwrap();
            prop_assert_eq!(r.precision_curve, r2.precision_curve);
            prop_assert!((r.sr - r2.sr).abs() < 1e-12);
        }
    }
}
