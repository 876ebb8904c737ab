//! Training objective: Gaussian-weighted focal loss on the score map plus
//! GIoU and L1 box regression at the ground-truth cell.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{CfbtError, Result};
use crate::head::HeadOutput;

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
const FOCAL_EPS: f64 = 1e-6;
const MIN_OVERLAP: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_iou: f64,
    pub l_1: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub fn new(l_cls: f64, l_iou: f64, l_1: f64, lambda1: f64, lambda2: f64) -> Self {
        Self {
            l_cls,
            l_iou,
            l_1,
            total: l_cls + lambda1 * l_iou + lambda2 * l_1,
            lambda1,
            lambda2,
        }
    }
}

/// Differentiable total plus its reported components.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// CenterNet radius rule for a box of `w x h` cells.
pub fn gaussian_radius(w: f64, h: f64) -> f64 {
    let b1 = h + w;
    let c1 = w * h * (1.0 - MIN_OVERLAP) / (1.0 + MIN_OVERLAP);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - MIN_OVERLAP) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * MIN_OVERLAP;
    let b3 = -2.0 * MIN_OVERLAP * (h + w);
    let c3 = (MIN_OVERLAP - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Grid cell `(col, row)` holding the center of a normalized box.
pub fn center_cell(gt: &BBox, grid: usize) -> Result<(usize, usize)> {
    let (cx, cy) = gt.center();
    if !gt.is_valid() || !(0.0..1.0).contains(&cx) || !(0.0..1.0).contains(&cy) {
        return Err(CfbtError::Input(format!("ground truth {gt} is not inside the search crop")));
    }
    let n = grid as f64;
    Ok((((cx * n) as usize).min(grid - 1), ((cy * n) as usize).min(grid - 1)))
}

/// Gaussian heat map (row-major `grid x grid`) with a single unit peak at the
/// center cell of `gt` (normalized crop coordinates).
pub fn gaussian_target(gt: &BBox, grid: usize) -> Result<Vec<f64>> {
    let (col, row) = center_cell(gt, grid)?;
    let n = grid as f64;
    let radius = gaussian_radius(gt.w * n, gt.h * n).max(0.0).floor() as i64;
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let mut map = vec![0.0; grid * grid];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (r, c) = (row as i64 + dy, col as i64 + dx);
            if r < 0 || c < 0 || r >= grid as i64 || c >= grid as i64 {
                continue;
            }
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            map[r as usize * grid + c as usize] = v;
        }
    }
    Ok(map)
}

fn check_unit_peak(target: &Tensor) -> Result<()> {
    let b = target.dim(0)?;
    let flat = target.reshape((b, ()))?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    for (i, row) in flat.iter().enumerate() {
        let peaks = row.iter().filter(|&&v| v == 1.0).count();
        if peaks != 1 {
            return Err(CfbtError::Input(format!(
                "target map {i} has {peaks} unit cells, expected exactly one"
            )));
        }
    }
    Ok(())
}

/// Gaussian-weighted focal loss, summed over cells and divided by the number
/// of positive cells in the batch. `cls` and `target` are `(batch, 1, n, n)`.
pub fn focal_loss(cls: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_unit_peak(target)?;
    focal_loss_unchecked(cls, target)
}

fn focal_loss_unchecked(cls: &Tensor, target: &Tensor) -> Result<Tensor> {
    if cls.dims() != target.dims() {
        return Err(CfbtError::Shape(format!(
            "score map {:?} vs target {:?}",
            cls.dims(),
            target.dims()
        )));
    }
    let target = target.to_dtype(cls.dtype())?;
    let p = cls.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)?;
    let pos = target.eq(1.0)?.to_dtype(cls.dtype())?;
    let neg = (1.0 - &pos)?;
    let pos_term = (p.log()? * (1.0 - &p)?.powf(FOCAL_ALPHA as f64)?)?.mul(&pos)?;
    let neg_weight = (1.0 - &target)?.powf(FOCAL_BETA as f64)?;
    let neg_term = ((1.0 - &p)?.log()? * p.powf(FOCAL_ALPHA as f64)?)?.mul(&neg_weight)?.mul(&neg)?;
    let num_pos = pos.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.max(1.0);
    Ok(((pos_term.sum_all()? + neg_term.sum_all()?)?.neg()? / num_pos)?)
}

/// `1 - GIoU` for two valid boxes.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    if !pred.is_valid() || !gt.is_valid() {
        return Err(CfbtError::Input(format!("degenerate box in GIoU ({pred} vs {gt})")));
    }
    let inter = pred.intersection(gt);
    let union = pred.area() + gt.area() - inter;
    let ew = pred.x2().max(gt.x2()) - pred.x.min(gt.x);
    let eh = pred.y2().max(gt.y2()) - pred.y.min(gt.y);
    let enclose = ew * eh;
    let giou = inter / union - (enclose - union) / enclose;
    Ok(1.0 - giou)
}

/// Mean `1 - GIoU` over `(batch, 4)` boxes in `(cx, cy, w, h)` layout.
pub fn giou_loss_tensor(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let corners = |t: &Tensor| -> Result<[Tensor; 4]> {
        let cx = t.narrow(1, 0, 1)?;
        let cy = t.narrow(1, 1, 1)?;
        let hw = (t.narrow(1, 2, 1)? * 0.5)?;
        let hh = (t.narrow(1, 3, 1)? * 0.5)?;
        Ok([(&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?])
    };
    let [ax1, ay1, ax2, ay2] = corners(pred)?;
    let [bx1, by1, bx2, by2] = corners(gt)?;
    let iw = (ax2.minimum(&bx2)? - ax1.maximum(&bx1)?)?.relu()?;
    let ih = (ay2.minimum(&by2)? - ay1.maximum(&by1)?)?.relu()?;
    let inter = (iw * ih)?;
    let area_a = ((&ax2 - &ax1)? * (&ay2 - &ay1)?)?;
    let area_b = ((&bx2 - &bx1)? * (&by2 - &by1)?)?;
    let union = ((area_a + area_b)? - &inter)?;
    let ew = (ax2.maximum(&bx2)? - ax1.minimum(&bx1)?)?;
    let eh = (ay2.maximum(&by2)? - ay1.minimum(&by1)?)?;
    let enclose = (ew * eh)?;
    let iou = inter.div(&union)?;
    let giou = (iou - (&enclose - &union)?.div(&enclose)?)?;
    Ok((1.0 - giou)?.mean_all()?)
}

/// Per-sample tensors derived from normalized ground-truth boxes.
struct Targets {
    heat: Tensor,
    cell_mask: Tensor,
    cells: Tensor,
    boxes: Tensor,
}

fn build_targets(gt: &[BBox], grid: usize, dtype: DType, device: &Device) -> Result<Targets> {
    let b = gt.len();
    let mut heat = Vec::with_capacity(b * grid * grid);
    let mut mask = vec![0.0; b * grid * grid];
    let mut cells = Vec::with_capacity(b * 2);
    let mut boxes = Vec::with_capacity(b * 4);
    for (i, g) in gt.iter().enumerate() {
        let (col, row) = center_cell(g, grid)?;
        heat.extend(gaussian_target(g, grid)?);
        mask[i * grid * grid + row * grid + col] = 1.0;
        cells.extend([col as f64, row as f64]);
        let (cx, cy) = g.center();
        boxes.extend([cx, cy, g.w, g.h]);
    }
    let t = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
    };
    Ok(Targets {
        heat: t(heat, &[b, 1, grid, grid])?,
        cell_mask: t(mask, &[b, 1, grid, grid])?,
        cells: t(cells, &[b, 2])?,
        boxes: t(boxes, &[b, 4])?,
    })
}

/// Predicted `(cx, cy, w, h)` read at each sample's ground-truth cell.
fn boxes_at_cells(head: &HeadOutput, t: &Targets, grid: usize) -> Result<Tensor> {
    let b = head.batch()?;
    let pick = |m: &Tensor| -> Result<Tensor> {
        // (b, c, n, n) * (b, 1, n, n) summed over the grid -> (b, c)
        Ok(m.broadcast_mul(&t.cell_mask)?.sum((2, 3))?)
    };
    let offset = pick(&head.offset)?;
    let size = pick(&head.size)?;
    let center = ((offset + &t.cells)? / grid as f64)?;
    let out = Tensor::cat(&[center, size], 1)?;
    debug_assert_eq!(out.dims(), &[b, 4]);
    Ok(out)
}

/// Full objective for a batch. `gt` boxes are normalized to the search crop.
pub fn total_loss(head: &HeadOutput, gt: &[BBox], lambda1: f64, lambda2: f64) -> Result<LossTerms> {
    let b = head.batch()?;
    if gt.len() != b {
        return Err(CfbtError::Shape(format!("{} boxes for a batch of {b}", gt.len())));
    }
    let grid = head.grid()?;
    let t = build_targets(gt, grid, head.cls.dtype(), head.cls.device())?;
    let l_cls = focal_loss_unchecked(&head.cls, &t.heat)?;
    let pred = boxes_at_cells(head, &t, grid)?;
    let l_iou = giou_loss_tensor(&pred, &t.boxes)?;
    let l_1 = (&pred - &t.boxes)?.abs()?.mean_all()?;
    let total = ((&l_cls + (&l_iou * lambda1)?)? + (&l_1 * lambda2)?)?;
    let scalar = |x: &Tensor| -> Result<f64> { Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = LossBreakdown::new(scalar(&l_cls)?, scalar(&l_iou)?, scalar(&l_1)?, lambda1, lambda2);
    Ok(LossTerms { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(values: Vec<f64>, n: usize) -> Tensor {
        Tensor::from_vec(values, (1, 1, n, n), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn perfect_delta_prediction_has_no_focal_loss() {
        let mut t = vec![0.0; 16];
        t[5] = 1.0;
        let l = focal_loss(&map(t.clone(), 4), &map(t, 4)).unwrap();
        assert!(scalar(&l) < 1e-6);
    }

    #[test]
    fn half_confident_peak_closed_form() {
        let mut t = vec![0.0; 16];
        t[5] = 1.0;
        let mut p = vec![0.0; 16];
        p[5] = 0.5;
        let l = scalar(&focal_loss(&map(p, 4), &map(t, 4)).unwrap());
        let expected = -(0.5f64).powi(2) * 0.5f64.ln();
        assert!((l - expected).abs() < 1e-9, "{l} vs {expected}");
        assert!((l - 0.1733).abs() < 1e-4);
    }

    #[test]
    fn focal_is_batch_normalized() {
        let mut t = vec![0.0; 16];
        t[5] = 1.0;
        t[6] = 0.3;
        let p: Vec<f64> = (0..16).map(|i| 0.05 + 0.05 * i as f64).collect();
        let one = scalar(&focal_loss(&map(p.clone(), 4), &map(t.clone(), 4)).unwrap());
        let p2 = Tensor::from_vec([p.clone(), p].concat(), (2, 1, 4, 4), &Device::Cpu).unwrap();
        let t2 = Tensor::from_vec([t.clone(), t].concat(), (2, 1, 4, 4), &Device::Cpu).unwrap();
        let two = scalar(&focal_loss(&p2, &t2).unwrap());
        assert!((one - two).abs() < 1e-12);
    }

    #[test]
    fn focal_requires_single_unit_peak() {
        let t = vec![0.5; 16];
        assert!(matches!(focal_loss(&map(t.clone(), 4), &map(t, 4)), Err(CfbtError::Input(_))));
        let mut two = vec![0.0; 16];
        two[1] = 1.0;
        two[9] = 1.0;
        assert!(focal_loss(&map(two.clone(), 4), &map(two, 4)).is_err());
    }

    #[test]
    fn gaussian_target_has_one_peak() {
        let gt = BBox::from_center(0.53, 0.47, 0.3, 0.2);
        let m = gaussian_target(&gt, 16).unwrap();
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(m[7 * 16 + 8], 1.0);
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(gaussian_target(&BBox::from_center(1.2, 0.5, 0.1, 0.1), 16).is_err());
    }

    #[test]
    fn giou_hand_cases() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou_loss(&a, &a).unwrap(), 0.0);
        let far = BBox::new(2.0, 2.0, 1.0, 1.0);
        assert!((giou_loss(&a, &far).unwrap() - 16.0 / 9.0).abs() < 1e-12);
        // inner box half the side of gt sharing a corner: IoU 1/4, enclosure = union
        let gt = BBox::new(0.0, 0.0, 2.0, 2.0);
        let inner = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert!((giou_loss(&inner, &gt).unwrap() - 0.75).abs() < 1e-12);
        assert!(giou_loss(&BBox::new(0.0, 0.0, 0.0, 1.0), &gt).is_err());
    }

    proptest! {
        #[test]
        fn giou_symmetric_bounded_and_matches_tensor_route(
            a in (0f64..1.0, 0f64..1.0, 0.01f64..0.5, 0.01f64..0.5),
            b in (0f64..1.0, 0f64..1.0, 0.01f64..0.5, 0.01f64..0.5),
        ) {
            let pa = BBox::new(a.0, a.1, a.2, a.3);
            let pb = BBox::new(b.0, b.1, b.2, b.3);
            let ab = giou_loss(&pa, &pb).unwrap();
            prop_assert!((ab - giou_loss(&pb, &pa).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&ab));
            let to_t = |x: &BBox| {
                let (cx, cy) = x.center();
                Tensor::new(&[[cx, cy, x.w, x.h]], &Device::Cpu).unwrap()
            };
            let t = giou_loss_tensor(&to_t(&pa), &to_t(&pb)).unwrap().to_scalar::<f64>().unwrap();
            prop_assert!((t - ab).abs() < 1e-9);
        }
    }

    #[test]
    fn breakdown_is_linear_combination() {
        let b = LossBreakdown::new(1.0, 0.5, 0.2, 2.0, 5.0);
        assert!((b.total - 3.0).abs() < 1e-12);
        let b = LossBreakdown::new(0.7, 0.5, 0.2, 0.0, 0.0);
        assert_eq!(b.total, 0.7);
    }

    fn perfect_head(gt: &BBox, grid: usize) -> HeadOutput {
        let (col, row) = center_cell(gt, grid).unwrap();
        let mut cls = vec![0.0; grid * grid];
        cls[row * grid + col] = 1.0;
        let (cx, cy) = gt.center();
        let n = grid as f64;
        let offset = [vec![cx * n - col as f64; grid * grid], vec![cy * n - row as f64; grid * grid]].concat();
        let size = [vec![gt.w; grid * grid], vec![gt.h; grid * grid]].concat();
        HeadOutput {
            cls: Tensor::from_vec(cls, (1, 1, grid, grid), &Device::Cpu).unwrap(),
            offset: Tensor::from_vec(offset, (1, 2, grid, grid), &Device::Cpu).unwrap(),
            size: Tensor::from_vec(size, (1, 2, grid, grid), &Device::Cpu).unwrap(),
        }
    }

    #[test]
    fn perfect_prediction_total_near_zero() {
        let gt = BBox::from_center(0.41, 0.62, 0.25, 0.3);
        let terms = total_loss(&perfect_head(&gt, 8), &[gt], 2.0, 5.0).unwrap();
        assert!(terms.breakdown.total < 1e-6, "{:?}", terms.breakdown);
        let t = terms.total.to_scalar::<f64>().unwrap();
        assert!((t - terms.breakdown.total).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_leave_classification_only() {
        let gt = BBox::from_center(0.41, 0.62, 0.25, 0.3);
        let mut head = perfect_head(&gt, 8);
        head.size = (head.size * 0.5).unwrap();
        head.cls = (head.cls * 0.5).unwrap();
        let terms = total_loss(&head, &[gt], 0.0, 0.0).unwrap();
        assert_eq!(terms.breakdown.total, terms.breakdown.l_cls);
        assert!(terms.breakdown.l_iou > 0.0);
    }

    #[test]
    fn ground_truth_outside_crop_is_rejected() {
        let gt = BBox::from_center(0.5, 0.5, 0.2, 0.2);
        let head = perfect_head(&gt, 8);
        let outside = BBox::from_center(1.3, 0.5, 0.2, 0.2);
        assert!(matches!(total_loss(&head, &[outside], 2.0, 5.0), Err(CfbtError::Input(_))));
    }
}
