//! Box overlap measures, the box regression loss (smooth-L1 plus `1 - GIoU`)
//! with analytic gradients, and the thresholded detection scores.
//!
//! Gradients are taken with respect to the predicted box in `(x, y, w, h)`
//! form. At the kinks of `min`, `max` and `max(0, .)` a fixed one-sided
//! choice is made so results are deterministic; away from them the gradients
//! are exact.

use crate::domain::{BoundingBox, CoordSpace};
use crate::error::{Error, Result};

/// Corners plus the partial derivatives used by the GIoU gradient.
#[derive(Debug, Clone, Copy)]
struct Overlap {
    inter: f64,
    union: f64,
    hull: f64,
    /// d(inter) / d(pred x, y, w, h)
    d_inter: [f64; 4],
    /// d(hull) / d(pred x, y, w, h)
    d_hull: [f64; 4],
}

/// 1-D overlap of `[a0, a1]` and `[b0, b1]` with derivatives of the overlap
/// length and the enclosing length with respect to `a0` and `a1`.
fn axis(a0: f64, a1: f64, b0: f64, b1: f64) -> (f64, f64, f64, f64, f64, f64) {
    let lo = a0.max(b0);
    let hi = a1.min(b1);
    let inner = hi - lo;
    let (len, d_len_a0, d_len_a1) = if inner > 0.0 {
        let d0 = if a0 >= b0 { -1.0 } else { 0.0 };
        let d1 = if a1 <= b1 { 1.0 } else { 0.0 };
        (inner, d0, d1)
    } else {
        (0.0, 0.0, 0.0)
    };
    let hull = a1.max(b1) - a0.min(b0);
    let d_hull_a0 = if a0 <= b0 { -1.0 } else { 0.0 };
    let d_hull_a1 = if a1 >= b1 { 1.0 } else { 0.0 };
    (len, d_len_a0, d_len_a1, hull, d_hull_a0, d_hull_a1)
}

fn overlap(a: &BoundingBox, b: &BoundingBox) -> Result<Overlap> {
    if a.space != b.space {
        return Err(Error::MixedSpaces);
    }
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(Error::InvalidBox(format!(
                "degenerate box {:?}",
                bx.to_array()
            )));
        }
    }
    let (iw, diw_x0, diw_x1, cw, dcw_x0, dcw_x1) = axis(a.x, a.right(), b.x, b.right());
    let (ih, dih_y0, dih_y1, ch, dch_y0, dch_y1) = axis(a.y, a.bottom(), b.y, b.bottom());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull = cw * ch;
    // x = x0, w = x1 - x0 so d/dx = d/dx0 + d/dx1 and d/dw = d/dx1.
    let d_iw = [diw_x0 + diw_x1, diw_x1];
    let d_ih = [dih_y0 + dih_y1, dih_y1];
    let d_cw = [dcw_x0 + dcw_x1, dcw_x1];
    let d_ch = [dch_y0 + dch_y1, dch_y1];
    Ok(Overlap {
        inter,
        union,
        hull,
        d_inter: [d_iw[0] * ih, d_ih[0] * iw, d_iw[1] * ih, d_ih[1] * iw],
        d_hull: [d_cw[0] * ch, d_ch[0] * cw, d_cw[1] * ch, d_ch[1] * cw],
    })
}

/// Intersection over union, 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    let o = overlap(a, b)?;
    Ok(o.inter / o.union)
}

/// Generalized IoU: `IoU - (|C| - |A u B|) / |C|`, `C` the enclosing box.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    let o = overlap(a, b)?;
    Ok(o.inter / o.union - (o.hull - o.union) / o.hull)
}

/// Smooth-L1 summed over the four coordinates, with its gradient with
/// respect to `pred`.
pub fn smooth_l1(pred: &[f64; 4], target: &[f64; 4], beta: f64) -> (f64, [f64; 4]) {
    assert!(beta > 0.0, "smooth_l1 beta must be positive, got {beta}");
    let mut value = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d = pred[i] - target[i];
        if d.abs() <= beta {
            value += 0.5 * d * d / beta;
            grad[i] = d / beta;
        } else {
            value += d.abs() - 0.5 * beta;
            grad[i] = d.signum();
        }
    }
    (value, grad)
}

/// `1 - GIoU(pred, target)` and its gradient with respect to `pred`.
pub fn giou_loss(pred: &BoundingBox, target: &BoundingBox) -> Result<(f64, [f64; 4])> {
    let o = overlap(pred, target)?;
    let g = o.inter / o.union - (o.hull - o.union) / o.hull;
    // GIoU = I/U - 1 + U/C, with U = |A| + |B| - I.
    let d_area = [0.0, 0.0, pred.h, pred.w];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - o.d_inter[k];
        let d_giou = o.d_inter[k] / o.union - o.inter * d_union / (o.union * o.union)
            + d_union / o.hull
            - o.union * o.d_hull[k] / (o.hull * o.hull);
        grad[k] = -d_giou;
    }
    Ok((1.0 - g, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLossValue {
    pub total: f64,
    pub l1_term: f64,
    pub giou_term: f64,
    /// d total / d pred
    pub gradient: [f64; 4],
    pub l1_gradient: [f64; 4],
    pub giou_gradient: [f64; 4],
}

/// Relative weights of the two box loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLossWeights {
    pub l1: f64,
    pub giou: f64,
    pub beta: f64,
}

impl Default for BoxLossWeights {
    fn default() -> Self {
        BoxLossWeights {
            l1: 1.0,
            giou: 1.0,
            beta: 1.0,
        }
    }
}

/// Unit-weight box loss `smooth_l1 + (1 - GIoU)` on normalized boxes.
pub fn box_loss(pred: &BoundingBox, target: &BoundingBox) -> Result<BoxLossValue> {
    box_loss_weighted(pred, target, BoxLossWeights::default())
}

pub fn box_loss_weighted(
    pred: &BoundingBox,
    target: &BoundingBox,
    weights: BoxLossWeights,
) -> Result<BoxLossValue> {
    for b in [pred, target] {
        if b.space != CoordSpace::Normalized {
            return Err(Error::InvalidBox("box_loss expects normalized boxes".into()));
        }
    }
    let (giou_term, giou_gradient) = giou_loss(pred, target)?;
    let (l1_term, l1_gradient) = smooth_l1(&pred.to_array(), &target.to_array(), weights.beta);
    let mut gradient = [0.0; 4];
    for k in 0..4 {
        gradient[k] = weights.l1 * l1_gradient[k] + weights.giou * giou_gradient[k];
    }
    Ok(BoxLossValue {
        total: weights.l1 * l1_term + weights.giou * giou_term,
        l1_term,
        giou_term,
        gradient,
        l1_gradient,
        giou_gradient,
    })
}

/// Mean IoU over `(prediction, target)` pairs. A missing prediction scores 0.
pub fn mean_iou(pairs: &[(Option<BoundingBox>, BoundingBox)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("mean_iou"));
    }
    let ious = pair_ious(pairs)?;
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Fraction of pairs whose IoU is strictly greater than `tau`.
pub fn ap_at(pairs: &[(Option<BoundingBox>, BoundingBox)], tau: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("ap_at"));
    }
    let ious = pair_ious(pairs)?;
    Ok(fraction_above(&ious, tau))
}

fn pair_ious(pairs: &[(Option<BoundingBox>, BoundingBox)]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|(p, t)| match p {
            Some(p) => iou(p, t),
            None => Ok(0.0),
        })
        .collect()
}

fn fraction_above(ious: &[f64], tau: f64) -> f64 {
    ious.iter().filter(|&&v| v > tau).count() as f64 / ious.len() as f64
}

/// Thresholded detection accuracy and mean IoU, all as fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScores {
    pub miou: f64,
    pub ap10: f64,
    pub ap30: f64,
    pub ap50: f64,
}

impl DetectionScores {
    pub fn from_pairs(pairs: &[(Option<BoundingBox>, BoundingBox)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("DetectionScores"));
        }
        let ious = pair_ious(pairs)?;
        Ok(DetectionScores {
            miou: ious.iter().sum::<f64>() / ious.len() as f64,
            ap10: fraction_above(&ious, 0.1),
            ap30: fraction_above(&ious, 0.3),
            ap50: fraction_above(&ious, 0.5),
        })
    }
}
