//! Axis-aligned boxes, IoU and generalized IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corner-form box. Coordinates are normalized to the image unless stated otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Center-form box `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXyxy {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxXyxy { x1, y1, x2, y2 }
    }

    /// Rejects non-finite coordinates and negative extents.
    pub fn checked(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoxXyxy { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) {
            return Err(Error::arg(format!("non-finite box {self:?}")));
        }
        if self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(Error::arg(format!("negative-area box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn to_cxcywh(&self) -> BoxCxcywh {
        BoxCxcywh {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.width(),
            h: self.height(),
        }
    }

    /// Mirror across the vertical center line of a unit-normalized image.
    pub fn hflip(&self) -> Self {
        BoxXyxy { x1: 1.0 - self.x2, y1: self.y1, x2: 1.0 - self.x1, y2: self.y2 }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        BoxXyxy { x1: self.x1 * sx, y1: self.y1 * sy, x2: self.x2 * sx, y2: self.y2 * sy }
    }

    pub fn clamp_unit(&self) -> Self {
        BoxXyxy {
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
            x2: self.x2.clamp(0.0, 1.0),
            y2: self.y2.clamp(0.0, 1.0),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl BoxCxcywh {
    pub fn to_xyxy(&self) -> BoxXyxy {
        BoxXyxy {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

pub(crate) fn cxcywh_row(r: &[f64]) -> BoxCxcywh {
    BoxCxcywh { cx: r[0], cy: r[1], w: r[2], h: r[3] }
}

fn intersection(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

/// Intersection over union. Two zero-area boxes give 0.
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU: `IoU - |hull \ union| / |hull|`, in `[-1, 1]`.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

pub fn checked_iou(a: &BoxXyxy, b: &BoxXyxy) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou(a, b))
}

pub fn checked_giou(a: &BoxXyxy, b: &BoxXyxy) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(giou(a, b))
}

/// Gradient of `giou(pred, target)` with respect to the cxcywh coordinates of
/// `pred`. At ties in min/max the two one-sided derivatives are averaged.
/// Weight of the prediction in `max(a, b)` where `a` is the prediction
/// coordinate: 1 if it wins, 0 if it loses, 1/2 on a tie.
fn share(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a < b {
        0.0
    } else {
        0.5
    }
}

pub(crate) fn giou_grad_cxcywh(pred: &[f64], target: &[f64]) -> [f64; 4] {
    let p = cxcywh_row(pred).to_xyxy();
    let t = cxcywh_row(target).to_xyxy();

    let (pw, ph) = (p.x2 - p.x1, p.y2 - p.y1);
    let area_p = pw * ph;
    let area_t = t.area();

    let iw_raw = p.x2.min(t.x2) - p.x1.max(t.x1);
    let ih_raw = p.y2.min(t.y2) - p.y1.max(t.y1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    let cw = p.x2.max(t.x2) - p.x1.min(t.x1);
    let ch = p.y2.max(t.y2) - p.y1.min(t.y1);
    let hull = cw * ch;
    if union <= 0.0 || hull <= 0.0 {
        return [0.0; 4];
    }

    // Partials w.r.t. (x1, y1, x2, y2) of the prediction.
    let d_area = [-ph, -pw, ph, pw];
    let mut d_inter = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        d_inter[0] = -ih * share(p.x1, t.x1);
        d_inter[1] = -iw * share(p.y1, t.y1);
        d_inter[2] = ih * share(t.x2, p.x2);
        d_inter[3] = iw * share(t.y2, p.y2);
    }
    let d_hull = [
        -ch * share(t.x1, p.x1),
        -cw * share(t.y1, p.y1),
        ch * share(p.x2, t.x2),
        cw * share(p.y2, t.y2),
    ];

    let mut d = [0.0; 4];
    for i in 0..4 {
        let du = d_area[i] - d_inter[i];
        d[i] = d_inter[i] / union - inter * du / (union * union) + du / hull - union * d_hull[i] / (hull * hull);
    }
    // x1 = cx - w/2, x2 = cx + w/2 (same for y).
    [d[0] + d[2], d[1] + d[3], 0.5 * (d[2] - d[0]), 0.5 * (d[3] - d[1])]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_boxes() {
        let b = BoxXyxy::new(0.1, 0.2, 0.5, 0.9);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(giou(&b, &b), 1.0);
    }

    #[test]
    fn disjoint_far_apart() {
        let a = BoxXyxy::new(0.0, 0.0, 0.1, 0.1);
        let b = BoxXyxy::new(0.8, 0.8, 0.9, 0.9);
        assert_eq!(iou(&a, &b), 0.0);
        assert!(giou(&a, &b) < 0.0);
    }

    #[test]
    fn half_shifted_unit_squares_give_one_third() {
        let a = BoxXyxy::new(0.0, 0.0, 1.0, 1.0);
        let b = BoxXyxy::new(0.5, 0.0, 1.5, 1.0);
        // overlap 0.5, union 1.5
        assert!((iou(&a, &b) - 0.5 / 1.5).abs() < 1e-12);
        // hull == union here
        assert!((giou(&a, &b) - iou(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn negative_area_rejected() {
        assert!(BoxXyxy::checked(0.5, 0.0, 0.2, 1.0).is_err());
        let bad = BoxXyxy::new(0.5, 0.5, 0.4, 0.6);
        assert!(checked_iou(&bad, &BoxXyxy::new(0.0, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn flip_example() {
        let b = BoxXyxy::new(0.1, 0.2, 0.4, 0.6).hflip();
        assert!((b.x1 - 0.6).abs() < 1e-12 && (b.x2 - 0.9).abs() < 1e-12);
        assert_eq!((b.y1, b.y2), (0.2, 0.6));
    }

    fn arb_box() -> impl Strategy<Value = BoxXyxy> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64)
            .prop_map(|(x, y, w, h)| BoxXyxy::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded_and_giou_below(a in arb_box(), b in arb_box()) {
            let i = iou(&a, &b);
            prop_assert!((i - iou(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&i));
            let g = giou(&a, &b);
            prop_assert!(g <= i + 1e-12);
            prop_assert!((-1.0..=1.0).contains(&g));
        }

        #[test]
        fn giou_gradient_matches_finite_differences(a in arb_box(), b in arb_box()) {
            let p = a.to_cxcywh().to_array();
            let t = b.to_cxcywh().to_array();
            let grad = giou_grad_cxcywh(&p, &t);
            let f = |q: &[f64; 4]| giou(&cxcywh_row(q).to_xyxy(), &cxcywh_row(&t).to_xyxy());
            let h = 1e-7;
            for i in 0..4 {
                let mut qp = p;
                qp[i] += h;
                let mut qm = p;
                qm[i] -= h;
                // Skip kinks where a min/max switches inside the stencil.
                let fd = (f(&qp) - f(&qm)) / (2.0 * h);
                let one_sided = (f(&qp) - f(&p)) / h;
                let other = (f(&p) - f(&qm)) / h;
                if (one_sided - other).abs() > 1e-4 {
                    continue;
                }
                prop_assert!((fd - grad[i]).abs() < 1e-5 * (1.0 + fd.abs()), "coord {} fd {} analytic {}", i, fd, grad[i]);
            }
        }
    }
}
