//! Bounding-box algebra: format conversion, IoU, GIoU, and RoI alignment
//! over feature grids. The f64 routines feed matching costs and evaluation;
//! the tensor routines are the differentiable path used by the box loss and
//! query generation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Boxes narrower than this are widened before RoI alignment so the bin
/// mapping never degenerates.
pub const MIN_BOX_SIZE: f64 = 1e-4;

/// Normalized center-format box: (cx, cy) in [0, 1], 0 < w, h <= 1.
/// A valid box may still extend past the frame edge; conversion to corner
/// format clamps on request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxFormat {
    Xyxy,
    Cxcywh,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&cx)
            && (0.0..=1.0).contains(&cy)
            && w > 0.0
            && w <= 1.0
            && h > 0.0
            && h <= 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "invalid box (cx={cx}, cy={cy}, w={w}, h={h}): centers must lie in [0,1], sizes in (0,1]"
            )));
        }
        Ok(BoundingBox { cx, cy, w, h })
    }

    /// Corner coordinates without clamping; may extend outside [0, 1].
    pub fn xyxy(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    /// Corner coordinates clamped to the frame.
    pub fn xyxy_clamped(&self) -> [f64; 4] {
        let [x1, y1, x2, y2] = self.xyxy();
        [x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0), y2.clamp(0.0, 1.0)]
    }

    pub fn from_xyxy(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::Config(format!(
                "degenerate corner box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        BoundingBox::new(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![4], vec![self.cx, self.cy, self.w, self.h])
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        iou_xyxy(&self.xyxy(), &other.xyxy())
    }

    pub fn giou(&self, other: &BoundingBox) -> f64 {
        giou_xyxy(&self.xyxy(), &other.xyxy())
    }
}

/// Convert a box to the requested coordinate format. Corner output is
/// clamped to [0, 1]; the round trip is lossless for boxes inside the frame.
pub fn box_convert(b: &BoundingBox, to: BoxFormat) -> [f64; 4] {
    match to {
        BoxFormat::Xyxy => b.xyxy_clamped(),
        BoxFormat::Cxcywh => [b.cx, b.cy, b.w, b.h],
    }
}

/// Intersection over union of two corner-format rectangles with positive
/// area. Works in any consistent unit; no clamping.
pub fn iou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    inter / union
}

/// Generalized IoU in (-1, 1]: IoU minus the normalized dead area of the
/// smallest enclosing rectangle. The box-regression loss is 1 - giou.
pub fn giou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let ew = a[2].max(b[2]) - a[0].min(b[0]);
    let eh = a[3].max(b[3]) - a[1].min(b[1]);
    let enclose = ew * eh;
    inter / union - (enclose - union) / enclose
}

fn elem(t: &Tensor, i: usize) -> Tensor {
    t.slice_rows(i, 1)
}

fn t_min(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(&a.sub(b).relu())
}

fn t_max(a: &Tensor, b: &Tensor) -> Tensor {
    a.add(&b.sub(a).relu())
}

/// Corner tensors (x1, y1, x2, y2) of a [4] cxcywh tensor.
fn corners_t(b: &Tensor) -> [Tensor; 4] {
    let half_w = elem(b, 2).scale(0.5);
    let half_h = elem(b, 3).scale(0.5);
    [
        elem(b, 0).sub(&half_w),
        elem(b, 1).sub(&half_h),
        elem(b, 0).add(&half_w),
        elem(b, 1).add(&half_h),
    ]
}

/// Differentiable GIoU of two [4] cxcywh tensors; mirrors `giou_xyxy`.
pub fn giou_t(a: &Tensor, b: &Tensor) -> Tensor {
    let [ax1, ay1, ax2, ay2] = corners_t(a);
    let [bx1, by1, bx2, by2] = corners_t(b);
    let iw = t_min(&ax2, &bx2).sub(&t_max(&ax1, &bx1)).relu();
    let ih = t_min(&ay2, &by2).sub(&t_max(&ay1, &by1)).relu();
    let inter = iw.mul(&ih);
    let area_a = elem(a, 2).mul(&elem(a, 3));
    let area_b = elem(b, 2).mul(&elem(b, 3));
    let union = area_a.add(&area_b).sub(&inter);
    let ew = t_max(&ax2, &bx2).sub(&t_min(&ax1, &bx1));
    let eh = t_max(&ay2, &by2).sub(&t_min(&ay1, &by1));
    let enclose = ew.mul(&eh);
    inter.div(&union).sub(&enclose.sub(&union).div(&enclose))
}

/// RoI-align a [h, w, c] feature grid under a box, one bilinear sample per
/// bin center, differentiable in both the grid and the box parameters.
pub fn roi_align(grid: &Tensor, roi: &Tensor, bins: usize) -> Tensor {
    grid.roi_align(roi, bins, MIN_BOX_SIZE)
}

/// Constant-box variant.
pub fn roi_align_box(grid: &Tensor, roi: &BoundingBox, bins: usize) -> Tensor {
    roi_align(grid, &roi.to_tensor(), bins)
}
