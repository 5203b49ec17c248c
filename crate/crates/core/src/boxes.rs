//! Axis-aligned boxes in center format, IoU, box deltas and greedy NMS.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Rectangle in image pixels, center format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_center: f64,
    pub y_center: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn new(x_center: f64, y_center: f64, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) || !x_center.is_finite() || !y_center.is_finite() {
            return Err(Error::InvalidBox(alloc::format!(
                "({x_center}, {y_center}, {width}, {height}) needs positive finite size"
            )));
        }
        Ok(BBox { x_center, y_center, width, height })
    }

    /// From `[x, y, w, h]` with `(x, y)` the top-left corner.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn x1(&self) -> f64 {
        self.x_center - self.width / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.y_center - self.height / 2.0
    }
    pub fn x2(&self) -> f64 {
        self.x_center + self.width / 2.0
    }
    pub fn y2(&self) -> f64 {
        self.y_center + self.height / 2.0
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Linear object scale, `sqrt(w·h)`.
    pub fn scale(&self) -> f64 {
        libm::sqrt(self.area())
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1(), self.y1(), self.width, self.height]
    }

    /// Intersection with `[0, w] × [0, h]`, or `None` if empty.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        let x1 = self.x1().clamp(0.0, w);
        let y1 = self.y1().clamp(0.0, h);
        let x2 = self.x2().clamp(0.0, w);
        let y2 = self.y2().clamp(0.0, h);
        BBox::from_corners(x1, y1, x2, y2).ok()
    }

    /// Clip that never fails: degenerate results collapse to a tiny box.
    pub fn clip_or_min(&self, w: f64, h: f64, min_size: f64) -> BBox {
        self.clip(w, h).filter(|b| b.width >= min_size && b.height >= min_size).unwrap_or_else(|| {
            let xc = self.x_center.clamp(min_size / 2.0, w - min_size / 2.0);
            let yc = self.y_center.clamp(min_size / 2.0, h - min_size / 2.0);
            BBox { x_center: xc, y_center: yc, width: min_size, height: min_size }
        })
    }
}

pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    iw * ih
}

/// Intersection over union in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Normalisation of regression targets per coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaStds(pub [f64; 4]);

impl DeltaStds {
    pub const UNIT: DeltaStds = DeltaStds([1.0, 1.0, 1.0, 1.0]);
}

/// Largest log-size delta accepted by [`decode_deltas`].
pub const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// `(dx, dy, dw, dh)` taking `src` onto `dst`; sizes in log scale.
pub fn encode_deltas(src: &BBox, dst: &BBox, stds: DeltaStds) -> [f64; 4] {
    let s = stds.0;
    [
        (dst.x_center - src.x_center) / src.width / s[0],
        (dst.y_center - src.y_center) / src.height / s[1],
        libm::log(dst.width / src.width) / s[2],
        libm::log(dst.height / src.height) / s[3],
    ]
}

pub fn decode_deltas(src: &BBox, d: [f64; 4], stds: DeltaStds) -> BBox {
    let s = stds.0;
    let dw = (d[2] * s[2]).clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA);
    let dh = (d[3] * s[3]).clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA);
    BBox {
        x_center: src.x_center + d[0] * s[0] * src.width,
        y_center: src.y_center + d[1] * s[1] * src.height,
        width: src.width * libm::exp(dw),
        height: src.height * libm::exp(dh),
    }
}

/// Greedy non-maximum suppression; returns kept indices by descending
/// score (ties by lower index).
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = alloc::vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}
