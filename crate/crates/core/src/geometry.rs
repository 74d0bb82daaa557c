//! Box and mask arithmetic: IoU, generalized IoU, dice, NMS, coordinate forms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("mask data length {got} does not match {height}x{width}")]
    BadLength { height: usize, width: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxForm {
    /// `(cx, cy, w, h)`
    Center,
    /// `(x0, y0, x1, y1)`
    Corner,
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub form: BoxForm,
    pub coords: [f64; 4],
}

impl BBox {
    pub fn corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        debug_assert!(x0 <= x1 && y0 <= y1, "corner box must be ordered");
        Self {
            form: BoxForm::Corner,
            coords: [x0, y0, x1, y1],
        }
    }

    pub fn center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        debug_assert!(w >= 0.0 && h >= 0.0, "center box needs nonnegative extent");
        Self {
            form: BoxForm::Center,
            coords: [cx, cy, w, h],
        }
    }

    pub fn convert(self, target: BoxForm) -> Self {
        let [a, b, c, d] = self.coords;
        match (self.form, target) {
            (BoxForm::Center, BoxForm::Corner) => Self::corners(a - c / 2.0, b - d / 2.0, a + c / 2.0, b + d / 2.0),
            (BoxForm::Corner, BoxForm::Center) => Self::center((a + c) / 2.0, (b + d) / 2.0, c - a, d - b),
            _ => self,
        }
    }

    /// `[x0, y0, x1, y1]`
    pub fn xyxy(self) -> [f64; 4] {
        self.convert(BoxForm::Corner).coords
    }

    /// `[cx, cy, w, h]`
    pub fn cxcywh(self) -> [f64; 4] {
        self.convert(BoxForm::Center).coords
    }

    pub fn area(self) -> f64 {
        let [x0, y0, x1, y1] = self.xyxy();
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    pub fn translate(self, dx: f64, dy: f64) -> Self {
        let mut c = self.coords;
        c[0] += dx;
        c[1] += dy;
        if self.form == BoxForm::Corner {
            c[2] += dx;
            c[3] += dy;
        }
        Self { form: self.form, coords: c }
    }
}

fn intersection_union(a: BBox, b: BBox) -> (f64, f64) {
    let [ax0, ay0, ax1, ay1] = a.xyxy();
    let [bx0, by0, bx1, by1] = b.xyxy();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

/// Intersection over union. Zero-area boxes score 0 against everything.
pub fn box_iou(a: BBox, b: BBox) -> f64 {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return 0.0;
    }
    let (inter, union) = intersection_union(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − (enclosure − union) / enclosure`.
pub fn giou(a: BBox, b: BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.xyxy();
    let [bx0, by0, bx1, by1] = b.xyxy();
    let enclosure = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    let iou = box_iou(a, b);
    if enclosure <= 0.0 {
        return iou;
    }
    let (_, union) = intersection_union(a, b);
    iou - (enclosure - union) / enclosure
}

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

/// Real-valued mask with entries in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, GeometryError> {
        if bits.len() != height * width {
            return Err(GeometryError::BadLength {
                height,
                width,
                got: bits.len(),
            });
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight corner-form box in normalized coordinates, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| {
            let (w, h) = (self.width as f64, self.height as f64);
            BBox::corners(x0 as f64 / w, y0 as f64 / h, (x1 + 1) as f64 / w, (y1 + 1) as f64 / h)
        })
    }

    /// Mirror about the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::empty(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, self.width - 1 - x, self.get(y, x));
            }
        }
        out
    }

    pub fn to_soft(&self) -> SoftMask {
        SoftMask {
            height: self.height,
            width: self.width,
            values: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Foreground threshold for binarizing soft masks.
pub const MASK_THRESHOLD: f32 = 0.5;

impl SoftMask {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self, GeometryError> {
        if values.len() != height * width {
            return Err(GeometryError::BadLength {
                height,
                width,
                got: values.len(),
            });
        }
        Ok(Self {
            height,
            width,
            values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn threshold(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.values.iter().map(|&v| v >= MASK_THRESHOLD).collect(),
        }
    }
}

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<(), GeometryError> {
    if a == b {
        Ok(())
    } else {
        Err(GeometryError::DimensionMismatch(a.0, a.1, b.0, b.1))
    }
}

/// `|a ∧ b| / |a ∨ b|`; two empty masks score 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, GeometryError> {
    same_dims((a.height, a.width), (b.height, b.width))?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Additive smoothing used by [`dice`].
pub const DICE_SMOOTH: f64 = 1.0;

/// Smoothed overlap coefficient `(2Σab + 1) / (Σa + Σb + 1)`.
pub fn dice(a: &SoftMask, b: &Mask) -> Result<f64, GeometryError> {
    same_dims((a.height, a.width), (b.height, b.width))?;
    let (mut ab, mut sa, mut sb) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &t) in a.values.iter().zip(&b.bits) {
        let t = if t { 1.0 } else { 0.0 };
        ab += p as f64 * t;
        sa += p as f64;
        sb += t;
    }
    Ok((2.0 * ab + DICE_SMOOTH) / (sa + sb + DICE_SMOOTH))
}

/// Greedy non-maximum suppression over boxes.
///
/// Returns kept indices in descending score order. Equal scores keep the lower
/// index first. A candidate is dropped when its IoU with any kept box exceeds
/// `iou_threshold`.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| box_iou(boxes[k], boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Anything NMS can rank and compare.
pub trait Scored {
    fn score(&self) -> f64;
    fn bbox(&self) -> BBox;
}

/// [`nms_indices`] over a list of scored items.
pub fn nms<T: Scored + Clone>(items: &[T], iou_threshold: f64) -> Vec<T> {
    let boxes: Vec<BBox> = items.iter().map(Scored::bbox).collect();
    let scores: Vec<f64> = items.iter().map(Scored::score).collect();
    nms_indices(&boxes, &scores, iou_threshold)
        .into_iter()
        .map(|i| items[i].clone())
        .collect()
}
