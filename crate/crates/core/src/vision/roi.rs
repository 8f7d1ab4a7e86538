use log::debug;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

pub const MIN_ROI_AREA: usize = 64;

/// Half-open box `[top, bottom) x [left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Roi {
    pub fn full(img: &Image) -> Roi {
        Roi {
            top: 0,
            left: 0,
            bottom: img.height(),
            right: img.width(),
        }
    }

    pub fn height(&self) -> usize {
        self.bottom.saturating_sub(self.top)
    }

    pub fn width(&self) -> usize {
        self.right.saturating_sub(self.left)
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn validate(&self, img: &Image) -> Result<()> {
        if self.top >= self.bottom
            || self.left >= self.right
            || self.bottom > img.height()
            || self.right > img.width()
            || self.area() < MIN_ROI_AREA
        {
            return Err(Error::Invalid(format!(
                "invalid RoI {self:?} for {}x{} image",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    pub fn iou(&self, other: &Roi) -> f64 {
        let t = self.top.max(other.top);
        let l = self.left.max(other.left);
        let b = self.bottom.min(other.bottom);
        let r = self.right.min(other.right);
        let inter = if t < b && l < r { (b - t) * (r - l) } else { 0 };
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Sobel gradient magnitude of the grayscale image. Border pixels, which lack
/// a full 3x3 neighbourhood, get magnitude 0.
pub fn sobel_magnitude(img: &Image) -> Vec<f32> {
    let (h, w) = (img.height(), img.width());
    let g = img.grayscale();
    let at = |y: usize, x: usize| g[y * w + x];
    let mut out = vec![0.0f32; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Edge-based object box: pixels whose Sobel magnitude is strictly above the
/// `percentile` (0-100) of all magnitudes form the edge set; its bounding box
/// is grown by `margin` of its size on every side and clipped to the frame.
/// Falls back to the full frame when there are no edges or the box is smaller
/// than [`MIN_ROI_AREA`].
pub fn detect_roi(img: &Image, percentile: f64, margin: f64) -> Roi {
    let (h, w) = (img.height(), img.width());
    let mag = sobel_magnitude(img);
    let mut sorted = mag.clone();
    sorted.sort_by(f32::total_cmp);
    let p = percentile.clamp(0.0, 100.0) / 100.0;
    let threshold = sorted[((sorted.len() - 1) as f64 * p).floor() as usize];

    let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mag[y * w + x] > threshold {
                top = top.min(y);
                left = left.min(x);
                bottom = bottom.max(y + 1);
                right = right.max(x + 1);
            }
        }
    }
    if top == usize::MAX {
        debug!("no edges above the {percentile}th percentile; using the full frame");
        return Roi::full(img);
    }
    let my = ((bottom - top) as f64 * margin).round() as usize;
    let mx = ((right - left) as f64 * margin).round() as usize;
    let roi = Roi {
        top: top.saturating_sub(my),
        left: left.saturating_sub(mx),
        bottom: (bottom + my).min(h),
        right: (right + mx).min(w),
    };
    if roi.area() < MIN_ROI_AREA {
        return Roi::full(img);
    }
    roi
}
