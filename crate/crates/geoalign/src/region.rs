//! Region views: ROI pooling from the encoder feature map and pixel-space
//! crop re-encoding.
//!
//! Both region views are differentiable w.r.t. their tensor inputs; box
//! coordinates are constants. Coordinate mapping uses the half-pixel-center
//! convention (`feature coordinate = normalized · extent − 0.5`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Tensor, TensorError};
use crate::encoders::{vision_forward, DualEncoderParams, VisionEncoderConfig};

/// Minimum normalized box area accepted by the region ops.
pub const DEFAULT_MIN_AREA: f64 = 1e-4;
/// Default ROI bin grid.
pub const DEFAULT_BINS: (usize, usize) = (2, 2);
/// Default bilinear samples per bin axis.
pub const DEFAULT_SAMPLES_PER_BIN: usize = 2;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, RegionError>;

/// Axis-aligned box in normalized xyxy coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [f64; 4]) -> Self {
        BBox { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        b.validate(DEFAULT_MIN_AREA)?;
        Ok(b)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn validate(&self, min_area: f64) -> Result<()> {
        let BBox { x0, y0, x1, y1 } = *self;
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(RegionError::InvalidBox("non-finite coordinate".into()));
        }
        if !(0.0..1.0).contains(&x0) || !(0.0..1.0).contains(&y0) || x1 > 1.0 || y1 > 1.0 {
            return Err(RegionError::InvalidBox(format!(
                "coordinates [{x0}, {y0}, {x1}, {y1}] outside [0, 1]"
            )));
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(RegionError::InvalidBox(format!(
                "ordering violated: [{x0}, {y0}, {x1}, {y1}]"
            )));
        }
        if self.area() < min_area {
            return Err(RegionError::InvalidBox(format!(
                "area {} below minimum {min_area}",
                self.area()
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// One pooled region embedding with its flattened-batch bookkeeping.
#[derive(Debug, Clone)]
pub struct RegionFeature {
    pub v_r: Tensor,
    /// Index of the source sample within its batch.
    pub sample_index: usize,
    /// Flattened region index k (sample-major, region order preserved).
    pub region_index: usize,
}

/// Regular interior sample points for one ROI bin grid, bin-major.
fn roi_sample_points(
    box_: &BBox,
    h: usize,
    w: usize,
    bins: (usize, usize),
    samples_per_bin: usize,
) -> Vec<(f64, f64)> {
    let (by, bx) = bins;
    let s = samples_per_bin;
    let y_start = box_.y0 * h as f64 - 0.5;
    let x_start = box_.x0 * w as f64 - 0.5;
    let bin_h = (box_.y1 - box_.y0) * h as f64 / by as f64;
    let bin_w = (box_.x1 - box_.x0) * w as f64 / bx as f64;
    let mut pts = Vec::with_capacity(by * bx * s * s);
    for iy in 0..by {
        for ix in 0..bx {
            for sy in 0..s {
                for sx in 0..s {
                    let y = y_start + bin_h * (iy as f64 + (sy as f64 + 0.5) / s as f64);
                    let x = x_start + bin_w * (ix as f64 + (sx as f64 + 0.5) / s as f64);
                    pts.push((y, x));
                }
            }
        }
    }
    pts
}

/// RoIAlign: map the box to continuous feature coordinates and average
/// `samples_per_bin²` bilinear samples per bin. Output `[d, by, bx]`.
pub fn roi_align(
    tape: &Tape,
    feature_map: &Tensor,
    box_: &BBox,
    bins: (usize, usize),
    samples_per_bin: usize,
) -> Result<Tensor> {
    box_.validate(DEFAULT_MIN_AREA)?;
    let (by, bx) = bins;
    if by == 0 || bx == 0 || samples_per_bin == 0 {
        return Err(RegionError::Tensor(TensorError::InvalidArg {
            op: "roi_align",
            msg: format!("bins {bins:?} and samples_per_bin {samples_per_bin} must be >= 1"),
        }));
    }
    let (d, h, w) = match feature_map.shape() {
        [d, h, w] => (*d, *h, *w),
        sh => {
            return Err(RegionError::Tensor(TensorError::InvalidShape {
                op: "roi_align",
                shape: sh.to_vec(),
                expected: "rank-3 [d, h, w] feature map".into(),
            }))
        }
    };
    let s2 = samples_per_bin * samples_per_bin;
    let pts = roi_sample_points(box_, h, w, bins, samples_per_bin);
    let samples = tape.bilinear_resample(feature_map, pts)?; // [d, by*bx*s2]
    let grouped = tape.reshape(&samples, vec![d * by * bx, s2])?;
    let pooled = tape.row_mean(&grouped)?;
    Ok(tape.reshape(&pooled, vec![d, by, bx])?)
}

/// Mean over the spatial bins of an ROI feature: `[d, by, bx] -> [d]`.
pub fn region_embed(tape: &Tape, roi_feat: &Tensor) -> Result<Tensor> {
    let (d, by, bx) = match roi_feat.shape() {
        [d, by, bx] => (*d, *by, *bx),
        sh => {
            return Err(RegionError::Tensor(TensorError::InvalidShape {
                op: "region_embed",
                shape: sh.to_vec(),
                expected: "rank-3 [d, by, bx] roi feature".into(),
            }))
        }
    };
    let flat = tape.reshape(roi_feat, vec![d, by * bx])?;
    Ok(tape.row_mean(&flat)?)
}

/// Bilinear resample of the pixel region under `box_` to `out × out`.
pub fn crop_pixels(tape: &Tape, image: &Tensor, box_: &BBox, out_size: usize) -> Result<Tensor> {
    box_.validate(DEFAULT_MIN_AREA)?;
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        sh => {
            return Err(RegionError::Tensor(TensorError::InvalidShape {
                op: "crop_pixels",
                shape: sh.to_vec(),
                expected: "rank-3 [c, h, w] image".into(),
            }))
        }
    };
    if out_size == 0 {
        return Err(RegionError::Tensor(TensorError::InvalidArg {
            op: "crop_pixels",
            msg: "out_size must be >= 1".into(),
        }));
    }
    let box_h = (box_.y1 - box_.y0) * h as f64;
    let box_w = (box_.x1 - box_.x0) * w as f64;
    let mut pts = Vec::with_capacity(out_size * out_size);
    for oy in 0..out_size {
        for ox in 0..out_size {
            let y = box_.y0 * h as f64 - 0.5 + (oy as f64 + 0.5) * box_h / out_size as f64;
            let x = box_.x0 * w as f64 - 0.5 + (ox as f64 + 0.5) * box_w / out_size as f64;
            pts.push((y, x));
        }
    }
    let samples = tape.bilinear_resample(image, pts)?; // [c, out*out]
    Ok(tape.reshape(&samples, vec![c, out_size, out_size])?)
}

/// Crop-view embedding: crop the pixel region, resize to the encoder's
/// native input, re-encode, and return the CLS embedding.
pub fn crop_view_embed(
    tape: &Tape,
    image: &Tensor,
    box_: &BBox,
    params: &DualEncoderParams,
    cfg: &VisionEncoderConfig,
) -> Result<Tensor> {
    let crop = crop_pixels(tape, image, box_, cfg.image_size)?;
    Ok(vision_forward(tape, &crop, params, cfg)?.v_g)
}

#[cfg(test)]
#[path = "region_tests.rs"]
mod tests;
