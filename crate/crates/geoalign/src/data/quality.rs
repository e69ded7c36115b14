//! Rule-based quality filtering: brightness variance, texture variance
//! (variance of the 3×3 Laplacian response), and region-area limits.

use serde::{Deserialize, Serialize};

use super::{synth_scene, RegionAnnotation, RgbImage, SceneConfig};

/// Region masks above this fraction of the image are rejected.
pub const MAX_REGION_AREA_FRACTION: f64 = 0.75;

/// Default variance floors, calibrated as the nearest-rank 1st percentile
/// over 100 reference scenes (`calibrate_thresholds(0)`), then rounded down.
pub const DEFAULT_BRIGHTNESS_MIN: f64 = 61.0;
pub const DEFAULT_TEXTURE_MIN: f64 = 870.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QualityThresholds {
    pub brightness_min: f64,
    pub texture_min: f64,
    pub max_area_fraction: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        QualityThresholds {
            brightness_min: DEFAULT_BRIGHTNESS_MIN,
            texture_min: DEFAULT_TEXTURE_MIN,
            max_area_fraction: MAX_REGION_AREA_FRACTION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Brightness,
    Texture,
    RegionArea,
    Io,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Reject,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityReport {
    pub id: String,
    pub brightness_variance: f64,
    pub texture_variance: f64,
    /// The decisive fraction: the larger of the biggest single region and
    /// the union of all regions.
    pub max_region_area_fraction: f64,
    pub union_region_area_fraction: f64,
    pub verdict: Verdict,
    pub reasons: Vec<RejectReason>,
}

impl QualityReport {
    /// Report for an image that could not be decoded at all.
    pub fn io_failure(id: &str) -> Self {
        QualityReport {
            id: id.to_owned(),
            brightness_variance: 0.0,
            texture_variance: 0.0,
            max_region_area_fraction: 0.0,
            union_region_area_fraction: 0.0,
            verdict: Verdict::Reject,
            reasons: vec![RejectReason::Io],
        }
    }
}

fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Variance of the 3×3 Laplacian response over interior pixels.
fn laplacian_variance(luma: &[f64], w: usize, h: usize) -> f64 {
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut responses = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = luma[y * w + x];
            let r = luma[y * w + x - 1] + luma[y * w + x + 1] + luma[(y - 1) * w + x]
                + luma[(y + 1) * w + x]
                - 4.0 * c;
            responses.push(r);
        }
    }
    variance(&responses)
}

fn area_fractions(regions: &[RegionAnnotation], w: usize, h: usize) -> (f64, f64) {
    let max_single = regions
        .iter()
        .map(|r| r.bbox.area())
        .fold(0.0, f64::max);
    if regions.is_empty() {
        return (0.0, 0.0);
    }
    let mut covered = 0usize;
    for y in 0..h {
        let cy = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let cx = (x as f64 + 0.5) / w as f64;
            if regions.iter().any(|r| r.bbox.contains(cx, cy)) {
                covered += 1;
            }
        }
    }
    (max_single, covered as f64 / (w * h) as f64)
}

/// Score one decoded image against the thresholds.
pub fn quality_filter(
    id: &str,
    image: &RgbImage,
    regions: &[RegionAnnotation],
    thresholds: &QualityThresholds,
) -> QualityReport {
    let luma = image.luma();
    let brightness_variance = variance(&luma);
    let texture_variance = laplacian_variance(&luma, image.width, image.height);
    let (max_single, union) = area_fractions(regions, image.width, image.height);
    let decisive = max_single.max(union);

    let mut reasons = Vec::new();
    if brightness_variance < thresholds.brightness_min {
        reasons.push(RejectReason::Brightness);
    }
    if texture_variance < thresholds.texture_min {
        reasons.push(RejectReason::Texture);
    }
    if decisive > thresholds.max_area_fraction {
        reasons.push(RejectReason::RegionArea);
    }
    QualityReport {
        id: id.to_owned(),
        brightness_variance,
        texture_variance,
        max_region_area_fraction: decisive,
        union_region_area_fraction: union,
        verdict: if reasons.is_empty() {
            Verdict::Pass
        } else {
            Verdict::Reject
        },
        reasons,
    }
}

/// Recompute the variance floors as the nearest-rank 1st percentile over
/// `n` freshly generated reference scenes.
pub fn calibrate_thresholds(seed: u64, n: usize) -> (f64, f64) {
    let cfg = SceneConfig::default();
    let mut brightness = Vec::with_capacity(n);
    let mut texture = Vec::with_capacity(n);
    for i in 0..n {
        let (record, image) = synth_scene(seed.wrapping_add(i as u64), &cfg)
            .expect("default scene config is valid");
        let report = quality_filter(&record.id, &image, &record.regions, &QualityThresholds {
            brightness_min: 0.0,
            texture_min: 0.0,
            max_area_fraction: 1.0,
        });
        brightness.push(report.brightness_variance);
        texture.push(report.texture_variance);
    }
    let percentile_1 = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((v.len() as f64 * 0.01).ceil() as usize).max(1);
        v[rank - 1]
    };
    (percentile_1(brightness), percentile_1(texture))
}
