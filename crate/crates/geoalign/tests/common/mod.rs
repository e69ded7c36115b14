//! Independent oracles shared by the integration suites: naive double-loop
//! loss implementations and a dense RoIAlign reference. Everything here is
//! deliberately written without the tape, so it cannot share a code path
//! with the implementation it checks.

#![allow(dead_code)]

use geoalign::autograd::Tensor;

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap_or(&1);
    t.data().chunks(d).map(|c| c.to_vec()).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    v.iter().map(|x| x / n).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    unit(a).iter().zip(unit(b)).map(|(x, y)| x * y).sum()
}

/// Symmetric InfoNCE, direct double loop, no log-sum-exp tricks.
pub fn naive_info_nce(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut denom_ab = 0.0;
        let mut denom_ba = 0.0;
        for j in 0..n {
            denom_ab += (cosine(&a[i], &b[j]) / tau).exp();
            denom_ba += (cosine(&b[i], &a[j]) / tau).exp();
        }
        let pos = (cosine(&a[i], &b[i]) / tau).exp();
        total += (pos / denom_ab).ln() + (pos / denom_ba).ln();
    }
    -total / (2.0 * n as f64)
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Region-phrase alignment with optional duplicate-target masking: rows
/// whose target embedding is bitwise identical to the query's own target
/// are dropped from the denominator (except the diagonal).
pub fn naive_rpa(v_r: &[Vec<f64>], t_r: &[Vec<f64>], tau: f64, mask_duplicates: bool) -> f64 {
    let k = v_r.len();
    if k == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut denom_vt = 0.0;
        let mut denom_tv = 0.0;
        for j in 0..k {
            let masked = mask_duplicates && j != i && same_bits(&t_r[j], &t_r[i]);
            if !masked {
                denom_vt += (cosine(&v_r[i], &t_r[j]) / tau).exp();
                denom_tv += (cosine(&t_r[i], &v_r[j]) / tau).exp();
            }
        }
        let pos = (cosine(&v_r[i], &t_r[i]) / tau).exp();
        total += (pos / denom_vt).ln() + (pos / denom_tv).ln();
    }
    -total / (2.0 * k as f64)
}

/// Hard-negative alignment: per-region softmax over that region's own
/// candidates, positive at slot 0.
pub fn naive_hna(v_r: &[Vec<f64>], candidates: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let k = v_r.len();
    if k == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut denom = 0.0;
        for cand in &candidates[i] {
            denom += (cosine(&v_r[i], cand) / tau).exp();
        }
        let pos = (cosine(&v_r[i], &candidates[i][0]) / tau).exp();
        total += (pos / denom).ln();
    }
    -total / k as f64
}

pub fn naive_vic(v_r: &[Vec<f64>], v_crop: &[Vec<f64>]) -> f64 {
    let k = v_r.len();
    if k == 0 {
        return 0.0;
    }
    v_r.iter()
        .zip(v_crop)
        .map(|(a, b)| 1.0 - cosine(a, b))
        .sum::<f64>()
        / k as f64
}

pub fn naive_htc(v_g: &[Vec<f64>], t_b: &[Vec<f64>], t_d: &[Vec<f64>], tau: f64) -> f64 {
    0.5 * (naive_info_nce(v_g, t_b, tau) + naive_info_nce(v_g, t_d, tau))
}

/// Unpack a `[K, Q, d]` tensor into per-region candidate lists.
pub fn candidates_of(t_neg: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (k, q, d) = (t_neg.shape()[0], t_neg.shape()[1], t_neg.shape()[2]);
    (0..k)
        .map(|r| {
            (0..q)
                .map(|j| t_neg.data()[(r * q + j) * d..(r * q + j + 1) * d].to_vec())
                .collect()
        })
        .collect()
}

// ── dense RoIAlign reference ────────────────────────────────────────────

/// Bilinear lookup written independently of the tape op.
pub fn oracle_bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.max(0.0).min((h - 1) as f64);
    let x = x.max(0.0).min((w - 1) as f64);
    let y0 = y as usize;
    let x0 = x as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    plane[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
        + plane[y0 * w + x1] * (1.0 - fy) * fx
        + plane[y1 * w + x0] * fy * (1.0 - fx)
        + plane[y1 * w + x1] * fy * fx
}

/// Dense reference: upsample the box region `up`× per bin axis bilinearly
/// and average the pixels inside each bin.
pub fn oracle_roi_dense(
    map: &Tensor,
    box_: &geoalign::region::BBox,
    bins: (usize, usize),
    up: usize,
) -> Vec<f64> {
    let (d, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let (by, bx) = bins;
    let rows = by * up;
    let cols = bx * up;
    let box_h = (box_.y1 - box_.y0) * h as f64;
    let box_w = (box_.x1 - box_.x0) * w as f64;
    let mut acc = vec![0.0; d * by * bx];
    for r in 0..rows {
        let y = box_.y0 * h as f64 - 0.5 + (r as f64 + 0.5) * box_h / rows as f64;
        for c in 0..cols {
            let x = box_.x0 * w as f64 - 0.5 + (c as f64 + 0.5) * box_w / cols as f64;
            let bin = (r / up) * bx + c / up;
            for ch in 0..d {
                acc[ch * by * bx + bin] +=
                    oracle_bilinear(&map.data()[ch * h * w..(ch + 1) * h * w], h, w, y, x);
            }
        }
    }
    let norm = (up * up) as f64;
    acc.iter_mut().for_each(|v| *v /= norm);
    acc
}

/// A valid random box for a map of the given extent.
pub fn random_box(rng: &mut impl rand::Rng) -> geoalign::region::BBox {
    loop {
        let x0 = rng.gen_range(0.0..0.8);
        let y0 = rng.gen_range(0.0..0.8);
        let x1 = rng.gen_range(x0 + 0.05..(x0 + 0.9f64).min(1.0));
        let y1 = rng.gen_range(y0 + 0.05..(y0 + 0.9f64).min(1.0));
        let b = geoalign::region::BBox { x0, y0, x1, y1 };
        if b.validate(geoalign::region::DEFAULT_MIN_AREA).is_ok() {
            return b;
        }
    }
}
