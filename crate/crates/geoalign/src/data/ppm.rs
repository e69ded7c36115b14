//! Image bytes: binary PPM (P6) as the lossless canonical format, PGM (P5)
//! for heatmap output, PNG accepted on ingest and converted to canonical
//! PPM bytes before any digesting.

use std::fs;
use std::path::Path;

use super::DataError;
use crate::autograd::Tensor;

/// Plain 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Luma per pixel (ITU-R 601).
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// `[3, H, W]` tensor with pixel values mapped to `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                let px = self.get(x, y);
                for c in 0..3 {
                    data[c * h * w + y * w + x] = px[c] as f64 / 255.0 * 2.0 - 1.0;
                }
            }
        }
        Tensor::from_vec(vec![3, h, w], data).expect("image tensor shape")
    }
}

/// Canonical P6 bytes: fixed header layout, raw samples, maxval 255.
pub fn canonical_ppm_bytes(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), DataError> {
    fs::write(path, canonical_ppm_bytes(img)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// P5 grayscale, used for similarity heatmaps.
pub fn write_pgm(path: &Path, gray: &[u8], width: usize, height: usize) -> Result<(), DataError> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn bad_image(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Image {
        path: path.to_path_buf(),
        message: msg.into(),
    }
}

/// Parse binary PPM, tolerating comments and arbitrary whitespace in the
/// header. Only maxval 255 is accepted.
pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage, DataError> {
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(bad_image(path, "not a P6 ppm"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comment lines.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad_image(path, "truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| bad_image(path, "bad header"))?;
        *field = text
            .parse()
            .map_err(|_| bad_image(path, "bad header number"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad_image(path, "missing header terminator")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad_image(path, format!("unsupported maxval {maxval}")));
    }
    let need = width * height * 3;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad_image(path, "truncated pixel data"))?;
    Ok(RgbImage {
        width,
        height,
        data: data.to_vec(),
    })
}

/// Read an image file: P6 PPM natively, PNG via the decoder, anything else
/// is an error. The result is always an 8-bit RGB raster.
pub fn read_image(path: &Path) -> Result<RgbImage, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.starts_with(b"P6") {
        return parse_ppm(&bytes, path);
    }
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| bad_image(path, e.to_string()))?
            .into_rgb8();
        return Ok(RgbImage {
            width: decoded.width() as usize,
            height: decoded.height() as usize,
            data: decoded.into_raw(),
        });
    }
    Err(bad_image(path, "unsupported image format"))
}
