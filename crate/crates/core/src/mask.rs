//! Score maps and binary masks.

use std::path::Path;

use image::{GrayImage, ImageReader};

use crate::error::{Error, Result};

/// Per-pixel non-negative anomaly evidence, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("score map dimensions must be positive"));
        }
        if values.len() != height * width {
            return Err(Error::validation(format!(
                "score map has {} values, expected {}x{}",
                values.len(),
                height,
                width
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::validation(format!(
                "score map values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// Min-max rescale into `[0, 1]`. A constant map becomes all zeros.
    pub fn min_max_normalized(&self) -> ScoreMap {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        let values = if range > 0.0 {
            self.values
                .iter()
                .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
                .collect()
        } else {
            vec![0.0; self.values.len()]
        };
        ScoreMap {
            height: self.height,
            width: self.width,
            values,
        }
    }

    /// `1[S > tau]`.
    pub fn threshold(&self, tau: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| u8::from(f64::from(v) > tau)).collect(),
        }
    }
}

/// A `{0, 1}` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("mask dimensions must be positive"));
        }
        if values.len() != height * width {
            return Err(Error::validation(format!(
                "mask has {} values, expected {}x{}",
                values.len(),
                height,
                width
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::validation("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(u8::from(f(y, x)));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_score_map(&self) -> ScoreMap {
        ScoreMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f32::from(v)).collect(),
        }
    }

    /// Intersection over union; two empty masks have IoU 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.values.iter().zip(&other.values) {
            inter += usize::from(a & b);
            union += usize::from(a | b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |y, x| {
            let sy = (y * self.height) / height;
            let sx = (x * self.width) / width;
            self.get(sy, sx)
        })
    }
}

/// Writes a single-channel 8-bit PNG: 0 normal, 255 anomalous.
pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let raw = mask.values.iter().map(|&v| v * 255).collect();
    let img = GrayImage::from_raw(mask.width as u32, mask.height as u32, raw)
        .expect("mask length checked at construction");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(other.to_string()),
        })
}

/// Reads a mask PNG; any non-zero pixel counts as anomalous.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let values = img.into_raw().into_iter().map(|v| u8::from(v > 0)).collect();
    BinaryMask::new(h as usize, w as usize, values)
}
