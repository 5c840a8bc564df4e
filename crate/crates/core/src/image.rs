//! Pixel buffers and image references.
//!
//! Pixels are held as interleaved RGB `f32` in `[0, 1]`; 8-bit only on disk.

use std::path::{Path, PathBuf};

use image::{imageops::FilterType, ImageBuffer, ImageReader, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Normal,
    Generated,
    Reference,
}

/// A pointer to an image file on disk plus the metadata every stage needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: PathBuf,
    pub category: String,
    pub role: ImageRole,
    pub width: u32,
    pub height: u32,
}

/// An RGB image with `f32` channels in `[0, 1]`, row-major, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("image dimensions must be positive"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::validation(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length checked at construction")
    }

    /// Bilinear resize.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length checked at construction");
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        Self {
            width,
            height,
            data: out.into_raw(),
        }
    }

    /// PNG bytes of the 8-bit quantized image.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Format(format!("png encode failed: {e}")))?;
        Ok(out.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

/// Decodes a PNG or JPEG into a 3-channel `[0, 1]` buffer; grayscale is
/// replicated across channels.
pub fn read_image(path: &Path) -> Result<Image> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(Image::from_rgb8(&decoded.to_rgb8()))
}

/// Reads an image and describes it with an [`ImageRef`].
pub fn read_image_ref(path: &Path, category: &str, role: ImageRole) -> Result<(ImageRef, Image)> {
    let img = read_image(path)?;
    let r = ImageRef {
        path: path.to_path_buf(),
        category: category.to_string(),
        role,
        width: img.width() as u32,
        height: img.height() as u32,
    };
    Ok((r, img))
}

pub fn write_image_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = img.encode_png()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Lists PNG/JPEG files directly under `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && is_image_path(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Normal images of a category: `<dir>/<category>/train/good` when present,
/// else the images directly under `<dir>/<category>`.
pub fn normal_images_for(normals_dir: &Path, category: &str) -> Result<Vec<PathBuf>> {
    for dir in [
        normals_dir.join(category).join("train").join("good"),
        normals_dir.join(category),
    ] {
        if dir.is_dir() {
            let imgs = list_images(&dir)?;
            if !imgs.is_empty() {
                return Ok(imgs);
            }
        }
    }
    Err(Error::validation(format!(
        "no normal images for category {category} under {}",
        normals_dir.display()
    )))
}

pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}
