//! Dense `f32` tensors, the MTEN raw file format, and multi-layer feature
//! stacks produced by extractor backends.
//!
//! MTEN layout: `b"MTEN"`, `u8` version (1), `u8` rank, `rank` x `u32` LE
//! dims, then row-major `f32` LE values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::ScoreMap;

pub const MTEN_MAGIC: &[u8; 4] = b"MTEN";
pub const MTEN_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::validation(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::validation("tensor rank exceeds 255"));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if let Some(v) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Format(format!("refusing to write non-finite value {v}")));
        }
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MTEN_MAGIC);
        out.push(MTEN_VERSION);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(mut bytes: &[u8]) -> Result<Self> {
        let mut header = [0u8; 6];
        bytes
            .read_exact(&mut header)
            .map_err(|_| Error::Format("file shorter than MTEN header".into()))?;
        if &header[..4] != MTEN_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &header[..4])));
        }
        if header[4] != MTEN_VERSION {
            return Err(Error::Format(format!("unsupported MTEN version {}", header[4])));
        }
        let rank = header[5] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            bytes
                .read_exact(&mut b)
                .map_err(|_| Error::Format("truncated MTEN dims".into()))?;
            dims.push(u32::from_le_bytes(b) as usize);
        }
        let n: usize = dims.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Format(format!(
                "MTEN payload has {} bytes, dims {dims:?} need {}",
                bytes.len(),
                n * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn write_tensor(tensor: &Tensor, path: &Path) -> Result<()> {
    let bytes = tensor.encode()?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}

pub fn write_score_map(map: &ScoreMap, path: &Path) -> Result<()> {
    let t = Tensor::new(vec![map.height(), map.width()], map.values().to_vec())?;
    write_tensor(&t, path)
}

pub fn read_score_map(path: &Path) -> Result<ScoreMap> {
    let t = read_tensor(path)?;
    match t.dims() {
        [h, w] => {
            let (h, w) = (*h, *w);
            ScoreMap::new(h, w, t.into_data())
        }
        other => Err(Error::Format(format!(
            "score map tensor must be rank 2, got dims {other:?}"
        ))),
    }
}

/// One spatial feature map: `channels x height x width`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayer {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub values: Vec<f32>,
}

impl FeatureLayer {
    pub fn new(
        id: impl Into<String>,
        channels: usize,
        height: usize,
        width: usize,
        stride: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        let id = id.into();
        if channels == 0 || height == 0 || width == 0 || stride == 0 {
            return Err(Error::validation(format!("feature layer {id} has a zero extent")));
        }
        if values.len() != channels * height * width {
            return Err(Error::validation(format!(
                "feature layer {id}: {} values for {channels}x{height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("feature layer {id} has non-finite values")));
        }
        Ok(Self {
            id,
            channels,
            height,
            width,
            stride,
            values,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    /// Checks that the layer grid covers an image of the given size to within
    /// one stride unit.
    pub fn check_covers(&self, image_height: usize, image_width: usize) -> Result<()> {
        let fits =
            |cells: usize, extent: usize| (cells * self.stride).abs_diff(extent) <= self.stride;
        if !fits(self.height, image_height) || !fits(self.width, image_width) {
            return Err(Error::validation(format!(
                "feature layer {} ({}x{} @ stride {}) does not cover a {}x{} image",
                self.id, self.height, self.width, self.stride, image_height, image_width
            )));
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.channels, self.height, self.width],
            data: self.values.clone(),
        }
    }

    pub fn from_tensor(id: impl Into<String>, stride: usize, t: Tensor) -> Result<Self> {
        match *t.dims() {
            [c, h, w] => Self::new(id, c, h, w, stride, t.into_data()),
            _ => Err(Error::Format(format!(
                "feature tensor must be rank 3, got {:?}",
                t.dims()
            ))),
        }
    }
}

/// Ordered feature layers from one extractor pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureStack {
    pub layers: Vec<FeatureLayer>,
}

impl FeatureStack {
    pub fn layer(&self, id: &str) -> Option<&FeatureLayer> {
        self.layers.iter().find(|l| l.id == id)
    }
}
