//! Planar (channel-major) image containers and batch conversion.

use attnage_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// `channels x height x width` values stored plane by plane.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Channels `start..start+len` as a new map.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<FeatureMap> {
        if start + len > self.channels {
            return Err(Error::Shape(format!(
                "channels {start}..{} out of {}",
                start + len,
                self.channels
            )));
        }
        let n = self.height * self.width;
        FeatureMap::new(
            len,
            self.height,
            self.width,
            self.data[start * n..(start + len) * n].to_vec(),
        )
    }

    pub fn same_spatial(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Three-channel image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(FeatureMap);

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let map = FeatureMap::new(3, height, width, data)?;
        Self::from_map(map)
    }

    pub fn from_map(map: FeatureMap) -> Result<Self> {
        if map.channels != 3 {
            return Err(Error::Shape(format!(
                "image needs 3 channels, got {}",
                map.channels
            )));
        }
        if let Some(v) = map.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!("image contains non-finite value {v}")));
        }
        Ok(ImageTensor(map))
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        ImageTensor(FeatureMap::filled(3, height, width, value))
    }

    pub fn map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn into_map(self) -> FeatureMap {
        self.0
    }
}

/// Stacks maps with identical geometry into an `(N, C, H, W)` tensor.
pub fn stack<T: Scalar>(maps: &[&FeatureMap]) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty batch".into()))?;
    let mut data = Vec::with_capacity(maps.len() * first.data.len());
    for m in maps {
        if m.channels != first.channels || !m.same_spatial(first) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{}x{} and {}x{}x{}",
                first.channels, first.height, first.width, m.channels, m.height, m.width
            )));
        }
        data.extend(m.data.iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Tensor::from_vec(
        data,
        &[maps.len(), first.channels, first.height, first.width],
    )?)
}

pub fn stack_images<T: Scalar>(images: &[&ImageTensor]) -> Result<Tensor<T>> {
    let maps: Vec<&FeatureMap> = images.iter().map(|i| &i.0).collect();
    stack(&maps)
}

/// Splits an `(N, C, H, W)` tensor back into per-sample maps.
pub fn unstack<T: Scalar>(t: &Tensor<T>) -> Result<Vec<FeatureMap>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected NCHW tensor, got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    t.data()
        .chunks(per)
        .map(|chunk| {
            FeatureMap::new(
                s[1],
                s[2],
                s[3],
                chunk.iter().map(|v| v.as_f64() as f32).collect(),
            )
        })
        .collect()
}
