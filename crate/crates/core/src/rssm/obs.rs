use std::collections::BTreeMap;

use crate::diffgraph::Tensor;
use crate::{Error, Result};

/// Square 8-bit image in HWC order; pixel value `p` represents `p / 255`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ImageObs {
    pub size: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl ImageObs {
    pub fn new(size: usize, channels: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), size * size * channels, "image buffer size");
        ImageObs {
            size,
            channels,
            pixels,
        }
    }

    pub fn blank(size: usize, channels: usize) -> Self {
        ImageObs::new(size, channels, vec![0; size * size * channels])
    }

    /// Pixel values in `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.size + x) * self.channels;
        &self.pixels[i..i + self.channels]
    }

    /// `size x size` window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<ImageObs> {
        if top + size > self.size || left + size > self.size {
            return Err(Error::Usage(format!(
                "crop {size}x{size} at ({top}, {left}) exceeds a {0}x{0} image",
                self.size
            )));
        }
        let c = self.channels;
        let mut out = Vec::with_capacity(size * size * c);
        for y in top..top + size {
            let start = (y * self.size + left) * c;
            out.extend_from_slice(&self.pixels[start..start + size * c]);
        }
        Ok(ImageObs::new(size, c, out))
    }
}

/// One modality's payload at one time step.
#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    Image(ImageObs),
    Vector(Vec<f64>),
}

impl Observation {
    /// Flat model input row.
    pub fn to_row(&self) -> Vec<f64> {
        match self {
            Observation::Image(img) => img.to_unit(),
            Observation::Vector(v) => v.clone(),
        }
    }

    pub fn as_image(&self) -> Option<&ImageObs> {
        match self {
            Observation::Image(i) => Some(i),
            Observation::Vector(_) => None,
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Observation::Vector(v) => Some(v),
            Observation::Image(_) => None,
        }
    }
}

/// All modalities observed at one time step, keyed by modality id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObservationBundle {
    pub items: BTreeMap<String, Observation>,
}

impl ObservationBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, id: &str, obs: Observation) -> Self {
        self.items.insert(id.to_string(), obs);
        self
    }

    pub fn get(&self, id: &str) -> Option<&Observation> {
        self.items.get(id)
    }
}

/// Stacks rows of equal width into a `[n, width]` tensor.
pub fn stack_rows(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows)
}
