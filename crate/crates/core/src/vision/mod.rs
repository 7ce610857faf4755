//! Visual feature extraction and the saliency-guided region branch.
//!
//! A global backbone produces spatial maps `f_c` and their mean-pool `f_g`.
//! The channel-wise max of `|f_c|` gives a heat map; its largest
//! 4-connected component above the threshold selects a region that is cropped
//! from the image, resized, and fed to a second backbone for `f_l`. The two
//! pooled vectors are fused into `f_f`, and each of the three vectors drives
//! its own tag-classification head.

mod backbone;
mod fusion;
mod model;
mod region;

pub use backbone::{Backbone, BackboneConfig};
pub use fusion::{fuse, FusionOp, TagHeads};
pub use model::{BranchProbs, RegionSource, VisualConfig, VisualForward, VisualModel};
pub use region::{crop_resize, extract_region, extract_region_calls, heatmap, HeatMap, Region, RegionConfig};

use crate::tensor::{Result, Tensor, TensorError};
use region::resize_bilinear;

/// Single-channel image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(height: usize, width: usize, mut values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(TensorError::Shape {
                op: "image",
                lhs: vec![height, width],
                rhs: vec![values.len()],
            });
        }
        for v in &mut values {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("non-empty image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// `[H × W × 1]` constant tensor for the backbone.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, 1], self.values.clone()).expect("consistent dims")
    }

    /// 8-bit quantisation, as stored in PGM files.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    /// Bilinear resize; returns a copy when the size already matches.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        Self::new(height, width, resize_bilinear(&self.values, self.height, self.width, height, width))
    }
}
