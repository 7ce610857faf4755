use serde::{Deserialize, Serialize};

use super::ImageTensor;
use crate::tensor::{ParamId, ParamStore, Result, SeededRng, Tensor, TensorError};

/// Strided 3×3 convolution stack with ReLU after every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            kernel: 3,
        }
    }
}

impl BackboneConfig {
    /// Side of the final spatial map.
    pub fn map_size(&self) -> usize {
        let pad = self.kernel / 2;
        self.strides
            .iter()
            .fold(self.image_size, |s, &st| (s + 2 * pad - self.kernel) / st + 1)
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("at least one stage")
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, config: BackboneConfig) -> Self {
        assert_eq!(config.channels.len(), config.strides.len());
        let k = config.kernel;
        let mut cin = 1;
        let mut stages = Vec::new();
        for (i, &cout) in config.channels.iter().enumerate() {
            let fan_in = k * k * cin;
            let w = store.add(format!("{name}.conv{i}.w"), rng.he(&[fan_in, cout], fan_in));
            let b = store.zeros(format!("{name}.conv{i}.b"), &[cout]);
            stages.push((w, b));
            cin = cout;
        }
        Self { config, stages }
    }

    pub fn first_kernel(&self) -> ParamId {
        self.stages[0].0
    }

    /// Returns the pre-pool spatial maps `f_c[S×S×C]` and their mean-pool
    /// `f_g[1×C]`.
    pub fn forward(&self, store: &ParamStore, image: &ImageTensor) -> Result<(Tensor, Tensor)> {
        let size = self.config.image_size;
        if image.height() != size || image.width() != size {
            return Err(TensorError::Shape {
                op: "backbone",
                lhs: vec![image.height(), image.width()],
                rhs: vec![size, size],
            });
        }
        let k = self.config.kernel;
        let mut x = image.to_tensor().add_scalar(-0.5)?;
        for (&(w, b), &stride) in self.stages.iter().zip(&self.config.strides) {
            x = x.conv2d(store.get(w), store.get(b), k, stride, k / 2)?.relu()?;
        }
        let (s, c) = (x.dims()[0], x.dims()[2]);
        let pooled = x.reshape(&[s * s, c])?.mean_rows()?.reshape(&[1, c])?;
        Ok((x, pooled))
    }
}
