//! Forward-only vision transformer encoder with seeded (or imported)
//! weights. A bound [`EncoderModel`] fixes one input size and stride pair,
//! i.e. one aspect ratio.

mod forward;
mod weights;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use forward::{
    embed_patches, encoder_forward, gelu, interpolate_pos_embeddings, layer_norm, linear,
    softmax_in_place, ForwardTrace, Matrix, LAYER_NORM_EPS,
};
pub use weights::{init_weights, LayerNormParams, LayerWeights, Param, ViTWeights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::aspect::resize_image;
use crate::error::{Error, Result};
use crate::patchify::{extract_patches, plan_grid, StrideSpec};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub preset: String,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub channels: usize,
    pub base_rows: usize,
    pub base_cols: usize,
}

impl EncoderConfig {
    /// ViT-B/16: 12 layers, width 768, 12 heads, MLP ratio 4.
    pub fn vit_b_16() -> Self {
        Self {
            preset: "vit-b-16".into(),
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4.0,
            patch_size: 16,
            channels: 3,
            base_rows: 14,
            base_cols: 14,
        }
    }

    pub fn toy() -> Self {
        Self {
            preset: "toy".into(),
            depth: 2,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            ..Self::vit_b_16()
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "vit-b-16" => Ok(Self::vit_b_16()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::InvalidArgument(format!(
                "unknown encoder preset {other:?} (expected \"toy\" or \"vit-b-16\")"
            ))),
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.depth == 0 {
            return bad("encoder depth must be at least 1".into());
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return bad(format!("invalid mlp ratio {}", self.mlp_ratio));
        }
        if self.patch_size == 0 || self.channels == 0 || self.base_rows == 0 || self.base_cols == 0 {
            return bad("patch size, channels and base grid must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub source_model_ar: f64,
    pub image_id: String,
}

impl FeatureVector {
    pub fn new(image_id: impl Into<String>, source_model_ar: f64, values: Vec<f64>) -> Self {
        Self {
            values,
            source_model_ar,
            image_id: image_id.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

impl ViTWeights {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

/// An encoder bound to one input size and stride pair. Positional
/// embeddings for the bound grid are computed once.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    weights: Arc<ViTWeights>,
    stride: StrideSpec,
    target_height: usize,
    target_width: usize,
    model_ar: f64,
    positions: Arc<Matrix>,
}

impl EncoderModel {
    pub fn bind(
        weights: Arc<ViTWeights>,
        stride: StrideSpec,
        target_height: usize,
        target_width: usize,
        model_ar: f64,
    ) -> Result<Self> {
        if stride.p != weights.config.patch_size {
            return Err(Error::InvalidArgument(format!(
                "stride patch size {} differs from encoder patch size {}",
                stride.p, weights.config.patch_size
            )));
        }
        let grid = plan_grid(target_height, target_width, stride)?;
        let positions = interpolate_pos_embeddings(&weights, grid.rows, grid.cols)?;
        Ok(Self {
            weights,
            stride,
            target_height,
            target_width,
            model_ar,
            positions: Arc::new(positions),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &ViTWeights {
        &self.weights
    }

    pub fn stride(&self) -> StrideSpec {
        self.stride
    }

    pub fn target_size(&self) -> (usize, usize) {
        (self.target_height, self.target_width)
    }

    pub fn model_ar(&self) -> f64 {
        self.model_ar
    }

    /// Number of patch tokens the bound grid produces.
    pub fn patch_count(&self) -> usize {
        self.positions.rows - 1
    }

    /// Resize, patchify, embed, add positions and run the encoder.
    pub fn encode_image(&self, image: &ImageTensor, image_id: &str) -> Result<FeatureVector> {
        self.encode_traced(image, image_id, None)
    }

    pub fn encode_traced(
        &self,
        image: &ImageTensor,
        image_id: &str,
        trace: Option<&mut ForwardTrace>,
    ) -> Result<FeatureVector> {
        let resized = resize_image(image, self.target_height, self.target_width)?;
        let grid = plan_grid(self.target_height, self.target_width, self.stride)?;
        let patches = extract_patches(&resized, &grid)?;
        let tokens = embed_patches(&patches, &self.weights)?;
        let values = encoder_forward(&tokens, &self.positions, &self.weights, trace)?;
        Ok(FeatureVector::new(image_id, self.model_ar, values))
    }
}
