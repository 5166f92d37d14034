//! Dynamic multi-model feature fusion.
//!
//! Each model's feature is scaled by a step-function weight of how far the
//! model's aspect ratio is from the query image's, then summed or
//! concatenated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::FeatureVector;

/// Absolute slack on the gap comparison so ratios such as `1.3 - 1.0`
/// (`0.30000000000000004` in binary) land on the inclusive side.
pub const GAP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    WeightedSum,
    WeightedConcat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// `(t1, t2)`: gaps up to `t1` get the first weight, up to `t2` the second.
    pub thresholds: (f64, f64),
    /// `(near, mid, far)` weights.
    pub weights: (f64, f64, f64),
    pub normalize_output: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::WeightedSum,
            thresholds: (0.3, 0.6),
            weights: (1.3, 1.0, 0.9),
            normalize_output: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let (t1, t2) = self.thresholds;
        let (a, b, c) = self.weights;
        if !(t1 < t2) || t1 < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "fusion thresholds must satisfy 0 <= t1 < t2, got ({t1}, {t2})"
            )));
        }
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return Err(Error::InvalidArgument("fusion weights must be positive".into()));
        }
        Ok(())
    }
}

/// Weight for an absolute aspect-ratio gap; both boundaries are inclusive.
pub fn weight_for_gap(gap: f64, config: &FusionConfig) -> f64 {
    let gap = gap.abs();
    if gap <= config.thresholds.0 + GAP_TOLERANCE {
        config.weights.0
    } else if gap <= config.thresholds.1 + GAP_TOLERANCE {
        config.weights.1
    } else {
        config.weights.2
    }
}

pub fn adaptive_weight(model_ar: f64, image_ar: f64, config: &FusionConfig) -> f64 {
    weight_for_gap(model_ar - image_ar, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedFeature {
    pub values: Vec<f64>,
    pub mode: FusionMode,
    /// `(model_ar, weight)` per contributing model, in fusion order.
    pub contributions: Vec<(f64, f64)>,
}

fn l2_normalize(values: &mut [f64]) {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Sorts by model aspect ratio so fusion output does not depend on input
/// order.
fn canonical(features: &[FeatureVector]) -> Vec<&FeatureVector> {
    let mut ordered: Vec<&FeatureVector> = features.iter().collect();
    ordered.sort_by(|a, b| {
        a.source_model_ar.total_cmp(&b.source_model_ar).then_with(|| {
            a.values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or_else(|| a.values.len().cmp(&b.values.len()))
        })
    });
    ordered
}

pub fn fuse_sum(features: &[FeatureVector], image_ar: f64, config: &FusionConfig) -> Result<FusedFeature> {
    fuse_sum_with(features, config, |f| adaptive_weight(f.source_model_ar, image_ar, config))
}

/// Weighted sum with caller-supplied weights.
pub fn fuse_sum_with(
    features: &[FeatureVector],
    config: &FusionConfig,
    weight: impl Fn(&FeatureVector) -> f64,
) -> Result<FusedFeature> {
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to fuse".into()))?;
    let dims: Vec<usize> = features.iter().map(FeatureVector::dim).collect();
    if dims.iter().any(|&d| d != first.dim()) {
        return Err(Error::DimensionMismatch(dims));
    }
    let mut values = vec![0.0; first.dim()];
    let mut contributions = Vec::with_capacity(features.len());
    for f in canonical(features) {
        let w = weight(f);
        for (o, &v) in values.iter_mut().zip(&f.values) {
            *o += w * v;
        }
        contributions.push((f.source_model_ar, w));
    }
    if config.normalize_output {
        l2_normalize(&mut values);
    }
    Ok(FusedFeature {
        values,
        mode: FusionMode::WeightedSum,
        contributions,
    })
}

pub fn fuse_concat(features: &[FeatureVector], image_ar: f64, config: &FusionConfig) -> Result<FusedFeature> {
    fuse_concat_with(features, config, |f| adaptive_weight(f.source_model_ar, image_ar, config))
}

pub fn fuse_concat_with(
    features: &[FeatureVector],
    config: &FusionConfig,
    weight: impl Fn(&FeatureVector) -> f64,
) -> Result<FusedFeature> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("nothing to fuse".into()));
    }
    let mut values = Vec::with_capacity(features.iter().map(FeatureVector::dim).sum());
    let mut contributions = Vec::with_capacity(features.len());
    for f in canonical(features) {
        let w = weight(f);
        values.extend(f.values.iter().map(|v| w * v));
        contributions.push((f.source_model_ar, w));
    }
    if config.normalize_output {
        l2_normalize(&mut values);
    }
    Ok(FusedFeature {
        values,
        mode: FusionMode::WeightedConcat,
        contributions,
    })
}

pub fn fuse(features: &[FeatureVector], image_ar: f64, config: &FusionConfig) -> Result<FusedFeature> {
    match config.mode {
        FusionMode::WeightedSum => fuse_sum(features, image_ar, config),
        FusionMode::WeightedConcat => fuse_concat(features, image_ar, config),
    }
}
