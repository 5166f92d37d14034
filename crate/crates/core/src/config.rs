//! Pipeline configuration: a flat TOML file. Unknown keys are rejected and
//! every key has a default.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `corpus` | `"corpus"` | image root, relative to the config file |
//! | `manifest` | `<corpus>/manifest.csv` if present | labels file |
//! | `base_height` | 224 | resize height, multiple of 16 |
//! | `k` | 3 | aspect-ratio clusters |
//! | `aspect_ratios` | unset | manual ratios, bypasses clustering |
//! | `stride_long` / `stride_short` | 16 / 12 | strides along long/short side |
//! | `patch_size` | 16 | patch side |
//! | `mix_prob` | 0.5 | per-patch mixup probability |
//! | `flip_prob` | 0.5 | horizontal flip probability |
//! | `preset` | `"toy"` | `"toy"` or `"vit-b-16"` |
//! | `weights_file` | unset | `VITW` weights to load instead of seeded ones |
//! | `mode` | `"sum"` | `"sum"` or `"concat"` |
//! | `thresholds` | `[0.3, 0.6]` | fusion gap thresholds |
//! | `weights` | `[1.3, 1.0, 0.9]` | fusion weights |
//! | `normalize_output` | true | L2-normalize fused features |
//! | `metric` | `"euclidean"` | `"euclidean"` or `"cosine"` |
//! | `normalize_features` | true | L2-normalize before ranking |
//! | `junk_filter` | true | drop same vehicle + camera matches |
//! | `seed` | 0 | global seed |
//! | `bench_grid` | 196/324/576-patch settings | `[[H, W, s_h, s_w], ...]` |
//! | `bench_batch` / `bench_runs` | 4 / 5 | bench images and timed runs |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Metric};
use crate::fusion::{FusionConfig, FusionMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKey {
    #[serde(alias = "weighted_sum")]
    Sum,
    #[serde(alias = "weighted_concat")]
    Concat,
}

impl From<ModeKey> for FusionMode {
    fn from(m: ModeKey) -> Self {
        match m {
            ModeKey::Sum => FusionMode::WeightedSum,
            ModeKey::Concat => FusionMode::WeightedConcat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub manifest: Option<PathBuf>,
    pub base_height: u32,
    pub k: usize,
    pub aspect_ratios: Option<Vec<f64>>,
    pub stride_long: usize,
    pub stride_short: usize,
    pub patch_size: usize,
    pub mix_prob: f64,
    pub flip_prob: f64,
    pub preset: String,
    pub weights_file: Option<PathBuf>,
    pub mode: ModeKey,
    pub thresholds: [f64; 2],
    pub weights: [f64; 3],
    pub normalize_output: bool,
    pub metric: Metric,
    pub normalize_features: bool,
    pub junk_filter: bool,
    pub seed: u64,
    pub bench_grid: Vec<[usize; 4]>,
    pub bench_batch: usize,
    pub bench_runs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            manifest: None,
            base_height: 224,
            k: crate::aspect::DEFAULT_K,
            aspect_ratios: None,
            stride_long: 16,
            stride_short: 12,
            patch_size: 16,
            mix_prob: crate::mixup::DEFAULT_MIX_PROB,
            flip_prob: 0.5,
            preset: "toy".into(),
            weights_file: None,
            mode: ModeKey::Sum,
            thresholds: [0.3, 0.6],
            weights: [1.3, 1.0, 0.9],
            normalize_output: true,
            metric: Metric::Euclidean,
            normalize_features: true,
            junk_filter: true,
            seed: 0,
            bench_grid: vec![[224, 224, 16, 16], [224, 298, 12, 16], [384, 384, 16, 16]],
            bench_batch: 4,
            bench_runs: 5,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path.display().to_string(), message),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        if let Some(m) = self.manifest.as_mut() {
            fix(m);
        }
        if let Some(w) = self.weights_file.as_mut() {
            fix(w);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.base_height == 0 || self.base_height % 16 != 0 {
            return bad(format!("base_height {} is not a positive multiple of 16", self.base_height));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(1 <= self.stride_short && self.stride_short <= self.stride_long && self.stride_long <= self.patch_size) {
            return bad(format!(
                "strides must satisfy 1 <= stride_short ({}) <= stride_long ({}) <= patch_size ({})",
                self.stride_short, self.stride_long, self.patch_size
            ));
        }
        for (name, p) in [("mix_prob", self.mix_prob), ("flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if let Some(r) = &self.aspect_ratios {
            if r.is_empty() || r.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return bad("aspect_ratios must be a nonempty list of positive numbers".into());
            }
        }
        if self.bench_runs < 5 {
            return bad(format!("bench_runs {} is below the minimum of 5", self.bench_runs));
        }
        if self.bench_batch == 0 {
            return bad("bench_batch must be at least 1".into());
        }
        self.fusion().validate()
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            mode: self.mode.into(),
            thresholds: (self.thresholds[0], self.thresholds[1]),
            weights: (self.weights[0], self.weights[1], self.weights[2]),
            normalize_output: self.normalize_output,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            metric: self.metric,
            normalize: self.normalize_features,
            junk_filter: self.junk_filter,
        }
    }

    /// The configured manifest, or `manifest.csv` inside the corpus when it
    /// exists.
    pub fn manifest_for(&self, root: &Path) -> Option<PathBuf> {
        if root == self.corpus {
            if let Some(m) = &self.manifest {
                return Some(m.clone());
            }
        }
        let default = root.join("manifest.csv");
        default.exists().then_some(default)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = PipelineConfig::from_toml("mix_porb = 0.3").unwrap_err();
        assert!(err.to_string().contains("mix_porb"), "{err}");
    }

    #[test]
    fn parses_documented_keys() {
        let cfg = PipelineConfig::from_toml(
            r#"
            corpus = "data"
            k = 2
            aspect_ratios = [1.0, 0.8, 1.03]
            base_height = 384
            mode = "concat"
            metric = "cosine"
            junk_filter = false
            thresholds = [0.2, 0.5]
            seed = 99
            "#,
        )
        .unwrap();
        assert_eq!(cfg.k, 2);
        assert_eq!(cfg.fusion().mode, FusionMode::WeightedConcat);
        assert_eq!(cfg.eval().metric, Metric::Cosine);
        assert_eq!(cfg.fusion().thresholds, (0.2, 0.5));
        let round = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(PipelineConfig::from_toml("base_height = 100").is_err());
        assert!(PipelineConfig::from_toml("stride_short = 20").is_err());
        assert!(PipelineConfig::from_toml("mix_prob = 1.5").is_err());
        assert!(PipelineConfig::from_toml("thresholds = [0.6, 0.3]").is_err());
        assert!(PipelineConfig::from_toml("bench_runs = 2").is_err());
    }
}
