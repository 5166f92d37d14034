//! Seeded encoder weights and the `VITW` weight file.
//!
//! File layout (little-endian):
//!
//! ```text
//! "VITW" | u32 version | u32 preset length | preset UTF-8
//! u32 depth | u32 dim | u32 heads | f64 mlp_ratio
//! u32 patch_size | u32 channels | u32 base_rows | u32 base_cols
//! u64 seed | u32 tensor count
//! per tensor: u32 rank | rank × u32 dims | f32 data
//! ```
//!
//! Tensor order: patch projection, patch bias, class token, positional
//! table, then per layer `ln1.scale, ln1.offset, wq, bq, wk, bk, wv, bv, wo,
//! bo, ln2.scale, ln2.offset, mlp.w1, mlp.b1, mlp.w2, mlp.b2`, then the final
//! norm scale and offset.

use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::seed;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"VITW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Row-major `f32` tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn ones(len: usize) -> Self {
        Self {
            shape: vec![len],
            data: vec![1.0; len],
        }
    }

    fn normal(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                (z * std) as f32
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub scale: Param,
    pub offset: Param,
}

impl LayerNormParams {
    fn identity(dim: usize) -> Self {
        Self {
            scale: Param::ones(dim),
            offset: Param::zeros(&[dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: LayerNormParams,
    pub wq: Param,
    pub bq: Param,
    pub wk: Param,
    pub bk: Param,
    pub wv: Param,
    pub bv: Param,
    pub wo: Param,
    pub bo: Param,
    pub ln2: LayerNormParams,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights {
    pub config: EncoderConfig,
    pub seed: u64,
    /// `patch_dim × dim`.
    pub patch_proj: Param,
    pub patch_bias: Param,
    pub cls_token: Param,
    /// `(base_rows * base_cols + 1) × dim`; row 0 belongs to the class token.
    pub pos_table: Param,
    pub layers: Vec<LayerWeights>,
    pub final_ln: LayerNormParams,
}

fn fan_in_normal(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Param {
    Param::normal(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

/// Matrices are `N(0, 1/fan_in)`; class token and positional table are
/// `N(0, 1/dim)`; biases start at zero and norms at identity.
pub fn init_weights(config: &EncoderConfig, seed: u64) -> Result<ViTWeights> {
    config.validate()?;
    let mut rng = seed::rng(seed);
    let dim = config.dim;
    let hidden = config.hidden_dim();
    let embed_std = 1.0 / (dim as f64).sqrt();

    let patch_proj = fan_in_normal(config.patch_dim(), dim, &mut rng);
    let cls_token = Param::normal(&[dim], embed_std, &mut rng);
    let pos_table = Param::normal(&[config.base_rows * config.base_cols + 1, dim], embed_std, &mut rng);
    let layers = (0..config.depth)
        .map(|_| LayerWeights {
            ln1: LayerNormParams::identity(dim),
            wq: fan_in_normal(dim, dim, &mut rng),
            bq: Param::zeros(&[dim]),
            wk: fan_in_normal(dim, dim, &mut rng),
            bk: Param::zeros(&[dim]),
            wv: fan_in_normal(dim, dim, &mut rng),
            bv: Param::zeros(&[dim]),
            wo: fan_in_normal(dim, dim, &mut rng),
            bo: Param::zeros(&[dim]),
            ln2: LayerNormParams::identity(dim),
            w1: fan_in_normal(dim, hidden, &mut rng),
            b1: Param::zeros(&[hidden]),
            w2: fan_in_normal(hidden, dim, &mut rng),
            b2: Param::zeros(&[dim]),
        })
        .collect();

    Ok(ViTWeights {
        config: config.clone(),
        seed,
        patch_proj,
        patch_bias: Param::zeros(&[dim]),
        cls_token,
        pos_table,
        layers,
        final_ln: LayerNormParams::identity(dim),
    })
}

impl ViTWeights {
    fn tensors(&self) -> Vec<&Param> {
        let mut out = vec![&self.patch_proj, &self.patch_bias, &self.cls_token, &self.pos_table];
        for l in &self.layers {
            out.extend([
                &l.ln1.scale, &l.ln1.offset, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo,
                &l.bo, &l.ln2.scale, &l.ln2.offset, &l.w1, &l.b1, &l.w2, &l.b2,
            ]);
        }
        out.extend([&self.final_ln.scale, &self.final_ln.offset]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![
            &mut self.patch_proj,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_table,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1.scale, &mut l.ln1.offset, &mut l.wq, &mut l.bq, &mut l.wk, &mut l.bk,
                &mut l.wv, &mut l.bv, &mut l.wo, &mut l.bo, &mut l.ln2.scale, &mut l.ln2.offset,
                &mut l.w1, &mut l.b1, &mut l.w2, &mut l.b2,
            ]);
        }
        out.extend([&mut self.final_ln.scale, &mut self.final_ln.offset]);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        w.write_all(&(c.preset.len() as u32).to_le_bytes())?;
        w.write_all(c.preset.as_bytes())?;
        for v in [c.depth, c.dim, c.heads] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&c.mlp_ratio.to_le_bytes())?;
        for v in [c.patch_size, c.channels, c.base_rows, c.base_cols] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        let tensors = self.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in tensors {
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a weight file and validates every tensor shape against the
    /// embedded configuration.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let ctx = "weight file";
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, ctx)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::format(ctx, "bad magic"));
        }
        let version = read_u32(r, ctx)?;
        if version != WEIGHTS_VERSION {
            return Err(Error::format(ctx, format!("unsupported version {version}")));
        }
        let name_len = read_u32(r, ctx)? as usize;
        if name_len > 1024 {
            return Err(Error::format(ctx, "preset name too long"));
        }
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name, ctx)?;
        let preset = String::from_utf8(name).map_err(|_| Error::format(ctx, "preset not UTF-8"))?;
        let depth = read_u32(r, ctx)? as usize;
        let dim = read_u32(r, ctx)? as usize;
        let heads = read_u32(r, ctx)? as usize;
        let mut f = [0u8; 8];
        read_exact(r, &mut f, ctx)?;
        let mlp_ratio = f64::from_le_bytes(f);
        let patch_size = read_u32(r, ctx)? as usize;
        let channels = read_u32(r, ctx)? as usize;
        let base_rows = read_u32(r, ctx)? as usize;
        let base_cols = read_u32(r, ctx)? as usize;
        let config = EncoderConfig {
            preset,
            depth,
            dim,
            heads,
            mlp_ratio,
            patch_size,
            channels,
            base_rows,
            base_cols,
        };
        config.validate()?;
        let mut seed_bytes = [0u8; 8];
        read_exact(r, &mut seed_bytes, ctx)?;
        let seed = u64::from_le_bytes(seed_bytes);

        // Zero-filled skeleton provides the expected shapes.
        let mut weights = skeleton(&config, seed);
        let count = read_u32(r, ctx)? as usize;
        let expected = weights.tensors().len();
        if count != expected {
            return Err(Error::Shape {
                expected: format!("{expected} tensors"),
                actual: format!("{count} tensors"),
            });
        }
        for (i, t) in weights.tensors_mut().into_iter().enumerate() {
            let rank = read_u32(r, ctx)? as usize;
            if rank > 4 {
                return Err(Error::format(ctx, format!("tensor {i} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| read_u32(r, ctx).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != t.shape {
                return Err(Error::Shape {
                    expected: format!("tensor {i} with shape {:?}", t.shape),
                    actual: format!("{shape:?}"),
                });
            }
            let mut buf = vec![0u8; t.data.len() * 4];
            read_exact(r, &mut buf, ctx)?;
            for (dst, chunk) in t.data.iter_mut().zip(buf.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            }
        }
        if !weights.is_finite() {
            return Err(Error::format(ctx, "non-finite weight value"));
        }
        Ok(weights)
    }
}

fn skeleton(config: &EncoderConfig, seed: u64) -> ViTWeights {
    let dim = config.dim;
    let hidden = config.hidden_dim();
    ViTWeights {
        config: config.clone(),
        seed,
        patch_proj: Param::zeros(&[config.patch_dim(), dim]),
        patch_bias: Param::zeros(&[dim]),
        cls_token: Param::zeros(&[dim]),
        pos_table: Param::zeros(&[config.base_rows * config.base_cols + 1, dim]),
        layers: (0..config.depth)
            .map(|_| LayerWeights {
                ln1: LayerNormParams::identity(dim),
                wq: Param::zeros(&[dim, dim]),
                bq: Param::zeros(&[dim]),
                wk: Param::zeros(&[dim, dim]),
                bk: Param::zeros(&[dim]),
                wv: Param::zeros(&[dim, dim]),
                bv: Param::zeros(&[dim]),
                wo: Param::zeros(&[dim, dim]),
                bo: Param::zeros(&[dim]),
                ln2: LayerNormParams::identity(dim),
                w1: Param::zeros(&[dim, hidden]),
                b1: Param::zeros(&[hidden]),
                w2: Param::zeros(&[hidden, dim]),
                b2: Param::zeros(&[dim]),
            })
            .collect(),
        final_ln: LayerNormParams::identity(dim),
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], ctx: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format(ctx, format!("truncated: {e}")))
}

fn read_u32(r: &mut impl Read, ctx: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, ctx)?;
    Ok(u32::from_le_bytes(b))
}
