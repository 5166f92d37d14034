//! Pre-norm transformer forward pass over `f64` activations.
//!
//! Every output element is accumulated sequentially in a fixed order, so
//! results do not depend on the rayon thread count.

use rayon::prelude::*;

use super::weights::{LayerNormParams, LayerWeights, Param, ViTWeights};
use crate::aspect::resize_image;
use crate::error::{Error, Result};
use crate::patchify::PatchSet;
use crate::tensor::ImageTensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-major activation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `x · W + b` with `W` stored `in × out`.
pub fn linear(x: &Matrix, w: &Param, b: &Param) -> Matrix {
    let (k, n) = (w.rows(), w.cols());
    debug_assert_eq!(x.cols, k);
    let mut out = Matrix::zeros(x.rows, n);
    out.data
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(r, row)| {
            let xr = x.row(r);
            for (j, o) in row.iter_mut().enumerate() {
                *o = f64::from(b.data[j]);
            }
            for (i, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wr = &w.data[i * n..(i + 1) * n];
                for (o, &wv) in row.iter_mut().zip(wr) {
                    *o += xv * f64::from(wv);
                }
            }
        });
    out
}

pub fn layer_norm(x: &Matrix, params: &LayerNormParams) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    let d = x.cols as f64;
    out.data
        .par_chunks_mut(x.cols)
        .enumerate()
        .for_each(|(r, row)| {
            let xr = x.row(r);
            let mean = xr.iter().sum::<f64>() / d;
            let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, o) in row.iter_mut().enumerate() {
                *o = (xr[j] - mean) * inv * f64::from(params.scale.data[j])
                    + f64::from(params.offset.data[j]);
            }
        });
    out
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-layer attention probabilities (`heads` matrices of `tokens × tokens`)
/// and the normalized token states after the final norm.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub attention: Vec<Vec<Matrix>>,
    pub final_tokens: Option<Matrix>,
}

fn self_attention(
    x: &Matrix,
    layer: &LayerWeights,
    heads: usize,
    trace: Option<&mut Vec<Matrix>>,
) -> Matrix {
    let q = linear(x, &layer.wq, &layer.bq);
    let k = linear(x, &layer.wk, &layer.bk);
    let v = linear(x, &layer.wv, &layer.bv);
    let t = x.rows;
    let dh = x.cols / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let per_head: Vec<(Matrix, Matrix)> = (0..heads)
        .into_par_iter()
        .map(|h| {
            let off = h * dh;
            let mut probs = Matrix::zeros(t, t);
            for i in 0..t {
                let qi = &q.row(i)[off..off + dh];
                let row = probs.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.row(j)[off..off + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(row);
            }
            let mut ctx = Matrix::zeros(t, dh);
            for i in 0..t {
                let pr = probs.row(i);
                let out = ctx.row_mut(i);
                for (j, &pj) in pr.iter().enumerate() {
                    let vj = &v.row(j)[off..off + dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
            (probs, ctx)
        })
        .collect();

    let mut concat = Matrix::zeros(t, x.cols);
    for (h, (_, ctx)) in per_head.iter().enumerate() {
        for i in 0..t {
            concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(ctx.row(i));
        }
    }
    if let Some(store) = trace {
        store.extend(per_head.into_iter().map(|(p, _)| p));
    }
    linear(&concat, &layer.wo, &layer.bo)
}

fn mlp(x: &Matrix, layer: &LayerWeights) -> Matrix {
    let mut h = linear(x, &layer.w1, &layer.b1);
    h.data.iter_mut().for_each(|v| *v = gelu(*v));
    linear(&h, &layer.w2, &layer.b2)
}

fn check_finite(x: &Matrix, context: impl FnOnce() -> String) -> Result<()> {
    if x.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context()))
    }
}

/// Patch tokens `flatten(patch) · W + b`, preceded by the class token.
pub fn embed_patches(patches: &PatchSet, weights: &ViTWeights) -> Result<Matrix> {
    let patch_dim = weights.config.patch_dim();
    if patches.patch_len() != patch_dim {
        return Err(Error::Shape {
            expected: format!("patches of {patch_dim} values"),
            actual: format!("{} values", patches.patch_len()),
        });
    }
    let dim = weights.config.dim;
    let flat = Matrix {
        rows: patches.data.len(),
        cols: patch_dim,
        data: patches.data.concat(),
    };
    let projected = linear(&flat, &weights.patch_proj, &weights.patch_bias);
    let mut tokens = Matrix::zeros(projected.rows + 1, dim);
    for (o, &c) in tokens.row_mut(0).iter_mut().zip(&weights.cls_token.data) {
        *o = f64::from(c);
    }
    tokens.data[dim..].copy_from_slice(&projected.data);
    Ok(tokens)
}

/// Positional table for a `rows × cols` grid. The base grid is resampled
/// bilinearly per channel; the class-token row passes through.
pub fn interpolate_pos_embeddings(weights: &ViTWeights, rows: usize, cols: usize) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("target grid must be at least 1x1".into()));
    }
    let cfg = &weights.config;
    let dim = cfg.dim;
    let table: Vec<f64> = weights.pos_table.data.iter().map(|&v| f64::from(v)).collect();
    let mut out = Matrix::zeros(rows * cols + 1, dim);
    out.row_mut(0).copy_from_slice(&table[..dim]);
    // Grid positions as an image with `dim` channels.
    let base = ImageTensor::new(cfg.base_rows, cfg.base_cols, dim, table[dim..].to_vec())?;
    let resized = resize_image(&base, rows, cols)?;
    out.data[dim..].copy_from_slice(resized.data());
    Ok(out)
}

/// Runs the encoder on `tokens + positions` and returns the final-norm
/// class-token state.
pub fn encoder_forward(
    tokens: &Matrix,
    positions: &Matrix,
    weights: &ViTWeights,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<Vec<f64>> {
    if tokens.rows != positions.rows || tokens.cols != positions.cols || tokens.cols != weights.config.dim {
        return Err(Error::Shape {
            expected: format!("{}x{} positions matching tokens", tokens.rows, weights.config.dim),
            actual: format!(
                "tokens {}x{}, positions {}x{}",
                tokens.rows, tokens.cols, positions.rows, positions.cols
            ),
        });
    }
    let mut x = tokens.clone();
    x.add_assign(positions);
    check_finite(&x, || "embedding".into())?;

    for (l, layer) in weights.layers.iter().enumerate() {
        let mut attn_trace = trace.as_ref().map(|_| Vec::new());
        let attn = self_attention(&layer_norm(&x, &layer.ln1), layer, weights.config.heads, attn_trace.as_mut());
        x.add_assign(&attn);
        check_finite(&x, || format!("layer {l} attention"))?;
        let m = mlp(&layer_norm(&x, &layer.ln2), layer);
        x.add_assign(&m);
        check_finite(&x, || format!("layer {l} mlp"))?;
        if let (Some(t), Some(a)) = (trace.as_deref_mut(), attn_trace) {
            t.attention.push(a);
        }
    }
    let out = layer_norm(&x, &weights.final_ln);
    check_finite(&out, || "final norm".into())?;
    let cls = out.row(0).to_vec();
    if let Some(t) = trace {
        t.final_tokens = Some(out);
    }
    Ok(cls)
}
