//! Patch extraction with independent vertical and horizontal strides.
//!
//! Grids follow `rows = (H - p) / s_h + 1`, `cols = (W - p) / s_w + 1` with
//! floor division; pixels past the last full patch are not covered.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const DEFAULT_LONG_STRIDE: usize = 16;
pub const DEFAULT_SHORT_STRIDE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrideSpec {
    pub s_h: usize,
    pub s_w: usize,
    pub p: usize,
}

impl StrideSpec {
    pub fn new(s_h: usize, s_w: usize, p: usize) -> Result<Self> {
        if p == 0 || s_h == 0 || s_w == 0 || s_h > p || s_w > p {
            return Err(Error::InvalidArgument(format!(
                "strides must satisfy 1 <= stride <= p, got s_h={s_h} s_w={s_w} p={p}"
            )));
        }
        Ok(Self { s_h, s_w, p })
    }

    /// Non-overlapping grid (`stride == p`).
    pub fn square(p: usize) -> Self {
        Self { s_h: p, s_w: p, p }
    }
}

/// Smaller stride along the shorter image side.
pub fn choose_strides(ar: f64, long_stride: usize, short_stride: usize, p: usize) -> Result<StrideSpec> {
    if !(1 <= short_stride && short_stride <= long_stride && long_stride <= p) {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= short ({short_stride}) <= long ({long_stride}) <= p ({p})"
        )));
    }
    if !(ar.is_finite() && ar > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid aspect ratio {ar}")));
    }
    let (s_h, s_w) = if ar > 1.0 {
        (short_stride, long_stride)
    } else if ar < 1.0 {
        (long_stride, short_stride)
    } else {
        (long_stride, long_stride)
    };
    StrideSpec::new(s_h, s_w, p)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub n: usize,
    /// Top-left corners `(x, y)` in row-major order.
    #[serde(skip)]
    pub coords: Vec<(usize, usize)>,
    #[serde(flatten)]
    pub stride: StrideSpec,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
}

impl PatchGrid {
    /// Grid row and column of patch `i`.
    #[inline]
    pub fn cell(&self, i: usize) -> (usize, usize) {
        (i / self.cols, i % self.cols)
    }
}

pub fn plan_grid(height: usize, width: usize, stride: StrideSpec) -> Result<PatchGrid> {
    let p = stride.p;
    if height < p {
        return Err(Error::ImageTooSmall {
            dimension: "height",
            actual: height,
            patch: p,
        });
    }
    if width < p {
        return Err(Error::ImageTooSmall {
            dimension: "width",
            actual: width,
            patch: p,
        });
    }
    let rows = (height - p) / stride.s_h + 1;
    let cols = (width - p) / stride.s_w + 1;
    let coords = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (c * stride.s_w, r * stride.s_h)))
        .collect();
    Ok(PatchGrid {
        rows,
        cols,
        n: rows * cols,
        coords,
        stride,
        height,
        width,
    })
}

/// Patch pixel blocks, each `p * p * channels` values laid out `(u, v, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub grid: PatchGrid,
    pub channels: usize,
    pub data: Vec<Vec<f64>>,
}

impl PatchSet {
    pub fn patch_len(&self) -> usize {
        self.grid.stride.p * self.grid.stride.p * self.channels
    }
}

pub fn extract_patches(image: &ImageTensor, grid: &PatchGrid) -> Result<PatchSet> {
    if image.height() != grid.height || image.width() != grid.width {
        return Err(Error::Shape {
            expected: format!("{}x{} image", grid.height, grid.width),
            actual: format!("{}x{} image", image.height(), image.width()),
        });
    }
    let p = grid.stride.p;
    let ch = image.channels();
    let row_len = p * ch;
    let data = grid
        .coords
        .par_iter()
        .map(|&(x, y)| {
            let mut block = Vec::with_capacity(p * row_len);
            for u in 0..p {
                let start = image.index(y + u, x, 0);
                block.extend_from_slice(&image.data()[start..start + row_len]);
            }
            block
        })
        .collect();
    Ok(PatchSet {
        grid: grid.clone(),
        channels: ch,
        data,
    })
}

/// Recomposes an image: each covered pixel is the mean of every patch value
/// over it, uncovered pixels come from `background`.
pub fn reconstruct(patches: &PatchSet, background: &ImageTensor) -> Result<ImageTensor> {
    let grid = &patches.grid;
    if background.height() != grid.height
        || background.width() != grid.width
        || background.channels() != patches.channels
    {
        return Err(Error::Shape {
            expected: format!("{}x{}x{} background", grid.height, grid.width, patches.channels),
            actual: format!(
                "{}x{}x{}",
                background.height(),
                background.width(),
                background.channels()
            ),
        });
    }
    let p = grid.stride.p;
    let ch = patches.channels;
    let len = grid.height * grid.width * ch;
    let mut sum = vec![0.0; len];
    let mut lo = vec![f64::INFINITY; len];
    let mut hi = vec![f64::NEG_INFINITY; len];
    let mut count = vec![0u32; grid.height * grid.width];
    // Sequential accumulation keeps the summation order fixed.
    for (block, &(x, y)) in patches.data.iter().zip(&grid.coords) {
        for u in 0..p {
            for v in 0..p {
                let px = (y + u) * grid.width + x + v;
                count[px] += 1;
                for c in 0..ch {
                    let val = block[(u * p + v) * ch + c];
                    let k = px * ch + c;
                    sum[k] += val;
                    lo[k] = lo[k].min(val);
                    hi[k] = hi[k].max(val);
                }
            }
        }
    }
    let mut out = background.clone();
    for (px, &n) in count.iter().enumerate() {
        if n == 0 {
            continue;
        }
        for c in 0..ch {
            let k = px * ch + c;
            out.data_mut()[k] = if n == 1 {
                sum[k]
            } else {
                (sum[k] / f64::from(n)).clamp(lo[k], hi[k])
            };
        }
    }
    Ok(out)
}
