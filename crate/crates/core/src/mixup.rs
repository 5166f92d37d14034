//! Intra-image patch mixup guided by spatial attention scores.
//!
//! Each participating patch `i` is blended with a partner `perm[i]` drawn
//! from a random permutation of the same image's patches, using the weight
//! `lambda[i] = S[i][perm[i]]` where `S = 1 / (1 + p * D)` and `D` holds the
//! Euclidean distances between patch grid cells. Nearby partners contribute
//! more than distant ones.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::patchify::{extract_patches, plan_grid, reconstruct, PatchGrid, PatchSet, StrideSpec};
use crate::seed;
use crate::tensor::ImageTensor;

pub const DEFAULT_MIX_PROB: f64 = 0.5;

/// Dense row-major `n × n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Distances between patch grid cells, in grid units.
pub fn distance_matrix(grid: &PatchGrid) -> SquareMatrix {
    let n = grid.n;
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let (ri, ci) = grid.cell(i);
        for (j, d) in row.iter_mut().enumerate() {
            let (rj, cj) = grid.cell(j);
            let dr = ri as f64 - rj as f64;
            let dc = ci as f64 - cj as f64;
            *d = (dr * dr + dc * dc).sqrt();
        }
    });
    SquareMatrix { n, data }
}

/// `S = 1 / (1 + p * D)`, elementwise. The patch size converts grid steps to
/// pixels and is applied exactly once here.
pub fn attention_scores(distances: &SquareMatrix, p: usize) -> SquareMatrix {
    let scale = p as f64;
    SquareMatrix {
        n: distances.n,
        data: distances.data.iter().map(|&d| 1.0 / (1.0 + scale * d)).collect(),
    }
}

/// Marks each patch as participating with probability `mix_prob`, then
/// shuffles the participating indices uniformly among themselves.
/// Non-participating patches map to themselves, so the result is always a
/// bijection.
pub fn sample_permutation(n: usize, mix_prob: f64, seed: u64) -> Result<(Vec<usize>, Vec<bool>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot permute zero patches".into()));
    }
    if !(0.0..=1.0).contains(&mix_prob) {
        return Err(Error::InvalidArgument(format!("mix probability {mix_prob} outside [0, 1]")));
    }
    let mut rng = seed::rng(seed);
    let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(mix_prob)).collect();
    let members: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let mut shuffled = members.clone();
    shuffled.shuffle(&mut rng);
    let mut perm: Vec<usize> = (0..n).collect();
    for (&i, &j) in members.iter().zip(&shuffled) {
        perm[i] = j;
    }
    Ok((perm, mask))
}

/// `lambda[i] = S[i][perm[i]]`.
pub fn adjusted_scores(scores: &SquareMatrix, perm: &[usize]) -> Result<Vec<f64>> {
    if perm.len() != scores.n {
        return Err(Error::Shape {
            expected: format!("permutation of length {}", scores.n),
            actual: format!("length {}", perm.len()),
        });
    }
    Ok(perm.iter().enumerate().map(|(i, &j)| scores.get(i, j)).collect())
}

#[inline]
fn blend(a: f64, b: f64, lambda: f64) -> f64 {
    if a == b {
        a
    } else if lambda == 1.0 {
        b
    } else {
        (a + lambda * (b - a)).clamp(a.min(b), a.max(b))
    }
}

/// `out[i] = (1 - lambda[i]) * A[i] + lambda[i] * A[perm[i]]` where `mask[i]`,
/// `A[i]` otherwise.
pub fn mix_patches(
    patches: &PatchSet,
    perm: &[usize],
    lambdas: &[f64],
    mask: &[bool],
) -> Result<PatchSet> {
    let n = patches.data.len();
    if perm.len() != n || lambdas.len() != n || mask.len() != n {
        return Err(Error::Shape {
            expected: format!("{n} permutation, weight and mask entries"),
            actual: format!("{}, {}, {}", perm.len(), lambdas.len(), mask.len()),
        });
    }
    if perm.iter().any(|&j| j >= n) {
        return Err(Error::InvalidArgument("permutation index out of range".into()));
    }
    let data = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = &patches.data[i];
            if !mask[i] || perm[i] == i {
                return own.clone();
            }
            let partner = &patches.data[perm[i]];
            own.iter()
                .zip(partner)
                .map(|(&a, &b)| blend(a, b, lambdas[i]))
                .collect()
        })
        .collect();
    Ok(PatchSet {
        grid: patches.grid.clone(),
        channels: patches.channels,
        data,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixupPlan {
    pub n: usize,
    pub perm: Vec<usize>,
    pub distances: SquareMatrix,
    pub scores: SquareMatrix,
    pub lambdas: Vec<f64>,
    pub mix_mask: Vec<bool>,
}

pub fn plan_mixup(grid: &PatchGrid, mix_prob: f64, seed: u64) -> Result<MixupPlan> {
    let distances = distance_matrix(grid);
    let scores = attention_scores(&distances, grid.stride.p);
    let (perm, mix_mask) = sample_permutation(grid.n, mix_prob, seed)?;
    let lambdas = adjusted_scores(&scores, &perm)?;
    Ok(MixupPlan {
        n: grid.n,
        perm,
        distances,
        scores,
        lambdas,
        mix_mask,
    })
}

pub fn apply_patch_mixup(
    image: &ImageTensor,
    stride: StrideSpec,
    mix_prob: f64,
    seed: u64,
) -> Result<ImageTensor> {
    let grid = plan_grid(image.height(), image.width(), stride)?;
    let patches = extract_patches(image, &grid)?;
    let plan = plan_mixup(&grid, mix_prob, seed)?;
    let mixed = mix_patches(&patches, &plan.perm, &plan.lambdas, &plan.mix_mask)?;
    reconstruct(&mixed, image)
}

/// Applies mixup to a batch; each image's seed is derived from
/// `(global_seed, id)` so output does not depend on scheduling.
pub fn apply_patch_mixup_batch(
    images: &[(String, ImageTensor)],
    stride: StrideSpec,
    mix_prob: f64,
    global_seed: u64,
) -> Result<Vec<ImageTensor>> {
    images
        .par_iter()
        .map(|(id, img)| {
            apply_patch_mixup(img, stride, mix_prob, seed::derive_seed(global_seed, id.as_bytes()))
        })
        .collect()
}
