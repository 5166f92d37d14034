//! Independent straight-line oracles shared by the integration tests. None
//! of these call into library internals beyond plain data types.
#![allow(dead_code)]

use arpatch::store::{FeatureStore, StoreEntry, StoreMeta};
use arpatch::vit::ViTWeights;
use arpatch::ImageTensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(h, w, c, |_, _, _| rng.gen::<f64>())
}

/// Patch mixup written from scratch: grid enumeration, grid-unit distances,
/// `S = 1 / (1 + p D)`, participation mask then a shuffle of participants,
/// convex blend, overlap averaging.
pub fn mixup_oracle(image: &ImageTensor, s_h: usize, s_w: usize, p: usize, mix_prob: f64, seed: u64) -> ImageTensor {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let mut corners = Vec::new();
    let mut cells = Vec::new();
    let mut r = 0;
    let mut y = 0;
    while y + p <= h {
        let mut c = 0;
        let mut x = 0;
        while x + p <= w {
            corners.push((y, x));
            cells.push((r, c));
            x += s_w;
            c += 1;
        }
        y += s_h;
        r += 1;
    }
    let n = corners.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; n];
    for m in mask.iter_mut() {
        *m = rng.gen_bool(mix_prob);
    }
    let members: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let mut shuffled = members.clone();
    shuffled.shuffle(&mut rng);
    let mut partner: Vec<usize> = (0..n).collect();
    for k in 0..members.len() {
        partner[members[k]] = shuffled[k];
    }

    let mut sum = vec![0.0; h * w * ch];
    let mut count = vec![0usize; h * w];
    for i in 0..n {
        let j = partner[i];
        let dr = cells[i].0 as f64 - cells[j].0 as f64;
        let dc = cells[i].1 as f64 - cells[j].1 as f64;
        let dist = (dr * dr + dc * dc).sqrt();
        let lambda = 1.0 / (1.0 + p as f64 * dist);
        let (yi, xi) = corners[i];
        let (yj, xj) = corners[j];
        for u in 0..p {
            for v in 0..p {
                count[(yi + u) * w + xi + v] += 1;
                for c in 0..ch {
                    let a = image.get(yi + u, xi + v, c);
                    let b = image.get(yj + u, xj + v, c);
                    let value = if mask[i] { (1.0 - lambda) * a + lambda * b } else { a };
                    sum[((yi + u) * w + xi + v) * ch + c] += value;
                }
            }
        }
    }
    ImageTensor::from_fn(h, w, ch, |yy, xx, c| {
        let k = count[yy * w + xx];
        if k == 0 {
            image.get(yy, xx, c)
        } else {
            sum[(yy * w + xx) * ch + c] / k as f64
        }
    })
}

fn f(v: f32) -> f64 {
    f64::from(v)
}

fn matvec(x: &[f64], w: &[f32], b: &[f32], out_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_dim];
    for j in 0..out_dim {
        let mut acc = f(b[j]);
        for i in 0..x.len() {
            acc += x[i] * f(w[i * out_dim + j]);
        }
        out[j] = acc;
    }
    out
}

fn norm(x: &[f64], scale: &[f32], offset: &[f32]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (0..x.len())
        .map(|j| (x[j] - mean) / (var + 1e-6).sqrt() * f(scale[j]) + f(offset[j]))
        .collect()
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Corner-aligned bilinear sample of the positional table at fractional
/// base-grid coordinates.
fn position(weights: &ViTWeights, rows: usize, cols: usize, r: usize, c: usize) -> Vec<f64> {
    let cfg = &weights.config;
    let (br, bc, dim) = (cfg.base_rows, cfg.base_cols, cfg.dim);
    let coord = |i: usize, out: usize, base: usize| -> f64 {
        if out == 1 || base == 1 {
            0.0
        } else {
            i as f64 * (base - 1) as f64 / (out - 1) as f64
        }
    };
    let fy = coord(r, rows, br);
    let fx = coord(c, cols, bc);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(br - 1), (x0 + 1).min(bc - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let at = |y: usize, x: usize, k: usize| f(weights.pos_table.data[(1 + y * bc + x) * dim + k]);
    (0..dim)
        .map(|k| {
            let top = at(y0, x0, k) * (1.0 - tx) + at(y0, x1, k) * tx;
            let bottom = at(y1, x0, k) * (1.0 - tx) + at(y1, x1, k) * tx;
            top * (1.0 - ty) + bottom * ty
        })
        .collect()
}

/// Full encoder forward on an image already at the model's input size,
/// one token and one head at a time.
pub fn reference_encode(weights: &ViTWeights, image: &ImageTensor, s_h: usize, s_w: usize) -> Vec<f64> {
    let cfg = &weights.config;
    let (p, dim, heads) = (cfg.patch_size, cfg.dim, cfg.heads);
    let rows = (image.height() - p) / s_h + 1;
    let cols = (image.width() - p) / s_w + 1;

    let mut x: Vec<Vec<f64>> = Vec::new();
    let cls_pos: Vec<f64> = (0..dim).map(|k| f(weights.pos_table.data[k])).collect();
    x.push((0..dim).map(|k| f(weights.cls_token.data[k]) + cls_pos[k]).collect());
    for r in 0..rows {
        for c in 0..cols {
            let mut flat = Vec::new();
            for u in 0..p {
                for v in 0..p {
                    for ch in 0..image.channels() {
                        flat.push(image.get(r * s_h + u, c * s_w + v, ch));
                    }
                }
            }
            let tok = matvec(&flat, &weights.patch_proj.data, &weights.patch_bias.data, dim);
            let pos = position(weights, rows, cols, r, c);
            x.push(tok.iter().zip(&pos).map(|(a, b)| a + b).collect());
        }
    }

    let t = x.len();
    let dh = dim / heads;
    for layer in &weights.layers {
        let normed: Vec<Vec<f64>> = x.iter().map(|v| norm(v, &layer.ln1.scale.data, &layer.ln1.offset.data)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|v| matvec(v, &layer.wq.data, &layer.bq.data, dim)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|v| matvec(v, &layer.wk.data, &layer.bk.data, dim)).collect();
        let vv: Vec<Vec<f64>> = normed.iter().map(|v| matvec(v, &layer.wv.data, &layer.bv.data, dim)).collect();
        let mut concat = vec![vec![0.0; dim]; t];
        for hd in 0..heads {
            for i in 0..t {
                let mut scores = vec![0.0; t];
                for j in 0..t {
                    let mut s = 0.0;
                    for e in 0..dh {
                        s += q[i][hd * dh + e] * k[j][hd * dh + e];
                    }
                    scores[j] = s / (dh as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for e in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += exps[j] / z * vv[j][hd * dh + e];
                    }
                    concat[i][hd * dh + e] = acc;
                }
            }
        }
        for i in 0..t {
            let o = matvec(&concat[i], &layer.wo.data, &layer.bo.data, dim);
            for e in 0..dim {
                x[i][e] += o[e];
            }
        }
        let hidden = layer.b1.data.len();
        for i in 0..t {
            let nrm = norm(&x[i], &layer.ln2.scale.data, &layer.ln2.offset.data);
            let h1: Vec<f64> = matvec(&nrm, &layer.w1.data, &layer.b1.data, hidden)
                .into_iter()
                .map(gelu_ref)
                .collect();
            let h2 = matvec(&h1, &layer.w2.data, &layer.b2.data, dim);
            for e in 0..dim {
                x[i][e] += h2[e];
            }
        }
    }
    norm(&x[0], &weights.final_ln.scale.data, &weights.final_ln.offset.data)
}

/// Store from `(vehicle, camera, values)` triples with ids `{prefix}{i}`.
pub fn store_from(prefix: &str, items: &[(String, Option<i32>, Vec<f64>)]) -> FeatureStore {
    let dim = items.first().map_or(0, |i| i.2.len());
    let mut s = FeatureStore::new(
        dim,
        StoreMeta {
            model_ar: None,
            source: "test".into(),
        },
    );
    for (i, (v, c, values)) in items.iter().enumerate() {
        s.push(StoreEntry {
            image_id: format!("{prefix}{i}"),
            vehicle_id: v.clone(),
            camera_id: *c,
            values: values.clone(),
        })
        .unwrap();
    }
    s
}

pub struct BruteMetrics {
    pub map: f64,
    pub cmc: Vec<f64>,
    pub scored: usize,
}

/// Brute-force mAP and CMC: euclidean distances on raw features, a stable
/// rank by counting strictly closer (or equal and earlier) entries, junk
/// removed, precision at each hit averaged.
pub fn brute_metrics(q: &FeatureStore, g: &FeatureStore, junk_filter: bool) -> Option<BruteMetrics> {
    let n = g.entries.len();
    let mut ap_total = 0.0;
    let mut first_hits = Vec::new();
    for qe in &q.entries {
        let d: Vec<f64> = g
            .entries
            .iter()
            .map(|ge| {
                let mut s = 0.0;
                for k in 0..qe.values.len() {
                    s += (qe.values[k] - ge.values[k]).powi(2);
                }
                s.sqrt()
            })
            .collect();
        let mut slot = vec![0usize; n];
        for a in 0..n {
            let mut rank = 0;
            for b in 0..n {
                if d[b] < d[a] || (d[b] == d[a] && b < a) {
                    rank += 1;
                }
            }
            slot[rank] = a;
        }
        let mut rel = Vec::new();
        for &gi in &slot {
            let ge = &g.entries[gi];
            let same_vehicle = ge.vehicle_id == qe.vehicle_id;
            let same_cam = ge.camera_id.is_some() && ge.camera_id == qe.camera_id;
            if ge.image_id == qe.image_id || (junk_filter && same_vehicle && same_cam) {
                continue;
            }
            rel.push(same_vehicle);
        }
        let total = rel.iter().filter(|&&r| r).count();
        if total == 0 {
            continue;
        }
        let mut hits = 0;
        let mut ap = 0.0;
        for (k, &r) in rel.iter().enumerate() {
            if r {
                hits += 1;
                ap += hits as f64 / (k + 1) as f64;
            }
        }
        ap_total += ap / total as f64;
        first_hits.push(rel.iter().position(|&r| r).unwrap());
    }
    if first_hits.is_empty() {
        return None;
    }
    let scored = first_hits.len();
    let cmc = (0..n)
        .map(|k| first_hits.iter().filter(|&&f| f <= k).count() as f64 / scored as f64)
        .collect();
    Some(BruteMetrics {
        map: ap_total / scored as f64,
        cmc,
        scored,
    })
}
