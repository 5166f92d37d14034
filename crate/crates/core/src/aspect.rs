//! Corpus aspect-ratio profiling: scanning, 1-D K-means over width/height
//! ratios, per-cluster resize plans, and the two image transforms applied
//! before patchification (bilinear resize and horizontal flip).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::ImageTensor;

pub const DEFAULT_K: usize = 3;
pub const MAX_KMEANS_ITERATIONS: usize = 300;
pub const MIN_TARGET_WIDTH: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Path relative to the corpus root, `/`-separated.
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub vehicle_id: String,
    pub camera_id: Option<String>,
    pub path: PathBuf,
}

impl ImageRecord {
    pub fn aspect_ratio(&self) -> f64 {
        f64::from(self.width) / f64::from(self.height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanWarning {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusScan {
    pub records: Vec<ImageRecord>,
    pub warnings: Vec<ScanWarning>,
}

struct ManifestEntry {
    vehicle_id: String,
    camera_id: Option<String>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn collect_image_paths(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_image_paths(&path, out)?;
        } else if is_image_file(&path) {
            out.push(path);
        }
    }
    Ok(())
}

fn relative_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Vehicle label used when no manifest is given: the file stem up to the
/// first underscore.
fn vehicle_from_filename(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.split('_').next().unwrap_or(&stem).to_string()
}

fn read_manifest(path: &Path) -> Result<HashMap<String, ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (lineno == 0 && line.starts_with("path,")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 3 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "expected `path,vehicle_id[,camera_id]`".into(),
            });
        }
        let camera_id = fields
            .get(2)
            .filter(|c| !c.is_empty())
            .map(|c| c.to_string());
        let key = fields[0].replace('\\', "/");
        if map
            .insert(
                key.clone(),
                ManifestEntry {
                    vehicle_id: fields[1].to_string(),
                    camera_id,
                },
            )
            .is_some()
        {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("duplicate entry for {key}"),
            });
        }
    }
    Ok(map)
}

/// Scans `root` recursively for PNG/JPEG files. Files that fail to decode
/// become warnings. With a manifest, only listed images are kept and labels
/// come from it; manifest paths are relative to `root`.
pub fn scan_corpus(root: &Path, manifest: Option<&Path>) -> Result<CorpusScan> {
    if !root.is_dir() {
        return Err(Error::MissingPath(root.to_path_buf()));
    }
    let mut paths = Vec::new();
    collect_image_paths(root, &mut paths)?;
    paths.sort();

    let labels = manifest.map(read_manifest).transpose()?;

    let decoded: Vec<(PathBuf, std::result::Result<(u32, u32), String>)> = paths
        .into_par_iter()
        .map(|p| {
            let dims = image::ImageReader::open(&p)
                .map_err(|e| e.to_string())
                .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
                .and_then(|r| r.decode().map_err(|e| e.to_string()))
                .map(|img| (img.width(), img.height()));
            (p, dims)
        })
        .collect();

    let mut scan = CorpusScan::default();
    let mut seen = BTreeSet::new();
    for (path, dims) in decoded {
        let (width, height) = match dims {
            Ok(d) => d,
            Err(message) => {
                scan.warnings.push(ScanWarning { path, message });
                continue;
            }
        };
        let id = relative_id(root, &path);
        let (vehicle_id, camera_id) = match &labels {
            Some(map) => match map.get(&id) {
                Some(entry) => (entry.vehicle_id.clone(), entry.camera_id.clone()),
                None => {
                    scan.warnings.push(ScanWarning {
                        path,
                        message: "not listed in manifest".into(),
                    });
                    continue;
                }
            },
            None => (vehicle_from_filename(&path), None),
        };
        seen.insert(id.clone());
        scan.records.push(ImageRecord {
            id,
            width,
            height,
            vehicle_id,
            camera_id,
            path,
        });
    }
    if let Some(map) = &labels {
        let mut missing: Vec<&String> = map.keys().filter(|k| !seen.contains(*k)).collect();
        missing.sort();
        for m in missing {
            if !scan.warnings.iter().any(|w| relative_id(root, &w.path) == *m) {
                scan.warnings.push(ScanWarning {
                    path: root.join(m),
                    message: "listed in manifest but not found".into(),
                });
            }
        }
    }
    if scan.records.is_empty() {
        return Err(Error::EmptyCorpus(root.to_path_buf()));
    }
    Ok(scan)
}

/// Width/height per record.
pub fn compute_ratios(records: &[ImageRecord]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to compute ratios from".into()));
    }
    Ok(records.iter().map(ImageRecord::aspect_ratio).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectClusters {
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

fn nearest(value: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &c) in centroids.iter().enumerate() {
        let d = (value - c).abs();
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn objective(values: &[f64], centroids: &[f64], assignments: &[usize]) -> f64 {
    values
        .iter()
        .zip(assignments)
        .map(|(&v, &a)| (v - centroids[a]).powi(2))
        .sum()
}

fn kmeans_plus_plus(values: &[f64], k: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    let mut centroids = Vec::with_capacity(k);
    centroids.push(values[rng.gen_range(0..values.len())]);
    let mut d2: Vec<f64> = values.iter().map(|&v| (v - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if target < w {
                pick = Some(i);
                break;
            }
            target -= w;
            pick = Some(i);
        }
        // `k <= distinct values` guarantees some point with positive weight remains.
        let next = values[pick.expect("positive residual weight")];
        centroids.push(next);
        for (w, &v) in d2.iter_mut().zip(values) {
            *w = w.min((v - next).powi(2));
        }
    }
    centroids
}

/// Lloyd's algorithm on 1-D data with k-means++ seeding. Returns the final
/// clusters and the objective after every assignment step.
pub fn cluster_ratios_traced(
    ratios: &[f64],
    k: usize,
    seed: u64,
) -> Result<(AspectClusters, Vec<f64>)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(Error::InvalidArgument("ratios must be positive and finite".into()));
    }
    let distinct = ratios
        .iter()
        .map(|r| r.to_bits())
        .collect::<BTreeSet<_>>()
        .len();
    if k > distinct {
        return Err(Error::TooFewDistinct { k, distinct });
    }

    let mut centroids = kmeans_plus_plus(ratios, k, seed);
    let mut assignments: Vec<usize> = ratios.iter().map(|&r| nearest(r, &centroids)).collect();
    let mut trace = vec![objective(ratios, &centroids, &assignments)];

    for _ in 0..MAX_KMEANS_ITERATIONS {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&r, &a) in ratios.iter().zip(&assignments) {
            sums[a] += r;
            counts[a] += 1;
        }
        for j in 0..k {
            // An emptied cluster keeps its previous centroid.
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
        let next: Vec<usize> = ratios.iter().map(|&r| nearest(r, &centroids)).collect();
        trace.push(objective(ratios, &centroids, &next));
        if next == assignments {
            break;
        }
        assignments = next;
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]));
    let mut remap = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let clusters = AspectClusters {
        centroids: order.iter().map(|&j| centroids[j]).collect(),
        assignments: assignments.iter().map(|&a| remap[a]).collect(),
        k,
        seed,
    };
    Ok((clusters, trace))
}

pub fn cluster_ratios(ratios: &[f64], k: usize, seed: u64) -> Result<AspectClusters> {
    cluster_ratios_traced(ratios, k, seed).map(|(c, _)| c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResizeEntry {
    pub aspect_ratio: f64,
    pub target_height: u32,
    pub target_width: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResizePlan {
    pub base_height: u32,
    pub entries: Vec<ResizeEntry>,
}

/// `base_height * ratio` snapped to the nearest even integer.
pub fn target_width(base_height: u32, ratio: f64) -> u32 {
    let raw = f64::from(base_height) * ratio;
    (2.0 * (raw / 2.0).round()) as u32
}

/// Builds a plan from explicit ratios (used for manual overrides as well).
pub fn plan_from_ratios(ratios: &[f64], base_height: u32) -> Result<ResizePlan> {
    if base_height == 0 || base_height % 16 != 0 {
        return Err(Error::InvalidArgument(format!(
            "base height must be a positive multiple of 16, got {base_height}"
        )));
    }
    let mut entries = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        if !(ratio.is_finite() && ratio > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid aspect ratio {ratio}")));
        }
        let width = target_width(base_height, ratio);
        if width < MIN_TARGET_WIDTH {
            return Err(Error::WidthTooSmall { ratio, width });
        }
        entries.push(ResizeEntry {
            aspect_ratio: ratio,
            target_height: base_height,
            target_width: width,
        });
    }
    Ok(ResizePlan {
        base_height,
        entries,
    })
}

pub fn make_resize_plan(clusters: &AspectClusters, base_height: u32) -> Result<ResizePlan> {
    plan_from_ratios(&clusters.centroids, base_height)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if a == b {
        return a;
    }
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// Corner-aligned source coordinate for output index `i`.
fn source_coord(i: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len == 1 || in_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let lo = (pos.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize_image(
    image: &ImageTensor,
    target_height: usize,
    target_width: usize,
) -> Result<ImageTensor> {
    if target_height == 0 || target_width == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
    }
    if target_height == image.height() && target_width == image.width() {
        return Ok(image.clone());
    }
    let channels = image.channels();
    let cols: Vec<_> = (0..target_width)
        .map(|x| source_coord(x, target_width, image.width()))
        .collect();
    let mut data = vec![0.0; target_height * target_width * channels];
    data.par_chunks_mut(target_width * channels)
        .enumerate()
        .for_each(|(y, row)| {
            let (y0, y1, ty) = source_coord(y, target_height, image.height());
            for (x, &(x0, x1, tx)) in cols.iter().enumerate() {
                for c in 0..channels {
                    let top = lerp(image.get(y0, x0, c), image.get(y0, x1, c), tx);
                    let bottom = lerp(image.get(y1, x0, c), image.get(y1, x1, c), tx);
                    row[x * channels + c] = lerp(top, bottom, ty);
                }
            }
        });
    ImageTensor::new(target_height, target_width, channels, data)
}

/// Mirrors the columns.
pub fn flip_horizontal(image: &ImageTensor) -> ImageTensor {
    let (w, ch) = (image.width(), image.channels());
    ImageTensor::from_fn(image.height(), w, ch, |y, x, c| image.get(y, w - 1 - x, c))
}

/// Flips with probability `prob`, drawn from an RNG seeded with `seed`.
pub fn random_hflip(image: &ImageTensor, seed: u64, prob: f64) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidArgument(format!("flip probability {prob} outside [0, 1]")));
    }
    if seed::rng(seed).gen_bool(prob) {
        Ok(flip_horizontal(image))
    } else {
        Ok(image.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Fixed-width histogram of ratios; bins cover the data range with edges at
/// integer multiples of `bin_width`.
pub fn ratio_histogram(ratios: &[f64], bin_width: f64) -> Vec<HistogramBin> {
    if ratios.is_empty() || !(bin_width > 0.0) {
        return Vec::new();
    }
    let bin_of = |r: f64| (r / bin_width + 1e-9).floor() as i64;
    let first = ratios.iter().map(|&r| bin_of(r)).min().unwrap_or(0);
    let last = ratios.iter().map(|&r| bin_of(r)).max().unwrap_or(0);
    let mut counts = vec![0usize; (last - first + 1) as usize];
    for &r in ratios {
        counts[(bin_of(r) - first) as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| {
            let b = first + i as i64;
            HistogramBin {
                lower: b as f64 * bin_width,
                upper: (b + 1) as f64 * bin_width,
                count,
            }
        })
        .collect()
}
