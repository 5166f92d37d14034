//! Config-driven commands behind the CLI. Each command is deterministic
//! given the config's global seed (bench timings excepted).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aspect::{
    cluster_ratios, compute_ratios, make_resize_plan, plan_from_ratios, random_hflip, ratio_histogram,
    scan_corpus, AspectClusters, CorpusScan, HistogramBin, ImageRecord, ResizeEntry, ResizePlan,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::fusion::{fuse, FusionMode};
use crate::losses::{finite_diff_check, id_flat, id_loss, triplet_flat, triplet_loss_soft, TripletSample};
use crate::mixup::apply_patch_mixup;
use crate::patchify::{choose_strides, plan_grid, StrideSpec};
use crate::seed;
use crate::store::{camera_code, FeatureStore, StoreEntry, StoreMeta};
use crate::tensor::ImageTensor;
use crate::vit::{init_weights, EncoderConfig, EncoderModel, ViTWeights};

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.05;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn scan(cfg: &PipelineConfig, root: &Path) -> Result<CorpusScan> {
    let manifest = cfg.manifest_for(root);
    scan_corpus(root, manifest.as_deref())
}

pub fn load_plan(path: &Path) -> Result<ResizePlan> {
    read_json(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub bins: Vec<HistogramBin>,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub scan: CorpusScan,
    pub ratios: Vec<f64>,
    /// Absent when the config supplies manual aspect ratios.
    pub clusters: Option<AspectClusters>,
    pub plan: ResizePlan,
    pub histogram: Histogram,
}

/// Scan → ratios → clusters → plan, plus the ratio histogram.
pub fn analyze(cfg: &PipelineConfig) -> Result<Analysis> {
    let scan = scan(cfg, &cfg.corpus)?;
    let ratios = compute_ratios(&scan.records)?;
    let (clusters, plan) = match &cfg.aspect_ratios {
        Some(manual) => (None, plan_from_ratios(manual, cfg.base_height)?),
        None => {
            let c = cluster_ratios(&ratios, cfg.k, cfg.seed)?;
            let plan = make_resize_plan(&c, cfg.base_height)?;
            (Some(c), plan)
        }
    };
    let histogram = Histogram {
        bin_width: HISTOGRAM_BIN_WIDTH,
        bins: ratio_histogram(&ratios, HISTOGRAM_BIN_WIDTH),
    };
    Ok(Analysis {
        scan,
        ratios,
        clusters,
        plan,
        histogram,
    })
}

/// Writes `plan.json`, `clusters.json` (when clustered) and
/// `histogram.json` into `out_dir`.
pub fn write_analysis(analysis: &Analysis, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    write_json(&out_dir.join("plan.json"), &analysis.plan)?;
    if let Some(c) = &analysis.clusters {
        write_json(&out_dir.join("clusters.json"), c)?;
    }
    write_json(&out_dir.join("histogram.json"), &analysis.histogram)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub source: String,
    pub output: String,
    pub seed: u64,
    pub flipped: bool,
    pub mixed: bool,
}

/// Output id for an input id: same relative path with a `.png` extension.
fn png_id(id: &str) -> String {
    match id.rsplit_once('.') {
        Some((stem, _)) => format!("{stem}.png"),
        None => format!("{id}.png"),
    }
}

/// Flip then patch mixup for one image. Images smaller than one patch are
/// only flipped.
pub fn augment_image(cfg: &PipelineConfig, image: &ImageTensor, image_seed: u64) -> Result<(ImageTensor, bool, bool)> {
    let flip_seed = seed::derive_seed(image_seed, b"flip");
    let mix_seed = seed::derive_seed(image_seed, b"mixup");
    let flipped_img = random_hflip(image, flip_seed, cfg.flip_prob)?;
    let flipped = flipped_img != *image;
    let p = cfg.patch_size;
    if image.height() < p || image.width() < p {
        return Ok((flipped_img, flipped, false));
    }
    let stride = choose_strides(image.aspect_ratio(), cfg.stride_long, cfg.stride_short, p)?;
    let mixed = apply_patch_mixup(&flipped_img, stride, cfg.mix_prob, mix_seed)?;
    Ok((mixed, flipped, true))
}

/// Augments every image under `in_dir` into `out_dir`, preserving relative
/// paths (as PNG). Writes `augment_seeds.json` and a manifest for the
/// output tree.
pub fn augment(cfg: &PipelineConfig, in_dir: &Path, out_dir: &Path) -> Result<Vec<AugmentRecord>> {
    let scan = scan(cfg, in_dir)?;
    ensure_dir(out_dir)?;
    let results: Vec<AugmentRecord> = scan
        .records
        .par_iter()
        .map(|r| {
            let image_seed = seed::derive_seed(cfg.seed, r.id.as_bytes());
            let img = ImageTensor::load(&r.path)?;
            let (out, flipped, mixed) = augment_image(cfg, &img, image_seed)?;
            let output = png_id(&r.id);
            let dest = out_dir.join(&output);
            if let Some(parent) = dest.parent() {
                ensure_dir(parent)?;
            }
            out.save_png(&dest)?;
            Ok(AugmentRecord {
                source: r.id.clone(),
                output,
                seed: image_seed,
                flipped,
                mixed,
            })
        })
        .collect::<Result<_>>()?;

    let mut manifest = String::from("path,vehicle_id,camera_id\n");
    for (rec, a) in scan.records.iter().zip(&results) {
        manifest.push_str(&format!(
            "{},{},{}\n",
            a.output,
            rec.vehicle_id,
            rec.camera_id.as_deref().unwrap_or("")
        ));
    }
    let mpath = out_dir.join("manifest.csv");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    write_json(&out_dir.join("augment_seeds.json"), &results)?;
    Ok(results)
}

/// Seeded weights for plan entry `index`, or the configured weight file.
pub fn model_weights(cfg: &PipelineConfig, index: usize) -> Result<ViTWeights> {
    match &cfg.weights_file {
        Some(path) => ViTWeights::load(path),
        None => {
            let mut config = EncoderConfig::from_preset(&cfg.preset)?;
            config.patch_size = cfg.patch_size;
            init_weights(&config, seed::derive_index_seed(cfg.seed, index as u64))
        }
    }
}

pub fn bind_model(cfg: &PipelineConfig, entry: &ResizeEntry, index: usize) -> Result<EncoderModel> {
    let weights = Arc::new(model_weights(cfg, index)?);
    let stride = choose_strides(entry.aspect_ratio, cfg.stride_long, cfg.stride_short, cfg.patch_size)?;
    EncoderModel::bind(
        weights,
        stride,
        entry.target_height as usize,
        entry.target_width as usize,
        entry.aspect_ratio,
    )
}

/// Encodes every record with the model bound to plan entry `index`.
pub fn encode(cfg: &PipelineConfig, plan: &ResizePlan, index: usize, records: &[ImageRecord]) -> Result<FeatureStore> {
    let entry = plan.entries.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!("plan has {} entries, no entry {index}", plan.entries.len()))
    })?;
    let model = bind_model(cfg, entry, index)?;
    let entries: Vec<StoreEntry> = records
        .par_iter()
        .map(|r| {
            let img = ImageTensor::load(&r.path)?;
            let f = model.encode_image(&img, &r.id).map_err(|e| match e {
                Error::NonFinite(stage) => Error::NonFinite(format!("{stage} while encoding {}", r.id)),
                other => other,
            })?;
            Ok(StoreEntry {
                image_id: r.id.clone(),
                vehicle_id: r.vehicle_id.clone(),
                camera_id: r.camera_id.as_deref().and_then(camera_code),
                values: f.values,
            })
        })
        .collect::<Result<_>>()?;
    let mut store = FeatureStore::new(
        model.config().dim,
        StoreMeta {
            model_ar: Some(entry.aspect_ratio),
            source: format!("encode:{}", index),
        },
    );
    for e in entries {
        store.push(e)?;
    }
    Ok(store)
}

/// Aligns stores by image id and fuses per image using the record's aspect
/// ratio.
pub fn fuse_stores(cfg: &PipelineConfig, stores: &[FeatureStore], records: &[ImageRecord]) -> Result<FeatureStore> {
    let first = stores
        .first()
        .ok_or_else(|| Error::InvalidArgument("no stores to fuse".into()))?;
    for s in stores {
        if s.meta.model_ar.is_none() {
            return Err(Error::InvalidArgument(format!(
                "store ({}) has no model aspect ratio metadata",
                s.meta.source
            )));
        }
    }
    let ids: Vec<&str> = first.entries.iter().map(|e| e.image_id.as_str()).collect();
    let mut missing = Vec::new();
    for s in &stores[1..] {
        let set: std::collections::HashSet<&str> = s.entries.iter().map(|e| e.image_id.as_str()).collect();
        missing.extend(ids.iter().filter(|id| !set.contains(**id)).map(|id| id.to_string()));
        let base: std::collections::HashSet<&str> = ids.iter().copied().collect();
        missing.extend(s.entries.iter().filter(|e| !base.contains(e.image_id.as_str())).map(|e| e.image_id.clone()));
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        missing.truncate(5);
        return Err(Error::IdMismatch(missing));
    }
    let ratio: HashMap<&str, f64> = records.iter().map(|r| (r.id.as_str(), r.aspect_ratio())).collect();
    let fusion = cfg.fusion();
    let mut out: Option<FeatureStore> = None;
    for entry in &first.entries {
        let image_ar = *ratio.get(entry.image_id.as_str()).ok_or_else(|| {
            Error::InvalidArgument(format!("no corpus record for image {}", entry.image_id))
        })?;
        let features: Vec<_> = stores
            .iter()
            .map(|s| {
                let e = s.find(&entry.image_id).expect("ids aligned");
                crate::vit::FeatureVector::new(e.image_id.clone(), s.meta.model_ar.unwrap_or(f64::NAN), e.values.clone())
            })
            .collect();
        let fused = fuse(&features, image_ar, &fusion)?;
        let store = out.get_or_insert_with(|| {
            FeatureStore::new(
                fused.values.len(),
                StoreMeta {
                    model_ar: None,
                    source: match fusion.mode {
                        FusionMode::WeightedSum => "fuse:weighted_sum".into(),
                        FusionMode::WeightedConcat => "fuse:weighted_concat".into(),
                    },
                },
            )
        });
        store.push(StoreEntry {
            image_id: entry.image_id.clone(),
            vehicle_id: entry.vehicle_id.clone(),
            camera_id: entry.camera_id,
            values: fused.values,
        })?;
    }
    out.ok_or_else(|| Error::InvalidArgument("stores are empty".into()))
}

/// Splits a store into `query/` and `gallery/` entries by image-id prefix.
/// Without such prefixes the whole store serves as both.
pub fn split_query_gallery(store: &FeatureStore) -> Result<(FeatureStore, FeatureStore)> {
    let pick = |prefix: &str| -> Result<FeatureStore> {
        let mut s = FeatureStore::new(store.dim, store.meta.clone());
        for e in store.entries.iter().filter(|e| e.image_id.starts_with(prefix)) {
            s.push(e.clone())?;
        }
        Ok(s)
    };
    let q = pick("query/")?;
    let g = pick("gallery/")?;
    if q.is_empty() || g.is_empty() {
        Ok((store.clone(), store.clone()))
    } else {
        Ok((q, g))
    }
}

pub fn evaluate_stores(cfg: &PipelineConfig, queries: &FeatureStore, gallery: &FeatureStore) -> Result<MetricsReport> {
    evaluate(queries, gallery, &cfg.eval())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub n: usize,
    pub median_ms: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 0 {
        (xs[m - 1] + xs[m]) / 2.0
    } else {
        xs[m]
    }
}

/// Times encoding of a fixed synthetic batch for each `[H, W, s_h, s_w]`
/// setting: one warmup, then the median of `bench_runs` timed runs.
const BENCH_WARMUP: Duration = Duration::from_millis(250);

pub fn bench(cfg: &PipelineConfig, grid: &[[usize; 4]]) -> Result<Vec<BenchRow>> {
    let mut config = EncoderConfig::from_preset(&cfg.preset)?;
    config.patch_size = cfg.patch_size;
    let weights = Arc::new(init_weights(&config, seed::derive_index_seed(cfg.seed, 0))?);
    let mut rows = Vec::with_capacity(grid.len());
    for &[h, w, s_h, s_w] in grid {
        let stride = StrideSpec::new(s_h, s_w, cfg.patch_size)?;
        let n = plan_grid(h, w, stride)?.n;
        let model = EncoderModel::bind(weights.clone(), stride, h, w, w as f64 / h as f64)?;
        let mut rng = seed::rng(seed::derive_index_seed(cfg.seed, (h * 100_000 + w) as u64));
        let batch: Vec<ImageTensor> = (0..cfg.bench_batch)
            .map(|_| ImageTensor::from_fn(h, w, config.channels, |_, _, _| rng.gen::<f64>()))
            .collect();
        let run = || -> Result<f64> {
            let start = Instant::now();
            for (i, img) in batch.iter().enumerate() {
                model.encode_image(img, &format!("bench{i}"))?;
            }
            Ok(start.elapsed().as_secs_f64() * 1e3)
        };
        let warm = Instant::now();
        while {
            run()?;
            warm.elapsed() < BENCH_WARMUP
        } {}
        let times = (0..cfg.bench_runs).map(|_| run()).collect::<Result<Vec<_>>>()?;
        rows.push(BenchRow {
            height: h,
            width: w,
            s_h,
            s_w,
            n,
            median_ms: median(times),
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("height,width,s_h,s_w,n,median_ms\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{:.4}\n", r.height, r.width, r.s_h, r.s_w, r.n, r.median_ms));
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub instances: usize,
    pub eps: f64,
    pub triplet_max_rel_error: f64,
    pub id_max_rel_error: f64,
    pub triplet_at_symmetric_point: f64,
    pub id_at_uniform_logits: f64,
    pub classes: usize,
}

/// Finite-difference report over random triplets (8-dim) and logits
/// (10 classes).
pub fn verify_losses(seed_value: u64, instances: usize) -> Result<LossReport> {
    const EPS: f64 = 1e-5;
    const CLASSES: usize = 10;
    let mut rng = seed::rng(seed_value);
    let mut triplet_max: f64 = 0.0;
    let mut id_max: f64 = 0.0;
    for _ in 0..instances {
        let flat: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        triplet_max = triplet_max.max(finite_diff_check(triplet_flat, &flat, EPS)?);
        let logits: Vec<f64> = (0..CLASSES).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let label = rng.gen_range(0..CLASSES);
        id_max = id_max.max(finite_diff_check(id_flat(label), &logits, EPS)?);
    }
    let v = vec![0.5, -0.25, 1.0];
    let sym = TripletSample::new(vec![0.0; 3], v.clone(), v)?;
    Ok(LossReport {
        instances,
        eps: EPS,
        triplet_max_rel_error: triplet_max,
        id_max_rel_error: id_max,
        triplet_at_symmetric_point: triplet_loss_soft(&sym).value,
        id_at_uniform_logits: id_loss(&[0.0; CLASSES], 0)?.value,
        classes: CLASSES,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub images: usize,
    pub plan: ResizePlan,
    pub stores: Vec<PathBuf>,
    pub fused_store: PathBuf,
    pub metrics: MetricsReport,
    pub seconds: f64,
}

/// analyze → augment → encode (one store per plan entry) → fuse → evaluate.
/// Augmented images land in `out/augmented`; encoding runs on the original
/// corpus.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineSummary> {
    let start = Instant::now();
    ensure_dir(out_dir)?;
    let analysis = analyze(cfg)?;
    write_analysis(&analysis, out_dir)?;
    augment(cfg, &cfg.corpus, &out_dir.join("augmented"))?;

    let records = &analysis.scan.records;
    let mut stores = Vec::with_capacity(analysis.plan.entries.len());
    let mut store_paths = Vec::new();
    for i in 0..analysis.plan.entries.len() {
        let store = encode(cfg, &analysis.plan, i, records)?;
        let path = out_dir.join(format!("model_{i}.fstr"));
        store.save(&path)?;
        store_paths.push(path);
        stores.push(store);
    }
    let fused = fuse_stores(cfg, &stores, records)?;
    let fused_path = out_dir.join("fused.fstr");
    fused.save(&fused_path)?;
    let (q, g) = split_query_gallery(&fused)?;
    let metrics = evaluate_stores(cfg, &q, &g)?;
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    Ok(PipelineSummary {
        images: records.len(),
        plan: analysis.plan,
        stores: store_paths,
        fused_store: fused_path,
        metrics,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Image id → record, for lookups by id.
pub fn records_by_id(records: &[ImageRecord]) -> BTreeMap<&str, &ImageRecord> {
    records.iter().map(|r| (r.id.as_str(), r)).collect()
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    write_json(path, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_ids_keep_relative_paths() {
        assert_eq!(png_id("query/a.jpg"), "query/a.png");
        assert_eq!(png_id("b.png"), "b.png");
        assert_eq!(png_id("noext"), "noext.png");
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn loss_report_is_within_tolerance() {
        let r = verify_losses(1, 10).unwrap();
        assert!(r.triplet_max_rel_error < 1e-4);
        assert!(r.id_max_rel_error < 1e-4);
        assert!((r.triplet_at_symmetric_point - 2f64.ln()).abs() < 1e-12);
        assert!((r.id_at_uniform_logits - 10f64.ln()).abs() < 1e-12);
    }
}
