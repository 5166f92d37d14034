//! Procedurally drawn vehicle corpus for end-to-end runs without external
//! datasets.
//!
//! Each vehicle is a solid-colored body with a dark window band and a row of
//! id marks, drawn over a noisy gray background. Every vehicle appears in
//! three aspect-ratio groups (0.95, 1.0, 1.33) from two cameras. The camera-1
//! square image of each vehicle goes to `query/`, the rest to `gallery/`.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::store::{camera_code, FeatureStore, StoreEntry, StoreMeta};
use crate::aspect::ImageRecord;
use crate::tensor::ImageTensor;

/// Widths per 100 pixels of height, i.e. ratios 0.95, 1.0 and 1.33.
pub const GROUP_WIDTHS: [usize; 3] = [95, 100, 133];
pub const BASE_HEIGHT: usize = 100;
pub const CAMERAS: [u32; 2] = [1, 2];

const PALETTE: [[f64; 3]; 12] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.10, 0.20, 0.85],
    [0.90, 0.85, 0.10],
    [0.10, 0.80, 0.85],
    [0.80, 0.10, 0.80],
    [0.95, 0.50, 0.05],
    [0.45, 0.10, 0.70],
    [0.05, 0.50, 0.45],
    [0.95, 0.55, 0.70],
    [0.55, 0.35, 0.15],
    [0.60, 0.85, 0.40],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub vehicles: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// 10 vehicles × 3 groups × 2 cameras = 60 images.
    fn default() -> Self {
        Self { vehicles: 10, seed: 0 }
    }
}

pub fn vehicle_color(vehicle: usize) -> [f64; 3] {
    PALETTE[vehicle % PALETTE.len()]
}

/// Draws one vehicle image of `height × width`.
pub fn draw_vehicle(vehicle: usize, camera: u32, height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = seed::rng(seed);
    let color = vehicle_color(vehicle);
    let jitter_x = rng.gen_range(-3i64..=3);
    let jitter_y = rng.gen_range(-3i64..=3);
    let tint = if camera == 2 { [0.0, 0.02, 0.06] } else { [0.04, 0.02, 0.0] };
    let noise: Vec<f64> = (0..height * width).map(|_| rng.gen_range(-0.05..0.05)).collect();

    let fx = |f: f64| (f * width as f64) as i64 + jitter_x;
    let fy = |f: f64| (f * height as f64) as i64 + jitter_y;
    let (body_x0, body_x1, body_y0, body_y1) = (fx(0.15), fx(0.85), fy(0.25), fy(0.85));
    let (win_x0, win_x1, win_y0, win_y1) = (fx(0.25), fx(0.75), fy(0.30), fy(0.45));
    let (mark_y0, mark_y1) = (fy(0.76), fy(0.82));
    let mark_w = ((body_x1 - body_x0) / 10).max(1);

    ImageTensor::from_fn(height, width, 3, |y, x, c| {
        let (xi, yi) = (x as i64, y as i64);
        let in_body = (body_x0..body_x1).contains(&xi) && (body_y0..body_y1).contains(&yi);
        if !in_body {
            return (0.5 + tint[c] + noise[y * width + x]).clamp(0.0, 1.0);
        }
        if (win_x0..win_x1).contains(&xi) && (win_y0..win_y1).contains(&yi) {
            return 0.08;
        }
        if (mark_y0..mark_y1).contains(&yi) {
            // Four id bits drawn as light marks in alternating slots.
            let slot = (xi - body_x0) / mark_w;
            if slot % 2 == 1 && slot / 2 < 4 && (vehicle >> (slot / 2)) & 1 == 1 {
                return 0.95;
            }
        }
        color[c]
    })
}

/// Writes the corpus under `root` with a `manifest.csv`. Returns the number
/// of images written.
pub fn generate_corpus(root: &Path, spec: &SynthSpec) -> Result<usize> {
    for sub in ["query", "gallery"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = String::from("path,vehicle_id,camera_id\n");
    let mut count = 0;
    for v in 0..spec.vehicles {
        for (g, &w) in GROUP_WIDTHS.iter().enumerate() {
            for &cam in &CAMERAS {
                let split = if g == 1 && cam == 1 { "query" } else { "gallery" };
                let rel = format!("{split}/v{v:02}_c{cam}_g{g}.png");
                let img_seed = seed::derive_seed(spec.seed, rel.as_bytes());
                let img = draw_vehicle(v, cam, BASE_HEIGHT, w, img_seed);
                img.save_png(&root.join(&rel))?;
                manifest.push_str(&format!("{rel},v{v:02},c{cam}\n"));
                count += 1;
            }
        }
    }
    let path = root.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(count)
}

/// Mean color of the central body region, a feature that is perfectly
/// discriminative on the synthetic corpus.
pub fn color_feature(image: &ImageTensor) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let (y0, y1) = (h * 50 / 100, h * 70 / 100);
    let (x0, x1) = (w * 35 / 100, w * 65 / 100);
    let mut sum = [0.0; 3];
    let mut n = 0.0;
    for y in y0..y1.max(y0 + 1) {
        for x in x0..x1.max(x0 + 1) {
            for (c, s) in sum.iter_mut().enumerate() {
                *s += image.get(y, x, c.min(image.channels() - 1));
            }
            n += 1.0;
        }
    }
    sum.iter().map(|s| s / n).collect()
}

/// Builds a store of [`color_feature`]s for the given records.
pub fn color_feature_store(records: &[ImageRecord]) -> Result<FeatureStore> {
    let mut store = FeatureStore::new(
        3,
        StoreMeta {
            model_ar: None,
            source: "color-control".into(),
        },
    );
    for r in records {
        let img = ImageTensor::load(&r.path)?;
        store.push(StoreEntry {
            image_id: r.id.clone(),
            vehicle_id: r.vehicle_id.clone(),
            camera_id: r.camera_id.as_deref().and_then(camera_code),
            values: color_feature(&img),
        })?;
    }
    Ok(store)
}
