use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard};

use arpatch::aspect::ImageRecord;
use arpatch::config::{ModeKey, PipelineConfig};
use arpatch::pipeline::{bench, encode, fuse_stores, scan};
use arpatch::store::{FeatureStore, StoreEntry, StoreMeta};
use arpatch::synth::{generate_corpus, SynthSpec};
use arpatch::{Error, ImageTensor};
use tempfile::TempDir;

/// Keeps the timing test from sharing the CPU with other tests here.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn record(id: &str, w: u32, h: u32) -> ImageRecord {
    ImageRecord {
        id: id.into(),
        width: w,
        height: h,
        vehicle_id: "v".into(),
        camera_id: None,
        path: PathBuf::from(id),
    }
}

fn store(model_ar: f64, rows: &[(&str, Vec<f64>)]) -> FeatureStore {
    let entries = rows
        .iter()
        .map(|(id, v)| StoreEntry {
            image_id: id.to_string(),
            vehicle_id: "v".into(),
            camera_id: Some(1),
            values: v.clone(),
        })
        .collect();
    FeatureStore::from_entries(
        entries,
        StoreMeta {
            model_ar: Some(model_ar),
            source: "test".into(),
        },
    )
    .unwrap()
}

#[test]
fn single_store_with_unit_weights_passes_through() {
    let _serial = serial();
    let cfg = PipelineConfig {
        weights: [1.0, 1.0, 1.0],
        normalize_output: false,
        ..PipelineConfig::default()
    };
    let s = store(1.0, &[("a", vec![0.5, -2.0, 3.0]), ("b", vec![1.0, 0.0, 0.25])]);
    let records = [record("a", 100, 100), record("b", 300, 100)];
    let fused = fuse_stores(&cfg, &[s.clone()], &records).unwrap();
    for (x, y) in fused.entries.iter().zip(&s.entries) {
        assert_eq!(x.values, y.values);
        assert_eq!(x.image_id, y.image_id);
    }
}

#[test]
fn two_image_two_model_hand_arithmetic() {
    let _serial = serial();
    // Image a has ar 1.0, image b has ar 1.5.
    // Model ar 1.0: gaps 0 and 0.5 give weights 1.3 and 1.0.
    // Model ar 1.8: gaps 0.8 and 0.3 give weights 0.9 and 1.3.
    let records = [record("a", 100, 100), record("b", 150, 100)];
    let m1 = store(1.0, &[("a", vec![1.0, 2.0]), ("b", vec![-1.0, 0.5])]);
    let m2 = store(1.8, &[("a", vec![0.0, 1.0]), ("b", vec![2.0, 2.0])]);
    let sum_cfg = PipelineConfig {
        normalize_output: false,
        ..PipelineConfig::default()
    };
    let sum = fuse_stores(&sum_cfg, &[m1.clone(), m2.clone()], &records).unwrap();
    let expect_a = [1.3 * 1.0 + 0.9 * 0.0, 1.3 * 2.0 + 0.9 * 1.0];
    let expect_b = [1.0 * -1.0 + 1.3 * 2.0, 1.0 * 0.5 + 1.3 * 2.0];
    for (got, want) in sum.entries[0].values.iter().zip(expect_a) {
        assert!((got - want).abs() < 1e-12);
    }
    for (got, want) in sum.entries[1].values.iter().zip(expect_b) {
        assert!((got - want).abs() < 1e-12);
    }

    let cat_cfg = PipelineConfig {
        mode: ModeKey::Concat,
        ..sum_cfg
    };
    let cat = fuse_stores(&cat_cfg, &[m2, m1], &records).unwrap();
    assert_eq!(cat.dim, 4);
    let want = [1.3, 2.6, 0.0, 0.9];
    for (got, w) in cat.entries[0].values.iter().zip(want) {
        assert!((got - w).abs() < 1e-12, "{:?}", cat.entries[0].values);
    }
}

#[test]
fn mismatched_ids_list_at_most_five() {
    let _serial = serial();
    let cfg = PipelineConfig::default();
    let ids: Vec<String> = (0..8).map(|i| format!("img{i}")).collect();
    let full: Vec<(&str, Vec<f64>)> = ids.iter().map(|i| (i.as_str(), vec![1.0])).collect();
    let a = store(1.0, &full);
    let b = store(1.3, &full[..1]);
    let records: Vec<_> = ids.iter().map(|i| record(i, 10, 10)).collect();
    match fuse_stores(&cfg, &[a, b], &records) {
        Err(Error::IdMismatch(missing)) => assert_eq!(missing, ["img1", "img2", "img3", "img4", "img5"]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn encoding_is_repeatable_and_tagged_per_model() {
    let _serial = serial();
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("c");
    generate_corpus(&corpus, &SynthSpec { vehicles: 1, seed: 0 }).unwrap();
    let cfg = PipelineConfig {
        corpus: corpus.clone(),
        ..PipelineConfig::default()
    };
    let analysis = arpatch::pipeline::analyze(&cfg).unwrap();
    let records = scan(&cfg, &corpus).unwrap().records;
    let mut ars = Vec::new();
    for i in 0..3 {
        let s = encode(&cfg, &analysis.plan, i, &records).unwrap();
        assert_eq!((s.len(), s.dim), (6, 64));
        let mut x = Vec::new();
        let mut y = Vec::new();
        s.write_to(&mut x).unwrap();
        encode(&cfg, &analysis.plan, i, &records).unwrap().write_to(&mut y).unwrap();
        assert_eq!(x, y);
        ars.push(s.meta.model_ar.unwrap());
    }
    assert_eq!(ars, analysis.plan.entries.iter().map(|e| e.aspect_ratio).collect::<Vec<_>>());
    assert!(ars[0] < ars[1] && ars[1] < ars[2]);
    assert!(encode(&cfg, &analysis.plan, 3, &records).is_err());
}

#[test]
fn bench_rows_are_deterministic_and_stable() {
    let _serial = serial();
    let cfg = PipelineConfig::default();
    let single = bench(&cfg, &[[64, 64, 16, 16]]).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].n, 16);

    let grid = [[224, 224, 16, 16], [224, 298, 12, 16]];
    let a = bench(&cfg, &grid).unwrap();
    let b = bench(&cfg, &grid).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.height, x.width, x.s_h, x.s_w, x.n), (y.height, y.width, y.s_h, y.s_w, y.n));
        let ratio = x.median_ms / y.median_ms;
        assert!((1.0 / 1.2..=1.2).contains(&ratio), "{} vs {} ms", x.median_ms, y.median_ms);
    }
    assert!(a[0].median_ms < a[1].median_ms);
}

#[test]
fn augmented_images_stay_in_source_range() {
    let _serial = serial();
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("c");
    generate_corpus(&corpus, &SynthSpec { vehicles: 2, seed: 5 }).unwrap();
    let cfg = PipelineConfig {
        corpus: corpus.clone(),
        mix_prob: 1.0,
        ..PipelineConfig::default()
    };
    let out = tmp.path().join("aug");
    for rec in arpatch::pipeline::augment(&cfg, &corpus, &out).unwrap() {
        let src = ImageTensor::load(&corpus.join(&rec.source)).unwrap();
        let dst = ImageTensor::load(&out.join(&rec.output)).unwrap();
        for c in 0..3 {
            let chan = |img: &ImageTensor| {
                let v: Vec<f64> = (0..img.height() * img.width()).map(|k| img.data()[k * 3 + c]).collect();
                (v.iter().cloned().fold(f64::INFINITY, f64::min), v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            };
            let (lo, hi) = chan(&src);
            let (olo, ohi) = chan(&dst);
            assert!(olo >= lo && ohi <= hi, "{}: channel {c}", rec.source);
        }
        assert_ne!(src, dst, "{}", rec.source);
    }
}
