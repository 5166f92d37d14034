mod common;

use arpatch::mixup::{apply_patch_mixup, apply_patch_mixup_batch, plan_mixup, sample_permutation};
use arpatch::patchify::{plan_grid, StrideSpec};
use common::random_image;

#[test]
fn full_participation_permutation_is_uniform() {
    // Position of patch 0 over 10,000 seeds: each of 196 slots expects
    // 10000 / 196 ≈ 51 hits.
    let n = 196;
    let trials = 10_000;
    let mut counts = vec![0usize; n];
    for seed in 0..trials {
        let (perm, mask) = sample_permutation(n, 1.0, seed).unwrap();
        assert!(mask.iter().all(|&m| m));
        counts[perm[0]] += 1;
    }
    let p = 1.0 / n as f64;
    let mean = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    // Bonferroni-style band wide enough for 196 simultaneous checks.
    let band = 4.0 * sigma;
    for (slot, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= band, "slot {slot}: {c} hits, mean {mean:.1}, band {band:.1}");
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
    // 195 degrees of freedom: mean 195, sd ≈ 19.7.
    assert!(chi2 < 195.0 + 3.0 * (2.0f64 * 195.0).sqrt(), "chi-square {chi2}");

    assert_eq!(sample_permutation(n, 1.0, 42).unwrap(), sample_permutation(n, 1.0, 42).unwrap());
}

#[test]
fn participation_rate_follows_probability() {
    let mut hits = 0usize;
    let total = 400 * 196;
    for seed in 0..400 {
        hits += sample_permutation(196, 0.3, seed).unwrap().1.iter().filter(|&&m| m).count();
    }
    let rate = hits as f64 / total as f64;
    let sigma = (0.3 * 0.7 / total as f64).sqrt();
    assert!((rate - 0.3).abs() < 3.0 * sigma, "rate {rate}");
}

#[test]
fn plan_fields_are_consistent() {
    let grid = plan_grid(64, 80, StrideSpec::new(12, 16, 16).unwrap()).unwrap();
    let plan = plan_mixup(&grid, 0.5, 3).unwrap();
    assert_eq!(plan.n, grid.n);
    for i in 0..plan.n {
        assert_eq!(plan.lambdas[i], plan.scores.get(i, plan.perm[i]));
        if !plan.mix_mask[i] {
            assert_eq!(plan.perm[i], i);
        }
        assert_eq!(plan.distances.get(i, i), 0.0);
        assert!(plan.lambdas[i] > 0.0 && plan.lambdas[i] <= 1.0);
    }
}

#[test]
fn no_leakage_between_images() {
    let stride = StrideSpec::new(6, 8, 8).unwrap();
    let a = random_image(40, 48, 3, 1);
    let b = random_image(40, 48, 3, 2);
    let mut b2 = b.clone();
    b2.set(5, 5, 0, 0.999);
    let first = apply_patch_mixup_batch(&[("a".into(), a.clone()), ("b".into(), b)], stride, 0.7, 4).unwrap();
    let second = apply_patch_mixup_batch(&[("a".into(), a), ("b".into(), b2)], stride, 0.7, 4).unwrap();
    assert_eq!(first[0], second[0]);
    assert_ne!(first[1], second[1]);
}

#[test]
fn deterministic_across_thread_counts() {
    let img = random_image(96, 128, 3, 5);
    let stride = StrideSpec::new(12, 16, 16).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| apply_patch_mixup(&img, stride, 0.5, 9).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn too_small_image_errors() {
    let img = random_image(10, 40, 3, 0);
    let err = apply_patch_mixup(&img, StrideSpec::square(16), 0.5, 0).unwrap_err();
    assert!(err.to_string().contains("height"));
}
