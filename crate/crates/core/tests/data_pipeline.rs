//! Dataset round-trips, the pixel-space separability baseline and the golden
//! augmentation regressions that pin the exact transform arithmetic.

use epct_core::data::augment::{augment, AugmentationPolicy};
use epct_core::data::split::{load_split, save_split, DatasetError};
use epct_core::data::synth::synth_dataset;
use epct_core::tensor::io;
use epct_core::Tensor;
use std::path::PathBuf;

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join("epct-data-tests")
        .join(format!("{tag}-{}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn synth_split_round_trips_exactly() {
    let split = synth_dataset(4, 6, 16, 0.3, 12);
    let dir = tempdir("roundtrip");
    let manifest = save_split(&dir, &split).unwrap();
    let back = load_split(&manifest, None).unwrap();
    assert_eq!(back.n_classes(), split.n_classes());
    assert_eq!(back.image_shape, split.image_shape);
    for (a, b) in back.classes.iter().zip(&split.classes) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.images.data(), b.images.data());
    }
}

#[test]
fn loader_rejects_missing_and_undersized_data() {
    let dir = tempdir("loader-errors");
    // Empty manifest.
    std::fs::write(
        dir.join("manifest.json"),
        r#"{"role":"train","image_shape":[3,8,8],"classes":[]}"#,
    )
    .unwrap();
    assert!(matches!(
        load_split(&dir.join("manifest.json"), None),
        Err(DatasetError::EmptySplit)
    ));

    // Manifest referencing a file that does not exist.
    std::fs::write(
        dir.join("manifest.json"),
        r#"{"role":"train","image_shape":[3,8,8],"classes":[{"class":"ghost","file":"ghost.epct","count":2}]}"#,
    )
    .unwrap();
    assert!(matches!(
        load_split(&dir.join("manifest.json"), None),
        Err(DatasetError::MissingFile(_))
    ));

    // A class one sample short of the required K+Q names itself.
    let split = synth_dataset(2, 3, 8, 0.0, 5);
    let manifest = save_split(&dir, &split).unwrap();
    match load_split(&manifest, Some(4)) {
        Err(DatasetError::ClassTooSmall { name, got, required }) => {
            assert_eq!(name, "class_0");
            assert_eq!(got, 3);
            assert_eq!(required, 4);
        }
        other => panic!("expected ClassTooSmall, got {other:?}"),
    }
}

#[test]
fn loader_rejects_count_mismatch() {
    let dir = tempdir("count-mismatch");
    let split = synth_dataset(1, 3, 8, 0.0, 6);
    save_split(&dir, &split).unwrap();
    // Rewrite the manifest to claim one extra image.
    std::fs::write(
        dir.join("manifest.json"),
        r#"{"role":"train","image_shape":[3,8,8],"classes":[{"class":"class_0","file":"class_0.epct","count":4}]}"#,
    )
    .unwrap();
    assert!(matches!(
        load_split(&dir.join("manifest.json"), None),
        Err(DatasetError::CountMismatch { .. })
    ));
}

/// Nearest-centroid on raw pixels must separate the default synthetic
/// classes nearly perfectly; this is the baseline the end-to-end smoke's
/// accuracy floor leans on.
#[test]
fn pixel_centroid_baseline_exceeds_95_percent() {
    let split = synth_dataset(8, 60, 32, 0.2, 77);
    let per = 3 * 32 * 32;
    let train_per_class = 50;
    let mut centroids = vec![vec![0.0f64; per]; 8];
    for (k, class) in split.classes.iter().enumerate() {
        for i in 0..train_per_class {
            for (c, v) in centroids[k].iter_mut().zip(class.image(i)) {
                *c += v;
            }
        }
        for c in centroids[k].iter_mut() {
            *c /= train_per_class as f64;
        }
    }
    let mut correct = 0;
    let mut total = 0;
    for (k, class) in split.classes.iter().enumerate() {
        for i in train_per_class..class.count() {
            let img = class.image(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d: f64 = img.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            correct += usize::from(best == k);
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc > 0.95, "pixel-centroid baseline only reached {acc}");
}

fn golden_input() -> Vec<f64> {
    // First image of a fixed synthetic class: fully deterministic.
    let split = synth_dataset(1, 1, 32, 0.0, 2024);
    split.classes[0].image(0).to_vec()
}

fn goldens_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/goldens")
}

const GOLDEN_SEED: u64 = 314159;

fn golden_cases() -> Vec<(&'static str, AugmentationPolicy)> {
    vec![
        ("aug_standard", AugmentationPolicy::standard()),
        ("aug_simclr", AugmentationPolicy::simclr()),
    ]
}

#[test]
fn augmentation_matches_golden_outputs_bitwise() {
    let input = golden_input();
    for (name, policy) in golden_cases() {
        let path = goldens_dir().join(format!("{name}.epct"));
        let golden = io::load_tensor(&path)
            .unwrap_or_else(|e| panic!("golden {name} missing ({e}); run the ignored regenerate_goldens test"));
        let out = augment(&input, 3, 32, 32, &policy, GOLDEN_SEED);
        assert_eq!(golden.shape(), &[3, 32, 32]);
        for (i, (a, b)) in out.iter().zip(golden.data()).enumerate() {
            assert!(
                a.to_bits() == b.to_bits(),
                "{name}: pixel {i} drifted: {a} vs golden {b}"
            );
        }
    }
}

#[test]
#[ignore = "writes the golden fixtures; run once after an intentional transform change"]
fn regenerate_goldens() {
    let input = golden_input();
    std::fs::create_dir_all(goldens_dir()).unwrap();
    for (name, policy) in golden_cases() {
        let out = augment(&input, 3, 32, 32, &policy, GOLDEN_SEED);
        let tensor = Tensor::new(vec![3, 32, 32], out).unwrap();
        io::save_tensor(&goldens_dir().join(format!("{name}.epct")), &tensor).unwrap();
    }
}
