use fedsilo::datagen::{
    center_shifts, dataset_path, generate_synthetic, load_dataset, save_dataset, split_partitions, Split, SplitRatios,
    SyntheticSpec,
};
use fedsilo::InputShape;

fn spec(shift: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_centers: 2,
        samples_per_center: 300,
        image: InputShape::new(3, 8, 8),
        shift_magnitude: shift,
        seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn generated_splits_survive_the_file_format() {
    let dir = tempfile::tempdir().unwrap();
    for ds in generate_synthetic(&spec(0.5, 1)).unwrap() {
        let (train, val, test) = split_partitions(&ds, SplitRatios::default(), 4).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (180, 60, 60));
        for part in [&train, &val, &test] {
            let path = dataset_path(dir.path(), part.center_id, part.split);
            save_dataset(part, &path).unwrap();
            assert_eq!(&load_dataset(&path).unwrap(), part);
        }
    }
    assert!(dir.path().join("center_1").join("test.fsd").exists());
    assert_eq!(
        load_dataset(dataset_path(dir.path(), 1, Split::Val)).unwrap().split,
        Split::Val
    );
}

#[test]
fn without_shift_centers_look_alike() {
    let ds = generate_synthetic(&spec(0.0, 2)).unwrap();
    let means: Vec<f64> = ds.iter().map(|d| d.mean_pixel()).collect();
    // per-image level is uniform on [0.3, 0.6]: sd of a 300-image mean is about 0.005
    assert!((means[0] - means[1]).abs() < 0.02, "{means:?}");
    assert!(center_shifts(&spec(0.0, 2)).iter().all(|s| s.is_identity()));
}

#[test]
fn shift_separates_centers_on_average() {
    let mut diffs = Vec::new();
    for seed in 0..8 {
        let ds = generate_synthetic(&spec(0.5, seed)).unwrap();
        diffs.push((ds[0].mean_pixel() - ds[1].mean_pixel()).abs());
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    assert!(mean >= 0.05, "{diffs:?}");
}
