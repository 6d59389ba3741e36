use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rml::data::{load_dataset, make_blobs, normalize, save_dataset, Encoding};
use rml::tasks::{kmeans, KMeansConfig};
use rml::*;

fn write_f32(path: &Path, values: &[f32]) {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).unwrap();
}

fn two_view_fixture(dir: &Path, f32_rows: usize) -> std::path::PathBuf {
    fs::write(dir.join("a.csv"), "1,2,3\n4,5,6\n7,8,9\n10,11,12\n").unwrap();
    let vals: Vec<f32> = (0..f32_rows * 2).map(|i| i as f32 * 0.5).collect();
    write_f32(&dir.join("b.f32"), &vals);
    fs::write(dir.join("labels.txt"), "0\n1\n1\n0\n").unwrap();
    let manifest = format!(
        r#"name = "fixture"

[[views]]
file = "a.csv"
rows = 4
cols = 3
encoding = "csv"

[[views]]
file = "b.f32"
rows = {f32_rows}
cols = 2
encoding = "f32le-rowmajor"

[labels]
file = "labels.txt"
classes = 2
"#
    );
    let path = dir.join("manifest.toml");
    fs::write(&path, manifest).unwrap();
    path
}

#[test]
fn loads_mixed_encodings() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_dataset(&two_view_fixture(dir.path(), 4)).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.dims(), vec![3, 2]);
    assert_eq!(ds.views()[0].row(3), &[10.0, 11.0, 12.0]);
    assert_eq!(ds.views()[1].row(1), &[1.0, 1.5]);
    assert_eq!(ds.labels().unwrap(), &[0, 1, 1, 0]);
    assert_eq!(ds.classes(), Some(2));
}

#[test]
fn row_mismatch_names_both_counts() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(&two_view_fixture(dir.path(), 5)).unwrap_err().to_string();
    assert!(err.contains('4') && err.contains('5'), "{err}");
}

#[test]
fn missing_file_and_nan_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = two_view_fixture(dir.path(), 4);
    fs::write(dir.path().join("a.csv"), "1,2,3\n4,NaN,6\n7,8,9\n10,11,12\n").unwrap();
    let err = load_dataset(&path).unwrap_err().to_string();
    assert!(err.contains("row 1") && err.contains("col 1"), "{err}");
    fs::write(dir.path().join("a.csv"), "1,2,3\n4,5,6\n7,8,9\n10,11,12\n").unwrap();
    fs::remove_file(dir.path().join("b.f32")).unwrap();
    assert_eq!(load_dataset(&path).unwrap_err().kind(), "io");
}

#[test]
fn manifest_normalization_directive_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let path = two_view_fixture(dir.path(), 4);
    let text = fs::read_to_string(&path).unwrap().replacen("name", "normalize = \"minmax\"\nname", 1);
    fs::write(&path, text).unwrap();
    let ds = load_dataset(&path).unwrap();
    assert_eq!(ds.views()[0].row(0), &[0.0, 0.0, 0.0]);
    assert_eq!(ds.views()[0].row(3), &[1.0, 1.0, 1.0]);
}

fn exact_in_f32(ds: &MultiViewDataset) -> MultiViewDataset {
    let views = ds.views().iter().map(|v| v.map(|x| x as f32 as f64)).collect();
    MultiViewDataset::new(ds.name.clone(), views, ds.labels().map(<[usize]>::to_vec), ds.classes()).unwrap()
}

#[test]
fn save_then_load_is_bit_identical() {
    let spec = SynthSpec {
        samples: 40,
        classes: 4,
        dims: vec![3, 5],
        ..SynthSpec::default()
    };
    let ds = make_blobs(&spec).unwrap();
    for (encoding, source) in [(Encoding::Csv, ds.clone()), (Encoding::F32Le, exact_in_f32(&ds))] {
        let dir = tempfile::tempdir().unwrap();
        let back = load_dataset(&save_dataset(&source, dir.path(), encoding).unwrap()).unwrap();
        for (a, b) in source.views().iter().zip(back.views()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(source.labels(), back.labels());
        assert_eq!(source.classes(), back.classes());
    }
}

#[test]
fn well_separated_blobs_cluster_from_raw_features() {
    let spec = SynthSpec {
        samples: 500,
        classes: 5,
        dims: vec![20, 50, 10],
        spread: vec![0.5],
        separation: 10.0,
        seed: 3,
    };
    let ds = normalize(&make_blobs(&spec).unwrap(), Normalization::Zscore);
    let mut r = kmeans(&ds.concatenated(), &KMeansConfig::new(5), &mut RngStream::new(0)).unwrap();
    r.score(ds.labels().unwrap()).unwrap();
    assert!(r.acc.unwrap() >= 0.99, "{:?}", r.acc);
}

#[test]
fn blob_centers_respect_separation() {
    let spec = SynthSpec {
        samples: 5,
        classes: 5,
        dims: vec![4, 7],
        spread: vec![0.0],
        separation: 3.0,
        seed: 8,
    };
    let ds = make_blobs(&spec).unwrap();
    for v in ds.views() {
        for a in 0..5 {
            for b in a + 1..5 {
                let d: f64 = v.row(a).iter().zip(v.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
                assert!(d.sqrt() >= 3.0 - 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zscore_moments(values in prop::collection::vec(-100.0f64..100.0, 12..60)) {
        let n = values.len() / 3;
        let x = Tensor64::new(&[n, 3], values[..n * 3].to_vec()).unwrap();
        let ds = MultiViewDataset::new("p", vec![x.clone()], None, None).unwrap();
        let z = normalize(&ds, Normalization::Zscore).views()[0].clone();
        for c in 0..3 {
            let col: Vec<f64> = (0..n).map(|r| z.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
            prop_assert!(mean.abs() <= 1e-9);
            let raw: Vec<f64> = (0..n).map(|r| x.get(r, c)).collect();
            if raw.iter().any(|&v| v != raw[0]) {
                prop_assert!((sd - 1.0).abs() <= 1e-6);
            } else {
                prop_assert!(col.iter().all(|&v| v == 0.0));
            }
        }
        let m = normalize(&ds, Normalization::Minmax).views()[0].clone();
        prop_assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn csv_round_trip(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = RngStream::new(seed);
        let views = vec![
            Tensor64::new(&[n, 2], (0..2 * n).map(|_| rng.normal() * 1e3).collect()).unwrap(),
            Tensor64::new(&[n, 1], (0..n).map(|_| rng.normal() * 1e-3).collect()).unwrap(),
        ];
        let ds = MultiViewDataset::new("rt", views, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let back = load_dataset(&save_dataset(&ds, dir.path(), Encoding::Csv).unwrap()).unwrap();
        for (a, b) in ds.views().iter().zip(back.views()) {
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
