//! Dataset generation, encoding and persistence.

use std::fs;

use doem_core::data::dump::{load_dataset, save_dataset, ImageShape};
use doem_core::data::encode::{binarize_1bit, downscale_28_to_8, encode_8bit_planes, DEFAULT_THRESHOLD};
use doem_core::data::idx::{encode_idx, read_idx, IdxTensor, ImageSet};
use doem_core::data::mixture::{gen_bernoulli_mixture, BernoulliMixtureSpec, MixtureTable};
use doem_core::data::{basis, Provenance};

#[test]
fn sampled_mixture_converges_to_its_table() {
    let spec = BernoulliMixtureSpec { n_samples: 1_000_000, seed: 3, ..BernoulliMixtureSpec::default() };
    let (ds, table) = gen_bernoulli_mixture(&spec).unwrap();
    let table = table.unwrap();
    let mut counts = vec![0u64; 256];
    for row in ds.rows() {
        counts[basis::index_of(row) as usize] += 1;
    }
    // Independent evaluation of the mixture formula from the recorded modes.
    let exact: Vec<f64> = (0..256u64)
        .map(|v| {
            table.modes.iter().map(|&k| {
                let d = (v ^ k).count_ones() as i32;
                0.9f64.powi(8 - d) * 0.1f64.powi(d)
            }).sum::<f64>() / 8.0
        })
        .collect();
    for (a, b) in exact.iter().zip(&table.probabilities) {
        assert!((a - b).abs() < 1e-15);
    }
    let tv: f64 = counts.iter().zip(&exact).map(|(&c, &p)| (c as f64 / 1e6 - p).abs()).sum::<f64>() / 2.0;
    assert!(tv < 0.005, "total variation {tv}");
}

#[test]
fn mixture_table_csv_roundtrip() {
    let t = MixtureTable::exact(3, &[7], 0.9).unwrap();
    assert!((t.probabilities[7] - 0.729).abs() < 1e-15);
    let back = MixtureTable::from_csv(&t.to_csv().unwrap()).unwrap();
    assert_eq!(back, t.probabilities);
}

#[test]
fn dataset_dumps_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = BernoulliMixtureSpec { seed: 11, ..BernoulliMixtureSpec::default() };
    let mut files = Vec::new();
    for run in 0..2 {
        let (ds, _) = gen_bernoulli_mixture(&spec).unwrap();
        let path = dir.path().join(format!("run{run}.bin"));
        save_dataset(&path, &ds, None).unwrap();
        files.push((fs::read(&path).unwrap(), fs::read(dir.path().join(format!("run{run}.bin.json"))).unwrap()));
    }
    assert_eq!(files[0], files[1]);
    let (back, manifest) = load_dataset(&dir.path().join("run0.bin")).unwrap();
    assert_eq!(back.bits(), gen_bernoulli_mixture(&spec).unwrap().0.bits());
    assert_eq!(manifest.unwrap().provenance.seed, Some(11));
}

#[test]
fn idx_pipeline_to_image_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..3 * 784).map(|i| ((i * 37) % 256) as u8).collect();
    let path = dir.path().join("imgs-idx3-ubyte");
    fs::write(&path, encode_idx(&IdxTensor { dims: vec![3, 28, 28], data: pixels.clone() }).unwrap()).unwrap();
    let images = ImageSet::try_from(read_idx(&path).unwrap()).unwrap();
    assert_eq!((images.n, images.rows, images.cols), (3, 28, 28));

    let one = binarize_1bit(&images, DEFAULT_THRESHOLD, Provenance::new("idx")).unwrap();
    assert_eq!(one.d_v(), 784);
    for (b, p) in one.bits().iter().zip(&pixels) {
        assert_eq!(*b, (*p >= 128) as u8);
    }
    let eight = encode_8bit_planes(&images, Provenance::new("idx")).unwrap();
    assert_eq!(eight.d_v(), 6272);
    assert_eq!(&eight.row(0)[8..16], &[0, 0, 1, 0, 0, 1, 0, 1]);

    let small = downscale_28_to_8(&images).unwrap();
    assert_eq!((small.rows, small.cols), (8, 8));
    let ds = binarize_1bit(&small, DEFAULT_THRESHOLD, Provenance::new("idx")).unwrap();
    let out = dir.path().join("small.bin");
    save_dataset(&out, &ds, Some(ImageShape { rows: 8, cols: 8, bits: 1 })).unwrap();
    let (_, manifest) = load_dataset(&out).unwrap();
    assert_eq!(manifest.unwrap().image, Some(ImageShape { rows: 8, cols: 8, bits: 1 }));
}
