mod common;

use ternary_spike::data::{parse_idx, Dataset};
use ternary_spike::Error;

#[test]
fn idx_decode_matches_bytes() {
    // 2 images of 2x3, big-endian header
    let mut bytes = vec![0, 0, 0x08, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
    bytes.extend_from_slice(&[0, 51, 102, 153, 204, 255, 1, 2, 3, 4, 5, 6]);
    let t = parse_idx(&bytes).unwrap();
    // image files gain a channel axis and are scaled to [0, 1]
    assert_eq!(t.shape(), &[2, 1, 2, 3]);
    let expected: Vec<f32> = [0u8, 51, 102, 153, 204, 255, 1, 2, 3, 4, 5, 6].iter().map(|&b| b as f32 / 255.0).collect();
    assert_eq!(t.data(), &expected[..]);

    let labels = parse_idx(&[0, 0, 0x08, 1, 0, 0, 0, 3, 7, 0, 9]).unwrap();
    assert_eq!(labels.data(), &[7.0, 0.0, 9.0]);
}

#[test]
fn truncated_idx_reports_offset() {
    let bytes = [0, 0, 0x08, 1, 0, 0, 0, 4, 9, 9];
    match parse_idx(&bytes) {
        // 4 payload bytes declared, the first missing one is byte 10
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
        other => panic!("{other:?}"),
    }
}

#[test]
fn fixture_directory_loads_scaled() {
    let dir = tempfile::tempdir().unwrap();
    common::write_idx_fixture(dir.path(), 20, 10, 8);
    let d = Dataset::load_idx_dir(dir.path(), "fixture").unwrap();
    assert_eq!(d.train.len(), 20);
    assert_eq!(d.test.sample_shape(), &[1, 8, 8]);
    assert_eq!(d.test.labels[..3], [0, 1, 2]);
    let small = d.truncated(Some(5), Some(3)).unwrap();
    assert_eq!((small.train.len(), small.test.len()), (5, 3));
}

#[test]
fn bundled_mnist_subset() {
    let d = Dataset::load_idx_dir(common::workspace_root().join("data/mnist"), "mnist").unwrap();
    assert_eq!((d.train.len(), d.test.len()), (8000, 2000));
    assert_eq!(d.num_classes, 10);
    assert!(d.train.labels.iter().all(|&l| l < 10));
}

#[test]
fn missing_directory_names_path() {
    let err = Dataset::load_idx_dir("/nonexistent/mnist", "mnist").unwrap_err().to_string();
    assert!(err.contains("/nonexistent/mnist"), "{err}");
}
