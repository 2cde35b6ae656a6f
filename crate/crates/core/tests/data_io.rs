use std::fs;

use proptest::prelude::*;
use reviewkd::data::{epoch_order, load_cifar, synthetic_dataset, write_cifar, Split, Variant, PIXELS};
use reviewkd::Error;

#[test]
fn cifar100_round_trip_keeps_fine_labels() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthetic_dataset(40, 20, 3, Split::Train).unwrap();
    write_cifar(&ds, Variant::Cifar100, &dir.path().join("train.bin")).unwrap();
    assert_eq!(fs::metadata(dir.path().join("train.bin")).unwrap().len(), 40 * 3074);
    let back = load_cifar(dir.path(), Variant::Cifar100, Split::Train).unwrap();
    assert_eq!(back.len(), 40);
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.images(), ds.images());
}

#[test]
fn cifar100_reads_fine_label_byte() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for i in 0..3u8 {
        bytes.push(19 - i);
        bytes.push(i * 30);
        bytes.extend(std::iter::repeat(i).take(PIXELS));
    }
    fs::write(dir.path().join("test.bin"), bytes).unwrap();
    let ds = load_cifar(dir.path(), Variant::Cifar100, Split::Test).unwrap();
    assert_eq!(ds.labels(), &[0, 30, 60]);
    assert!(ds.image(2).iter().all(|&p| p == 2));
}

#[test]
fn cifar10_reads_five_batches_from_archive_dir() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("cifar-10-batches-bin");
    fs::create_dir(&sub).unwrap();
    let ds = synthetic_dataset(10, 10, 0, Split::Train).unwrap();
    for k in 1..=5 {
        write_cifar(&ds, Variant::Cifar10, &sub.join(format!("data_batch_{k}.bin"))).unwrap();
    }
    let back = load_cifar(dir.path(), Variant::Cifar10, Split::Train).unwrap();
    assert_eq!(back.len(), 50);
    assert_eq!(&back.labels()[40..], ds.labels());
}

#[test]
fn truncated_file_names_offset() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthetic_dataset(4, 4, 0, Split::Test).unwrap();
    let path = dir.path().join("test_batch.bin");
    write_cifar(&ds, Variant::Cifar10, &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes.pop();
    fs::write(&path, bytes).unwrap();
    let err = load_cifar(dir.path(), Variant::Cifar10, Split::Test).unwrap_err();
    assert!(matches!(err, Error::CorruptDataset { .. }));
    assert!(err.to_string().contains("offset 9219"), "{err}");
}

#[test]
fn missing_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_cifar(dir.path(), Variant::Cifar100, Split::Test).unwrap_err();
    assert!(err.to_string().contains("test.bin"), "{err}");
}

#[test]
fn channel_stats_of_constant_planes() {
    let mut ds_bytes = Vec::new();
    for c in 0..3u8 {
        ds_bytes.extend(std::iter::repeat(c * 100).take(PIXELS / 3));
    }
    let ds = reviewkd::data::Dataset::new("c", Split::Train, 1, ds_bytes, vec![0]).unwrap();
    let (mean, std) = ds.channel_stats();
    assert!((mean[1] - 100.0 / 255.0).abs() < 1e-12);
    assert!(std.iter().all(|s| s.abs() < 1e-6));
}

proptest! {
    #[test]
    fn shuffled_epoch_covers_every_index_once(n in 1usize..500, seed in any::<u64>()) {
        let mut order = epoch_order(n, Some(seed));
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }
}
