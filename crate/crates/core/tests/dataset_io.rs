use mtpsl::harness::{load_or_generate, ExperimentConfig};
use mtpsl::synth::{dataset_from_bytes, dataset_to_bytes, generate_dataset, load_dataset, save_dataset, SceneConfig};
use mtpsl::task::{label_counts, Protocol};
use mtpsl::Error;

fn small() -> mtpsl::synth::Dataset {
    let scene = SceneConfig { height: 16, width: 16, ..SceneConfig::default() };
    generate_dataset(&scene, 3, 30, 6, &Protocol::Imbalanced(vec![0.9, 0.5, 0.3]), 4).unwrap()
}

#[test]
fn file_round_trip_is_bit_exact() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    save_dataset(&path, &ds).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.train, ds.train);
    assert_eq!(back.test, ds.test);
    assert_eq!(back.manifest(), ds.manifest());
    assert_eq!(std::fs::read(&path).unwrap(), dataset_to_bytes(&back).unwrap());
}

#[test]
fn every_corrupted_byte_is_rejected() {
    let bytes = dataset_to_bytes(&small()).unwrap();
    for pos in (0..bytes.len()).step_by(997) {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(dataset_from_bytes(&bad).is_err(), "byte {pos}");
    }
    assert!(dataset_from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn checksum_failure_is_reported_as_such() {
    let mut bytes = dataset_to_bytes(&small()).unwrap();
    let n = bytes.len();
    bytes[n - 100] ^= 1;
    assert!(matches!(dataset_from_bytes(&bytes), Err(Error::Checksum)));
}

#[test]
fn masks_respect_protocol_and_seed() {
    let a = small();
    assert_eq!(a.train_masks(), small().train_masks());
    let counts = label_counts(&a.train_masks(), 3);
    assert!(counts[0] > counts[1] && counts[1] > counts[2], "{counts:?}");
    assert!(a.test.iter().all(|s| s.mask.unlabelled.is_empty()));
}

#[test]
fn config_can_point_at_a_saved_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    let base = ExperimentConfig { height: 16, width: 16, n_train: 10, n_test: 4, ..ExperimentConfig::default() };
    let generated = load_or_generate(&base).unwrap();
    save_dataset(&path, &generated).unwrap();
    let loaded = load_or_generate(&ExperimentConfig { data: Some(path), ..base.clone() }).unwrap();
    assert_eq!(loaded.train, generated.train);
    let wrong_k = ExperimentConfig { num_tasks: 2, data: loaded_path(&dir), ..base };
    assert!(load_or_generate(&wrong_k).is_err());
}

fn loaded_path(dir: &tempfile::TempDir) -> Option<std::path::PathBuf> {
    Some(dir.path().join("data.bin"))
}
