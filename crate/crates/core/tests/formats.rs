use medmfg::data::{fseb, generate_synthetic, load_embeddings, save_embeddings, SyntheticSpec};
use medmfg::model::{ModelDims, ModelParams, Toggles};
use medmfg::training::checkpoint;
use medmfg::training::{load_checkpoint, save_checkpoint, Checkpoint};
use medmfg::Error;
use proptest::prelude::*;

fn spread(len: usize, points: usize) -> Vec<usize> {
    // evenly spaced cut points, always including the first and last
    if len <= points {
        return (0..len).collect();
    }
    (0..points).map(|i| i * (len - 1) / (points - 1)).collect()
}

fn sample_checkpoint() -> Checkpoint {
    Checkpoint {
        params: ModelParams::init(ModelDims::toy(), 3).unwrap(),
        toggles: Toggles { ifm: false, ..Toggles::ALL },
        config_fingerprint: "0123abcd".into(),
    }
}

#[test]
fn fseb_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SyntheticSpec { n_classes: 4, dim: 12, per_class_count: 7, ..Default::default() }).unwrap();
    let path = dir.path().join("d.fseb");
    save_embeddings(&ds, &path).unwrap();
    let back = load_embeddings(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(std::fs::read(&path).unwrap(), fseb::encode(&back));
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ck = sample_checkpoint();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(std::fs::read(&path).unwrap(), checkpoint::encode(&back));
}

#[test]
fn every_fseb_truncation_is_corruption() {
    let ds = generate_synthetic(&SyntheticSpec { n_classes: 5, dim: 16, per_class_count: 9, ..Default::default() }).unwrap();
    let bytes = fseb::encode(&ds);
    for cut in spread(bytes.len(), 100) {
        match fseb::decode(&bytes[..cut]) {
            Err(Error::Corruption { .. }) => {}
            other => panic!("cut at {cut} of {}: {other:?}", bytes.len()),
        }
    }
}

#[test]
fn every_checkpoint_truncation_is_corruption() {
    let bytes = checkpoint::encode(&sample_checkpoint());
    for cut in spread(bytes.len(), 100) {
        match checkpoint::decode(&bytes[..cut]) {
            Err(Error::Corruption { .. }) => {}
            other => panic!("cut at {cut} of {}: {other:?}", bytes.len()),
        }
    }
}

#[test]
fn truncated_file_on_disk_is_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.fseb");
    let ds = generate_synthetic(&SyntheticSpec { n_classes: 2, dim: 4, per_class_count: 3, ..Default::default() }).unwrap();
    save_embeddings(&ds, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.pop();
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_embeddings(&path), Err(Error::Corruption { .. })));
}

#[test]
fn missing_file_is_io() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_embeddings(dir.path().join("nope.fseb")), Err(Error::Io(_))));
    assert!(matches!(load_checkpoint(dir.path().join("nope.ckpt")), Err(Error::Io(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_synthetic_dataset_round_trips(
        classes in 1usize..6,
        dim in 1usize..20,
        per_class in 1usize..8,
        sigma in 0.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let ds = generate_synthetic(&SyntheticSpec {
            n_classes: classes,
            dim,
            per_class_count: per_class,
            within_class_sigma: sigma,
            seed,
            ..Default::default()
        }).unwrap();
        let bytes = fseb::encode(&ds);
        let back = fseb::decode(&bytes).unwrap();
        prop_assert_eq!(fseb::encode(&back), bytes);
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = fseb::decode(&bytes);
        let _ = checkpoint::decode(&bytes);
    }
}
