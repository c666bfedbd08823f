use std::io::Cursor;

use freqattack_core::models::io::{
    load_dataset_split, load_weights, read_container, save_dataset, save_weights, weights_from_tensors, weights_to_tensors,
    write_container, NamedTensor, TENSORS_MAGIC, WEIGHTS_MAGIC,
};
use freqattack_core::models::layers::softmax_cross_entropy;
use freqattack_core::models::train::accuracy;
use freqattack_core::models::{generate_synthetic_dataset, train, Arch, Classifier, Model, SynthDatasetSpec, TrainConfig};
use freqattack_core::Error;

#[test]
fn weights_roundtrip_for_every_arch() {
    let dir = tempfile::tempdir().unwrap();
    let (_, te) = generate_synthetic_dataset(&SynthDatasetSpec::new(9, 0, 20)).unwrap();
    for arch in Arch::ALL {
        let m = Classifier::new(arch, [3, 32, 32], 10, 5).unwrap();
        let path = dir.path().join(format!("{arch}.cfw"));
        save_weights(&m, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.logits(&te.images).unwrap(), m.logits(&te.images).unwrap());
    }
}

#[test]
fn container_errors_are_distinct() {
    let m = Classifier::new(Arch::SmallCnnA, [3, 32, 32], 10, 5).unwrap();
    let tensors = weights_to_tensors(&m);
    let mut bytes = Vec::new();
    write_container(&mut bytes, WEIGHTS_MAGIC, &tensors).unwrap();

    assert!(matches!(read_container(Cursor::new(&bytes), TENSORS_MAGIC), Err(Error::BadMagic { .. })));
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(read_container(Cursor::new(cut), WEIGHTS_MAGIC), Err(Error::Truncated(_))));

    let mut missing = tensors.clone();
    let gone = missing.remove(1).name;
    match weights_from_tensors(&missing) {
        Err(Error::MissingTensor(name)) => assert_eq!(name, gone),
        other => panic!("expected a missing tensor, got {other:?}"),
    }
    let mut extra = tensors.clone();
    extra.push(NamedTensor::new("smallcnn_a/extra.weight", vec![1], vec![0.0]));
    assert!(matches!(weights_from_tensors(&extra), Err(Error::TensorCountMismatch { .. })));

    let dir = tempfile::tempdir().unwrap();
    let err = load_weights(&dir.path().join("absent.cfw")).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn dataset_is_a_pure_function_of_seed_and_index() {
    let spec = SynthDatasetSpec::new(3, 50, 30);
    let (a_tr, a_te) = generate_synthetic_dataset(&spec).unwrap();
    let (b_tr, b_te) = generate_synthetic_dataset(&spec).unwrap();
    assert_eq!(a_tr, b_tr);
    assert_eq!(a_te, b_te);
    // a longer train split leaves the shared prefix untouched
    let (c_tr, _) = generate_synthetic_dataset(&SynthDatasetSpec::new(3, 80, 30)).unwrap();
    assert_eq!(c_tr.head(50), a_tr);
    let mut counts = [0usize; 10];
    a_tr.labels.iter().for_each(|&y| counts[y] += 1);
    assert!(counts.iter().all(|&c| c == 5));
    assert!(a_tr.images.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.cft");
    save_dataset(&path, &a_tr, &a_te).unwrap();
    assert_eq!(load_dataset_split(&path, "train").unwrap(), a_tr);
    assert_eq!(load_dataset_split(&path, "test").unwrap(), a_te);
    assert!(load_dataset_split(&path, "valid").is_err());
}

#[test]
fn uniform_logits_cost_ln10() {
    let (loss, _) = softmax_cross_entropy(&[0.3f64; 10], 4);
    assert!((loss - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn untrained_model_is_near_chance() {
    let (tr, te) = generate_synthetic_dataset(&SynthDatasetSpec::new(5, 10, 1000)).unwrap();
    let mut m = Classifier::new(Arch::SmallCnnA, [3, 32, 32], 10, 8).unwrap();
    let metrics = train(&mut m, &tr, &te, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
    assert!((metrics.test_accuracy - 0.1).abs() <= 0.05, "{}", metrics.test_accuracy);
}

#[test]
fn smallcnn_a_learns_the_synthetic_task() {
    let (tr, te) = generate_synthetic_dataset(&SynthDatasetSpec::new(0, 4000, 1000)).unwrap();
    let mut m = Classifier::new(Arch::SmallCnnA, [3, 32, 32], 10, 0).unwrap();
    let metrics = train(&mut m, &tr, &te, &TrainConfig::default()).unwrap();
    assert_eq!(metrics.epoch_losses.len(), 20);
    assert!(metrics.test_accuracy >= 0.85, "test accuracy {}", metrics.test_accuracy);
    assert_eq!(accuracy(&m, &te).unwrap(), metrics.test_accuracy);
}
