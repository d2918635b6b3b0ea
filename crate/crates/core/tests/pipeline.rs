use std::sync::Arc;

use protoens::config::{DatasetSource, RunConfig};
use protoens::encoder::{load_frozen, Encoder, EncoderKind, EncoderSpec, FrozenEmbeddingStore};
use protoens::ensemble::ensemble_from_models;
use protoens::episodes::{DatasetIndex, EpisodeSpec, SampleRecord};
use protoens::io::fseb;
use protoens::io::manifest::{load_dataset, write_dataset};
use protoens::io::synth::{gen_synthetic, SyntheticSpec};
use protoens::pipeline;
use protoens::trainer::{evaluate_model, train_model, ProtoModel, TrainConfig};

const CLASSES: usize = 4;

/// One-hot store: every sample of class `c` maps to unit vector `e_c`.
fn one_hot_fixture(per_class: usize) -> (FrozenEmbeddingStore, DatasetIndex) {
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut samples = Vec::new();
    for c in 0..CLASSES {
        for i in 0..per_class {
            let id = format!("scan-{c}-{i}");
            ids.push(id.clone());
            data.extend((0..CLASSES).map(|j| if j == c { 1.0f32 } else { 0.0 }));
            samples.push(SampleRecord {
                id,
                class: c,
                offset: 0,
                len: 1,
            });
        }
    }
    let store = FrozenEmbeddingStore::from_parts("one-hot oracle".into(), CLASSES, ids, data).unwrap();
    let classes = (0..CLASSES).map(|c| format!("k{c}")).collect();
    let index = DatasetIndex::new(classes, samples, Arc::new(vec![0.0])).unwrap();
    (store, index)
}

fn identity_spec(store: &str) -> EncoderSpec {
    EncoderSpec {
        kind: EncoderKind::FrozenProjection {
            store: store.into(),
            identity_init: true,
        },
        input_shape: vec![CLASSES],
        embedding_dim: CLASSES,
        seed: 0,
    }
}

#[test]
fn oracle_embedding_scores_perfectly() {
    let (store, index) = one_hot_fixture(30);
    let enc = Encoder::<f64>::with_store(&identity_spec("unused"), Some(Arc::new(store))).unwrap();
    let model = ProtoModel::new("oracle", enc, 1e-4).unwrap();
    let eval = evaluate_model(&model, &index, &EpisodeSpec::default(), 10, 3).unwrap();
    assert_eq!(eval.metrics.accuracy, 1.0);
    let cm = &eval.metrics.confusion.counts;
    for (t, row) in cm.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            assert_eq!(n == 0, t != p, "confusion[{t}][{p}] = {n}");
        }
    }
}

#[test]
fn five_oracle_models_vote_perfectly() {
    let (store, index) = one_hot_fixture(30);
    let store = Arc::new(store);
    let preds: Vec<_> = (0..5)
        .map(|i| {
            let enc = Encoder::<f32>::with_store(&identity_spec("unused"), Some(Arc::clone(&store))).unwrap();
            let model = ProtoModel::new(format!("oracle{i}"), enc, 1e-4).unwrap();
            evaluate_model(&model, &index, &EpisodeSpec::default(), 8, 5)
                .unwrap()
                .predictions
        })
        .collect();
    let report = ensemble_from_models(&preds).unwrap();
    assert_eq!(report.hard.accuracy, 1.0);
    assert_eq!(report.soft.accuracy, 1.0);
    assert_eq!(report.hard_ties, 0);
}

#[test]
fn single_member_ensemble_equals_its_evaluation() {
    let idx = gen_synthetic(&SyntheticSpec {
        n_classes: 3,
        dim: 5,
        samples_per_class: vec![30, 30, 30],
        separation: 1.0,
        sigma: 1.0,
        seed: 9,
    })
    .unwrap()
    .index()
    .unwrap();
    let model = ProtoModel::<f32>::from_spec("solo", &EncoderSpec::mlp(5, vec![6], 4, 1), 1e-4).unwrap();
    let spec = EpisodeSpec {
        n_way: 3,
        k_shot: 3,
        q_query: 4,
        seed: 0,
    };
    let eval = evaluate_model(&model, &idx, &spec, 6, 2).unwrap();
    let report = ensemble_from_models(std::slice::from_ref(&eval.predictions)).unwrap();
    assert_eq!(report.hard, eval.metrics);
    assert_eq!(report.soft, eval.metrics);
}

#[test]
fn frozen_store_from_disk_trains_a_projection() {
    let dir = tempfile::tempdir().unwrap();
    let (store, index) = one_hot_fixture(30);
    let path = dir.path().join("emb.fseb");
    fseb::write(&path, &store).unwrap();
    assert_eq!(load_frozen(&path).unwrap(), store);

    let mut spec = identity_spec(path.to_str().unwrap());
    if let EncoderKind::FrozenProjection { identity_init, .. } = &mut spec.kind {
        *identity_init = false;
    }
    spec.embedding_dim = 8;
    let model = ProtoModel::<f32>::from_spec("proj", &spec, 1e-3).unwrap();
    let config = TrainConfig {
        epochs: 2,
        episodes_per_epoch: 4,
        seed: Some(1),
        ..TrainConfig::default()
    };
    let (model, report) = train_model(model, &index, &config).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert!(report.epochs.iter().all(|e| e.loss.l_comb.is_finite()));
    // the backbone stays frozen: the store is untouched
    assert_eq!(**model.encoder.store().unwrap(), store);
}

#[test]
fn well_separated_data_trains_to_high_episode_accuracy() {
    let idx = gen_synthetic(&SyntheticSpec {
        n_classes: 4,
        dim: 16,
        samples_per_class: vec![200; 4],
        separation: 6.0,
        sigma: 1.0,
        seed: 21,
    })
    .unwrap()
    .index()
    .unwrap();
    let model = ProtoModel::<f32>::from_spec("m", &EncoderSpec::mlp(16, vec![64], 32, 0), 1e-4).unwrap();
    let config = TrainConfig {
        epochs: 30,
        seed: Some(5),
        ..TrainConfig::default()
    };
    let (_, report) = train_model(model, &idx, &config).unwrap();
    let last = report.epochs.last().unwrap();
    assert!(last.accuracy >= 0.95, "final-epoch accuracy {}", last.accuracy);
    for r in &report.epochs {
        assert_eq!(r.loss.l_comb - (r.loss.ce + r.loss.l_ca), 0.0);
        assert!(r.loss.l_comb.is_finite());
    }
}

#[test]
fn written_dataset_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synthetic(&SyntheticSpec::imbalanced_four(8, 3.0, 4)).unwrap();
    let path = write_dataset(dir.path(), &data.manifest, &data.payload).unwrap();
    let a = load_dataset(&path).unwrap();
    let b = data.index().unwrap();
    assert_eq!(a.records(), b.records());
    assert_eq!(a.payload(), b.payload());
    assert_eq!(a.class_counts(), vec![3200, 2240, 896, 64]);
}

#[test]
fn manifest_dataset_runs_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synthetic(&SyntheticSpec {
        n_classes: 3,
        dim: 4,
        samples_per_class: vec![40, 40, 40],
        separation: 5.0,
        sigma: 1.0,
        seed: 1,
    })
    .unwrap();
    let path = write_dataset(dir.path(), &data.manifest, &data.payload).unwrap();
    let ep = EpisodeSpec {
        n_way: 3,
        k_shot: 3,
        q_query: 4,
        seed: 0,
    };
    let mut config = RunConfig {
        dataset: DatasetSource::Manifest { path },
        encoders: vec![EncoderSpec::mlp(4, vec![8], 4, 0), EncoderSpec::mlp(4, vec![8], 4, 1)],
        ..RunConfig::default()
    };
    config.train.epochs = 2;
    config.train.episodes_per_epoch = 3;
    config.train.episode = ep;
    config.train.seed = Some(3);
    config.eval.episode = ep;
    config.eval.n_episodes = 5;
    let a = pipeline::run_ensemble(&config).unwrap();
    let b = pipeline::run_ensemble(&config).unwrap();
    // everything except wall time is reproducible
    assert_eq!(a.ensemble, b.ensemble);
    for (x, y) in a.models.iter().zip(&b.models) {
        assert_eq!(x.param_checksum, y.param_checksum);
        assert_eq!(x.eval, y.eval);
        assert_eq!(x.train.as_ref().unwrap().epochs, y.train.as_ref().unwrap().epochs);
    }
    assert_eq!(a.models.len(), 2);
    assert_ne!(a.models[0].param_checksum, a.models[1].param_checksum);
}
