use proptest::prelude::*;

use protoens::cal::{cal_loss, cal_terms};
use protoens::ensemble::{ensemble_from_models, EpisodePredictions, ModelPredictions, QueryRecord};
use protoens::io::{checkpoint, fseb};
use protoens::numeric::{Precision, Tensor};
use protoens::protonet::{classify, compute_prototypes, is_consistent};
use protoens::{AnyModel, EncoderSpec, FrozenEmbeddingStore};

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n)
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn normalize(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

proptest! {
    #[test]
    fn probabilities_normalize_and_track_nearest_prototype(
        support in rows(6, 3),
        queries in rows(4, 3),
    ) {
        let groups = [tensor(&support[..2]), tensor(&support[2..4]), tensor(&support[4..])];
        let protos = compute_prototypes(&[0, 1, 2], &groups).unwrap();
        for p in classify(&tensor(&queries), &protos).unwrap() {
            let sum: f64 = p.probs.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.probs.iter().all(|v| *v >= 0.0));
            prop_assert!(is_consistent(&p));
        }
    }

    #[test]
    fn prototypes_ignore_support_order(support in rows(5, 4), shift in 1usize..5) {
        let mut rotated = support.clone();
        rotated.rotate_left(shift);
        let a = compute_prototypes(&[0], &[tensor(&support)]).unwrap();
        let b = compute_prototypes(&[0], &[tensor(&rotated)]).unwrap();
        for (x, y) in a.matrix.data().iter().zip(b.matrix.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn class_aware_loss_is_non_negative_and_translation_invariant(
        pos in rows(4, 3),
        neg in rows(5, 3),
        offset in prop::collection::vec(-3.0f64..3.0, 3),
        margin in 0.0f64..2.0,
    ) {
        let proto: Vec<f64> = (0..3).map(|j| pos.iter().map(|x| x[j]).sum::<f64>() / 4.0).collect();
        let t = cal_terms(&proto, &pos, &neg).unwrap();
        let loss = cal_loss(&[t], margin).unwrap();
        prop_assert!(loss >= 0.0);

        let mv = |v: &Vec<f64>| v.iter().zip(&offset).map(|(a, b)| a + b).collect::<Vec<f64>>();
        let moved = cal_terms(
            &mv(&proto),
            &pos.iter().map(mv).collect::<Vec<_>>(),
            &neg.iter().map(mv).collect::<Vec<_>>(),
        )
        .unwrap();
        prop_assert!((cal_loss(&[moved], margin).unwrap() - loss).abs() < 1e-9);
    }

    #[test]
    fn ensemble_ignores_model_order(
        raw in prop::collection::vec(prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 6), 3),
        shift in 1usize..3,
    ) {
        let models: Vec<ModelPredictions> = raw
            .iter()
            .enumerate()
            .map(|(m, queries)| ModelPredictions {
                model_id: format!("m{m}"),
                classes: vec!["a".into(), "b".into(), "c".into()],
                episodes: vec![EpisodePredictions {
                    classes: vec![2, 0, 1],
                    queries: queries
                        .iter()
                        .enumerate()
                        .map(|(q, p)| QueryRecord {
                            sample_id: format!("s{q}"),
                            true_class: q % 3,
                            probs: normalize(p),
                        })
                        .collect(),
                }],
            })
            .collect();
        let mut rotated = models.clone();
        rotated.rotate_left(shift);
        let a = ensemble_from_models(&models).unwrap();
        let b = ensemble_from_models(&rotated).unwrap();
        prop_assert_eq!(a.hard.confusion, b.hard.confusion);
        prop_assert_eq!(a.soft.confusion, b.soft.confusion);
        prop_assert_eq!(a.hard_ties, b.hard_ties);
    }

    #[test]
    fn embedding_store_round_trips(
        provenance in "[ -~]{0,40}",
        dim in 1usize..6,
        n in 0usize..8,
        seed in any::<u32>(),
    ) {
        let ids: Vec<String> = (0..n).map(|i| format!("id-{i}-{seed}")).collect();
        let data: Vec<f32> = (0..n * dim).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x3fff_ffff)).collect();
        let store = FrozenEmbeddingStore::from_parts(provenance, dim, ids, data).unwrap();
        let bytes = fseb::encode(&store);
        prop_assert_eq!(fseb::decode(&bytes).unwrap(), store);
        for cut in [0, bytes.len() / 2, bytes.len().saturating_sub(1)] {
            if cut < bytes.len() {
                prop_assert!(fseb::decode(&bytes[..cut]).is_err());
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(
        hidden in prop::collection::vec(1usize..6, 0..3),
        out in 2usize..6,
        seed in any::<u64>(),
        double in any::<bool>(),
    ) {
        let precision = if double { Precision::F64 } else { Precision::F32 };
        let model = AnyModel::from_spec("p", &EncoderSpec::mlp(3, hidden, out, seed), 1e-3, precision).unwrap();
        let bytes = checkpoint::encode(&model).unwrap();
        let back = checkpoint::decode(&bytes, None).unwrap();
        prop_assert_eq!(back.checksum(), model.checksum());
        prop_assert_eq!(checkpoint::encode(&back).unwrap(), bytes);
    }
}
