use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ong::corpus::{gen_synthetic, parse_corpus, write_corpus};
use ong::encoder::{parse_sidecar, write_sidecar, Sidecar, Vocab};
use ong::trainer::{bucket_by_distance, evaluate};
use ong::{train, Checkpoint, Example, ModelConfig, TrainConfig};

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch: 8,
        lr: 5e-3,
        model: ModelConfig { tok_dim: 12, pos_dim: 6, hidden: 16, gcn_dim: 12, ff_dim: 12, ..ModelConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn corpus_text_round_trips_through_training_and_checkpoint() {
    let sentences = gen_synthetic(60, (5, 9), 3).unwrap();
    let reparsed = parse_corpus(&write_corpus(&sentences)).unwrap();
    assert_eq!(reparsed, sentences);

    let data: Vec<Example> = reparsed.into_iter().map(Example::new).collect();
    let (tr, dev) = data.split_at(48);
    let cfg = config(3);
    let mut epochs = Vec::new();
    let out = train(&cfg, Some(Vocab::build(tr.iter().map(|e| &e.sentence))), tr, dev, |log| {
        assert!(log.loss.total.is_finite());
        epochs.push(log.epoch);
    })
    .unwrap();
    assert_eq!(epochs, vec![1, 2, 3]);
    assert_eq!(out.history.len(), 3);
    assert!((1..=3).contains(&out.best_epoch));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ongckpt");
    let ck = Checkpoint { config: cfg, best_dev_f1: out.best_dev.f1, epoch: out.best_epoch, model: out.model };
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(evaluate(&back.model, dev).unwrap(), evaluate(&ck.model, dev).unwrap());
    for ex in dev {
        assert_eq!(back.model.predict(ex).unwrap(), ck.model.predict(ex).unwrap());
    }
    let folds = bucket_by_distance(dev);
    let with_opinions = dev.iter().filter(|e| !e.sentence.opinion_indices().is_empty()).count();
    assert_eq!(folds.iter().map(Vec::len).sum::<usize>(), with_opinions);
}

#[test]
fn sidecar_vectors_train_without_a_vocabulary() {
    let sentences = gen_synthetic(20, (4, 8), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sidecar = Sidecar {
        dim: 12,
        vectors: sentences
            .iter()
            .map(|s| Array2::from_shape_simple_fn((s.len(), 12), || rng.gen_range(-1.0..1.0)))
            .collect(),
    };
    let parsed = parse_sidecar(&write_sidecar(&sidecar)).unwrap();
    assert_eq!(parsed, sidecar);
    let data: Vec<Example> = sentences
        .into_iter()
        .zip(parsed.vectors)
        .map(|(s, v)| Example::with_vectors(s, v))
        .collect();
    let out = train(&config(1), None, &data[..16], &data[16..], |_| {}).unwrap();
    assert!(out.model.vocab().is_none());
    let m = evaluate(&out.model, &data[16..]).unwrap();
    assert!((0.0..=1.0).contains(&m.f1));

    let bare = Example::new(data[0].sentence.clone());
    assert!(out.model.predict(&bare).is_err());
}
