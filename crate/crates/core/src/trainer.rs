//! Mini-batch training with dev-F1 model selection, span evaluation and
//! distance-bucketed analysis.

use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SpanSet;
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::model::{Example, Model, ModelConfig};
use crate::objective::LossBreakdown;
use crate::params::Adam;
use crate::syntax::tree_distances;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub dev_ratio: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 32,
            lr: 1e-3,
            seed: 13,
            dev_ratio: 0.2,
            clip_norm: Some(5.0),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dev_ratio) {
            return Err(Error::Config(format!("dev ratio {} outside [0, 1)", self.dev_ratio)));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        self.model.validate()
    }
}

/// Exact-span micro precision, recall and F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Metrics { precision, recall, f1, tp, fp, fn_ }
    }

    /// Counts over paired (predicted, gold) span sets.
    pub fn score<'s>(pairs: impl IntoIterator<Item = (&'s SpanSet, &'s SpanSet)>) -> Self {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (pred, gold) in pairs {
            let hits = pred.spans().iter().filter(|s| gold.contains(s)).count();
            tp += hits;
            fp += pred.len() - hits;
            fn_ += gold.len() - hits;
        }
        Metrics::from_counts(tp, fp, fn_)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

pub fn predict_all(model: &Model, data: &[Example]) -> Result<Vec<SpanSet>> {
    data.par_iter().map(|ex| model.predict(ex)).collect()
}

pub fn evaluate(model: &Model, data: &[Example]) -> Result<Metrics> {
    let preds = predict_all(model, data)?;
    Ok(Metrics::score(preds.iter().zip(data.iter().map(|ex| &ex.sentence.opinions))))
}

/// Target-opinion distance folds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Fold {
    One,
    Two,
    Three,
    Far,
}

impl Fold {
    pub const ALL: [Fold; 4] = [Fold::One, Fold::Two, Fold::Three, Fold::Far];

    pub fn label(self) -> &'static str {
        match self {
            Fold::One => "1",
            Fold::Two => "2",
            Fold::Three => "3",
            Fold::Far => ">3",
        }
    }

    pub fn of_distance(d: usize) -> Fold {
        match d {
            0 | 1 => Fold::One,
            2 => Fold::Two,
            3 => Fold::Three,
            _ => Fold::Far,
        }
    }
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Fold of an example: the largest tree distance from the target to a gold
/// opinion token. Opinion-free examples have none.
pub fn fold_of(example: &Example) -> Option<Fold> {
    let s = &example.sentence;
    let d = tree_distances(&s.tree(), s.target);
    s.opinion_indices().into_iter().map(|i| d[i]).max().map(Fold::of_distance)
}

/// Example indices per fold, in [`Fold::ALL`] order.
pub fn bucket_by_distance(data: &[Example]) -> [Vec<usize>; 4] {
    let mut folds: [Vec<usize>; 4] = Default::default();
    for (i, ex) in data.iter().enumerate() {
        if let Some(f) = fold_of(ex) {
            folds[f as usize].push(i);
        }
    }
    folds
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub dev: Metrics,
}

impl EpochLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best dev F1 (earliest on ties, last
    /// epoch when there is no dev data).
    pub model: Model,
    pub best_epoch: usize,
    pub best_dev: Metrics,
    pub history: Vec<EpochLog>,
}

/// Trains from fresh parameters. `vocab` selects the embedding table;
/// without it every example must carry sidecar vectors.
pub fn train(
    config: &TrainConfig,
    vocab: Option<Vocab>,
    train_data: &[Example],
    dev_data: &[Example],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_data.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut model = Model::new(config.model.clone(), vocab, config.seed)?;
    let mut opt = Adam::new(&model.store, config.lr, config.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0005_eed0_fba7_c4e5);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut best: Option<(usize, Metrics, Model)> = None;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(config.batch) {
            let results: Vec<(LossBreakdown, Vec<Array2<f64>>)> = batch
                .par_iter()
                .map(|&i| model.loss_and_grads(&train_data[i]))
                .collect::<Result<_>>()?;
            let mut grads = model.store.zeros_like();
            for (losses, g) in &results {
                if !losses.total.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                sum.pred += losses.pred;
                sum.kl += losses.kl;
                sum.reg += losses.reg;
                sum.total += losses.total;
                for (acc, g) in grads.iter_mut().zip(g) {
                    *acc += g;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * scale));
            if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::Divergence { epoch });
            }
            opt.step(&mut model.store, &mut grads);
        }
        let n = train_data.len() as f64;
        let loss = LossBreakdown { pred: sum.pred / n, kl: sum.kl / n, reg: sum.reg / n, total: sum.total / n };
        let dev = evaluate(&model, dev_data)?;
        let log = EpochLog { epoch, loss, dev };
        on_epoch(&log);
        history.push(log);
        if dev_data.is_empty() || best.as_ref().is_none_or(|(_, m, _)| dev.f1 > m.f1) {
            best = Some((epoch, dev, model.clone()));
        }
    }
    let (best_epoch, best_dev, model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, best_epoch, best_dev, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, Sentence, Span};
    use proptest::prelude::*;

    fn spans(v: &[(usize, usize)]) -> SpanSet {
        SpanSet::new(v.iter().map(|&(a, b)| Span::new(a, b)).collect()).unwrap()
    }

    #[test]
    fn metric_examples() {
        let m = Metrics::score([(&spans(&[(1, 2)]), &spans(&[(1, 2), (4, 4)]))]);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 1));
        assert_eq!((m.precision, m.recall), (1.0, 0.5));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);

        let empty = SpanSet::empty();
        let m = Metrics::score([(&empty, &empty), (&empty, &empty)]);
        assert_eq!(m, Metrics::from_counts(0, 0, 0));
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));

        let m = Metrics::score([(&spans(&[(1, 3)]), &spans(&[(1, 2)]))]);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));

        assert_eq!(
            Metrics::from_counts(1, 0, 1).to_json(),
            r#"{"precision":1.0,"recall":0.5,"f1":0.6666666666666666,"tp":1,"fp":0,"fn":1}"#
        );
    }

    fn chain_example(n: usize, target: usize, opinions: &[(usize, usize)]) -> Example {
        let tokens = (0..n).map(|i| format!("w{i}")).collect();
        let heads = (0..n).map(|i| i.checked_sub(1)).collect();
        Example::new(Sentence::new(tokens, heads, Span::single(target), spans(opinions).spans().to_vec()).unwrap())
    }

    #[test]
    fn fold_examples() {
        assert_eq!(fold_of(&chain_example(4, 0, &[(3, 3)])), Some(Fold::Three));
        assert_eq!(fold_of(&chain_example(4, 0, &[(1, 1)])), Some(Fold::One));
        assert_eq!(fold_of(&chain_example(7, 1, &[(0, 0), (6, 6)])), Some(Fold::Far));
        assert_eq!(fold_of(&chain_example(4, 0, &[])), None);
        let data = [chain_example(4, 0, &[(3, 3)]), chain_example(4, 0, &[]), chain_example(4, 1, &[(3, 3)])];
        assert_eq!(bucket_by_distance(&data), [vec![], vec![2], vec![0], vec![]]);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { batch: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { dev_ratio: 1.0, ..TrainConfig::default() }.validate().is_err());
        let json = serde_json::to_value(TrainConfig::default()).unwrap();
        assert_eq!(json["pos_dim"], 30);
        assert_eq!(json["gamma"], 0.2);
        let back: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "hidden": 8}"#).unwrap();
        assert_eq!((back.epochs, back.model.hidden, back.batch), (3, 8, 32));
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch: 4,
            model: ModelConfig { tok_dim: 6, pos_dim: 3, hidden: 5, gcn_dim: 4, ff_dim: 5, ..ModelConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn non_finite_loss_aborts() {
        let data = gen_synthetic(3, (5, 6), 1).unwrap();
        let mut examples: Vec<Example> = data
            .iter()
            .map(|s| Example::with_vectors(s.clone(), Array2::from_elem((s.len(), 6), 0.1)))
            .collect();
        examples[1].vectors.as_mut().unwrap()[[0, 0]] = f64::NAN;
        let err = train(&tiny_config(), None, &examples, &[], |_| {}).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1 }));
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let data: Vec<Example> = gen_synthetic(12, (5, 7), 2).unwrap().into_iter().map(Example::new).collect();
        let vocab = Vocab::build(data.iter().map(|e| &e.sentence));
        let run = || {
            let mut lines = Vec::new();
            let out = train(&tiny_config(), Some(vocab.clone()), &data[..9], &data[9..], |l| lines.push(l.to_json()))
                .unwrap();
            (lines, out.model.store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(a[0].starts_with(r#"{"epoch":1,"loss":{"pred":"#));
    }

    proptest! {
        #[test]
        fn metrics_match_naive_counts(
            pairs in prop::collection::vec(
                (prop::collection::btree_set(0usize..6, 0..4), prop::collection::btree_set(0usize..6, 0..4)),
                0..8,
            )
        ) {
            let as_set = |s: &std::collections::BTreeSet<usize>| SpanSet::new(s.iter().map(|&i| Span::single(i)).collect()).unwrap();
            let sets: Vec<(SpanSet, SpanSet)> = pairs.iter().map(|(p, g)| (as_set(p), as_set(g))).collect();
            let m = Metrics::score(sets.iter().map(|(p, g)| (p, g)));
            let tp: usize = pairs.iter().map(|(p, g)| p.intersection(g).count()).sum();
            let np: usize = pairs.iter().map(|(p, _)| p.len()).sum();
            let ng: usize = pairs.iter().map(|(_, g)| g.len()).sum();
            prop_assert_eq!((m.tp, m.fp, m.fn_), (tp, np - tp, ng - tp));
            if np > 0 { prop_assert_eq!(m.precision, tp as f64 / np as f64); } else { prop_assert_eq!(m.precision, 0.0); }
            if ng > 0 { prop_assert_eq!(m.recall, tp as f64 / ng as f64); } else { prop_assert_eq!(m.recall, 0.0); }
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }
    }
}
