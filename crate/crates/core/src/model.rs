//! The assembled model: encoder, recurrent layer, adjacency, GCN and head,
//! plus the per-example loss graph.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{decode_bio, Bio, Sentence, SpanSet};
use crate::encoder::{Encoder, Vocab};
use crate::error::{Error, Result};
use crate::gcn::{combine_adjacency_var, edge_features, edge_features_with_adjacency, EdgeScorer, Gcn};
use crate::objective::{
    loss_kl_var, loss_pred_var, regularize_var, total_loss, total_loss_var, AblationMask, Head, LossBreakdown,
    RegGroups, RegPool,
};
use crate::onlstm::{Lstm, OnLstm};
use crate::params::{Binder, ParamStore};
use crate::syntax::{matrix_rows, pruned_adjacency, InspectDump, SyntaxView};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Token vector width: the embedding table, or the sidecar width.
    pub tok_dim: usize,
    pub pos_dim: usize,
    /// Offsets are clamped to `[-max_offset, max_offset]`.
    pub max_offset: usize,
    pub hidden: usize,
    pub gcn_dim: usize,
    pub gcn_layers: usize,
    /// Hidden width of the prediction head.
    pub ff_dim: usize,
    /// Hidden width of the edge scorer; `None` for a single linear layer.
    pub edge_hidden: Option<usize>,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mask: AblationMask,
    /// Learn `A` directly from `[a^d, pair features]` instead of mixing
    /// `A^d` and `A^t`.
    pub learn_combined: bool,
    /// Give the regularizer its own GCN weights.
    pub separate_reg_gcn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tok_dim: 100,
            pos_dim: 30,
            max_offset: 100,
            hidden: 300,
            gcn_dim: 200,
            gcn_layers: 2,
            ff_dim: 200,
            edge_hidden: None,
            gamma: 0.2,
            alpha: 0.1,
            beta: 0.1,
            mask: AblationMask::default(),
            learn_combined: false,
            separate_reg_gcn: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        let sizes = [
            ("tok_dim", self.tok_dim),
            ("pos_dim", self.pos_dim),
            ("hidden", self.hidden),
            ("gcn_dim", self.gcn_dim),
            ("gcn_layers", self.gcn_layers),
            ("ff_dim", self.ff_dim),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.edge_hidden == Some(0) {
            return Err(Error::Config("edge_hidden must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a nonnegative number")));
            }
        }
        Ok(())
    }
}

/// One (sentence, target) example, optionally with frozen token vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub sentence: Sentence,
    pub vectors: Option<Array2<f64>>,
}

impl Example {
    pub fn new(sentence: Sentence) -> Self {
        Example { sentence, vectors: None }
    }

    pub fn with_vectors(sentence: Sentence, vectors: Array2<f64>) -> Self {
        Example { sentence, vectors: Some(vectors) }
    }
}

#[derive(Clone, Debug)]
enum Recurrent {
    OnLstm(OnLstm),
    Lstm(Lstm),
    Identity,
}

/// Graph nodes produced for one example.
pub struct Forward {
    pub log_probs: Var,
    pub adjacency: Option<Var>,
    pub pred: Option<Var>,
    pub kl: Option<Var>,
    pub reg: Option<Var>,
    pub total: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    encoder: Encoder,
    recurrent: Recurrent,
    edge: Option<EdgeScorer>,
    gcn: Option<Gcn>,
    reg_gcn: Option<Gcn>,
    head: Head,
}

impl Model {
    /// Fresh parameters drawn from `seed`. `vocab` selects an embedding
    /// table; without one the model reads sidecar vectors of width `tok_dim`.
    pub fn new(config: ModelConfig, vocab: Option<Vocab>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mask = config.mask;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, vocab, config.tok_dim, config.pos_dim, config.max_offset);
        let (recurrent, h_dim) = if mask.use_onlstm {
            (Recurrent::OnLstm(OnLstm::new(&mut store, &mut rng, "onlstm", encoder.out_dim(), config.hidden)), config.hidden)
        } else if mask.use_plain_lstm {
            (Recurrent::Lstm(Lstm::new(&mut store, &mut rng, "lstm", encoder.out_dim(), config.hidden)), config.hidden)
        } else {
            (Recurrent::Identity, encoder.out_dim())
        };
        let mut edge = None;
        let mut gcn = None;
        let mut reg_gcn = None;
        if mask.use_gcn {
            if config.learn_combined {
                edge = Some(EdgeScorer::new(&mut store, &mut rng, "edge", 6, config.edge_hidden));
            } else if mask.use_at {
                edge = Some(EdgeScorer::new(&mut store, &mut rng, "edge", 5, config.edge_hidden));
            }
            gcn = Some(Gcn::new(&mut store, &mut rng, "gcn", h_dim, config.gcn_dim, config.gcn_layers));
            if config.separate_reg_gcn && mask.use_reg && mask.effective_pool() == RegPool::Graph {
                reg_gcn = Some(Gcn::new(&mut store, &mut rng, "reg_gcn", h_dim, config.gcn_dim, config.gcn_layers));
            }
        }
        let head_in = h_dim + if mask.use_gcn { config.gcn_dim } else { 0 };
        let head = Head::new(&mut store, &mut rng, head_in, config.ff_dim);
        Ok(Model { config, store, encoder, recurrent, edge, gcn, reg_gcn, head })
    }

    pub fn vocab(&self) -> Option<&Vocab> {
        self.encoder.vocab()
    }

    pub fn mask(&self) -> &AblationMask {
        &self.config.mask
    }

    /// Records the forward pass (and, with `with_loss`, every active loss
    /// term) of one example.
    pub fn build<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        binder: &mut Binder<'a>,
        example: &Example,
        with_loss: bool,
    ) -> Result<Forward> {
        let sentence = &example.sentence;
        let mask = &self.config.mask;
        let view = SyntaxView::new(sentence);
        let x = self.encoder.encode(tape, binder, sentence, example.vectors.as_ref())?;
        let (h, imp) = match &self.recurrent {
            Recurrent::OnLstm(cell) => {
                let out = cell.run(tape, binder, x);
                (out.h, Some(out.imp))
            }
            Recurrent::Lstm(cell) => (cell.run(tape, binder, x), None),
            Recurrent::Identity => (x, None),
        };

        let (adjacency, hbar) = match &self.gcn {
            Some(gcn) => {
                let a = self.adjacency_var(tape, binder, &view);
                (Some(a), Some(gcn.forward(tape, binder, h, a)))
            }
            None => (None, None),
        };
        let log_probs = self.head.log_probs(tape, binder, h, hbar)?;
        let mut fwd = Forward { log_probs, adjacency, pred: None, kl: None, reg: None, total: None };
        if !with_loss {
            return Ok(fwd);
        }

        let pred = loss_pred_var(tape, log_probs, &sentence.gold_labels());
        let kl = match imp {
            Some(imp) if mask.use_kl => Some(loss_kl_var(tape, imp, &view.syn_scores)),
            _ => None,
        };
        let reg = if mask.use_reg {
            let opinion = sentence.opinion_indices();
            let other = sentence.other_indices();
            let groups = RegGroups {
                tree: &view.tree,
                target: sentence.target,
                anchor: view.anchor,
                opinion: &opinion,
                other: &other,
            };
            let reg_gcn = self.reg_gcn.as_ref().or(self.gcn.as_ref());
            Some(regularize_var(tape, binder, h, hbar, adjacency, &groups, reg_gcn, mask))
        } else {
            None
        };
        fwd.total = Some(total_loss_var(tape, pred, kl, reg, self.config.alpha, self.config.beta));
        fwd.pred = Some(pred);
        fwd.kl = kl;
        fwd.reg = reg;
        Ok(fwd)
    }

    /// Combined adjacency `A` for the active switches.
    fn adjacency_var<'a>(&'a self, tape: &mut Tape<'a>, binder: &mut Binder<'a>, view: &SyntaxView) -> Var {
        let n = view.distances.len();
        let mask = &self.config.mask;
        if self.config.learn_combined {
            let scorer = self.edge.as_ref().expect("learned adjacency has a scorer");
            let feats = tape.constant(edge_features_with_adjacency(&view.distances, &view.adj_dep));
            return scorer.score(tape, binder, feats, n);
        }
        let at = self.edge.as_ref().filter(|_| mask.use_at).map(|scorer| {
            let feats = tape.constant(edge_features(&view.distances));
            scorer.score(tape, binder, feats, n)
        });
        match (mask.use_ad, at) {
            (true, Some(at)) => combine_adjacency_var(tape, &view.adj_dep, at, self.config.gamma),
            (false, Some(at)) => at,
            _ => tape.constant(view.adj_dep.clone()),
        }
    }

    /// Loss values of one example, the tape total alongside the terms.
    pub fn loss(&self, example: &Example) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let fwd = self.build(&mut tape, &mut binder, example, true)?;
        Ok(breakdown(&tape, &fwd))
    }

    /// Loss values and dense gradients aligned with `self.store`.
    pub fn loss_and_grads(&self, example: &Example) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let fwd = self.build(&mut tape, &mut binder, example, true)?;
        let total = fwd.total.expect("loss requested");
        let losses = breakdown(&tape, &fwd);
        let grads = binder.collect(tape.backward(total));
        Ok((losses, grads))
    }

    /// `N × 3` label distributions.
    pub fn distributions(&self, example: &Example) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let fwd = self.build(&mut tape, &mut binder, example, false)?;
        Ok(tape.value(fwd.log_probs).mapv(f64::exp))
    }

    /// Per-token argmax labels (first maximum on ties).
    pub fn predict_labels(&self, example: &Example) -> Result<Vec<Bio>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let fwd = self.build(&mut tape, &mut binder, example, false)?;
        Ok(tape
            .value(fwd.log_probs)
            .rows()
            .into_iter()
            .map(|row| {
                let best = (1..3).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                Bio::from_index(best)
            })
            .collect())
    }

    pub fn predict(&self, example: &Example) -> Result<SpanSet> {
        Ok(decode_bio(&self.predict_labels(example)?))
    }

    /// Matrices of the syntax dump with the model's current `A`.
    pub fn inspect(&self, example: &Example) -> Result<InspectDump> {
        let sentence = &example.sentence;
        let view = SyntaxView::new(sentence);
        let combined = if self.gcn.is_some() {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.store);
            let a = self.adjacency_var(&mut tape, &mut binder, &view);
            tape.value(a).clone()
        } else {
            view.adj_dep.clone()
        };
        let opinion = pruned_adjacency(&combined, &view.tree, sentence.target, &sentence.opinion_indices());
        let other = pruned_adjacency(&combined, &view.tree, sentence.target, &sentence.other_indices());
        Ok(InspectDump {
            distances: view.distances,
            syn_scores: view.syn_scores,
            adj_dep: matrix_rows(&view.adj_dep),
            adj_combined: matrix_rows(&combined),
            adj_opinion: matrix_rows(&opinion),
            adj_other: matrix_rows(&other),
        })
    }
}

fn breakdown(tape: &Tape, fwd: &Forward) -> LossBreakdown {
    let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    LossBreakdown {
        pred: get(fwd.pred),
        kl: get(fwd.kl),
        reg: get(fwd.reg),
        total: get(fwd.total),
    }
}

/// `total` recomputed from the individual terms under `config`'s mask.
pub fn recombine(losses: &LossBreakdown, config: &ModelConfig) -> LossBreakdown {
    total_loss(losses.pred, losses.kl, losses.reg, config.alpha, config.beta, &config.mask)
}
