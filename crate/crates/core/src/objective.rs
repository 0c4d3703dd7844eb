//! Prediction head, loss terms, the triplet representation regularizer and
//! ablation switches.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Bio, Span};
use crate::error::{Error, Result};
use crate::gcn::Gcn;
use crate::params::{Binder, ParamId, ParamStore};
use crate::syntax::{prune_mask, DepTree};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegPool {
    /// GCN over the target-oriented pruned trees, read at the target.
    Graph,
    /// Elementwise max over the member words' vectors.
    Maxpool,
}

impl FromStr for RegPool {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "graph" => Ok(RegPool::Graph),
            "maxpool" => Ok(RegPool::Maxpool),
            _ => Err(format!("unknown pooling {s:?} (expected graph or maxpool)")),
        }
    }
}

/// Which model components and loss terms are active. Without the GCN the
/// regularizer always max-pools the recurrent states, whatever `reg_pool`
/// says.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    pub use_kl: bool,
    pub use_reg: bool,
    pub use_gcn: bool,
    pub use_onlstm: bool,
    pub use_plain_lstm: bool,
    pub use_ad: bool,
    pub use_at: bool,
    pub reg_pool: RegPool,
}

impl Default for AblationMask {
    fn default() -> Self {
        AblationMask {
            use_kl: true,
            use_reg: true,
            use_gcn: true,
            use_onlstm: true,
            use_plain_lstm: false,
            use_ad: true,
            use_at: true,
            reg_pool: RegPool::Graph,
        }
    }
}

impl AblationMask {
    pub fn validate(&self) -> Result<()> {
        if self.use_onlstm && self.use_plain_lstm {
            return Err(Error::Config("ON-LSTM and plain LSTM are mutually exclusive".into()));
        }
        if self.use_kl && !self.use_onlstm {
            return Err(Error::Config("the KL term needs the ON-LSTM encoder".into()));
        }
        if self.use_gcn && !self.use_ad && !self.use_at {
            return Err(Error::Config("the GCN needs at least one of A^d and A^t".into()));
        }
        Ok(())
    }

    pub fn effective_pool(&self) -> RegPool {
        if self.use_gcn {
            self.reg_pool
        } else {
            RegPool::Maxpool
        }
    }
}

/// The full model and its nine ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoKl,
    NoOnLstm,
    WithLstm,
    NoAd,
    NoAt,
    NoReg,
    MaxPoolReg,
    NoGcn,
    NoGcnReg,
}

impl Variant {
    pub const ABLATIONS: [Variant; 9] = [
        Variant::NoKl,
        Variant::NoOnLstm,
        Variant::WithLstm,
        Variant::NoAd,
        Variant::NoAt,
        Variant::NoReg,
        Variant::MaxPoolReg,
        Variant::NoGcn,
        Variant::NoGcnReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "ong",
            Variant::NoKl => "ong-kl",
            Variant::NoOnLstm => "ong-onlstm",
            Variant::WithLstm => "ong-wlstm",
            Variant::NoAd => "ong-ad",
            Variant::NoAt => "ong-at",
            Variant::NoReg => "ong-reg",
            Variant::MaxPoolReg => "ong-mp-gcn",
            Variant::NoGcn => "ong-gcn",
            Variant::NoGcnReg => "ong-gcn-reg",
        }
    }

    pub fn mask(self) -> AblationMask {
        let full = AblationMask::default();
        match self {
            Variant::Full => full,
            Variant::NoKl => AblationMask { use_kl: false, ..full },
            Variant::NoOnLstm => AblationMask { use_kl: false, use_onlstm: false, ..full },
            Variant::WithLstm => AblationMask { use_kl: false, use_onlstm: false, use_plain_lstm: true, ..full },
            Variant::NoAd => AblationMask { use_ad: false, ..full },
            Variant::NoAt => AblationMask { use_at: false, ..full },
            Variant::NoReg => AblationMask { use_reg: false, ..full },
            Variant::MaxPoolReg => AblationMask { reg_pool: RegPool::Maxpool, ..full },
            Variant::NoGcn => AblationMask { use_gcn: false, reg_pool: RegPool::Maxpool, ..full },
            Variant::NoGcnReg => AblationMask { use_gcn: false, use_reg: false, ..full },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        std::iter::once(Variant::Full)
            .chain(Variant::ABLATIONS)
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

/// Two-layer feed-forward classifier over `V_i`, softmax over {B, I, O}.
#[derive(Clone, Debug)]
pub struct Head {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub in_dim: usize,
}

impl Head {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize) -> Self {
        let b_in = 1.0 / (in_dim as f64).sqrt();
        let b_hid = 1.0 / (hidden as f64).sqrt();
        Head {
            w1: store.add_uniform("head.0.w", in_dim, hidden, b_in, rng),
            b1: store.add_uniform("head.0.b", 1, hidden, b_in, rng),
            w2: store.add_uniform("head.1.w", hidden, 3, b_hid, rng),
            b2: store.add_uniform("head.1.b", 1, 3, b_hid, rng),
            in_dim,
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// `N × 3` log-probabilities from `V = [h ; hbar]` (or `V = h`).
    pub fn log_probs<'a>(&self, tape: &mut Tape<'a>, binder: &mut Binder<'a>, h: Var, hbar: Option<Var>) -> Result<Var> {
        let v = match hbar {
            Some(hb) => tape.concat_cols(&[h, hb]),
            None => h,
        };
        let width = tape.shape(v).1;
        if width != self.in_dim {
            return Err(Error::Shape(format!("head expects width {}, got {width}", self.in_dim)));
        }
        let (w1, b1) = (binder.var(tape, self.w1), binder.var(tape, self.b1));
        let (w2, b2) = (binder.var(tape, self.w2), binder.var(tape, self.b2));
        let z = tape.matmul(v, w1);
        let z = tape.add_row(z, b1);
        let z = tape.relu(z);
        let logits = tape.matmul(z, w2);
        let logits = tape.add_row(logits, b2);
        Ok(tape.log_softmax_rows(logits))
    }
}

/// Label distributions `P(· | W, t, i)`, one row per token.
pub fn predict_distributions(
    store: &ParamStore,
    head: &Head,
    h: &Array2<f64>,
    hbar: &Array2<f64>,
    mask: &AblationMask,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(store);
    let hv = tape.constant(h.clone());
    let hb = mask.use_gcn.then(|| tape.constant(hbar.clone()));
    let lp = head.log_probs(&mut tape, &mut binder, hv, hb)?;
    Ok(tape.value(lp).mapv(f64::exp))
}

/// Mean negative log-likelihood of the gold labels.
pub fn loss_pred(dists: &Array2<f64>, gold: &[Bio]) -> f64 {
    assert_eq!(dists.nrows(), gold.len(), "label count mismatch");
    let total: f64 = gold.iter().enumerate().map(|(i, l)| -dists[[i, l.index()]].ln()).sum();
    total / gold.len() as f64
}

pub fn loss_pred_var(tape: &mut Tape, log_probs: Var, gold: &[Bio]) -> Var {
    let n = gold.len();
    let mut onehot = Array2::zeros((n, 3));
    for (i, l) in gold.iter().enumerate() {
        onehot[[i, l.index()]] = 1.0;
    }
    let sel = tape.constant(onehot);
    let picked = tape.mul(log_probs, sel);
    let total = tape.sum(picked);
    tape.scale(total, -1.0 / n as f64)
}

/// `KL(model ‖ syn) = Σ_i model_i · ln(model_i / syn_i)`.
pub fn loss_kl(model: &[f64], syn: &[f64]) -> f64 {
    assert_eq!(model.len(), syn.len(), "distribution length mismatch");
    model.iter().zip(syn).map(|(p, q)| p * (p / q).ln()).sum()
}

/// KL between `softmax(imp)` and the syntax scores, from the `N × 1`
/// informativeness column.
pub fn loss_kl_var(tape: &mut Tape, imp: Var, syn: &[f64]) -> Var {
    let row = tape.transpose(imp);
    let log_p = tape.log_softmax_rows(row);
    let p = tape.exp(log_p);
    let log_q = tape.constant(Array2::from_shape_fn((1, syn.len()), |(_, j)| syn[j].ln()));
    let diff = tape.sub(log_p, log_q);
    let terms = tape.mul(p, diff);
    tape.sum(terms)
}

/// `1 - cos(tar, opn) + cos(tar, oth)`; an absent group drops its cosine.
pub fn triplet_var(tape: &mut Tape, tar: Var, opn: Option<Var>, oth: Option<Var>) -> Var {
    let mut loss = tape.scalar_constant(1.0);
    if let Some(o) = opn {
        let c = tape.cosine(tar, o);
        loss = tape.sub(loss, c);
    }
    if let Some(o) = oth {
        let c = tape.cosine(tar, o);
        loss = tape.add(loss, c);
    }
    loss
}

/// Token groups of one example for the regularizer.
#[derive(Clone, Copy, Debug)]
pub struct RegGroups<'s> {
    pub tree: &'s DepTree,
    pub target: Span,
    /// Target position whose vectors represent the target.
    pub anchor: usize,
    pub opinion: &'s [usize],
    pub other: &'s [usize],
}

/// Triplet representation loss. `h` are the recurrent states, `hbar` the GCN
/// output (`None` without a GCN) and `a` the combined adjacency used to
/// build the pruned trees.
#[allow(clippy::too_many_arguments)]
pub fn regularize_var<'a>(
    tape: &mut Tape<'a>,
    binder: &mut Binder<'a>,
    h: Var,
    hbar: Option<Var>,
    a: Option<Var>,
    groups: &RegGroups,
    gcn: Option<&Gcn>,
    mask: &AblationMask,
) -> Var {
    let (source, pool) = match hbar {
        Some(hb) if mask.use_gcn => (hb, mask.effective_pool()),
        _ => (h, RegPool::Maxpool),
    };
    let tar = tape.row(source, groups.anchor);
    let represent = |tape: &mut Tape<'a>, binder: &mut Binder<'a>, words: &[usize]| -> Option<Var> {
        if words.is_empty() {
            return None;
        }
        Some(match pool {
            RegPool::Maxpool => tape.max_rows(source, words),
            RegPool::Graph => {
                let a = a.expect("graph pooling needs the combined adjacency");
                let gcn = gcn.expect("graph pooling needs a GCN");
                let keep = tape.constant(prune_mask(groups.tree, groups.target, words));
                let pruned = tape.mul(a, keep);
                let out = gcn.forward(tape, binder, h, pruned);
                tape.row(out, groups.anchor)
            }
        })
    };
    let opn = represent(tape, binder, groups.opinion);
    let oth = represent(tape, binder, groups.other);
    triplet_var(tape, tar, opn, oth)
}

/// Plain-value version of [`regularize_var`].
#[allow(clippy::too_many_arguments)]
pub fn regularize(
    store: &ParamStore,
    h: &Array2<f64>,
    hbar: &Array2<f64>,
    a: &Array2<f64>,
    groups: &RegGroups,
    gcn: &Gcn,
    mask: &AblationMask,
) -> f64 {
    let mut tape = Tape::new();
    let mut binder = Binder::new(store);
    let hv = tape.constant(h.clone());
    let hb = tape.constant(hbar.clone());
    let av = tape.constant(a.clone());
    let r = regularize_var(&mut tape, &mut binder, hv, Some(hb), Some(av), groups, Some(gcn), mask);
    tape.scalar(r)
}

/// Per-example loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    pub kl: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

/// `pred + α·kl + β·reg` with masked terms contributing exactly zero; masked
/// terms are reported as zero too.
pub fn total_loss(pred: f64, kl: f64, reg: f64, alpha: f64, beta: f64, mask: &AblationMask) -> LossBreakdown {
    let kl = if mask.use_kl { kl } else { 0.0 };
    let reg = if mask.use_reg { reg } else { 0.0 };
    let mut total = pred;
    if mask.use_kl {
        total += alpha * kl;
    }
    if mask.use_reg {
        total += beta * reg;
    }
    LossBreakdown { pred, kl, reg, total }
}

pub fn total_loss_var(tape: &mut Tape, pred: Var, kl: Option<Var>, reg: Option<Var>, alpha: f64, beta: f64) -> Var {
    let mut total = pred;
    if let Some(k) = kl {
        let k = tape.scale(k, alpha);
        total = tape.add(total, k);
    }
    if let Some(r) = reg {
        let r = tape.scale(r, beta);
        total = tape.add(total, r);
    }
    total
}
