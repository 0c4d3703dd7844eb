//! Target-importance matrix, adjacency combination and the normalized GCN.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::syntax::AdjMatrix;
use crate::tape::{Tape, Var};

/// Pairwise distance features `[d_i, d_j, d_i + d_j, |d_i - d_j|, d_i * d_j]`,
/// one row per ordered pair `(i, j)` in row-major order.
pub fn edge_features(d: &[usize]) -> Array2<f64> {
    let n = d.len();
    Array2::from_shape_fn((n * n, 5), |(row, k)| {
        let (di, dj) = (d[row / n] as f64, d[row % n] as f64);
        match k {
            0 => di,
            1 => dj,
            2 => di + dj,
            3 => (di - dj).abs(),
            _ => di * dj,
        }
    })
}

/// [`edge_features`] prefixed with the binary adjacency entry, for scoring the
/// combined matrix directly.
pub fn edge_features_with_adjacency(d: &[usize], ad: &AdjMatrix) -> Array2<f64> {
    let base = edge_features(d);
    let n = d.len();
    Array2::from_shape_fn((n * n, 6), |(row, k)| {
        if k == 0 {
            ad[[row / n, row % n]]
        } else {
            base[[row, k - 1]]
        }
    })
}

/// Feed-forward scorer mapping pair features to a sigmoid edge weight: one
/// linear layer, or two with a ReLU hidden layer.
#[derive(Clone, Debug)]
pub struct EdgeScorer {
    layers: Vec<(ParamId, ParamId)>,
    pub in_dim: usize,
}

impl EdgeScorer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_dim: usize, hidden: Option<usize>) -> Self {
        let widths: Vec<usize> = match hidden {
            Some(h) => vec![in_dim, h, 1],
            None => vec![in_dim, 1],
        };
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = store.add_uniform(format!("{prefix}.{k}.w"), w[0], w[1], bound, rng);
                let bias = store.add_uniform(format!("{prefix}.{k}.b"), 1, w[1], bound, rng);
                (weight, bias)
            })
            .collect();
        EdgeScorer { layers, in_dim }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// `n × n` matrix of sigmoid scores from `n² × in_dim` features.
    pub fn score<'a>(&self, tape: &mut Tape<'a>, binder: &mut Binder<'a>, features: Var, n: usize) -> Var {
        let mut h = features;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (binder.var(tape, w), binder.var(tape, b));
            let z = tape.matmul(h, wv);
            h = tape.add_row(z, bv);
            if k + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        let s = tape.sigmoid(h);
        tape.reshape(s, n, n)
    }
}

/// `A^t` for a distance vector, evaluated outside any training graph.
pub fn target_importance_matrix(store: &ParamStore, scorer: &EdgeScorer, d: &[usize]) -> AdjMatrix {
    let mut tape = Tape::new();
    let mut binder = Binder::new(store);
    let feats = tape.constant(edge_features(d));
    let a = scorer.score(&mut tape, &mut binder, feats, d.len());
    tape.value(a).clone()
}

/// `gamma * ad + (1 - gamma) * at`.
pub fn combine_adjacency(ad: &AdjMatrix, at: &AdjMatrix, gamma: f64) -> Result<AdjMatrix> {
    if ad.dim() != at.dim() {
        return Err(Error::Shape(format!("A^d is {:?} but A^t is {:?}", ad.dim(), at.dim())));
    }
    Ok(ad * gamma + at * (1.0 - gamma))
}

/// Graph version of [`combine_adjacency`] with a constant `ad`.
pub fn combine_adjacency_var(tape: &mut Tape, ad: &AdjMatrix, at: Var, gamma: f64) -> Var {
    let scaled = tape.scale(at, 1.0 - gamma);
    let dep = tape.constant(ad * gamma);
    tape.add(dep, scaled)
}

/// Stack of neighborhood-normalized graph convolutions with ReLU.
#[derive(Clone, Debug)]
pub struct Gcn {
    layers: Vec<(ParamId, ParamId)>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Gcn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        width: usize,
        n_layers: usize,
    ) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        let mut fan_in = in_dim;
        for k in 0..n_layers {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = store.add_uniform(format!("{prefix}.{k}.w"), fan_in, width, bound, rng);
            let b = store.add_uniform(format!("{prefix}.{k}.b"), 1, width, bound, rng);
            layers.push((w, b));
            fan_in = width;
        }
        Gcn { layers, in_dim, out_dim: if n_layers == 0 { in_dim } else { width } }
    }

    pub fn from_layers(layers: Vec<(ParamId, ParamId)>, in_dim: usize, out_dim: usize) -> Self {
        Gcn { layers, in_dim, out_dim }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// `h^k_i = ReLU(Σ_j a_ij (W_k h^{k-1}_j + b_k) / Σ_j a_ij)`; rows of `a`
    /// summing to zero yield zero vectors.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, binder: &mut Binder<'a>, h0: Var, a: Var) -> Var {
        let denom = tape.row_sums(a);
        let mut h = h0;
        for &(w, b) in &self.layers {
            let (wv, bv) = (binder.var(tape, w), binder.var(tape, b));
            let z = tape.matmul(h, wv);
            let z = tape.add_row(z, bv);
            let mixed = tape.matmul(a, z);
            let normed = tape.div_rows(mixed, denom);
            h = tape.relu(normed);
        }
        h
    }

    pub fn forward_values(&self, store: &ParamStore, h0: &Array2<f64>, a: &AdjMatrix) -> Array2<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let hv = tape.constant(h0.clone());
        let av = tape.constant(a.clone());
        let out = self.forward(&mut tape, &mut binder, hv, av);
        tape.value(out).clone()
    }
}
