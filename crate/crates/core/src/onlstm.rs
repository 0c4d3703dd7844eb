//! Ordered-neuron LSTM: an LSTM whose master forget and input gates are
//! `cummax` activations, inducing an ordering over hidden neurons. The sum of
//! master-forget activations per word yields an informativeness score.
//!
//! A plain LSTM with the same interface is provided for the ablation that
//! swaps out the ordered-neuron cell.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::params::{Binder, ParamId, ParamStore};
use crate::syntax::softmax;
use crate::tape::{Tape, Var};

/// Cumulative sum of `softmax(v)`.
pub fn cummax(v: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    softmax(v)
        .into_iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

/// Softmax of the informativeness scores over the sentence.
pub fn model_scores(imp: &[f64]) -> Vec<f64> {
    softmax(imp)
}

// gate blocks inside the stacked 6D pre-activation
const FORGET: usize = 0;
const INPUT: usize = 1;
const OUTPUT: usize = 2;
const CANDIDATE: usize = 3;
const MASTER_FORGET: usize = 4;
const MASTER_INPUT: usize = 5;

/// Ordered-neuron LSTM parameters. `w` is `d_in × 6D`, `u` is `D × 6D` and
/// `b` is `1 × 6D`, with gate blocks in the order forget, input, output,
/// candidate, master forget, master input.
#[derive(Clone, Debug)]
pub struct OnLstm {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Graph handles for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct OnLstmVars {
    /// `N × D` hidden states.
    pub h: Var,
    /// `N × D` master forget gate activations.
    pub master_f: Var,
    /// `N × 1` informativeness scores `1 - Σ_j master_f[i][j]`.
    pub imp: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnLstmOutput {
    pub h: Array2<f64>,
    pub imp: Vec<f64>,
    pub master_f: Array2<f64>,
}

pub struct Step {
    pub h: Var,
    pub c: Var,
    pub master_f: Var,
}

impl OnLstm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, input_dim: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w = store.add_uniform(format!("{prefix}.w"), input_dim, 6 * hidden, bound, rng);
        let u = store.add_uniform(format!("{prefix}.u"), hidden, 6 * hidden, bound, rng);
        let b = store.add_uniform(format!("{prefix}.b"), 1, 6 * hidden, bound, rng);
        OnLstm { w, u, b, input_dim, hidden }
    }

    fn gate(&self, tape: &mut Tape, pre: Var, block: usize) -> Var {
        let d = self.hidden;
        tape.slice_cols(pre, block * d, (block + 1) * d)
    }

    /// One recurrence step from the input projection `x W + b` of the current
    /// word. `prev` is `None` for the zero initial state.
    pub fn step(&self, tape: &mut Tape, u: Var, x_proj: Var, prev: Option<(Var, Var)>) -> Step {
        let pre = match prev {
            Some((h_prev, _)) => {
                let rec = tape.matmul(h_prev, u);
                tape.add(x_proj, rec)
            }
            None => x_proj,
        };
        let f = self.gate(tape, pre, FORGET);
        let f = tape.sigmoid(f);
        let i = self.gate(tape, pre, INPUT);
        let i = tape.sigmoid(i);
        let o = self.gate(tape, pre, OUTPUT);
        let o = tape.sigmoid(o);
        let cand = self.gate(tape, pre, CANDIDATE);
        let cand = tape.tanh(cand);
        let mf = self.gate(tape, pre, MASTER_FORGET);
        let mf = tape.softmax_rows(mf);
        let master_f = tape.cumsum_rows(mf);
        let mi = self.gate(tape, pre, MASTER_INPUT);
        let mi = tape.softmax_rows(mi);
        let mi = tape.cumsum_rows(mi);
        let master_i = tape.affine(mi, -1.0, 1.0);

        // f̄ = f̂ ∘ (f ∘ î + 1 − î)
        let fi = tape.mul(f, master_i);
        let fi = tape.sub(fi, master_i);
        let fi = tape.affine(fi, 1.0, 1.0);
        let f_bar = tape.mul(master_f, fi);
        // ī = î ∘ (i ∘ f̂ + 1 − f̂)
        let ii = tape.mul(i, master_f);
        let ii = tape.sub(ii, master_f);
        let ii = tape.affine(ii, 1.0, 1.0);
        let i_bar = tape.mul(master_i, ii);

        let write = tape.mul(i_bar, cand);
        let c = match prev {
            Some((_, c_prev)) => {
                let keep = tape.mul(f_bar, c_prev);
                tape.add(keep, write)
            }
            None => write,
        };
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc);
        Step { h, c, master_f }
    }

    /// Left-to-right pass over an `N × d_in` input.
    pub fn run<'a>(&self, tape: &mut Tape<'a>, binder: &mut Binder<'a>, x: Var) -> OnLstmVars {
        let (w, u, b) = (binder.var(tape, self.w), binder.var(tape, self.u), binder.var(tape, self.b));
        let proj = tape.matmul(x, w);
        let proj = tape.add_row(proj, b);
        let n = tape.shape(x).0;
        let mut hs = Vec::with_capacity(n);
        let mut masters = Vec::with_capacity(n);
        let mut prev = None;
        for t in 0..n {
            let xt = tape.row(proj, t);
            let step = self.step(tape, u, xt, prev);
            hs.push(step.h);
            masters.push(step.master_f);
            prev = Some((step.h, step.c));
        }
        let h = tape.concat_rows(&hs);
        let master_f = tape.concat_rows(&masters);
        let total = tape.row_sums(master_f);
        let imp = tape.affine(total, -1.0, 1.0);
        OnLstmVars { h, master_f, imp }
    }

    pub fn run_values(&self, store: &ParamStore, x: &Array2<f64>) -> OnLstmOutput {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let xv = tape.constant(x.clone());
        let out = self.run(&mut tape, &mut binder, xv);
        OnLstmOutput {
            h: tape.value(out.h).clone(),
            imp: tape.value(out.imp).iter().copied().collect(),
            master_f: tape.value(out.master_f).clone(),
        }
    }

    /// A single step on plain vectors: returns `(h, c, master_f)`.
    pub fn step_values(
        &self,
        store: &ParamStore,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let (w, u, b) = (binder.var(&mut tape, self.w), binder.var(&mut tape, self.u), binder.var(&mut tape, self.b));
        let xv = tape.constant(row(x));
        let hv = tape.constant(row(h_prev));
        let cv = tape.constant(row(c_prev));
        let proj = tape.matmul(xv, w);
        let proj = tape.add(proj, b);
        let step = self.step(&mut tape, u, proj, Some((hv, cv)));
        let flat = |v: Var| tape.value(v).iter().copied().collect::<Vec<f64>>();
        (flat(step.h), flat(step.c), flat(step.master_f))
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}

/// Standard single-direction LSTM (`w`: `d_in × 4D`, gates forget, input,
/// output, candidate).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, input_dim: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w = store.add_uniform(format!("{prefix}.w"), input_dim, 4 * hidden, bound, rng);
        let u = store.add_uniform(format!("{prefix}.u"), hidden, 4 * hidden, bound, rng);
        let b = store.add_uniform(format!("{prefix}.b"), 1, 4 * hidden, bound, rng);
        Lstm { w, u, b, hidden }
    }

    /// `N × D` hidden states.
    pub fn run<'a>(&self, tape: &mut Tape<'a>, binder: &mut Binder<'a>, x: Var) -> Var {
        let d = self.hidden;
        let (w, u, b) = (binder.var(tape, self.w), binder.var(tape, self.u), binder.var(tape, self.b));
        let proj = tape.matmul(x, w);
        let proj = tape.add_row(proj, b);
        let n = tape.shape(x).0;
        let mut hs = Vec::with_capacity(n);
        let mut prev: Option<(Var, Var)> = None;
        for t in 0..n {
            let mut pre = tape.row(proj, t);
            if let Some((h_prev, _)) = prev {
                let rec = tape.matmul(h_prev, u);
                pre = tape.add(pre, rec);
            }
            let f = tape.slice_cols(pre, 0, d);
            let f = tape.sigmoid(f);
            let i = tape.slice_cols(pre, d, 2 * d);
            let i = tape.sigmoid(i);
            let o = tape.slice_cols(pre, 2 * d, 3 * d);
            let o = tape.sigmoid(o);
            let g = tape.slice_cols(pre, 3 * d, 4 * d);
            let g = tape.tanh(g);
            let write = tape.mul(i, g);
            let c = match prev {
                Some((_, c_prev)) => {
                    let keep = tape.mul(f, c_prev);
                    tape.add(keep, write)
                }
                None => write,
            };
            let tc = tape.tanh(c);
            let h = tape.mul(o, tc);
            hs.push(h);
            prev = Some((h, c));
        }
        tape.concat_rows(&hs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cell(d_in: usize, hidden: usize, seed: u64) -> (ParamStore, OnLstm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = OnLstm::new(&mut store, &mut rng, "on", d_in, hidden);
        (store, cell)
    }

    #[test]
    fn cummax_examples() {
        let c = cummax(&[0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(c[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c[1], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c[2], 1.0, epsilon = 1e-15);
        assert_eq!(cummax(&[-3.7]), vec![1.0]);
        let c = cummax(&[10.0, -10.0]);
        let first = 1.0 / (1.0 + (-20.0f64).exp());
        assert_abs_diff_eq!(c[0], first, epsilon = 1e-15);
        assert_abs_diff_eq!(c[0], 0.999_999_998, epsilon = 1e-9);
        assert_abs_diff_eq!(c[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn model_score_examples() {
        let s = model_scores(&[2.0, 3.0]);
        let low = 1.0 / (1.0 + std::f64::consts::E);
        assert_abs_diff_eq!(s[0], low, epsilon = 1e-12);
        assert_abs_diff_eq!(s[0], 0.26894, epsilon = 1e-5);
        assert_abs_diff_eq!(s[1], 0.73106, epsilon = 1e-5);
        let shifted = model_scores(&[12.0, 13.0]);
        assert_abs_diff_eq!(s[0], shifted[0], epsilon = 1e-15);
        assert_eq!(model_scores(&[0.5; 4]), vec![0.25; 4]);
    }

    #[test]
    fn single_neuron_keeps_cell_state() {
        let (store, cell) = cell(3, 1, 5);
        let c_prev = [0.42];
        let (_, c, mf) = cell.step_values(&store, &[0.3, -1.0, 2.0], &[0.1], &c_prev);
        assert_eq!(mf, vec![1.0]);
        assert_abs_diff_eq!(c[0], c_prev[0], epsilon = 1e-15);
        let out = cell.run_values(&store, &Array2::from_elem((4, 3), 0.7));
        assert!(out.h.iter().all(|&h| h == 0.0));
        assert_eq!(out.imp, vec![0.0; 4]);
    }

    #[test]
    fn zero_parameters() {
        let (mut store, cell) = cell(2, 3, 1);
        for id in [cell.w, cell.u, cell.b] {
            store.get_mut(id).fill(0.0);
        }
        let c_prev = [0.5, -0.2, 0.9];
        let (h, c, mf) = cell.step_values(&store, &[1.0, -2.0], &[0.3, 0.3, 0.3], &c_prev);
        // f = i = o = 0.5, candidate 0, master gates cummax(0) = [1/3, 2/3, 1]
        let m_f = [1.0 / 3.0, 2.0 / 3.0, 1.0];
        let m_i: Vec<f64> = m_f.iter().map(|v| 1.0 - v).collect();
        for k in 0..3 {
            assert_abs_diff_eq!(mf[k], m_f[k], epsilon = 1e-12);
            let f_bar = m_f[k] * (0.5 * m_i[k] + 1.0 - m_i[k]);
            assert_abs_diff_eq!(c[k], f_bar * c_prev[k], epsilon = 1e-12);
            assert_abs_diff_eq!(h[k], 0.5 * c[k].tanh(), epsilon = 1e-12);
        }
    }

    #[test]
    fn single_token_and_order_sensitivity() {
        let (store, cell) = cell(3, 4, 9);
        let out = cell.run_values(&store, &Array2::from_elem((1, 3), 0.2));
        assert_eq!(out.h.nrows(), 1);
        assert_eq!(out.imp.len(), 1);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_simple_fn((2, 3), || rng.gen_range(-1.0..1.0));
        let mut swapped = x.clone();
        swapped.row_mut(0).assign(&x.row(1));
        swapped.row_mut(1).assign(&x.row(0));
        let a = cell.run_values(&store, &x);
        let b = cell.run_values(&store, &swapped);
        assert_ne!(a.h.row(1), b.h.row(0));
        assert_ne!(a.h.row(1), b.h.row(1));
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        let (store, cell) = cell(3, 4, 21);
        let x = [0.4, -0.3, 0.8];
        let h0 = [0.1, -0.2, 0.05, 0.3];
        let c0 = [0.5, -0.4, 0.2, 0.1];
        let objective = |s: &ParamStore| -> f64 { cell.step_values(s, &x, &h0, &c0).0.iter().sum() };

        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let (w, u, b) = (binder.var(&mut tape, cell.w), binder.var(&mut tape, cell.u), binder.var(&mut tape, cell.b));
        let xv = tape.constant(row(&x));
        let hv = tape.constant(row(&h0));
        let cv = tape.constant(row(&c0));
        let proj = tape.matmul(xv, w);
        let proj = tape.add(proj, b);
        let step = cell.step(&mut tape, u, proj, Some((hv, cv)));
        let total = tape.sum(step.h);
        let grads = binder.collect(tape.backward(total));

        let h = 1e-6;
        for id in store.ids() {
            for idx in 0..store.get(id).len() {
                let shape = store.get(id).dim();
                let pos = [idx / shape.1, idx % shape.1];
                let mut plus = store.clone();
                plus.get_mut(id)[pos] += h;
                let mut minus = store.clone();
                minus.get_mut(id)[pos] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let analytic = grads[id.index()][pos];
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!((analytic - numeric).abs() / scale <= 1e-4, "{} {pos:?}: {analytic} vs {numeric}", store.name(id));
            }
        }
    }

    proptest! {
        #[test]
        fn cummax_is_monotone(v in proptest::collection::vec(-30.0f64..30.0, 1..40)) {
            let c = cummax(&v);
            prop_assert!(c.iter().all(|&x| x > 0.0 && x <= 1.0 + 1e-12));
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!((c[c.len() - 1] - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn imp_is_one_minus_master_sum(seed in any::<u64>(), n in 1usize..6) {
            let (store, cell) = cell(3, 5, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let x = Array2::from_shape_simple_fn((n, 3), || rng.gen_range(-2.0..2.0));
            let out = cell.run_values(&store, &x);
            for i in 0..n {
                prop_assert_eq!(out.imp[i], 1.0 - out.master_f.row(i).sum());
                prop_assert!(out.imp[i] >= 1.0 - 5.0 && out.imp[i] <= 1.0);
            }
        }
    }
}
