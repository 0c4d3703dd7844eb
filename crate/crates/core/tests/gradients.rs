use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ong::corpus::gen_synthetic;
use ong::encoder::Vocab;
use ong::objective::{AblationMask, RegPool, Variant};
use ong::params::ParamId;
use ong::{Example, Model, ModelConfig};

fn tiny(mask: AblationMask) -> ModelConfig {
    ModelConfig { tok_dim: 3, pos_dim: 2, hidden: 6, gcn_dim: 8, ff_dim: 8, mask, ..ModelConfig::default() }
}

fn central_difference(model: &mut Model, ex: &Example, id: ParamId, at: (usize, usize), h: f64) -> f64 {
    let orig = model.store.get(id)[at];
    model.store.get_mut(id)[at] = orig + h;
    let up = model.loss(ex).unwrap().total;
    model.store.get_mut(id)[at] = orig - h;
    let down = model.loss(ex).unwrap().total;
    model.store.get_mut(id)[at] = orig;
    (up - down) / (2.0 * h)
}

/// Worst relative error over all parameters, norms taken per tensor. Each
/// coordinate uses the closer of two step sizes, so a ReLU kink inside one
/// step does not count. Panics if some tensor never receives a gradient.
fn check(mut model: Model, examples: &[Example]) -> f64 {
    let steps = [1e-5, 1e-6];
    let mut worst = 0.0f64;
    let mut live = vec![0.0f64; model.store.len()];
    for ex in examples {
        let (_, grads) = model.loss_and_grads(ex).unwrap();
        for id in model.store.ids().collect::<Vec<_>>() {
            let (rows, cols) = model.store.get(id).dim();
            let (mut err, mut norm) = (0.0f64, 0.0f64);
            for r in 0..rows {
                for c in 0..cols {
                    let analytic = grads[id.index()][[r, c]];
                    let numeric = steps
                        .iter()
                        .map(|&h| central_difference(&mut model, ex, id, (r, c), h))
                        .min_by(|a, b| (a - analytic).abs().total_cmp(&(b - analytic).abs()))
                        .unwrap();
                    err += (numeric - analytic).powi(2);
                    norm += analytic.powi(2).max(numeric.powi(2));
                }
            }
            live[id.index()] += norm;
            if norm > 1e-14 {
                worst = worst.max(err.sqrt() / norm.sqrt());
            }
        }
    }
    for id in model.store.ids() {
        assert!(live[id.index()] > 1e-16, "{} has no gradient", model.store.name(id));
    }
    worst
}

fn run(config: ModelConfig, seed: u64) -> f64 {
    let sentences = gen_synthetic(4, (3, 6), seed).unwrap();
    let vocab = Vocab::build(&sentences);
    let model = Model::new(config, Some(vocab), seed).unwrap();
    let examples: Vec<Example> = sentences.into_iter().map(Example::new).collect();
    check(model, &examples)
}

#[test]
fn every_ablation_has_exact_gradients() {
    for (k, v) in Variant::ABLATIONS.into_iter().enumerate() {
        let err = run(tiny(v.mask()), 30 + k as u64);
        assert!(err <= 1e-4, "{v}: relative error {err:e}");
    }
}

#[test]
fn optional_architectures_have_exact_gradients() {
    let base = AblationMask::default();
    let configs = [
        ModelConfig { learn_combined: true, ..tiny(base) },
        ModelConfig { separate_reg_gcn: true, ..tiny(base) },
        ModelConfig { edge_hidden: Some(3), ..tiny(base) },
        ModelConfig { gcn_layers: 1, ..tiny(AblationMask { reg_pool: RegPool::Maxpool, ..base }) },
    ];
    for (k, config) in configs.into_iter().enumerate() {
        let err = run(config.clone(), 50 + k as u64);
        assert!(err <= 1e-4, "{config:?}: relative error {err:e}");
    }
}

#[test]
fn sidecar_inputs_have_exact_gradients() {
    let sentences = gen_synthetic(3, (3, 5), 71).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let examples: Vec<Example> = sentences
        .into_iter()
        .map(|s| {
            let v = Array2::from_shape_simple_fn((s.len(), 3), || rng.gen_range(-1.0..1.0));
            Example::with_vectors(s, v)
        })
        .collect();
    let model = Model::new(tiny(AblationMask::default()), None, 71).unwrap();
    let err = check(model, &examples);
    assert!(err <= 1e-4, "relative error {err:e}");
}

