#![allow(dead_code)]

use rand_distr::{Distribution, StandardNormal};
use sieve_core::toy_vlm::{Model, ModelConfig};
use rand::RngCore;
use sieve_core::RngStream;

/// A small random model configuration plus a random input block.
pub fn random_case(index: u64) -> (Model<f64>, Vec<f64>, u32) {
    let mut rng = RngStream::new(0xC0FFEE).split_index("gradcheck", index);
    let (d_model, n_heads) = [(8, 2), (12, 3), (16, 4), (16, 2), (8, 1)][rng.below(5)];
    let n_layers = 1 + rng.below(3);
    let n = 4 + rng.below(7);
    let config = ModelConfig {
        d_model,
        n_layers,
        n_heads,
        patch_size: 4,
        image_side: 8,
        mid_layers: (1, n_layers),
        seed: rng.next_u64(),
        max_seq: 16,
        ..ModelConfig::default()
    };
    let model = Model::build(config).unwrap();
    let inputs: Vec<f64> =
        (0..n * d_model).map(|_| StandardNormal.sample(&mut rng)).collect();
    let target = rng.below(model.vocab().len()) as u32;
    (model, inputs, target)
}

/// Central finite difference of `f` along every coordinate of `x`.
pub fn central_differences(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + step;
            let up = f(&work);
            work[i] = x[i] - step;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `max_i |a_i - b_i| / (|a_i| + 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// A narrow model over the full 64×64 image so synthetic samples fit.
pub fn small_model(seed: u64) -> Model<f64> {
    Model::build(ModelConfig { d_model: 16, n_layers: 2, n_heads: 2, mid_layers: (1, 2), seed, ..ModelConfig::default() })
        .unwrap()
}

pub fn ids(model: &Model<f64>, text: &str) -> Vec<u32> {
    model.tokenize(text)
}
