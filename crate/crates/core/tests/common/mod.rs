#![allow(dead_code)]

use std::path::PathBuf;

use fedsim::config::ExperimentConfig;
use fedsim::model::{sigmoid, ModelSpec, ParamVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Plain-loop forward pass: pre-activations of every layer plus the output
/// probabilities. No dropout.
pub fn naive_forward(spec: &ModelSpec, params: &ParamVector, x: &Array2<f64>) -> (Vec<Vec<Vec<f64>>>, Vec<f64>) {
    let layers = spec.layers();
    let mut pre_all = Vec::new();
    let mut out = Vec::new();
    for row in x.rows() {
        let mut a: Vec<f64> = row.to_vec();
        let mut pres = Vec::new();
        for (li, l) in layers.iter().enumerate() {
            let mut z = vec![0.0; l.fan_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let mut s = params.values[l.biases.start + o];
                for (i, ai) in a.iter().enumerate() {
                    s += params.values[l.weights.start + o * l.fan_in + i] * ai;
                }
                *zo = s;
            }
            pres.push(z.clone());
            a = if li + 1 < layers.len() {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                z
            };
        }
        out.push(sigmoid(a[0]));
        pre_all.push(pres);
    }
    (pre_all, out)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        v
    })
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect()
}
