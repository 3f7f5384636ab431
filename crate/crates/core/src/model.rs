//! Fully connected binary classifier trained with plain SGD.
//!
//! Parameters live in one flat `f64` vector. Each layer contributes its weight
//! matrix (row-major, `fan_out x fan_in`) followed by its bias vector, in layer
//! order. Hidden layers use ReLU followed by inverted dropout; the head is a
//! single sigmoid unit trained with mean binary cross-entropy.

use std::ops::Range;

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::{self, SimRng};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_output")]
    pub output_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![256, 128, 64]
}
fn default_output() -> usize {
    1
}
fn default_dropout() -> f64 {
    0.3
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub biases: Range<usize>,
}

/// Flat parameter (or gradient) vector bound to the spec it was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub spec_digest: u64,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        ParamVector {
            values: vec![0.0; spec.param_count()],
            spec_digest: spec.digest(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Data("batch must contain at least one row".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                actual: labels.len(),
                context: "batch labels",
            });
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch features".into()));
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, mask drawn from the given seed.
    Train {
        seed: u64,
    },
    Eval,
}

struct Trace {
    /// Input to each layer (post-dropout activations for hidden layers).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    /// Dropout scale per hidden layer: 0 or 1/(1-p).
    masks: Vec<Option<Array2<f64>>>,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>) -> Result<Self> {
        let spec = ModelSpec {
            input_dim,
            hidden_dims,
            output_dim: 1,
            dropout_rate: default_dropout(),
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be >= 1"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::config(
                "model.hidden_dims",
                "must be non-empty with every width >= 1",
            ));
        }
        if self.output_dim != 1 {
            return Err(Error::config(
                "model.output_dim",
                "only the binary head (output_dim = 1) is supported",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("model.dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                let biases = weights.end..weights.end + fan_out;
                offset = biases.end;
                LayerLayout {
                    fan_in,
                    fan_out,
                    weights,
                    biases,
                }
            })
            .collect()
    }

    /// Total parameter count, `sum over layers of (fan_in + 1) * fan_out`.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| (l.fan_in + 1) * l.fan_out).sum()
    }

    pub fn digest(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(format!(
            "{}|{:?}|{}|{:?}|{:?}",
            self.input_dim,
            self.hidden_dims,
            self.output_dim,
            self.dropout_rate.to_bits(),
            self.activation
        ));
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = seed::rng(seed);
        let mut values = vec![0.0; self.param_count()];
        for layer in self.layers() {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut values[layer.weights.clone()] {
                *w = rng.random_range(-limit..limit);
            }
        }
        ParamVector {
            values,
            spec_digest: self.digest(),
        }
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        let expected = self.param_count();
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: params.len(),
                context: "parameter vector",
            });
        }
        Ok(())
    }

    fn check_features(&self, features: &ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: features.ncols(),
                context: "input features",
            });
        }
        Ok(())
    }

    fn trace(&self, params: &ParamVector, features: ArrayView2<f64>, mut dropout: Option<SimRng>) -> Trace {
        let layers = self.layers();
        let last = layers.len() - 1;
        let keep = 1.0 - self.dropout_rate;
        let mut trace = Trace {
            inputs: Vec::with_capacity(layers.len()),
            pre: Vec::with_capacity(layers.len()),
            masks: Vec::with_capacity(last),
        };
        let mut input = features.to_owned();
        for (idx, layer) in layers.iter().enumerate() {
            let w = weight_view(params, layer);
            let mut z = input.dot(&w.t());
            z += &ndarray::ArrayView1::from(&params.values[layer.biases.clone()]);
            trace.inputs.push(input);
            if idx == last {
                trace.pre.push(z);
                break;
            }
            // NaN propagates (f64::max would swallow it)
            let mut h = z.mapv(|v| if v < 0.0 { 0.0 } else { v });
            let mask = match dropout.as_mut() {
                Some(rng) if self.dropout_rate > 0.0 => {
                    let scale = 1.0 / keep;
                    let m =
                        Array2::from_shape_fn(h.raw_dim(), |_| if rng.random::<f64>() < keep { scale } else { 0.0 });
                    h *= &m;
                    Some(m)
                }
                _ => None,
            };
            trace.pre.push(z);
            trace.masks.push(mask);
            input = h;
        }
        trace
    }

    /// Sigmoid outputs for every row of `batch`.
    pub fn forward(&self, params: &ParamVector, batch: &Batch, mode: Mode) -> Result<Vec<f64>> {
        self.predict(params, batch.features.view(), mode)
    }

    pub fn predict(&self, params: &ParamVector, features: ArrayView2<f64>, mode: Mode) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_features(&features)?;
        let trace = self.trace(params, features, dropout_rng(mode));
        let logits = trace.pre.last().expect("at least one layer");
        Ok(logits.column(0).iter().map(|&z| sigmoid(z)).collect())
    }

    /// Post-dropout output of every hidden layer, in order.
    pub fn hidden_activations(
        &self,
        params: &ParamVector,
        features: ArrayView2<f64>,
        mode: Mode,
    ) -> Result<Vec<Array2<f64>>> {
        self.check_params(params)?;
        self.check_features(&features)?;
        let mut trace = self.trace(params, features, dropout_rng(mode));
        trace.inputs.remove(0);
        Ok(trace.inputs)
    }

    /// Mean binary cross-entropy and its exact gradient under the dropout mask
    /// drawn from `dropout_seed` (no dropout when `None`).
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &Batch,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, ParamVector)> {
        self.check_params(params)?;
        self.check_features(&batch.features.view())?;
        let trace = self.trace(params, batch.features.view(), dropout_seed.map(seed::rng));
        let n = batch.len() as f64;
        let logits = trace.pre.last().expect("at least one layer");

        let mut loss = 0.0;
        let mut delta = Array2::<f64>::zeros(logits.raw_dim());
        for ((i, &z), &y) in logits.column(0).iter().enumerate().zip(&batch.labels) {
            let y = f64::from(y);
            // softplus(z) - y*z, written to avoid overflow
            loss += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
            delta[[i, 0]] = (sigmoid(z) - y) / n;
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss evaluated to {loss} on a batch of {} rows",
                batch.len()
            )));
        }

        let layers = self.layers();
        let mut grad = ParamVector::zeros(self);
        for (idx, layer) in layers.iter().enumerate().rev() {
            let input = &trace.inputs[idx];
            let dw = delta.t().dot(input);
            // logical (row-major) order; `dot` may hand back a column-major result
            for (g, &v) in grad.values[layer.weights.clone()].iter_mut().zip(dw.iter()) {
                *g = v;
            }
            let db = delta.sum_axis(Axis(0));
            for (g, &v) in grad.values[layer.biases.clone()].iter_mut().zip(db.iter()) {
                *g = v;
            }
            if idx == 0 {
                break;
            }
            let mut da = delta.dot(&weight_view(params, layer));
            if let Some(mask) = &trace.masks[idx - 1] {
                da *= mask;
            }
            relu_backward(da.view_mut(), &trace.pre[idx - 1]);
            delta = da;
        }
        Ok((loss, grad))
    }
}

fn dropout_rng(mode: Mode) -> Option<SimRng> {
    match mode {
        Mode::Train { seed } => Some(seed::rng(seed)),
        Mode::Eval => None,
    }
}

fn weight_view<'a>(params: &'a ParamVector, layer: &LayerLayout) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((layer.fan_out, layer.fan_in), &params.values[layer.weights.clone()])
        .expect("layout matches parameter count")
}

fn relu_backward(mut grad: ArrayViewMut2<f64>, pre: &Array2<f64>) {
    grad.zip_mut_with(pre, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `params - lr * grad`, elementwise.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grad, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(params: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: grad.len(),
            context: "gradient",
        });
    }
    for (p, g) in params.values.iter_mut().zip(&grad.values) {
        *p -= lr * g;
    }
    Ok(())
}

/// Exponential decay: `base_lr * decay^round`.
pub fn lr_schedule(round: u32, base_lr: f64, decay: f64) -> f64 {
    base_lr * decay.powi(round as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn tiny() -> ModelSpec {
        ModelSpec::new(4, vec![2]).unwrap()
    }

    #[test]
    fn parameter_count_example() {
        let spec = tiny();
        assert_eq!(spec.param_count(), 13);
        assert_eq!(spec.init_params(9).len(), 13);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = ModelSpec::new(7, vec![5, 3]).unwrap();
        let a = spec.init_params(11);
        let b = spec.init_params(11);
        assert_eq!(a, b);
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        for layer in spec.layers() {
            assert!(a.values[layer.biases].iter().all(|&v| v == 0.0));
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            assert!(a.values[layer.weights].iter().all(|v| v.abs() <= limit));
        }
        assert_ne!(spec.init_params(12), a);
    }

    #[test]
    fn zero_params_give_half() {
        let spec = ModelSpec::new(3, vec![4, 2]).unwrap();
        let params = ParamVector::zeros(&spec);
        let batch = Batch::new(array![[1.0, -2.0, 3.0], [0.5, 0.5, 9.0]], vec![0, 1]).unwrap();
        for p in spec.forward(&params, &batch, Mode::Eval).unwrap() {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn identity_like_single_unit() {
        let spec = ModelSpec::new(1, vec![1]).unwrap();
        // hidden = relu(x), logit = hidden
        let params = ParamVector {
            values: vec![1.0, 0.0, 1.0, 0.0],
            spec_digest: spec.digest(),
        };
        let batch = Batch::new(array![[0.0], [2.0]], vec![0, 1]).unwrap();
        let out = spec.forward(&params, &batch, Mode::Eval).unwrap();
        assert_eq!(out[0], 0.5);
        assert!((out[1] - sigmoid(2.0)).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let spec = tiny();
        let params = spec.init_params(1);
        let batch = Batch::new(array![[1.0, 2.0, 3.0]], vec![1]).unwrap();
        assert!(matches!(
            spec.forward(&params, &batch, Mode::Eval),
            Err(Error::DimensionMismatch { .. })
        ));
        let short = ParamVector {
            values: vec![0.0; 5],
            spec_digest: 0,
        };
        let ok_batch = Batch::new(array![[1.0, 2.0, 3.0, 4.0]], vec![1]).unwrap();
        assert!(spec.forward(&short, &ok_batch, Mode::Eval).is_err());
    }

    #[test]
    fn perfect_predictions_have_tiny_loss() {
        let spec = ModelSpec::new(1, vec![1]).unwrap().with_dropout(0.0);
        // logit = 100*relu(x) - 50
        let params = ParamVector {
            values: vec![1.0, 0.0, 100.0, -50.0],
            spec_digest: spec.digest(),
        };
        let batch = Batch::new(array![[0.0], [1.0], [0.0], [1.0]], vec![0, 1, 0, 1]).unwrap();
        let (loss, _) = spec.loss_and_grad(&params, &batch, None).unwrap();
        assert!(loss < 1e-8, "loss {loss}");
    }

    #[test]
    fn identical_rows_match_single_row_gradient() {
        let spec = ModelSpec::new(3, vec![4]).unwrap();
        let params = spec.init_params(3);
        let one = Batch::new(array![[0.3, -1.0, 2.0]], vec![1]).unwrap();
        let many = Batch::new(
            array![[0.3, -1.0, 2.0], [0.3, -1.0, 2.0], [0.3, -1.0, 2.0]],
            vec![1, 1, 1],
        )
        .unwrap();
        let (l1, g1) = spec.loss_and_grad(&params, &one, None).unwrap();
        let (l3, g3) = spec.loss_and_grad(&params, &many, None).unwrap();
        assert!((l1 - l3).abs() < 1e-14);
        for (a, b) in g1.values.iter().zip(&g3.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let spec = ModelSpec::new(1, vec![1]).unwrap();
        let params = ParamVector {
            values: vec![f64::NAN, 0.0, 1.0, 0.0],
            spec_digest: spec.digest(),
        };
        let batch = Batch::new(array![[1.0]], vec![1]).unwrap();
        assert!(matches!(
            spec.loss_and_grad(&params, &batch, None),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn sgd_examples() {
        let spec = ModelSpec::new(1, vec![1]).unwrap();
        let p = ParamVector {
            values: vec![1.0, 2.0],
            spec_digest: spec.digest(),
        };
        let g = ParamVector {
            values: vec![1.0, -1.0],
            spec_digest: spec.digest(),
        };
        assert_eq!(sgd_step(&p, &g, 0.5).unwrap().values, vec![0.5, 2.5]);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        let twice = sgd_step(&sgd_step(&p, &g, 0.25).unwrap(), &g, 0.25).unwrap();
        assert_eq!(twice.values, sgd_step(&p, &g, 0.5).unwrap().values);
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_schedule(0, 0.1, 0.5), 0.1);
        assert_eq!(lr_schedule(7, 0.1, 1.0), 0.1);
        assert!((lr_schedule(2, 0.1, 0.5) - 0.025).abs() < 1e-15);
    }

    #[test]
    fn dropout_is_seeded() {
        let spec = ModelSpec::new(5, vec![8, 4]).unwrap();
        let params = spec.init_params(5);
        let batch = Batch::new(Array2::from_elem((3, 5), 0.7), vec![0, 1, 0]).unwrap();
        let a = spec.forward(&params, &batch, Mode::Train { seed: 1 }).unwrap();
        let b = spec.forward(&params, &batch, Mode::Train { seed: 1 }).unwrap();
        let c = spec.forward(&params, &batch, Mode::Train { seed: 2 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dropout_expectation_matches_eval() {
        let spec = ModelSpec::new(3, vec![6, 4]).unwrap();
        let params = spec.init_params(21);
        let x = array![[0.9, -0.4, 1.3]];
        let eval = spec.hidden_activations(&params, x.view(), Mode::Eval).unwrap();
        let trials = 10_000;
        // post-dropout output of layer 1 and pre-activation of layer 2 are both
        // linear in the mask, so their means converge to the eval values
        let layer2 = &spec.layers()[1];
        let w2 = weight_view(&params, layer2);
        let eval_z2 = eval[0].dot(&w2.t());
        let mut sum = Array2::<f64>::zeros(eval[0].raw_dim());
        let mut sumsq = sum.clone();
        let mut sum_z = Array2::<f64>::zeros(eval_z2.raw_dim());
        let mut sumsq_z = sum_z.clone();
        for s in 0..trials {
            let acts = spec
                .hidden_activations(&params, x.view(), Mode::Train { seed: s })
                .unwrap();
            let z2 = acts[0].dot(&w2.t());
            sum += &acts[0];
            sumsq += &acts[0].mapv(|v| v * v);
            sum_z += &z2;
            sumsq_z += &z2.mapv(|v| v * v);
        }
        let n = trials as f64;
        let check = |sum: &Array2<f64>, sumsq: &Array2<f64>, target: &Array2<f64>| {
            for ((s, sq), t) in sum.iter().zip(sumsq).zip(target) {
                let mean = s / n;
                let var = (sq / n - mean * mean).max(0.0);
                let se = (var / n).sqrt();
                assert!((mean - t).abs() <= 3.0 * se + 1e-12, "mean {mean} vs {t}");
            }
        };
        check(&sum, &sumsq, &eval[0]);
        check(&sum_z, &sumsq_z, &eval_z2);
    }

    proptest! {
        #[test]
        fn param_count_law(input in 1usize..12, hidden in proptest::collection::vec(1usize..10, 1..4)) {
            let spec = ModelSpec::new(input, hidden.clone()).unwrap();
            let mut dims = vec![input];
            dims.extend(hidden);
            dims.push(1);
            let expected: usize = dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
            prop_assert_eq!(spec.param_count(), expected);
            prop_assert_eq!(spec.init_params(0).len(), expected);
        }
    }
}
