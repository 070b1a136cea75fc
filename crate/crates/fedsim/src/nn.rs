//! Minimal dense-network engine.
//!
//! Fully connected layers with ReLU/tanh hidden activations and a linear
//! output layer, softmax probabilities, exact analytic backpropagation, and
//! SGD with momentum. Everything is `f64` and everything is deterministic:
//! a model is a value, training steps map old values to new values, and the
//! only randomness comes from the RNG handed in by the caller.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before any `ln`.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    /// No nonlinearity; used by the output layer so logits stay exposed.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the pre-activation.
    fn prime(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Width and activation of one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

/// Spec for an MLP classifier: ReLU hidden layers, linear output.
pub fn mlp_spec(inputs: usize, hidden: &[usize], outputs: usize) -> Vec<LayerSpec> {
    let mut spec = Vec::with_capacity(hidden.len() + 1);
    let mut prev = inputs;
    for &width in hidden {
        spec.push(LayerSpec {
            inputs: prev,
            outputs: width,
            activation: Activation::Relu,
        });
        prev = width;
    }
    spec.push(LayerSpec {
        inputs: prev,
        outputs,
        activation: Activation::Identity,
    });
    spec
}

fn validate_spec(spec: &[LayerSpec]) -> Result<()> {
    if spec.is_empty() {
        return Err(Error::config("layer spec must contain at least one layer"));
    }
    for window in spec.windows(2) {
        if window[0].outputs != window[1].inputs {
            return Err(Error::config(format!(
                "adjacent layer widths disagree: {} out vs {} in",
                window[0].outputs, window[1].inputs
            )));
        }
    }
    if spec.iter().any(|l| l.inputs == 0 || l.outputs == 0) {
        return Err(Error::config("layer widths must be positive"));
    }
    Ok(())
}

/// Weights and bias of one dense layer. Weights are `[outputs x inputs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// A full parameter vector, structured by layer.
///
/// This is the unit of communication between server and clients and also the
/// shape of gradients and optimizer buffers. Two values with the same spec
/// support elementwise arithmetic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    spec: Vec<LayerSpec>,
    layers: Vec<Layer>,
}

impl ModelParams {
    /// Glorot-uniform initialization, seeded by the caller's RNG.
    pub fn init(spec: Vec<LayerSpec>, rng: &mut impl Rng) -> Result<Self> {
        validate_spec(&spec)?;
        let layers = spec
            .iter()
            .map(|l| {
                let a = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
                let weights = Array2::from_shape_fn((l.outputs, l.inputs), |_| {
                    rng.random_range(-a..a)
                });
                Layer {
                    weights,
                    bias: Array1::zeros(l.outputs),
                }
            })
            .collect();
        Ok(ModelParams { spec, layers })
    }

    /// All-zero parameters of the given shape (gradients, optimizer buffers).
    pub fn zeros(spec: Vec<LayerSpec>) -> Result<Self> {
        validate_spec(&spec)?;
        let layers = spec
            .iter()
            .map(|l| Layer {
                weights: Array2::zeros((l.outputs, l.inputs)),
                bias: Array1::zeros(l.outputs),
            })
            .collect();
        Ok(ModelParams { spec, layers })
    }

    /// Build directly from layer values. Validates shape consistency.
    pub fn from_layers(spec: Vec<LayerSpec>, layers: Vec<Layer>) -> Result<Self> {
        validate_spec(&spec)?;
        if layers.len() != spec.len() {
            return Err(Error::config("layer count does not match spec"));
        }
        for (i, (l, s)) in layers.iter().zip(&spec).enumerate() {
            if l.weights.dim() != (s.outputs, s.inputs) || l.bias.len() != s.outputs {
                return Err(Error::config(format!("layer {i} shape does not match spec")));
            }
        }
        Ok(ModelParams { spec, layers })
    }

    pub fn spec(&self) -> &[LayerSpec] {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.spec[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.spec[self.spec.len() - 1].outputs
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.spec.clone()).expect("existing spec is valid")
    }

    pub fn same_spec(&self, other: &Self) -> bool {
        self.spec == other.spec
    }

    fn check_same_spec(&self, other: &Self) -> Result<()> {
        if !self.same_spec(other) {
            return Err(Error::config("model specs differ"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.spec.iter().map(|l| l.outputs * (l.inputs + 1)).sum()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same_spec(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.zip_mut_with(&b.weights, |x, &y| *x += alpha * y);
            a.bias.zip_mut_with(&b.bias, |x, &y| *x += alpha * y);
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for l in &mut self.layers {
            l.weights.mapv_inplace(|x| x * alpha);
            l.bias.mapv_inplace(|x| x * alpha);
        }
    }

    /// `self - other` as a new value.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_spec(other)?;
        let mut out = self.clone();
        out.add_scaled(-1.0, other)?;
        Ok(out)
    }

    /// Apply `f(self, a, b)` to every parameter triple in place.
    pub fn zip2_mut(
        &mut self,
        a: &Self,
        b: &Self,
        f: impl Fn(&mut f64, f64, f64) + Copy,
    ) -> Result<()> {
        self.check_same_spec(a)?;
        self.check_same_spec(b)?;
        for ((s, x), y) in self.layers.iter_mut().zip(&a.layers).zip(&b.layers) {
            ndarray::Zip::from(&mut s.weights)
                .and(&x.weights)
                .and(&y.weights)
                .for_each(|s, &x, &y| f(s, x, y));
            ndarray::Zip::from(&mut s.bias)
                .and(&x.bias)
                .and(&y.bias)
                .for_each(|s, &x, &y| f(s, x, y));
        }
        Ok(())
    }

    pub fn iter_params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_params().all(f64::is_finite)
    }

    pub fn sq_l2_distance(&self, other: &Self) -> Result<f64> {
        self.check_same_spec(other)?;
        let mut acc = 0.0;
        for (a, b) in self.iter_params().zip(other.iter_params()) {
            let d = a - b;
            acc += d * d;
        }
        Ok(acc)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_spec(other)?;
        Ok(self
            .iter_params()
            .zip(other.iter_params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Flatten to a single vector (layer order, weights row-major then bias).
    pub fn flatten(&self) -> Vec<f64> {
        self.iter_params().collect()
    }

    /// Overwrite all parameters from a flat vector produced by [`flatten`].
    ///
    /// [`flatten`]: ModelParams::flatten
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::config(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = *it.next().unwrap();
            }
            for b in l.bias.iter_mut() {
                *b = *it.next().unwrap();
            }
        }
        Ok(())
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

fn check_batch(model: &ModelParams, batch: &Array2<f64>) -> Result<()> {
    if batch.ncols() != model.input_width() {
        return Err(Error::config(format!(
            "batch has {} feature columns, model expects {}",
            batch.ncols(),
            model.input_width()
        )));
    }
    Ok(())
}

fn finite_or_err<'a>(values: impl IntoIterator<Item = &'a f64>, layer: usize, what: &str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            layer,
            detail: format!("non-finite {what}"),
        })
    }
}

/// Run the network and return one probability row per batch row.
pub fn forward(model: &ModelParams, batch: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(softmax_rows(&forward_logits(model, batch)?))
}

/// Run the network up to the (linear) output layer.
pub fn forward_logits(model: &ModelParams, batch: &Array2<f64>) -> Result<Array2<f64>> {
    check_batch(model, batch)?;
    let mut a = batch.clone();
    for (i, (layer, spec)) in model.layers.iter().zip(&model.spec).enumerate() {
        let mut z = a.dot(&layer.weights.t());
        z += &layer.bias;
        finite_or_err(z.iter(), i, "pre-activation")?;
        a = z.mapv(|v| spec.activation.apply(v));
    }
    Ok(a)
}

/// Exact gradient of an upstream loss with respect to every parameter.
///
/// `grad_logits` is the loss gradient at the output layer's pre-softmax
/// logits (one row per batch row); the (row x column) shape must match
/// `forward`'s output. Batch reduction, if any, is the loss's business:
/// this routine just back-propagates whatever it is handed.
pub fn backward(
    model: &ModelParams,
    batch: &Array2<f64>,
    grad_logits: &Array2<f64>,
) -> Result<ModelParams> {
    check_batch(model, batch)?;
    let n_layers = model.layers.len();
    if grad_logits.dim() != (batch.nrows(), model.output_width()) {
        return Err(Error::config(format!(
            "logit gradient shape {:?} does not match batch {} x output {}",
            grad_logits.dim(),
            batch.nrows(),
            model.output_width()
        )));
    }

    // Forward pass, keeping pre-activations and layer inputs.
    let mut inputs: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
    let mut pre: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
    let mut a = batch.clone();
    for (i, (layer, spec)) in model.layers.iter().zip(&model.spec).enumerate() {
        inputs.push(a.clone());
        let mut z = a.dot(&layer.weights.t());
        z += &layer.bias;
        finite_or_err(z.iter(), i, "pre-activation")?;
        a = z.mapv(|v| spec.activation.apply(v));
        pre.push(z);
    }

    let mut grad = model.zeros_like();
    let mut delta = grad_logits.clone();
    for i in (0..n_layers).rev() {
        finite_or_err(delta.iter(), i, "backpropagated gradient")?;
        // The output layer is linear; hidden layers scale by the activation
        // derivative at their pre-activation.
        if i < n_layers - 1 {
            let act = model.spec[i].activation;
            delta.zip_mut_with(&pre[i], |d, &z| *d *= act.prime(z));
        }
        grad.layers[i].weights = delta.t().dot(&inputs[i]);
        grad.layers[i].bias = delta.sum_axis(Axis(0));
        finite_or_err(grad.layers[i].weights.iter(), i, "weight gradient")?;
        if i > 0 {
            delta = delta.dot(&model.layers[i].weights);
        }
    }
    Ok(grad)
}

/// Momentum buffers plus the step-size settings of plain momentum SGD.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: ModelParams,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(model: &ModelParams, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::config("learning rate must be finite and nonnegative"));
        }
        Ok(OptimizerState {
            velocity: model.zeros_like(),
            learning_rate,
            momentum,
        })
    }

    pub fn velocity(&self) -> &ModelParams {
        &self.velocity
    }
}

/// One momentum-SGD update:
/// `buffer <- momentum * buffer + gradient; params <- params - lr * buffer`.
pub fn sgd_step(
    mut model: ModelParams,
    gradient: &ModelParams,
    mut state: OptimizerState,
) -> Result<(ModelParams, OptimizerState)> {
    model.check_same_spec(gradient)?;
    model.check_same_spec(&state.velocity)?;
    for (i, layer) in gradient.layers.iter().enumerate() {
        finite_or_err(layer.weights.iter().chain(layer.bias.iter()), i, "gradient")?;
    }
    state.velocity.scale(state.momentum);
    state.velocity.add_scaled(1.0, gradient)?;
    model.add_scaled(-state.learning_rate, &state.velocity)?;
    for (i, layer) in model.layers.iter().enumerate() {
        finite_or_err(layer.weights.iter().chain(layer.bias.iter()), i, "updated parameters")?;
    }
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand_chacha::ChaCha8Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_model_gives_uniform_softmax() {
        let model = ModelParams::zeros(mlp_spec(3, &[], 4)).unwrap();
        let batch = array![[0.5, -1.0, 2.0], [0.0, 0.0, 0.0]];
        let probs = forward(&model, &batch).unwrap();
        for row in probs.rows() {
            for &p in row {
                assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn single_class_degenerate_output() {
        let spec = vec![LayerSpec {
            inputs: 1,
            outputs: 1,
            activation: Activation::Identity,
        }];
        let layers = vec![Layer {
            weights: array![[1.0]],
            bias: array![0.0],
        }];
        let model = ModelParams::from_layers(spec, layers).unwrap();
        let probs = forward(&model, &array![[0.0]]).unwrap();
        assert_eq!(probs[[0, 0]], 1.0);
    }

    #[test]
    fn forward_matches_hand_computed_two_layer_pass() {
        // 2 -> 2 (relu) -> 2 (linear), fixed small weights, fixed input.
        let spec = vec![
            LayerSpec {
                inputs: 2,
                outputs: 2,
                activation: Activation::Relu,
            },
            LayerSpec {
                inputs: 2,
                outputs: 2,
                activation: Activation::Identity,
            },
        ];
        let layers = vec![
            Layer {
                weights: array![[0.1, -0.2], [0.3, 0.4]],
                bias: array![0.05, -0.05],
            },
            Layer {
                weights: array![[0.2, -0.1], [-0.3, 0.5]],
                bias: array![0.0, 0.1],
            },
        ];
        let model = ModelParams::from_layers(spec, layers).unwrap();
        let x = [0.5, -1.0];

        // Scalar-by-scalar recomputation of the same weights.
        let z1 = [
            0.1 * x[0] + -0.2 * x[1] + 0.05,
            0.3 * x[0] + 0.4 * x[1] + -0.05,
        ];
        let a1 = [z1[0].max(0.0), z1[1].max(0.0)];
        let z2 = [
            0.2 * a1[0] + -0.1 * a1[1],
            -0.3 * a1[0] + 0.5 * a1[1] + 0.1,
        ];
        let m = z2[0].max(z2[1]);
        let e = [(z2[0] - m).exp(), (z2[1] - m).exp()];
        let expected = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];

        let probs = forward(&model, &array![[x[0], x[1]]]).unwrap();
        assert_abs_diff_eq!(probs[[0, 0]], expected[0], epsilon = 1e-15);
        assert_abs_diff_eq!(probs[[0, 1]], expected[1], epsilon = 1e-15);
    }

    #[test]
    fn forward_rows_normalize() {
        let mut r = rng(3);
        let model = ModelParams::init(mlp_spec(5, &[8, 6], 4), &mut r).unwrap();
        let batch = Array2::from_shape_fn((16, 5), |_| r.random_range(-2.0..2.0));
        let probs = forward(&model, &batch).unwrap();
        for row in probs.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let model = ModelParams::zeros(mlp_spec(3, &[], 2)).unwrap();
        let err = forward(&model, &array![[1.0, 2.0]]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn backward_zero_upstream_gradient_is_zero() {
        let mut r = rng(5);
        let model = ModelParams::init(mlp_spec(4, &[6], 3), &mut r).unwrap();
        let batch = Array2::from_shape_fn((5, 4), |_| r.random_range(-1.0..1.0));
        let grad = backward(&model, &batch, &Array2::zeros((5, 3))).unwrap();
        assert!(grad.iter_params().all(|v| v == 0.0));
    }

    #[test]
    fn backward_reports_layer_of_nonfinite_values() {
        let spec = mlp_spec(2, &[2], 2);
        let mut model = ModelParams::zeros(spec).unwrap();
        model.layers[1].weights[[0, 0]] = f64::NAN;
        let batch = array![[1.0, 1.0]];
        let err = backward(&model, &batch, &array![[1.0, 0.0]]).unwrap_err();
        match err {
            Error::Numerical { layer, .. } => assert_eq!(layer, 1),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn sgd_plain_step() {
        let spec = vec![LayerSpec {
            inputs: 1,
            outputs: 1,
            activation: Activation::Identity,
        }];
        let model = ModelParams::from_layers(
            spec.clone(),
            vec![Layer {
                weights: array![[1.0]],
                bias: array![0.0],
            }],
        )
        .unwrap();
        let mut grad = model.zeros_like();
        grad.layers[0].weights[[0, 0]] = 2.0;
        let state = OptimizerState::new(&model, 0.1, 0.0).unwrap();
        let (updated, _) = sgd_step(model, &grad, state).unwrap();
        assert_abs_diff_eq!(updated.layers()[0].weights[[0, 0]], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let mut r = rng(9);
        let model = ModelParams::init(mlp_spec(3, &[4], 2), &mut r).unwrap();
        let grad = model.zeros_like();
        let state = OptimizerState::new(&model, 0.5, 0.9).unwrap();
        let before = model.clone();
        let (after, _) = sgd_step(model, &grad, state).unwrap();
        assert_eq!(after, before);
    }

    #[test]
    fn sgd_momentum_two_step_recursion() {
        // Two steps with grad = 1.0, lr = 0.1, momentum = 0.9, from 0.0:
        // step 1: buffer = 1.0, param = -0.1
        // step 2: buffer = 1.9, param = -0.1 - 0.19 = -0.29
        let spec = vec![LayerSpec {
            inputs: 1,
            outputs: 1,
            activation: Activation::Identity,
        }];
        let model = ModelParams::from_layers(
            spec,
            vec![Layer {
                weights: array![[0.0]],
                bias: array![0.0],
            }],
        )
        .unwrap();
        let mut grad = model.zeros_like();
        grad.layers[0].weights[[0, 0]] = 1.0;
        let state = OptimizerState::new(&model, 0.1, 0.9).unwrap();
        let (model, state) = sgd_step(model, &grad, state).unwrap();
        let (model, _) = sgd_step(model, &grad, state).unwrap();
        assert_abs_diff_eq!(model.layers()[0].weights[[0, 0]], -0.29, epsilon = 1e-15);
    }

    #[test]
    fn sgd_rejects_nonfinite_gradient() {
        let model = ModelParams::zeros(mlp_spec(1, &[], 1)).unwrap();
        let mut grad = model.zeros_like();
        grad.layers[0].bias[0] = f64::INFINITY;
        let state = OptimizerState::new(&model, 0.1, 0.0).unwrap();
        assert!(matches!(
            sgd_step(model, &grad, state),
            Err(Error::Numerical { .. })
        ));
    }

    #[test]
    fn duplicated_rows_match_single_row_gradient_under_mean_reduction() {
        let mut r = rng(11);
        let model = ModelParams::init(mlp_spec(3, &[4], 2), &mut r).unwrap();
        let row = Array2::from_shape_fn((1, 3), |_| r.random_range(-1.0..1.0));
        let mut dup = Array2::zeros((2, 3));
        dup.row_mut(0).assign(&row.row(0));
        dup.row_mut(1).assign(&row.row(0));

        let labels_single = vec![1usize];
        let labels_dup = vec![1usize, 1];
        let p1 = forward(&model, &row).unwrap();
        let p2 = forward(&model, &dup).unwrap();
        let (_, g1) = crate::loss::cross_entropy(&p1, &labels_single).unwrap();
        let (_, g2) = crate::loss::cross_entropy(&p2, &labels_dup).unwrap();
        let grad1 = backward(&model, &row, &g1).unwrap();
        let grad2 = backward(&model, &dup, &g2).unwrap();
        assert!(grad1.max_abs_diff(&grad2).unwrap() < 1e-12);
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = ModelParams::init(mlp_spec(7, &[5], 3), &mut rng(42)).unwrap();
        let b = ModelParams::init(mlp_spec(7, &[5], 3), &mut rng(42)).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
    }

    #[test]
    fn flatten_assign_round_trip() {
        let mut r = rng(13);
        let model = ModelParams::init(mlp_spec(4, &[3], 2), &mut r).unwrap();
        let flat = model.flatten();
        assert_eq!(flat.len(), model.param_count());
        let mut copy = model.zeros_like();
        copy.assign_flat(&flat).unwrap();
        assert_eq!(copy, model);
    }
}
