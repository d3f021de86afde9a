//! Stacked dense layers with ReLU between them and analytic backprop.
//!
//! A layer computes `z = x·W + b` with `W` stored `(in_dim × out_dim)`
//! row-major; hidden layers apply ReLU, the final layer applies a
//! configurable activation (identity by default, sigmoid optional).
//!
//! The forward pass returns a cache of per-layer activations that is
//! sufficient to reproduce exact gradients: ReLU's derivative is recovered
//! from the sign of the stored output (subgradient 0 at 0), sigmoid's from
//! `y·(1−y)`.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::seeded_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Identity => x,
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed in terms of the activation *output*.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    /// `(in_dim × out_dim)`, row-major.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// A stack of dense layers. Consecutive dimensions chain by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpStack {
    layers: Vec<Layer>,
}

/// Per-layer activations recorded by `forward`.
///
/// `acts[0]` is the input, `acts[l+1]` the post-activation output of layer
/// `l`; the last entry is the stack output.
pub struct MlpCache {
    acts: Vec<DenseMatrix>,
}

impl MlpCache {
    pub fn output(&self) -> &DenseMatrix {
        self.acts.last().expect("cache always holds the input")
    }

    /// Pre-activation values are not stored; for ReLU/identity/sigmoid the
    /// derivative is a function of the output, which is. This exposes the
    /// hidden activations for tests that probe kink proximity.
    pub fn activations(&self) -> &[DenseMatrix] {
        &self.acts
    }
}

/// Gradients for every parameter of a stack, in layer order.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_weight: DenseMatrix,
    pub d_bias: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &MlpStack) -> Self {
        MlpGrads {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrads {
                    d_weight: DenseMatrix::zeros(l.in_dim(), l.out_dim()),
                    d_bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.d_weight.add_assign(&b.d_weight);
            for (x, &y) in a.d_bias.iter_mut().zip(&b.d_bias) {
                *x += y;
            }
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for l in &mut self.layers {
            for x in l.d_weight.data_mut() {
                *x *= s;
            }
            for x in &mut l.d_bias {
                *x *= s;
            }
        }
    }
}

impl MlpStack {
    /// He-uniform weights (limit `sqrt(6/fan_in)`), zero biases. Each layer
    /// draws from its own stream derived from `seed` and the layer index.
    pub fn new(input_dim: usize, layer_dims: &[usize], final_activation: Activation, seed: u64) -> Self {
        assert!(!layer_dims.is_empty(), "at least one layer required");
        let mut layers = Vec::with_capacity(layer_dims.len());
        let mut in_dim = input_dim;
        for (idx, &out_dim) in layer_dims.iter().enumerate() {
            let mut rng = seeded_rng(seed, &format!("mlp/layer{idx}"));
            let limit = (6.0 / in_dim as f64).sqrt();
            let weight = DenseMatrix::from_fn(in_dim, out_dim, |_, _| rng.gen_range(-limit..limit));
            let activation = if idx + 1 == layer_dims.len() {
                final_activation
            } else {
                Activation::Relu
            };
            layers.push(Layer {
                weight,
                bias: vec![0.0; out_dim],
                activation,
            });
            in_dim = out_dim;
        }
        MlpStack { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        assert!(!layers.is_empty());
        for w in layers.windows(2) {
            assert_eq!(
                w[0].out_dim(),
                w[1].in_dim(),
                "layer dims do not chain: {} -> {}",
                w[0].out_dim(),
                w[1].in_dim()
            );
        }
        MlpStack { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, input: &DenseMatrix) -> Result<(DenseMatrix, MlpCache)> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input cols = {}", self.input_dim()),
                format!("{}x{}", input.rows(), input.cols()),
            ));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for layer in &self.layers {
            let mut z = acts.last().unwrap().matmul(&layer.weight);
            z.add_row_bias(&layer.bias);
            let a = z.map(|x| layer.activation.apply(x));
            acts.push(a);
        }
        let out = acts.last().unwrap().clone();
        Ok((out, MlpCache { acts }))
    }

    /// Exact gradients of a scalar loss given `upstream = dL/d output`.
    /// Returns parameter gradients and `dL/d input`.
    pub fn backward(&self, cache: &MlpCache, upstream: &DenseMatrix) -> Result<(MlpGrads, DenseMatrix)> {
        if cache.acts.len() != self.layers.len() + 1 {
            return Err(Error::shape(
                "mlp_backward",
                format!("cache of {} activations", self.layers.len() + 1),
                cache.acts.len(),
            ));
        }
        let out = cache.output();
        if (upstream.rows(), upstream.cols()) != (out.rows(), out.cols()) {
            return Err(Error::shape(
                "mlp_backward",
                format!("{}x{}", out.rows(), out.cols()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut up = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a_out = &cache.acts[l + 1];
            let a_in = &cache.acts[l];
            // delta = upstream ⊙ act'(output)
            let delta = up.zip_map(a_out, |g, y| g * layer.activation.grad_from_output(y));
            let d_weight = a_in.matmul_tn(&delta);
            let d_bias = delta.col_sums();
            up = delta.matmul_nt(&layer.weight);
            grads.push(LayerGrads { d_weight, d_bias });
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, up))
    }

    /// Flat views over parameters paired with gradients, in a fixed order
    /// (layer 0 weight, layer 0 bias, layer 1 weight, ...). Used by the
    /// optimizer and by the finite-difference sweep.
    pub fn visit_params_mut(
        &mut self,
        prefix: &str,
        mut f: impl FnMut(&str, &mut [f64]) -> Result<()>,
    ) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("{prefix}.layer{i}.weight"), layer.weight.data_mut())?;
            f(&format!("{prefix}.layer{i}.bias"), &mut layer.bias)?;
        }
        Ok(())
    }

    /// Applies one SGD step to every parameter of the stack.
    pub fn apply_sgd(&mut self, grads: &MlpGrads, opt: &mut crate::optim::Sgd, prefix: &str) -> Result<()> {
        assert_eq!(grads.layers.len(), self.layers.len());
        for (i, (layer, g)) in self.layers.iter_mut().zip(&grads.layers).enumerate() {
            opt.step(&format!("{prefix}.layer{i}.weight"), layer.weight.data_mut(), g.d_weight.data())?;
            opt.step(&format!("{prefix}.layer{i}.bias"), &mut layer.bias, &g.d_bias)?;
        }
        Ok(())
    }
}

/// Central-difference gradient verification over every parameter.
///
/// `loss_value` maps the stack output to a scalar and `loss_grad` supplies
/// its exact derivative; both must be pure. Returns the maximum of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(
    mlp: &MlpStack,
    input: &DenseMatrix,
    loss_value: &dyn Fn(&DenseMatrix) -> f64,
    loss_grad: &dyn Fn(&DenseMatrix) -> DenseMatrix,
) -> Result<f64> {
    const H: f64 = 1e-5;

    let (out, cache) = mlp.forward(input)?;
    let base = loss_value(&out);
    if !base.is_finite() {
        return Err(Error::Numeric(format!("grad_check: loss is {base}")));
    }
    let (grads, _) = mlp.backward(&cache, &loss_grad(&out))?;

    let mut probe = mlp.clone();
    let mut max_rel = 0.0_f64;
    for (l, g) in grads.layers.iter().enumerate() {
        let analytic: Vec<f64> = g
            .d_weight
            .data()
            .iter()
            .chain(&g.d_bias)
            .copied()
            .collect();
        let n_weights = g.d_weight.data().len();
        for (p, &a) in analytic.iter().enumerate() {
            let read = |m: &MlpStack| -> f64 {
                let layer = &m.layers[l];
                if p < n_weights {
                    layer.weight.data()[p]
                } else {
                    layer.bias[p - n_weights]
                }
            };
            let write = |m: &mut MlpStack, v: f64| {
                let layer = &mut m.layers[l];
                if p < n_weights {
                    layer.weight.data_mut()[p] = v;
                } else {
                    layer.bias[p - n_weights] = v;
                }
            };

            let orig = read(&probe);
            write(&mut probe, orig + H);
            let plus = loss_value(&probe.forward(input)?.0);
            write(&mut probe, orig - H);
            let minus = loss_value(&probe.forward(input)?.0);
            write(&mut probe, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric("grad_check: non-finite perturbed loss".into()));
            }

            let numeric = (plus - minus) / (2.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
