//! Fully-connected layers and feed-forward stacks with manual backpropagation.
//!
//! Batches are row-major: an input of shape `rows × in` maps to `rows × out`
//! through `φ(x · Wᵀ + b)` per layer, with `W` stored as `out × in`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!(
                "unknown activation `{other}` (relu, identity)"
            ))),
        }
    }
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::shape(
                "dense layer bias",
                weights.nrows(),
                bias.len(),
            ));
        }
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::Config("dense layer sizes must be >= 1".into()));
        }
        Ok(Self {
            weights: weights.as_standard_layout().into_owned(),
            bias,
            activation,
        })
    }

    /// Scaled-uniform (Glorot) weights in `±√(6/(fan_in+fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((output, input), || {
            rng.random_range(-limit..=limit)
        });
        Self {
            weights,
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn input_size(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_size(&self) -> usize {
        self.weights.nrows()
    }

    fn pre_activation(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights.t());
        z += &self.bias;
        z
    }
}

/// Ordered stack of dense layers; serves as encoder, decoder or mapper.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNetwork {
    layers: Vec<DenseLayer>,
}

/// Per-layer values recorded during a forward pass for use by [`DenseNetwork::backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }

    /// Smallest `|z|` over all ReLU pre-activations, i.e. the distance to the nearest kink.
    pub fn min_kink_distance(&self, net: &DenseNetwork) -> f64 {
        net.layers
            .iter()
            .zip(&self.pre_activations)
            .filter(|(layer, _)| layer.activation == Activation::Relu)
            .flat_map(|(_, z)| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients with the same layout as a [`DenseNetwork`]'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetworkGrads {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Adds the gradient of `l2_weight · Σ‖W‖²_F` (weights only).
    pub fn add_l2(&mut self, net: &DenseNetwork, l2_weight: f64) {
        if l2_weight == 0.0 {
            return;
        }
        for (g, layer) in self.layers.iter_mut().zip(&net.layers) {
            g.weights.scaled_add(2.0 * l2_weight, &layer.weights);
        }
    }

    pub fn accumulate(&mut self, other: &NetworkGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    /// Flat tensors in the order `layer0.weights, layer0.bias, layer1.weights, ...`.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weights.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

impl DenseNetwork {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_size() != pair[1].input_size() {
                return Err(Error::shape(
                    format!("layer {} input", i + 1),
                    pair[0].output_size(),
                    pair[1].input_size(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Builds a network through `sizes = [in, h1, ..., out]`, hidden layers
    /// using `hidden` activation and the last layer using `output`.
    pub fn glorot<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!(
                "network needs at least input and output sizes, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Config(format!("layer sizes must be >= 1, got {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { output } else { hidden };
                DenseLayer::glorot(w[0], w[1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].output_size()
    }

    /// Layer widths `[in, h1, ..., out]`.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_size())
            .chain(self.layers.iter().map(DenseLayer::output_size))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// `Σ‖W‖²_F` over all layers.
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_size() {
            return Err(Error::shape(
                "layer 0 input",
                format!("{} columns", self.input_size()),
                format!("{} columns", x.ncols()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut act = self.layers[0].pre_activation(x);
        act.mapv_inplace(|z| self.layers[0].activation.apply(z));
        for layer in &self.layers[1..] {
            let mut z = layer.pre_activation(act.view());
            z.mapv_inplace(|v| layer.activation.apply(v));
            act = z;
        }
        Ok(act)
    }

    pub fn forward_trace(&self, x: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        for layer in &self.layers {
            let z = layer.pre_activation(current.view());
            let next = z.mapv(|v| layer.activation.apply(v));
            inputs.push(current);
            pre_activations.push(z);
            current = next;
        }
        Ok(ForwardTrace {
            inputs,
            pre_activations,
            output: current,
        })
    }

    /// Backpropagates `∂loss/∂output` through the recorded pass.
    ///
    /// Returns the parameter gradients and `∂loss/∂input`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_output: Array2<f64>,
    ) -> Result<(NetworkGrads, Array2<f64>)> {
        if grad_output.dim() != trace.output.dim() {
            return Err(Error::shape(
                "output gradient",
                format!("{:?}", trace.output.dim()),
                format!("{:?}", grad_output.dim()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_output;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre_activations[i];
            if layer.activation != Activation::Identity {
                ndarray::Zip::from(&mut delta)
                    .and(z)
                    .for_each(|d, &zv| *d *= layer.activation.derivative(zv));
            }
            // the product can come back column-major; slices need row-major
            let weights = delta.t().dot(&trace.inputs[i]).as_standard_layout().into_owned();
            let bias = delta.sum_axis(Axis(0));
            let next = delta.dot(&layer.weights);
            grads.push(LayerGrads { weights, bias });
            delta = next;
        }
        grads.reverse();
        Ok((NetworkGrads { layers: grads }, delta))
    }

    /// Mutable flat tensors in the same order as [`NetworkGrads::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Names matching [`DenseNetwork::param_slices_mut`], prefixed by `prefix`.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| {
                [
                    format!("{prefix}.layer{i}.weights"),
                    format!("{prefix}.layer{i}.bias"),
                ]
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(
                "flat parameter vector",
                self.param_count(),
                values.len(),
            ));
        }
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            let n = slice.len();
            slice.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}
