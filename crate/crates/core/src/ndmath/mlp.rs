use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::graph::{leaky_relu, Gradients};
use crate::ndmath::{Graph, Tensor, Var};
use crate::rng::rng_from_seed;

pub const MLP_FORMAT: &str = "ganuq-mlp";
pub const MLP_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => leaky_relu(x, 0.0),
            Activation::LeakyRelu { slope } => leaky_relu(x, slope),
            Activation::Linear => x,
        }
    }

    fn trace(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu { slope } => g.leaky_relu(x, slope),
            Activation::Linear => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `in x out`, so a batch maps as `x W + b`.
    pub weight: Tensor,
    /// `1 x out`.
    pub bias: Tensor,
    pub activation: Activation,
}

/// Fully connected network: a list of affine layers each followed by an
/// activation. Hidden layers are all layers but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    /// Seed the parameters were initialized from.
    pub seed: u64,
}

/// Graph handles for the parameters of one registered [`MlpParams`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    /// Gradients in the order of [`MlpParams::tensors_mut`].
    pub fn gradients(&self, grads: &Gradients, params: &MlpParams) -> Vec<Tensor> {
        self.layers
            .iter()
            .zip(&params.layers)
            .flat_map(|(&(w, b), layer)| {
                [grads.get_or_zeros(w, &layer.weight), grads.get_or_zeros(b, &layer.bias)]
            })
            .collect()
    }
}

impl MlpParams {
    /// He-style Gaussian initialization; biases start at zero.
    ///
    /// `dims` lists the widths from input to output, so `dims.len() - 1`
    /// layers are created.
    pub fn init(dims: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid MLP widths {dims:?}")));
        }
        let mut rng = rng_from_seed(seed);
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let activation = if i + 1 == n_layers { output } else { hidden };
                let gain = match activation {
                    Activation::Linear => 1.0,
                    _ => 2.0,
                };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                let w = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
                Layer {
                    weight: Tensor::from_vec(fan_in, fan_out, w).expect("sized"),
                    bias: Tensor::zeros(1, fan_out),
                    activation,
                }
            })
            .collect();
        Ok(Self { layers, seed })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    /// Widths of the hidden layers, i.e. the layers dropout masks attach to.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.weight.cols()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Inference-time forward pass.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_masked(input, None)
    }

    /// Forward pass with optional per-hidden-layer row masks. A mask entry
    /// multiplies the post-activation units of its layer; `None` leaves the
    /// layer untouched.
    pub fn forward_masked(&self, input: &Tensor, masks: Option<&[Option<Tensor>]>) -> Result<Tensor> {
        self.check_input(input)?;
        let n_hidden = self.layers.len() - 1;
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let act = layer.activation;
            x = x.matmul(&layer.weight)?.add_row(&layer.bias)?.map(|v| act.apply(v));
            if i < n_hidden {
                if let Some(mask) = masks.and_then(|m| m.get(i)).and_then(Option::as_ref) {
                    check_mask(mask, layer.weight.cols())?;
                    for r in 0..x.rows() {
                        for (v, m) in x.row_mut(r).iter_mut().zip(mask.as_slice()) {
                            *v *= m;
                        }
                    }
                }
            }
        }
        Ok(x)
    }

    /// Adds the parameters to `g`, as trainable leaves or as constants.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.param(l.weight.clone()), g.param(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                }
            })
            .collect();
        MlpVars { layers }
    }

    /// Traced forward pass on the graph. Produces the same values, bit for
    /// bit, as [`MlpParams::forward_masked`].
    pub fn trace(
        &self,
        g: &mut Graph,
        vars: &MlpVars,
        input: Var,
        masks: Option<&[Option<Tensor>]>,
    ) -> Result<Var> {
        self.check_input(g.value(input))?;
        let n_hidden = self.layers.len() - 1;
        let mut x = input;
        for (i, (layer, &(w, b))) in self.layers.iter().zip(&vars.layers).enumerate() {
            let z = g.matmul(x, w)?;
            let z = g.add_row(z, b)?;
            x = layer.activation.trace(g, z);
            if i < n_hidden {
                if let Some(mask) = masks.and_then(|m| m.get(i)).and_then(Option::as_ref) {
                    check_mask(mask, layer.weight.cols())?;
                    let rows = g.value(x).rows();
                    let m = g.constant(mask.clone());
                    let m = g.broadcast_rows(m, rows)?;
                    x = g.mul(x, m)?;
                }
            }
        }
        Ok(x)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::dim("mlp_forward", format!("{} input columns", self.input_dim()), input.cols()));
        }
        Ok(())
    }

    pub fn to_document(&self) -> MlpDocument {
        MlpDocument {
            format: MLP_FORMAT.to_string(),
            version: MLP_FORMAT_VERSION,
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDocument {
                    inputs: l.weight.rows(),
                    outputs: l.weight.cols(),
                    activation: l.activation,
                    weight: l.weight.as_slice().to_vec(),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: MlpDocument) -> Result<Self> {
        if doc.format != MLP_FORMAT || doc.version != MLP_FORMAT_VERSION {
            return Err(Error::Serialization(format!(
                "unsupported model document {} v{}",
                doc.format, doc.version
            )));
        }
        if doc.layers.is_empty() {
            return Err(Error::Serialization("model has no layers".into()));
        }
        let mut expected_in = doc.input_dim;
        let mut layers = Vec::with_capacity(doc.layers.len());
        for (i, l) in doc.layers.into_iter().enumerate() {
            if l.inputs != expected_in {
                return Err(Error::Serialization(format!(
                    "layer {i} expects {} inputs but previous width is {expected_in}",
                    l.inputs
                )));
            }
            let weight = Tensor::from_vec(l.inputs, l.outputs, l.weight)
                .map_err(|e| Error::Serialization(format!("layer {i} weight: {e}")))?;
            let bias = Tensor::from_vec(1, l.outputs, l.bias)
                .map_err(|e| Error::Serialization(format!("layer {i} bias: {e}")))?;
            expected_in = l.outputs;
            layers.push(Layer { weight, bias, activation: l.activation });
        }
        if expected_in != doc.output_dim {
            return Err(Error::Serialization(format!(
                "declared output_dim {} but last layer has {expected_in}",
                doc.output_dim
            )));
        }
        Ok(Self { layers, seed: doc.seed })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }
}

fn check_mask(mask: &Tensor, width: usize) -> Result<()> {
    if mask.shape() != [1, width] {
        return Err(Error::dim("dropout mask", format!("[1, {width}]"), format!("{:?}", mask.shape())));
    }
    Ok(())
}

/// Versioned JSON form of [`MlpParams`]. Weights are row-major `in x out`.
/// `serde_json` writes doubles in shortest round-trip form, so a
/// write/read cycle is bit exact.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpDocument {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    pub layers: Vec<LayerDocument>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDocument {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal};

    fn naive_forward(p: &MlpParams, input: &Tensor) -> Vec<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> = (0..input.rows()).map(|r| input.row(r).to_vec()).collect();
        for layer in &p.layers {
            let (n_in, n_out) = (layer.weight.rows(), layer.weight.cols());
            rows = rows
                .iter()
                .map(|x| {
                    (0..n_out)
                        .map(|j| {
                            let mut s = layer.bias.get(0, j);
                            for (i, xi) in x.iter().enumerate().take(n_in) {
                                s += xi * layer.weight.get(i, j);
                            }
                            layer.activation.apply(s)
                        })
                        .collect()
                })
                .collect();
        }
        rows
    }

    #[test]
    fn affine_identity_case() {
        let p = MlpParams {
            layers: vec![Layer {
                weight: Tensor::scalar(2.0),
                bias: Tensor::scalar(1.0),
                activation: Activation::Linear,
            }],
            seed: 0,
        };
        assert_eq!(p.forward(&Tensor::scalar(3.0)).unwrap().item(), 7.0);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut p = MlpParams::init(&[3, 4, 2], Activation::Relu, Activation::Linear, 1).unwrap();
        for t in p.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        let x = standard_normal(5, 3, &mut rng_from_seed(2));
        assert!(p.forward(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let p = MlpParams::init(&[3, 8, 5], Activation::Relu, Activation::Linear, 11).unwrap();
        let x = standard_normal(17, 3, &mut rng_from_seed(12));
        let fast = p.forward(&x).unwrap();
        let slow = naive_forward(&p, &x);
        for (r, row) in slow.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let f = fast.get(r, c);
                assert!((f - v).abs() <= 1e-12 * v.abs().max(1.0), "{f} vs {v}");
            }
        }
    }

    #[test]
    fn traced_forward_is_bitwise_equal() {
        let p = MlpParams::init(&[4, 6, 6, 2], Activation::LeakyRelu { slope: 0.05 }, Activation::Linear, 3)
            .unwrap();
        let x = standard_normal(9, 4, &mut rng_from_seed(4));
        let masks = vec![Some(Tensor::row_vector(vec![0.0, 2.0, 2.0, 0.0, 2.0, 2.0])), None];
        let plain = p.forward_masked(&x, Some(&masks)).unwrap();
        let mut g = Graph::new();
        let vars = p.register(&mut g, true);
        let xv = g.constant(x);
        let out = p.trace(&mut g, &vars, xv, Some(&masks)).unwrap();
        assert_eq!(g.value(out), &plain);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let p = MlpParams::init(&[3, 2], Activation::Relu, Activation::Linear, 0).unwrap();
        assert!(matches!(p.forward(&Tensor::zeros(2, 4)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let p = MlpParams::init(&[3, 7, 2], Activation::LeakyRelu { slope: 0.05 }, Activation::Linear, 99)
            .unwrap();
        let back = MlpParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        for (a, b) in back.tensors().iter().zip(p.tensors()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_documents_are_rejected() {
        let p = MlpParams::init(&[3, 2], Activation::Relu, Activation::Linear, 0).unwrap();
        let mut doc = p.to_document();
        doc.layers[0].weight.pop();
        assert!(MlpParams::from_document(doc).is_err());
        let mut doc = p.to_document();
        doc.version = 9;
        assert!(MlpParams::from_document(doc).is_err());
    }
}
