use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, t: Tensor) -> Tensor {
        match self {
            Activation::Tanh => t.map(f64::tanh),
            Activation::Identity => t,
        }
    }
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    pub activations: Vec<Activation>,
}

/// Tape handles for the parameters of one [`MlpParams`].
#[derive(Clone, Debug)]
pub struct MlpVars<'t> {
    pub layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> MlpVars<'t> {
    /// Handles in the same order as [`MlpParams::tensors`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases, tanh on hidden layers and a
    /// linear output layer. `sizes` lists every layer width including input
    /// and output.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::contract(format!("invalid layer sizes {sizes:?}")));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        let mut activations = Vec::with_capacity(sizes.len() - 1);
        for (i, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            layers.push(Linear {
                weight: Tensor::matrix(fan_in, fan_out, w)?,
                bias: Tensor::zeros(&[fan_out]),
            });
            activations.push(if i + 2 == sizes.len() { Activation::Identity } else { Activation::Tanh });
        }
        Self::from_layers(layers, activations)
    }

    pub fn from_layers(layers: Vec<Linear>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(Error::contract("need one activation per layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.shape() != [l.out_dim()] {
                return Err(Error::shape("MlpParams", format!("layer {i} weight/bias shapes disagree")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "MlpParams",
                    format!("layer {i} outputs {} but layer {} takes {}", pair[0].out_dim(), i + 1, pair[1].in_dim()),
                ));
            }
        }
        Ok(Self { layers, activations })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer widths including input and output.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.in_dim()).chain(self.layers.iter().map(Linear::out_dim)).collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.in_dim() || x.shape().len() > 2 {
            return Err(Error::shape(
                "mlp_forward",
                format!("input {:?} but first layer takes {}", x.shape(), self.in_dim()),
            ));
        }
        Ok(())
    }

    /// Plain forward pass. A vector input yields a vector output.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let vector_in = x.shape().len() == 1;
        let mut h = x.as_matrix();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            h = act.apply(h.matmul(&layer.weight)?.add_row_vector(&layer.bias)?);
        }
        if vector_in {
            h = Tensor::vector(h.into_data());
        }
        Ok(h)
    }

    pub fn register<'t>(&self, tape: &'t Tape) -> MlpVars<'t> {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    /// Forward pass recorded on `x`'s tape using the registered handles `vars`.
    /// `x` must be a matrix.
    pub fn forward_tape<'t>(&self, vars: &MlpVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
        {
            let v = x.value();
            self.check_input(&v)?;
            if v.shape().len() != 2 {
                return Err(Error::shape("mlp_forward", "tape input must be a matrix"));
            }
        }
        let mut h = x;
        for (&(w, b), act) in vars.layers.iter().zip(&self.activations) {
            h = h.matmul(w)?.add_row(b)?;
            if *act == Activation::Tanh {
                h = h.tanh();
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(w: f64, b: f64, act: Activation) -> MlpParams {
        MlpParams::from_layers(
            vec![Linear { weight: Tensor::matrix(1, 1, vec![w]).unwrap(), bias: Tensor::vector(vec![b]) }],
            vec![act],
        )
        .unwrap()
    }

    #[test]
    fn hand_arithmetic() {
        let net = single(2.0, 1.0, Activation::Identity);
        assert_eq!(net.forward(&Tensor::vector(vec![3.0])).unwrap().data(), &[7.0]);
    }

    #[test]
    fn zero_net_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = MlpParams::init(&[4, 8, 3], &mut rng).unwrap();
        for t in net.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let y = net.forward(&Tensor::vector(vec![1.0, -2.0, 3.0, 0.5])).unwrap();
        assert_eq!(y.data(), &[0.0; 3]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = MlpParams::from_layers(
            vec![Linear { weight: Tensor::identity(3), bias: Tensor::zeros(&[3]) }],
            vec![Activation::Identity],
        )
        .unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, -6.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let net = single(1.0, 0.0, Activation::Tanh);
        assert!(matches!(net.forward(&Tensor::vector(vec![1.0, 2.0])), Err(Error::Shape { .. })));
        let bad = MlpParams::from_layers(
            vec![
                Linear { weight: Tensor::zeros(&[2, 3]), bias: Tensor::zeros(&[3]) },
                Linear { weight: Tensor::zeros(&[4, 1]), bias: Tensor::zeros(&[1]) },
            ],
            vec![Activation::Tanh, Activation::Identity],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn init_respects_glorot_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = MlpParams::init(&[16, 64, 10], &mut rng).unwrap();
        let limit = (6.0f64 / 80.0).sqrt();
        assert!(net.layers[0].weight.data().iter().all(|w| w.abs() <= limit));
        assert_eq!(net.sizes(), vec![16, 64, 10]);
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpParams::init(&[5, 7, 7, 2], &mut rng).unwrap();
        let x = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let tape = Tape::new();
        let vars = net.register(&tape);
        let y = net.forward_tape(&vars, tape.leaf(x.clone())).unwrap();
        assert_eq!(*y.value(), net.forward(&x).unwrap());
    }
}
