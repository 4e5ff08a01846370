//! Differentiable-computation backbone: tensors, a reverse-mode tape, dense
//! layers and a finite-difference gradient checker.

mod gradcheck;
mod tape;
mod tensor;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport, ParamStore};
pub use tape::{log_softmax_rows, pairwise_sq_dist, softmax_rows, Gradients, Graph, Var};
pub use tensor::Tensor2;

/// A named trainable tensor and its gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub id: String,
    pub value: Tensor2,
    pub grad: Tensor2,
}

impl ParamTensor {
    pub fn new(id: impl Into<String>, value: Tensor2) -> Self {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        Self {
            id: id.into(),
            value,
            grad,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Fully connected layer `activation(x W + b)` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: ParamTensor,
    pub bias: ParamTensor,
    pub activation: Activation,
}

impl DenseLayer {
    /// Uniform Glorot initialization, zero bias.
    pub fn new<R: Rng + ?Sized>(
        id: &str,
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        let w = Tensor2::from_vec(input, output, data).expect("weight shape");
        Self {
            weights: ParamTensor::new(format!("{id}.weight"), w),
            bias: ParamTensor::new(format!("{id}.bias"), Tensor2::zeros(1, output)),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.value.cols()
    }

    pub fn params(&self) -> [&ParamTensor; 2] {
        [&self.weights, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut ParamTensor; 2] {
        [&mut self.weights, &mut self.bias]
    }

    fn check_input(&self, shape: (usize, usize)) -> Result<()> {
        if shape.1 != self.input_dim() {
            return Err(Error::Dimension {
                context: "dense layer input",
                left: shape,
                right: self.weights.shape(),
            });
        }
        Ok(())
    }

    /// Records the layer on a graph.
    pub fn forward_on(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let w = g.param(&self.weights);
        let b = g.param(&self.bias);
        let xw = g.matmul(x, w)?;
        let pre = g.add_bias(xw, b)?;
        Ok(match self.activation {
            Activation::None => pre,
            Activation::Relu => g.relu(pre),
            Activation::Tanh => g.tanh(pre),
        })
    }
}

/// Plain forward pass without gradient bookkeeping.
pub fn forward_dense(layer: &DenseLayer, x: &Tensor2) -> Result<Tensor2> {
    layer.check_input(x.shape())?;
    let mut out = x.matmul(&layer.weights.value)?;
    let bias = layer.bias.value.data();
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
            *o = layer.activation.apply(*o + b);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(activation: Activation) -> DenseLayer {
        DenseLayer {
            weights: ParamTensor::new("w", Tensor2::identity(2)),
            bias: ParamTensor::new("b", Tensor2::zeros(1, 2)),
            activation,
        }
    }

    #[test]
    fn identity_affine() {
        let x = Tensor2::from_rows(&[[3.0, 4.0]]).unwrap();
        let y = forward_dense(&identity_layer(Activation::None), &x).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn identity_relu() {
        let x = Tensor2::from_rows(&[[-1.0, 2.0]]).unwrap();
        let y = forward_dense(&identity_layer(Activation::Relu), &x).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn random_layer_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut layer = DenseLayer::new("l", 3, 4, Activation::None, &mut rng);
        for b in layer.bias.value.data_mut() {
            *b = rng.random_range(-1.0..1.0);
        }
        let x = Tensor2::from_rows(&[[0.3, -1.2, 2.5]]).unwrap();
        let y = forward_dense(&layer, &x).unwrap();
        for j in 0..4 {
            let mut acc = layer.bias.value[(0, j)];
            for i in 0..3 {
                acc += x[(0, i)] * layer.weights.value[(i, j)];
            }
            assert!((y[(0, j)] - acc).abs() < 1e-15);
        }
        // the taped path agrees with the plain one
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = layer.forward_on(&mut g, xv).unwrap();
        assert_eq!(g.value(yv), &y);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let x = Tensor2::zeros(1, 3);
        let err = forward_dense(&identity_layer(Activation::None), &x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 3)") && msg.contains("(2, 2)"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&Tensor2::zeros(1, 3));
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..8),
            shift in -100.0f64..100.0,
        ) {
            let x = Tensor2::from_rows(&[row.clone()]).unwrap();
            let shifted = x.map(|v| v + shift);
            let p = softmax_rows(&x);
            let q = softmax_rows(&shifted);
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
            prop_assert!(p.max_abs_diff(&q) < 1e-12);
        }

        #[test]
        fn affine_layer_is_linear(
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            y in proptest::collection::vec(-5.0f64..5.0, 3),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut layer = DenseLayer::new("l", 3, 2, Activation::None, &mut rng);
            for v in layer.bias.value.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let xt = Tensor2::from_rows(&[x.clone()]).unwrap();
            let yt = Tensor2::from_rows(&[y.clone()]).unwrap();
            let combo = xt.zip_map(&yt, |p, q| a * p + b * q);
            let bias = layer.bias.value.clone();
            let lhs = forward_dense(&layer, &combo).unwrap().zip_map(&bias, |p, q| p - q);
            let fx = xt.matmul(&layer.weights.value).unwrap();
            let fy = yt.matmul(&layer.weights.value).unwrap();
            let rhs = fx.zip_map(&fy, |p, q| a * p + b * q);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }
    }
}
