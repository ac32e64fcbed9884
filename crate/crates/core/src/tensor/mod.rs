//! Dense f64 tensors and the small set of differentiable layers the detector
//! is built from.
//!
//! There is no general autodiff graph. Every op has a forward function and a
//! matching backward function; sequential stacks record their steps on a
//! [`Tape`] and replay it in reverse.

mod gradcheck;
mod ops;
mod optim;
mod tape;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, max_relative_error, op_grad_suite};
pub use ops::{
    combine_backward, conv2d, conv2d_backward, elementwise_combine, linear, linear_backward,
    maxpool2d, maxpool2d_backward, maxpool2d_with_indices, relu, relu_backward, sigmoid,
    sigmoid_backward, sigmoid_scalar, CombineMode,
};
pub use optim::sgd_step;
pub use tape::{Layer, Sequential, Tape};

/// Contiguous row-major tensor of up to four extents, N,C,H,W order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::invalid(format!(
                "tensor rank must be 1..=4, got shape {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    /// Builds a tensor from values produced by an op, rejecting NaN/Inf.
    pub(crate) fn from_op(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub(crate) fn data_mut_and_grad(&mut self) -> (&mut [f64], &[f64]) {
        let n = self.data.len();
        let g = self.grad.get_or_insert_with(|| vec![0.0; n]);
        (&mut self.data, g)
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::invalid(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![0; 4],
            }),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [n, d] => Ok([n, d]),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![0; 2],
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Linear,
}

/// Weights and bias of one conv or linear layer, plus its momentum buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
    #[serde(skip)]
    pub(crate) velocity: Option<(Vec<f64>, Vec<f64>)>,
}

impl LayerParams {
    pub fn new(kind: LayerKind, weight: Tensor, bias: Tensor) -> Result<Self> {
        let c_out = weight.shape()[0];
        let ok = match kind {
            LayerKind::Conv2d => weight.shape().len() == 4,
            LayerKind::Linear => weight.shape().len() == 2,
        };
        if !ok || bias.shape() != [c_out] {
            return Err(Error::Shape {
                op: "LayerParams::new",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            kind,
            weight,
            bias,
            velocity: None,
        })
    }

    /// Kaiming-uniform conv layer: U(-b, b) with b = gain * sqrt(6 / fan_in), zero bias.
    pub fn conv2d<R: Rng>(c_out: usize, c_in: usize, k: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = c_in * k * k;
        let weight = kaiming_uniform(&[c_out, c_in, k, k], fan_in, gain, rng);
        Self {
            kind: LayerKind::Conv2d,
            weight,
            bias: Tensor::zeros(&[c_out]),
            velocity: None,
        }
    }

    pub fn linear<R: Rng>(out: usize, inp: usize, gain: f64, rng: &mut R) -> Self {
        let weight = kaiming_uniform(&[out, inp], inp, gain, rng);
        Self {
            kind: LayerKind::Linear,
            weight,
            bias: Tensor::zeros(&[out]),
            velocity: None,
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }

    /// Strips gradients and momentum, leaving only the values.
    pub fn clear_state(&mut self) {
        self.weight.clear_grad();
        self.bias.clear_grad();
        self.velocity = None;
    }
}

fn kaiming_uniform<R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
        grad: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn new_rejects_nan() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn grad_has_tensor_shape() {
        let mut t = Tensor::zeros(&[2, 3]);
        assert!(t.grad().is_none());
        assert_eq!(t.grad_mut().len(), 6);
        t.grad_mut()[1] = 3.0;
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn layer_params_validate_bias_length() {
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        assert!(LayerParams::new(LayerKind::Conv2d, w.clone(), Tensor::zeros(&[3])).is_err());
        assert!(LayerParams::new(LayerKind::Conv2d, w, Tensor::zeros(&[4])).is_ok());
    }
}
