use serde::{Deserialize, Serialize};

use super::ops::{
    conv2d, conv2d_backward, maxpool2d_backward, maxpool2d_with_indices, relu, relu_backward,
};
use super::{LayerParams, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Layer {
    /// Index into the owning stack's parameter list.
    Conv { param: usize, stride: usize, pad: usize },
    Relu,
    MaxPool { k: usize, stride: usize },
}

/// A fixed chain of conv / relu / maxpool layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
    pub params: Vec<LayerParams>,
}

/// Inputs (and pooling winners) recorded by [`Sequential::forward`], replayed
/// in reverse by [`Sequential::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    entries: Vec<(Tensor, Option<Vec<usize>>)>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>, params: Vec<LayerParams>) -> Result<Self> {
        for l in &layers {
            if let Layer::Conv { param, .. } = l {
                if *param >= params.len() {
                    return Err(Error::invalid(format!(
                        "layer refers to parameter {param}, only {} present",
                        params.len()
                    )));
                }
            }
        }
        Ok(Self { layers, params })
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tape)> {
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, aux) = match *layer {
                Layer::Conv { param, stride, pad } => {
                    (conv2d(&x, &self.params[param], stride, pad)?, None)
                }
                Layer::Relu => (relu(&x), None),
                Layer::MaxPool { k, stride } => {
                    let (y, arg) = maxpool2d_with_indices(&x, k, stride)?;
                    (y, Some(arg))
                }
            };
            entries.push((x, aux));
            x = y;
        }
        Ok((x, Tape { entries }))
    }

    /// Forward pass without recording.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        self.forward(input).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients and returns the gradient at the input.
    pub fn backward(&mut self, tape: &Tape, grad_out: &Tensor) -> Result<Tensor> {
        if tape.entries.len() != self.layers.len() {
            return Err(Error::invalid("tape does not belong to this stack"));
        }
        let mut g = grad_out.clone();
        for (layer, (input, aux)) in self.layers.iter().zip(&tape.entries).rev() {
            g = match *layer {
                Layer::Conv { param, stride, pad } => {
                    conv2d_backward(input, &mut self.params[param], &g, stride, pad)?
                }
                Layer::Relu => relu_backward(input, &g)?,
                Layer::MaxPool { .. } => {
                    let arg = aux.as_ref().expect("maxpool entry records indices");
                    maxpool2d_backward(input.shape(), arg, &g)?
                }
            };
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack(rng: &mut ChaCha8Rng) -> Sequential {
        Sequential::new(
            vec![
                Layer::Conv { param: 0, stride: 1, pad: 1 },
                Layer::Relu,
                Layer::MaxPool { k: 2, stride: 2 },
                Layer::Conv { param: 1, stride: 1, pad: 1 },
            ],
            vec![
                LayerParams::conv2d(3, 1, 3, 1.0, rng),
                LayerParams::conv2d(2, 3, 3, 1.0, rng),
            ],
        )
        .unwrap()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = stack(&mut rng);
        let x = Tensor::new(
            vec![1, 1, 6, 6],
            (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let weights: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |y: &Tensor| -> f64 { y.data().iter().zip(&weights).map(|(a, b)| a * b).sum() };
        let err = grad_check(
            |t| Ok(Tensor::scalar(loss(&net.infer(&t[0])?))),
            |t| {
                let mut n2 = net.clone();
                let (y, tape) = n2.forward(&t[0])?;
                let g = Tensor::new(y.shape().to_vec(), weights.clone())?;
                Ok(vec![n2.backward(&tape, &g)?])
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dangling_param_index_rejected() {
        assert!(Sequential::new(vec![Layer::Conv { param: 0, stride: 1, pad: 0 }], vec![]).is_err());
    }
}
