use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{
    combine_backward, conv2d, conv2d_backward, elementwise_combine, linear, linear_backward, maxpool2d_with_indices,
    maxpool2d_backward, relu, relu_backward, sigmoid, sigmoid_backward, CombineMode,
};
use super::{LayerKind, LayerParams, Tensor};
use crate::error::{Error, Result};

/// `|analytic - numeric| / max(1, |analytic|)`, maximised over all elements.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares an analytic gradient against central differences.
///
/// `value` maps the inputs to a scalar loss; `gradient` returns the analytic
/// gradient of that loss with respect to every input, in order. Every element
/// of every input is perturbed by `±eps`.
pub fn grad_check<V, G>(mut value: V, mut gradient: G, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    V: FnMut(&[Tensor]) -> Result<Tensor>,
    G: FnMut(&[Tensor]) -> Result<Vec<Tensor>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let base = value(inputs)?;
    if base.len() != 1 {
        return Err(Error::invalid(format!(
            "grad_check needs a scalar loss, got shape {:?}",
            base.shape()
        )));
    }
    let analytic = gradient(inputs)?;
    if analytic.len() != inputs.len() {
        return Err(Error::invalid(format!(
            "gradient returned {} tensors for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[i].shape() {
            return Err(Error::Shape {
                op: "grad_check",
                left: grad.shape().to_vec(),
                right: inputs[i].shape().to_vec(),
            });
        }
        let mut numeric = vec![0.0; grad.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = value(&work)?.item()?;
            work[i].data_mut()[j] = orig - eps;
            let minus = value(&work)?.item()?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        worst = worst.max(max_relative_error(grad.data(), &numeric));
    }
    Ok(worst)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite values")
}

/// Values at least 0.05 away from zero, so `±eps` never crosses the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite values")
}

/// Distinct values on a 0.01 grid, so no pooling window has a near-tie.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).expect("finite values")
}

/// `sum(y * r)` for a fixed random `r`, whose gradient with respect to `y` is `r`.
fn probe(y: &Tensor, r: &Tensor) -> Result<Tensor> {
    if y.shape() != r.shape() {
        return Err(Error::Shape {
            op: "probe",
            left: y.shape().to_vec(),
            right: r.shape().to_vec(),
        });
    }
    Ok(Tensor::scalar(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()))
}

fn layer(kind: LayerKind, w: &Tensor, b: &Tensor) -> Result<LayerParams> {
    LayerParams::new(kind, w.clone(), b.clone())
}

/// Finite-difference checks of every tensor op with shapes, strides and
/// paddings drawn from `seed`. Returns `(op, max relative error)` per op.
pub fn op_grad_suite(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (n, c, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2 + 1);
    let hw = rng.random_range(k.max(3)..=6);
    let x = random(&mut rng, &[n, c, hw, hw]);
    let w = random(&mut rng, &[co, c, k, k]);
    let b = random(&mut rng, &[co]);
    let oh = (hw + 2 * pad - k) / stride + 1;
    let r = random(&mut rng, &[n, co, oh, oh]);
    let err = grad_check(
        |t| probe(&conv2d(&t[0], &layer(LayerKind::Conv2d, &t[1], &t[2])?, stride, pad)?, &r),
        |t| {
            let mut p = layer(LayerKind::Conv2d, &t[1], &t[2])?;
            let gx = conv2d_backward(&t[0], &mut p, &r, stride, pad)?;
            let gw = Tensor::new(t[1].shape().to_vec(), p.weight.grad_mut().to_vec())?;
            let gb = Tensor::new(t[2].shape().to_vec(), p.bias.grad_mut().to_vec())?;
            Ok(vec![gx, gw, gb])
        },
        &[x, w, b],
        eps,
    )?;
    out.push(("conv2d", err));

    let (batch, fin, fout) = (rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=4));
    let x = random(&mut rng, &[batch, fin]);
    let w = random(&mut rng, &[fout, fin]);
    let b = random(&mut rng, &[fout]);
    let r = random(&mut rng, &[batch, fout]);
    let err = grad_check(
        |t| probe(&linear(&t[0], &layer(LayerKind::Linear, &t[1], &t[2])?)?, &r),
        |t| {
            let mut p = layer(LayerKind::Linear, &t[1], &t[2])?;
            let gx = linear_backward(&t[0], &mut p, &r)?;
            let gw = Tensor::new(t[1].shape().to_vec(), p.weight.grad_mut().to_vec())?;
            let gb = Tensor::new(t[2].shape().to_vec(), p.bias.grad_mut().to_vec())?;
            Ok(vec![gx, gw, gb])
        },
        &[x, w, b],
        eps,
    )?;
    out.push(("linear", err));

    let shape = [1, 2, 4, 4];
    let x = away_from_zero(&mut rng, &shape);
    let r = random(&mut rng, &shape);
    let err = grad_check(|t| probe(&relu(&t[0]), &r), |t| Ok(vec![relu_backward(&t[0], &r)?]), &[x], eps)?;
    out.push(("relu", err));

    let (pk, ps) = [(2, 2), (3, 1), (2, 1)][rng.random_range(0..3)];
    let x = distinct(&mut rng, &[1, 2, 6, 6]);
    let po = (6 - pk) / ps + 1;
    let r = random(&mut rng, &[1, 2, po, po]);
    let err = grad_check(
        |t| probe(&maxpool2d_with_indices(&t[0], pk, ps)?.0, &r),
        |t| {
            let (_, idx) = maxpool2d_with_indices(&t[0], pk, ps)?;
            Ok(vec![maxpool2d_backward(t[0].shape(), &idx, &r)?])
        },
        &[x],
        eps,
    )?;
    out.push(("maxpool2d", err));

    let mut x = random(&mut rng, &shape);
    x.data_mut().iter_mut().for_each(|v| *v *= 4.0);
    let r = random(&mut rng, &shape);
    let err = grad_check(
        |t| probe(&sigmoid(&t[0]), &r),
        |t| Ok(vec![sigmoid_backward(&sigmoid(&t[0]), &r)?]),
        &[x],
        eps,
    )?;
    out.push(("sigmoid", err));

    for (name, mode) in [("combine_sum", CombineMode::Sum), ("combine_mul", CombineMode::Mul)] {
        let a = random(&mut rng, &shape);
        let b = random(&mut rng, &shape);
        let r = random(&mut rng, &shape);
        let err = grad_check(
            |t| probe(&elementwise_combine(&t[0], &t[1], mode)?, &r),
            |t| {
                let (ga, gb) = combine_backward(&t[0], &t[1], mode, &r)?;
                Ok(vec![ga, gb])
            },
            &[a, b],
            eps,
        )?;
        out.push((name, err));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_for_several_seeds() {
        for seed in 0..5 {
            let r = op_grad_suite(seed, 1e-6).unwrap();
            assert_eq!(r.len(), 7);
            for (op, e) in r {
                assert!(e < 1e-6, "seed {seed} {op}: {e}");
            }
        }
    }

    #[test]
    fn exact_gradient_of_quadratic() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let err = grad_check(
            |t| Ok(Tensor::scalar(t[0].data().iter().map(|v| v * v).sum())),
            |t| Ok(vec![Tensor::new(vec![3], t[0].data().iter().map(|v| 2.0 * v).collect())?]),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |t| Ok(Tensor::scalar(t[0].data().iter().sum())),
            |_| Ok(vec![Tensor::new(vec![2], vec![1.0, 0.0])?]),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!((err - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::zeros(&[2]);
        let r = grad_check(|t| Ok(t[0].clone()), |t| Ok(vec![t[0].clone()]), &[x], 1e-5);
        assert!(r.is_err());
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let x = Tensor::zeros(&[1]);
        let r = grad_check(|t| Ok(t[0].clone()), |t| Ok(vec![t[0].clone()]), &[x], 1e-2);
        assert!(r.is_err());
    }
}
