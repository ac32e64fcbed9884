use super::LayerParams;
use crate::error::{Error, Result};

/// SGD with classical momentum: `v <- momentum * v - lr * g; w <- w + v`.
///
/// Every parameter must carry a gradient. Gradients are zeroed afterwards.
pub fn sgd_step(params: &mut [&mut LayerParams], lr: f64, momentum: f64) -> Result<()> {
    if params
        .iter()
        .any(|p| p.weight.grad().is_none() || p.bias.grad().is_none())
    {
        return Err(Error::MissingGrad { op: "sgd_step" });
    }
    for p in params.iter_mut() {
        let (vw, vb) = p
            .velocity
            .get_or_insert_with(|| (vec![0.0; p.weight.len()], vec![0.0; p.bias.len()]));
        update(p.weight.data_mut_and_grad(), vw, lr, momentum);
        update(p.bias.data_mut_and_grad(), vb, lr, momentum);
        p.zero_grad();
    }
    Ok(())
}

fn update((w, g): (&mut [f64], &[f64]), v: &mut [f64], lr: f64, momentum: f64) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v - lr * g;
        *w += *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{LayerKind, Tensor};

    fn scalar_layer(w: f64) -> LayerParams {
        LayerParams::new(
            LayerKind::Linear,
            Tensor::new(vec![1, 1], vec![w]).unwrap(),
            Tensor::zeros(&[1]),
        )
        .unwrap()
    }

    fn set_grad(p: &mut LayerParams, g: f64) {
        p.weight.grad_mut()[0] = g;
        p.bias.grad_mut()[0] = 0.0;
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let mut p = scalar_layer(1.3);
        set_grad(&mut p, 42.0);
        sgd_step(&mut [&mut p], 0.0, 0.9).unwrap();
        assert_eq!(p.weight.data()[0], 1.3);
    }

    #[test]
    fn plain_step() {
        let mut p = scalar_layer(1.0);
        set_grad(&mut p, 2.0);
        sgd_step(&mut [&mut p], 0.1, 0.0).unwrap();
        assert!((p.weight.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.weight.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = scalar_layer(1.0);
        set_grad(&mut p, 1.0);
        sgd_step(&mut [&mut p], 0.1, 0.9).unwrap();
        let after_one = p.weight.data()[0];
        set_grad(&mut p, 1.0);
        sgd_step(&mut [&mut p], 0.1, 0.9).unwrap();
        let after_two = p.weight.data()[0];
        assert!((1.0 - after_one - 0.1).abs() < 1e-12);
        assert!((after_one - after_two - 0.19).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = scalar_layer(1.0);
        assert!(matches!(
            sgd_step(&mut [&mut p], 0.1, 0.0),
            Err(Error::MissingGrad { .. })
        ));
    }
}
