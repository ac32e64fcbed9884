use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerParams, Tensor};
use crate::error::{Error, Result};

/// Range of output indices `o` for which `o * stride + k - pad` falls inside `0..in_len`.
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if in_len + pad <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

fn conv_dims(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    pad: usize,
) -> Result<([usize; 4], [usize; 4], usize, usize)> {
    if params.kind != LayerKind::Conv2d {
        return Err(Error::invalid("conv2d called with linear parameters"));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let [n, c, h, w] = input.dims4("conv2d")?;
    let wd = params.weight.dims4("conv2d")?;
    let [_, ci, kh, kw] = wd;
    if ci != c || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: params.weight.shape().to_vec(),
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(([n, c, h, w], wd, oh, ow))
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
pub fn conv2d(input: &Tensor, params: &LayerParams, stride: usize, pad: usize) -> Result<Tensor> {
    let ([n, c, h, w], [co, _, kh, kw], oh, ow) = conv_dims(input, params, stride, pad)?;
    let x = input.data();
    let wt = params.weight.data();
    let b = params.bias.data();
    let mut out = vec![0.0; n * co * oh * ow];
    for ni in 0..n {
        for o in 0..co {
            let plane = &mut out[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = b[o]);
            for ci in 0..c {
                let xin = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, oh);
                    for kx in 0..kw {
                        let wv = wt[((o * c + ci) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, w, ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let row = &xin[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_op("conv2d", vec![n, co, oh, ow], out)
}

/// Accumulates weight/bias gradients into `params` and returns the input gradient.
pub fn conv2d_backward(
    input: &Tensor,
    params: &mut LayerParams,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let ([n, c, h, w], [co, _, kh, kw], oh, ow) = conv_dims(input, params, stride, pad)?;
    if grad_out.shape() != [n, co, oh, ow] {
        return Err(Error::Shape {
            op: "conv2d_backward",
            left: grad_out.shape().to_vec(),
            right: vec![n, co, oh, ow],
        });
    }
    let x = input.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; params.weight.len()];
    let mut gb = vec![0.0; co];
    let wt = params.weight.data();
    for ni in 0..n {
        for o in 0..co {
            let gplane = &g[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow];
            gb[o] += gplane.iter().sum::<f64>();
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, oh);
                    for kx in 0..kw {
                        let widx = ((o * c + ci) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, w, ow);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let roff = base + iy * w;
                            for ox in ox_lo..ox_hi {
                                let ix = roff + ox * stride + kx - pad;
                                acc += grow[ox] * x[ix];
                                gx[ix] += grow[ox] * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    accumulate(params.weight.grad_mut(), &gw);
    accumulate(params.bias.grad_mut(), &gb);
    Tensor::from_op("conv2d_backward", input.shape().to_vec(), gx)
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: input.shape().to_vec(),
        data,
        grad: None,
    }
}

/// Subgradient at exactly zero is 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape("relu_backward", input, grad_out)?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_op("relu_backward", input.shape().to_vec(), data)
}

pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    maxpool2d_with_indices(input, k, stride).map(|(t, _)| t)
}

/// Max pooling that also returns, for each output cell, the flat input index
/// that won. Ties go to the first index in row-major window order.
pub fn maxpool2d_with_indices(
    input: &Tensor,
    k: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = input.dims4("maxpool2d")?;
    if k == 0 || stride == 0 {
        return Err(Error::invalid("maxpool2d window and stride must be >= 1"));
    }
    if k > h || k > w {
        return Err(Error::invalid(format!(
            "maxpool2d window {k} larger than input {h}x{w}"
        )));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_op("maxpool2d", vec![n, c, oh, ow], out)?, arg))
}

pub fn maxpool2d_backward(in_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape {
            op: "maxpool2d_backward",
            left: grad_out.shape().to_vec(),
            right: vec![argmax.len()],
        });
    }
    let mut gx = vec![0.0; in_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx[i] += g;
    }
    Tensor::from_op("maxpool2d_backward", in_shape.to_vec(), gx)
}

fn linear_dims(input: &Tensor, params: &LayerParams) -> Result<(usize, usize, usize)> {
    if params.kind != LayerKind::Linear {
        return Err(Error::invalid("linear called with conv parameters"));
    }
    let [n, d] = input.dims2("linear")?;
    let [m, dw] = params.weight.dims2("linear")?;
    if d != dw {
        return Err(Error::Shape {
            op: "linear",
            left: input.shape().to_vec(),
            right: params.weight.shape().to_vec(),
        });
    }
    Ok((n, d, m))
}

/// Affine map `x W^T + b` over a batch of row vectors.
pub fn linear(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (n, d, m) = linear_dims(input, params)?;
    let x = input.data();
    let wt = params.weight.data();
    let b = params.bias.data();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        for j in 0..m {
            let wrow = &wt[j * d..(j + 1) * d];
            out.push(b[j] + row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Tensor::from_op("linear", vec![n, m], out)
}

pub fn linear_backward(input: &Tensor, params: &mut LayerParams, grad_out: &Tensor) -> Result<Tensor> {
    let (n, d, m) = linear_dims(input, params)?;
    if grad_out.shape() != [n, m] {
        return Err(Error::Shape {
            op: "linear_backward",
            left: grad_out.shape().to_vec(),
            right: vec![n, m],
        });
    }
    let x = input.data();
    let g = grad_out.data();
    let wt = params.weight.data();
    let mut gx = vec![0.0; n * d];
    let mut gw = vec![0.0; m * d];
    let mut gb = vec![0.0; m];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let grow = &mut gx[i * d..(i + 1) * d];
        for j in 0..m {
            let gij = g[i * m + j];
            if gij == 0.0 {
                continue;
            }
            gb[j] += gij;
            let wrow = &wt[j * d..(j + 1) * d];
            let gwrow = &mut gw[j * d..(j + 1) * d];
            for k in 0..d {
                gwrow[k] += gij * row[k];
                grow[k] += gij * wrow[k];
            }
        }
    }
    accumulate(params.weight.grad_mut(), &gw);
    accumulate(params.bias.grad_mut(), &gb);
    Tensor::from_op("linear_backward", input.shape().to_vec(), gx)
}

/// Logistic function, branching on sign so neither branch exponentiates a
/// large positive number.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape().to_vec(),
        data: input.data().iter().map(|&x| sigmoid_scalar(x)).collect(),
        grad: None,
    }
}

/// Gradient through sigmoid given its forward output.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape("sigmoid_backward", output, grad_out)?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_op("sigmoid_backward", output.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    Sum,
    Mul,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn elementwise_combine(a: &Tensor, b: &Tensor, mode: CombineMode) -> Result<Tensor> {
    same_shape("elementwise_combine", a, b)?;
    let it = a.data().iter().zip(b.data());
    let data = match mode {
        CombineMode::Sum => it.map(|(x, y)| x + y).collect(),
        CombineMode::Mul => it.map(|(x, y)| x * y).collect(),
    };
    Tensor::from_op("elementwise_combine", a.shape().to_vec(), data)
}

/// Returns the gradients with respect to `a` and `b`.
pub fn combine_backward(
    a: &Tensor,
    b: &Tensor,
    mode: CombineMode,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    same_shape("combine_backward", a, b)?;
    same_shape("combine_backward", a, grad_out)?;
    match mode {
        CombineMode::Sum => Ok((grad_out.clone(), grad_out.clone())),
        CombineMode::Mul => {
            let g = grad_out.data();
            let ga = g.iter().zip(b.data()).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(a.data()).map(|(g, x)| g * x).collect();
            Ok((
                Tensor::from_op("combine_backward", a.shape().to_vec(), ga)?,
                Tensor::from_op("combine_backward", a.shape().to_vec(), gb)?,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn conv_params(weight: Tensor, bias: Vec<f64>) -> LayerParams {
        let n = bias.len();
        LayerParams::new(LayerKind::Conv2d, weight, t(&[n], &bias)).unwrap()
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let x = t(&[2, 1, 3, 5], &(0..30).map(|i| i as f64 * 0.37 - 4.0).collect::<Vec<_>>());
        let p = conv_params(t(&[1, 1, 1, 1], &[1.0]), vec![0.0]);
        let y = conv2d(&x, &p, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_kernel_on_constant_input() {
        let x = Tensor::full(&[1, 1, 4, 4], 2.0);
        let p = conv_params(Tensor::full(&[1, 1, 3, 3], 1.0), vec![0.0]);
        let y = conv2d(&x, &p, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 18.0));
    }

    #[test]
    fn conv_output_shape_with_stride_and_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LayerParams::conv2d(5, 3, 3, 1.0, &mut rng);
        let y = conv2d(&Tensor::zeros(&[1, 3, 8, 8]), &p, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 4, 4]);
    }

    #[test]
    fn conv_shape_error_names_both_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LayerParams::conv2d(5, 3, 3, 1.0, &mut rng);
        let err = conv2d(&Tensor::zeros(&[1, 2, 8, 8]), &p, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 8, 8]") && msg.contains("[5, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_padding_matches_explicit_zero_border() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = LayerParams::conv2d(2, 1, 3, 1.0, &mut rng);
        let vals: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let x = t(&[1, 1, 3, 3], &vals);
        let mut padded = vec![0.0; 25];
        for y in 0..3 {
            for xx in 0..3 {
                padded[(y + 1) * 5 + xx + 1] = vals[y * 3 + xx];
            }
        }
        let a = conv2d(&x, &p, 1, 1).unwrap();
        let b = conv2d(&t(&[1, 1, 5, 5], &padded), &p, 1, 0).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.5])).data(), &[0.0, 0.0, 2.5]);
        assert!(relu(&t(&[2], &[-3.0, -0.1])).data().iter().all(|&v| v == 0.0));
        assert_eq!(relu(&t(&[2], &[3.0, 0.1])).data(), &[3.0, 0.1]);
        let g = relu_backward(&t(&[2], &[0.0, 1.0]), &t(&[2], &[5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0]);
    }

    #[test]
    fn maxpool_examples() {
        let y = maxpool2d(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let c = maxpool2d(&Tensor::full(&[1, 2, 4, 4], 1.5), 2, 2).unwrap();
        assert_eq!(c.shape(), &[1, 2, 2, 2]);
        assert!(c.data().iter().all(|&v| v == 1.5));
        assert!(maxpool2d(&Tensor::zeros(&[1, 1, 2, 2]), 3, 1).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first_index() {
        let x = Tensor::full(&[1, 1, 2, 2], 7.0);
        let (_, arg) = maxpool2d_with_indices(&x, 2, 2).unwrap();
        assert_eq!(arg, vec![0]);
        let g = maxpool2d_backward(x.shape(), &arg, &t(&[1, 1, 1, 1], &[1.0])).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_examples() {
        let p = LayerParams::new(LayerKind::Linear, t(&[1, 2], &[1.0, 1.0]), t(&[1], &[0.5])).unwrap();
        assert_eq!(linear(&t(&[1, 2], &[2.0, 3.0]), &p).unwrap().data(), &[5.5]);

        let eye = LayerParams::new(
            LayerKind::Linear,
            t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            Tensor::zeros(&[3]),
        )
        .unwrap();
        let x = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.25, -9.0]);
        assert_eq!(linear(&x, &eye).unwrap(), x);

        let b = LayerParams::new(LayerKind::Linear, t(&[2, 3], &[1.0; 6]), t(&[2], &[0.3, -0.7])).unwrap();
        assert_eq!(linear(&Tensor::zeros(&[2, 3]), &b).unwrap().data(), &[0.3, -0.7, 0.3, -0.7]);
        assert!(linear(&Tensor::zeros(&[1, 4]), &b).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(50.0) - 1.0).abs() < 1e-15);
        for &x in &[0.3, 2.0, 17.0, 49.0] {
            assert!((sigmoid_scalar(-x) - (1.0 - sigmoid_scalar(x))).abs() < 1e-15);
        }
        assert!(sigmoid_scalar(-745.0).is_finite());
    }

    #[test]
    fn combine_examples() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let b = t(&[3], &[2.0, 0.5, 1.0]);
        assert_eq!(elementwise_combine(&a, &b, CombineMode::Mul).unwrap().data(), &[2.0, 1.0, 3.0]);
        let z = Tensor::zeros(&[3]);
        assert_eq!(elementwise_combine(&a, &z, CombineMode::Sum).unwrap(), a);
        assert!(elementwise_combine(&a, &z, CombineMode::Mul)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(elementwise_combine(&a, &Tensor::zeros(&[4]), CombineMode::Sum).is_err());
    }

    #[test]
    fn combine_overflow_is_an_error() {
        let a = Tensor::full(&[1], 1e300);
        assert!(matches!(
            elementwise_combine(&a, &a, CombineMode::Mul),
            Err(Error::NonFinite { .. })
        ));
    }
}
