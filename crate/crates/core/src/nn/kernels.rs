//! Forward and backward passes of the elementary kernels.
//!
//! Tensors with more than two axes are treated as a stack of rows over their
//! innermost axis. Backward functions accumulate parameter gradients into the
//! buffers they are handed and return the input gradient.

use super::tensor::gemm;
use super::Tensor;
use crate::error::{shape_err, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x·W + b` over the innermost axis of `x`.
pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, d_in) = (x.rows(), x.last_dim());
    if weight.shape().len() != 2 || weight.shape()[0] != d_in {
        return Err(shape_err(
            "linear",
            format!("weight [{d_in}, _]"),
            format!("{:?}", weight.shape()),
        ));
    }
    let d_out = weight.shape()[1];
    let mut out = vec![0.0; rows * d_out];
    if let Some(b) = bias {
        if b.len() != d_out {
            return Err(shape_err("linear bias", d_out, b.len()));
        }
        for r in out.chunks_exact_mut(d_out) {
            r.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(rows, d_in, d_out, 1.0, x.data(), false, weight.data(), false, beta, &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(&shape, out)
}

/// Accumulates `dW += xᵀ·dy`, `db += Σ dy` and returns `dx = dy·Wᵀ`.
pub fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    dweight: &mut Tensor,
    dbias: Option<&mut Tensor>,
) -> Tensor {
    let (rows, d_in) = (x.rows(), x.last_dim());
    let d_out = weight.shape()[1];
    gemm(d_in, rows, d_out, 1.0, x.data(), true, dy.data(), false, 1.0, dweight.data_mut());
    if let Some(db) = dbias {
        let db = db.data_mut();
        for r in dy.data().chunks_exact(d_out) {
            for (a, b) in db.iter_mut().zip(r) {
                *a += b;
            }
        }
    }
    let mut dx = vec![0.0; rows * d_in];
    gemm(rows, d_out, d_in, 1.0, dy.data(), false, weight.data(), true, 0.0, &mut dx);
    Tensor::new(x.shape(), dx).expect("same shape as x")
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// Max-stabilized softmax over the innermost axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let w = x.last_dim();
    for (src, dst) in x.data().chunks_exact(w).zip(out.data_mut().chunks_exact_mut(w)) {
        softmax_slice(src, dst);
    }
    out
}

/// Softmax along an arbitrary axis.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(shape_err("softmax axis", format!("< {}", shape.len()), axis));
    }
    if axis == shape.len() - 1 {
        return Ok(softmax_rows(x));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let mut buf = vec![0.0; n];
    let mut res = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for j in 0..n {
                buf[j] = x.data()[base + j * inner];
            }
            softmax_slice(&buf, &mut res);
            for j in 0..n {
                out.data_mut()[base + j * inner] = res[j];
            }
        }
    }
    Ok(out)
}

/// Backward of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let w = y.last_dim();
    let mut dx = dy.clone();
    for (yr, dr) in y.data().chunks_exact(w).zip(dx.data_mut().chunks_exact_mut(w)) {
        let s: f64 = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
        for (d, &p) in dr.iter_mut().zip(yr) {
            *d = p * (*d - s);
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Tensor,
    rstd: Vec<f64>,
}

/// Per-slice standardization followed by `gamma * x̂ + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let d = x.last_dim();
    if gamma.len() != d || beta.len() != d {
        return Err(shape_err("layer_norm", d, gamma.len()));
    }
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for ((src, xh), o) in x
        .data()
        .chunks_exact(d)
        .zip(xhat.data_mut().chunks_exact_mut(d))
        .zip(out.data_mut().chunks_exact_mut(d))
    {
        let mean = src.iter().sum::<f64>() / d as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd.push(r);
        for j in 0..d {
            xh[j] = (src[j] - mean) * r;
            o[j] = xh[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((out, LayerNormCache { xhat, rstd }))
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
    dgamma: &mut Tensor,
    dbeta: &mut Tensor,
) -> Tensor {
    let d = gamma.len();
    let mut dx = dy.clone();
    for (((xh, dyr), dxr), &r) in cache
        .xhat
        .data()
        .chunks_exact(d)
        .zip(dy.data().chunks_exact(d))
        .zip(dx.data_mut().chunks_exact_mut(d))
        .zip(&cache.rstd)
    {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..d {
            dgamma.data_mut()[j] += dyr[j] * xh[j];
            dbeta.data_mut()[j] += dyr[j];
            let g = dyr[j] * gamma.data()[j];
            sum_g += g;
            sum_gx += g * xh[j];
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let g = dyr[j] * gamma.data()[j];
            dxr[j] = r * (g - inv_d * sum_g - xh[j] * inv_d * sum_gx);
        }
    }
    dx
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Backward of ReLU given its pre-activation input.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        let u = GELU_C * (*v + 0.044715 * *v * *v * *v);
        *v = 0.5 * *v * (1.0 + u.tanh());
    });
    y
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        let u = GELU_C * (v + 0.044715 * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    }
    dx
}

fn conv_dims(x: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 3 || ks.len() != 4 {
        return Err(shape_err(
            "conv2d",
            "x [Cin,H,W], kernel [Cout,Cin,kh,kw]",
            format!("{xs:?}, {ks:?}"),
        ));
    }
    if ks[1] != xs[0] {
        return Err(shape_err("conv2d channels", xs[0], ks[1]));
    }
    if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
        return Err(shape_err("conv2d kernel", "odd extents", format!("{}x{}", ks[2], ks[3])));
    }
    Ok((xs[0], xs[1], xs[2], ks[0], ks[2], ks[3]))
}

/// Zero-padded "same" cross-correlation, no bias.
pub fn conv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (cin, h, w, cout, kh, kw) = conv_dims(x, kernel)?;
    let mut out = vec![0.0; cout * h * w];
    if kh == 1 && kw == 1 {
        // 1×1 is a channel-mixing matmul: out[Cout, HW] = K[Cout, Cin] · x[Cin, HW]
        gemm(cout, cin, h * w, 1.0, kernel.data(), false, x.data(), false, 0.0, &mut out);
        return Tensor::new(&[cout, h, w], out);
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let (xd, kd) = (x.data(), kernel.data());
    for o in 0..cout {
        for c in 0..cin {
            for a in 0..kh {
                for b in 0..kw {
                    let k = kd[((o * cin + c) * kh + a) * kw + b];
                    for i in 0..h {
                        let si = i as isize + a as isize - ph as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + b as isize - pw as isize;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            out[(o * h + i) * w + j] += k * xd[(c * h + si as usize) * w + sj as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, h, w], out)
}

/// Accumulates the kernel gradient and returns the input gradient.
pub fn conv2d_backward(x: &Tensor, kernel: &Tensor, dy: &Tensor, dkernel: &mut Tensor) -> Tensor {
    let (cin, h, w, cout, kh, kw) = conv_dims(x, kernel).expect("validated in forward");
    let mut dx = vec![0.0; cin * h * w];
    if kh == 1 && kw == 1 {
        gemm(cout, h * w, cin, 1.0, dy.data(), false, x.data(), true, 1.0, dkernel.data_mut());
        gemm(cin, cout, h * w, 1.0, kernel.data(), true, dy.data(), false, 0.0, &mut dx);
        return Tensor::new(x.shape(), dx).unwrap();
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let (xd, kd, gd) = (x.data(), kernel.data(), dy.data());
    let dk = dkernel.data_mut();
    for o in 0..cout {
        for c in 0..cin {
            for a in 0..kh {
                for b in 0..kw {
                    let ki = ((o * cin + c) * kh + a) * kw + b;
                    let k = kd[ki];
                    let mut acc = 0.0;
                    for i in 0..h {
                        let si = i as isize + a as isize - ph as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + b as isize - pw as isize;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            let xi = (c * h + si as usize) * w + sj as usize;
                            let g = gd[(o * h + i) * w + j];
                            acc += g * xd[xi];
                            dx[xi] += g * k;
                        }
                    }
                    dk[ki] += acc;
                }
            }
        }
    }
    Tensor::new(x.shape(), dx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::truncated_normal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_sum() {
        let x = Tensor::vector(vec![1., 2.]).unwrap();
        let w = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
        let b = Tensor::vector(vec![0., 0.]).unwrap();
        assert_eq!(linear_forward(&x, &w, Some(&b)).unwrap().data(), &[1., 2.]);

        let x = Tensor::vector(vec![1., 1.]).unwrap();
        let w = Tensor::matrix(2, 1, vec![2., 3.]).unwrap();
        let b = Tensor::vector(vec![1.]).unwrap();
        assert_eq!(linear_forward(&x, &w, Some(&b)).unwrap().data(), &[6.]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let x = random(&[3, 4], 1);
        let w = random(&[4, 2], 2);
        let b = random(&[2], 3);
        let y = linear_forward(&x, &w, Some(&b)).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = b.data()[j];
                for k in 0..4 {
                    acc += x.data()[i * 4 + k] * w.data()[k * 2 + j];
                }
                assert!((y.data()[i * 2 + j] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_rejects_mismatch() {
        let x = random(&[3, 4], 1);
        let w = random(&[3, 2], 2);
        assert!(linear_forward(&x, &w, None).is_err());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&Tensor::vector(vec![0., 0.]).unwrap());
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&Tensor::vector(vec![1000., 0.]).unwrap());
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_extended_precision_oracle() {
        // Oracle: exp via Taylor series summed in compensated arithmetic.
        fn exp_series(x: f64) -> f64 {
            let (mut term, mut sum, mut c) = (1.0f64, 1.0f64, 0.0f64);
            for n in 1..80 {
                term *= x / n as f64;
                let y = term - c;
                let t = sum + y;
                c = (t - sum) - y;
                sum = t;
            }
            sum
        }
        let e: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|&v| exp_series(v)).collect();
        let z: f64 = e.iter().sum();
        let y = softmax_rows(&Tensor::vector(vec![1., 2., 3.]).unwrap());
        for (a, b) in y.data().iter().zip(&e) {
            assert!((a - b / z).abs() < 1e-15, "{a} vs {}", b / z);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = random(&[3, 4], 9);
        let y = softmax(&x, 0).unwrap();
        let yt = softmax_rows(&x.transpose()).transpose();
        for (a, b) in y.data().iter().zip(yt.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::filled(&[4], 1.0);
        let zero = Tensor::zeros(&[4]);
        let (y, _) = layer_norm(&Tensor::filled(&[4], 3.5), &one, &zero).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let (one2, zero2) = (Tensor::filled(&[2], 1.0), Tensor::zeros(&[2]));
        let (y, _) = layer_norm(&Tensor::vector(vec![1., -1.]).unwrap(), &one2, &zero2).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);

        let x = random(&[1, 16], 4);
        let (one, zero) = (Tensor::filled(&[16], 1.0), Tensor::zeros(&[16]));
        let (y, _) = layer_norm(&x, &one, &zero).unwrap();
        let mean = y.data().iter().sum::<f64>() / 16.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        let raw_mean = x.data().iter().sum::<f64>() / 16.0;
        let raw_var = x.data().iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - raw_var / (raw_var + LAYER_NORM_EPS)).abs() < 1e-10);
    }

    #[test]
    fn conv_identity_zero_and_loop_oracle() {
        let x = random(&[2, 5, 5], 5);
        // 1×1 identity picking channel 1
        let mut k = Tensor::zeros(&[1, 2, 1, 1]);
        k.data_mut()[1] = 1.0;
        let y = conv2d(&x, &k).unwrap();
        assert_eq!(y.data(), &x.data()[25..]);
        let y = conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = truncated_normal(&[3, 2, 3, 3], 0.5, &mut rng);
        let y = conv2d(&x, &k).unwrap();
        let px = |c: usize, i: isize, j: isize| -> f64 {
            if (0..5).contains(&i) && (0..5).contains(&j) {
                x.data()[c * 25 + i as usize * 5 + j as usize]
            } else {
                0.0
            }
        };
        for o in 0..3 {
            for i in 0..5 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for a in 0..3 {
                            for b in 0..3 {
                                acc += k.data()[((o * 2 + c) * 3 + a) * 3 + b]
                                    * px(c, i as isize + a as isize - 1, j as isize + b as isize - 1);
                            }
                        }
                    }
                    assert!((y.data()[o * 25 + i * 5 + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = random(&[2, 5, 5], 5);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 1, 1])).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2])).is_err());
    }
}
