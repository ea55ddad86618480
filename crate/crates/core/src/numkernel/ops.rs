//! Forward kernels and their hand-derived vector-Jacobian products.

use crate::error::{Error, Result};

use super::Tensor;

fn conv_out_len(len: usize, width: usize, stride: usize) -> usize {
    (len - width) / stride + 1
}

/// Valid-padding 1D convolution over `[N, T, C_in]` with kernel `[W, C_in, C_out]`.
pub fn conv1d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    input.expect_rank("conv1d", 3)?;
    kernel.expect_rank("conv1d", 3)?;
    bias.expect_rank("conv1d", 1)?;
    let (n, t, c_in) = (input.dim(0), input.dim(1), input.dim(2));
    let (w, kc_in, c_out) = (kernel.dim(0), kernel.dim(1), kernel.dim(2));
    if kc_in != c_in {
        return Err(Error::shape(
            "conv1d",
            format!("input has {c_in} channels, kernel expects {kc_in}"),
        ));
    }
    if bias.dim(0) != c_out {
        return Err(Error::shape(
            "conv1d",
            format!("bias has {} entries, kernel has {c_out} outputs", bias.dim(0)),
        ));
    }
    if stride == 0 {
        return Err(Error::config("stride", "must be >= 1"));
    }
    if t < w {
        return Err(Error::InvalidWindow { len: t, width: w });
    }
    let t_out = conv_out_len(t, w, stride);
    let x = input.values();
    let k = kernel.values();
    let mut out = vec![0.0; n * t_out * c_out];
    for s in 0..n {
        for to in 0..t_out {
            let o_row = &mut out[(s * t_out + to) * c_out..(s * t_out + to + 1) * c_out];
            o_row.copy_from_slice(bias.values());
            for wi in 0..w {
                let ti = to * stride + wi;
                let x_row = &x[(s * t + ti) * c_in..(s * t + ti + 1) * c_in];
                for (ci, &xv) in x_row.iter().enumerate() {
                    let k_row = &k[(wi * c_in + ci) * c_out..(wi * c_in + ci + 1) * c_out];
                    for (o, &kv) in o_row.iter_mut().zip(k_row) {
                        *o += xv * kv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, t_out, c_out], out)
}

/// Gradients of [`conv1d_forward`] with respect to input, kernel and bias.
pub fn conv1d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, t, c_in) = (input.dim(0), input.dim(1), input.dim(2));
    let (w, _, c_out) = (kernel.dim(0), kernel.dim(1), kernel.dim(2));
    let t_out = grad_out.dim(1);
    let x = input.values();
    let k = kernel.values();
    let g = grad_out.values();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; c_out];
    for s in 0..n {
        for to in 0..t_out {
            let g_row = &g[(s * t_out + to) * c_out..(s * t_out + to + 1) * c_out];
            for (b, &gv) in db.iter_mut().zip(g_row) {
                *b += gv;
            }
            for wi in 0..w {
                let ti = to * stride + wi;
                let base = (s * t + ti) * c_in;
                for ci in 0..c_in {
                    let kb = (wi * c_in + ci) * c_out;
                    let xv = x[base + ci];
                    let k_row = &k[kb..kb + c_out];
                    let dk_row = &mut dk[kb..kb + c_out];
                    let mut acc = 0.0;
                    for ((dkv, &kv), &gv) in dk_row.iter_mut().zip(k_row).zip(g_row) {
                        *dkv += xv * gv;
                        acc += kv * gv;
                    }
                    dx[base + ci] += acc;
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dx).expect("shape"),
        Tensor::new(kernel.shape().to_vec(), dk).expect("shape"),
        Tensor::new(vec![c_out], db).expect("shape"),
    )
}

/// `input · weight + bias` for `[N, F_in] x [F_in, F_out]`.
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.expect_rank("dense", 2)?;
    weight.expect_rank("dense", 2)?;
    bias.expect_rank("dense", 1)?;
    let (n, f_in) = (input.dim(0), input.dim(1));
    let f_out = weight.dim(1);
    if weight.dim(0) != f_in {
        return Err(Error::shape(
            "dense",
            format!("input width {f_in} vs weight rows {}", weight.dim(0)),
        ));
    }
    if bias.dim(0) != f_out {
        return Err(Error::shape(
            "dense",
            format!("bias has {} entries, weight has {f_out} columns", bias.dim(0)),
        ));
    }
    let x = input.values();
    let wv = weight.values();
    let mut out = vec![0.0; n * f_out];
    for s in 0..n {
        let o_row = &mut out[s * f_out..(s + 1) * f_out];
        o_row.copy_from_slice(bias.values());
        for (i, &xv) in x[s * f_in..(s + 1) * f_in].iter().enumerate() {
            for (o, &w) in o_row.iter_mut().zip(&wv[i * f_out..(i + 1) * f_out]) {
                *o += xv * w;
            }
        }
    }
    Tensor::new(vec![n, f_out], out)
}

/// Gradients of [`dense_forward`] with respect to input, weight and bias.
pub fn dense_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, f_in) = (input.dim(0), input.dim(1));
    let f_out = weight.dim(1);
    let x = input.values();
    let wv = weight.values();
    let g = grad_out.values();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wv.len()];
    let mut db = vec![0.0; f_out];
    for s in 0..n {
        let g_row = &g[s * f_out..(s + 1) * f_out];
        for (b, &gv) in db.iter_mut().zip(g_row) {
            *b += gv;
        }
        for i in 0..f_in {
            let xv = x[s * f_in + i];
            let w_row = &wv[i * f_out..(i + 1) * f_out];
            let dw_row = &mut dw[i * f_out..(i + 1) * f_out];
            let mut acc = 0.0;
            for ((d, &w), &gv) in dw_row.iter_mut().zip(w_row).zip(g_row) {
                *d += xv * gv;
                acc += w * gv;
            }
            dx[s * f_in + i] = acc;
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dx).expect("shape"),
        Tensor::new(weight.shape().to_vec(), dw).expect("shape"),
        Tensor::new(vec![f_out], db).expect("shape"),
    )
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let values = input
        .values()
        .iter()
        .zip(grad_out.values())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), values).expect("shape")
}

/// Mean over the time axis of `[N, T, C]`.
pub fn global_mean_pool(input: &Tensor) -> Result<Tensor> {
    input.expect_rank("global_mean_pool", 3)?;
    let (n, t, c) = (input.dim(0), input.dim(1), input.dim(2));
    if t == 0 {
        return Err(Error::EmptyAxis { op: "global_mean_pool" });
    }
    let x = input.values();
    let mut out = vec![0.0; n * c];
    for s in 0..n {
        let o_row = &mut out[s * c..(s + 1) * c];
        for ti in 0..t {
            for (o, &v) in o_row.iter_mut().zip(&x[(s * t + ti) * c..(s * t + ti + 1) * c]) {
                *o += v;
            }
        }
        let inv = 1.0 / t as f64;
        o_row.iter_mut().for_each(|o| *o *= inv);
    }
    Tensor::new(vec![n, c], out)
}

pub fn global_mean_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (n, t, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let g = grad_out.values();
    let inv = 1.0 / t as f64;
    let mut dx = Vec::with_capacity(n * t * c);
    for s in 0..n {
        for _ in 0..t {
            dx.extend(g[s * c..(s + 1) * c].iter().map(|v| v * inv));
        }
    }
    Tensor::new(input_shape.to_vec(), dx).expect("shape")
}

/// Row-wise softmax of `[N, C]` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    logits.expect_rank("softmax", 2)?;
    let c = logits.dim(1);
    let mut out = logits.values().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean negative log-likelihood and its gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    logits.expect_rank("softmax_cross_entropy", 2)?;
    let (n, c) = (logits.dim(0), logits.dim(1));
    if n == 0 {
        return Err(Error::EmptyAxis { op: "softmax_cross_entropy" });
    }
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} rows but {} labels", labels.len()),
        ));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(Error::Label { index, label, num_classes: c });
    }
    let mut grad = softmax(logits)?;
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    let x = logits.values();
    for (s, &label) in labels.iter().enumerate() {
        let row = &x[s * c..(s + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        let g_row = grad.row_mut(s);
        g_row[label] -= 1.0;
        g_row.iter_mut().for_each(|g| *g *= inv_n);
    }
    Ok((loss * inv_n, grad))
}
