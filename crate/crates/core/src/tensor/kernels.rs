//! Forward and adjoint kernels on plain tensors. The graph in `graph.rs`
//! dispatches to these; they are also usable directly for inference.

use super::Tensor;
use crate::error::{Result, SanError};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(SanError::Config(format!(
            "{op}: expected a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

/// Splits a `[C×H×W]` or `[H×W]` shape into `(C, H, W)`.
fn dims_chw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        _ => Err(SanError::Config(format!(
            "{op}: expected a [C×H×W] or [H×W] map, got shape {:?}",
            t.shape()
        ))),
    }
}

fn with_spatial(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let n = s.len();
    s[n - 2] = h;
    s[n - 1] = w;
    s
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(a, "matmul")?;
    let (n2, p) = dims2(b, "matmul")?;
    if n != n2 {
        return Err(SanError::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = ad[i * n + k];
            let brow = &bd[k * p..(k + 1) * p];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, p], out))
}

/// `[m×n] · [n] -> [m]`.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(w, "matvec")?;
    if x.shape() != [n] {
        return Err(SanError::shape("matvec", w.shape(), x.shape()));
    }
    let (wd, xd) = (w.data(), x.data());
    let out = (0..m)
        .map(|i| {
            wd[i * n..(i + 1) * n]
                .iter()
                .zip(xd)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    Ok(Tensor::from_parts(vec![m], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(a, "transpose")?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Output extent of a strided window sweep, or a configuration error when the
/// windows do not tile the padded input exactly.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(SanError::Config("stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(SanError::Config(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(SanError::Config(format!(
            "non-integral output size: ({input} + 2·{padding} − {kernel}) / {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output positions `o` with `o·stride + k − pad` inside `[0, n)`.
fn valid_range(n: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o*stride + k - pad <= n - 1
    let hi = if n + pad > k {
        ((n + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (c, h, w) = match *input.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(SanError::Config(format!(
                "conv2d: input must be [C×H×W], got {:?}",
                input.shape()
            )))
        }
    };
    let (k, kc, kh, kw) = match *kernels.shape() {
        [k, kc, kh, kw] => (k, kc, kh, kw),
        _ => {
            return Err(SanError::Config(format!(
                "conv2d: kernels must be [K×C×kh×kw], got {:?}",
                kernels.shape()
            )))
        }
    };
    if kc != c {
        return Err(SanError::shape("conv2d", input.shape(), kernels.shape()));
    }
    let oh = conv_out_size(h, kh, stride, pad)?;
    let ow = conv_out_size(w, kw, stride, pad)?;
    Ok(ConvGeom {
        c,
        h,
        w,
        k,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
    })
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geom(input, kernels, stride, padding)?;
    let (x, wk) = (input.data(), kernels.data());
    let mut out = vec![0.0; g.k * g.oh * g.ow];
    for k in 0..g.k {
        let plane = &mut out[k * g.oh * g.ow..(k + 1) * g.oh * g.ow];
        for c in 0..g.c {
            let xin = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let wv = wk[((k * g.c + c) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                        let irow = &xin[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.k, g.oh, g.ow], out))
}

/// Adjoint of [`conv2d`]: returns `(∂/∂input, ∂/∂kernels)` given the output
/// gradient.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geom(input, kernels, stride, padding)?;
    if grad_out.shape() != [g.k, g.oh, g.ow] {
        return Err(SanError::shape(
            "conv2d_backward",
            grad_out.shape(),
            &[g.k, g.oh, g.ow],
        ));
    }
    let (x, wk, go) = (input.data(), kernels.data(), grad_out.data());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wk.len()];
    for k in 0..g.k {
        let gplane = &go[k * g.oh * g.ow..(k + 1) * g.oh * g.ow];
        for c in 0..g.c {
            let xin = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            let gxin = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let widx = ((k * g.c + c) * g.kh + ky) * g.kw + kx;
                    let wv = wk[widx];
                    let (ox0, ox1) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                        let irow = &xin[iy * g.w..(iy + 1) * g.w];
                        let girow = &mut gxin[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride + kx - g.pad;
                            acc += grow[ox] * irow[ix];
                            girow[ix] += wv * grow[ox];
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(kernels.shape().to_vec(), gw),
    ))
}

fn pool_check(h: usize, w: usize, sh: usize, sw: usize) -> Result<()> {
    if sh == 0 || sw == 0 || h % sh != 0 || w % sw != 0 {
        return Err(SanError::Config(format!(
            "pooling strides ({sh},{sw}) do not divide map size {h}×{w}"
        )));
    }
    Ok(())
}

/// Block-mean pooling over the trailing two axes of a `[H×W]` or `[C×H×W]`
/// map, non-overlapping windows of `sh×sw`.
pub fn avg_pool2d(input: &Tensor, sh: usize, sw: usize) -> Result<Tensor> {
    let (c, h, w) = dims_chw(input, "avg_pool2d")?;
    pool_check(h, w, sh, sw)?;
    let (oh, ow) = (h / sh, w / sw);
    let count = (sh * sw) as f64;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..sh {
                    for dx in 0..sw {
                        s += plane[(oy * sh + dy) * w + ox * sw + dx];
                    }
                }
                out.push(s / count);
            }
        }
    }
    Ok(Tensor::from_parts(with_spatial(input.shape(), oh, ow), out))
}

pub fn avg_pool2d_backward(input_shape: &[usize], grad_out: &Tensor, sh: usize, sw: usize) -> Tensor {
    let n = input_shape.len();
    let (h, w) = (input_shape[n - 2], input_shape[n - 1]);
    let c: usize = input_shape[..n - 2].iter().product();
    let (oh, ow) = (h / sh, w / sw);
    let count = (sh * sw) as f64;
    let g = grad_out.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = g[(ch * oh + y / sh) * ow + x / sw] / count;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

/// Nearest-neighbour upsampling of the trailing two axes by integer factors.
pub fn upsample_nearest(input: &Tensor, fh: usize, fw: usize) -> Result<Tensor> {
    let (c, h, w) = dims_chw(input, "upsample_nearest")?;
    if fh == 0 || fw == 0 {
        return Err(SanError::Config("upsampling factors must be positive".into()));
    }
    let (oh, ow) = (h * fh, w * fw);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let row = &x[(ch * h + y / fh) * w..(ch * h + y / fh + 1) * w];
            out.extend((0..ow).map(|xo| row[xo / fw]));
        }
    }
    Ok(Tensor::from_parts(with_spatial(input.shape(), oh, ow), out))
}

pub fn upsample_nearest_backward(input_shape: &[usize], grad_out: &Tensor, fh: usize, fw: usize) -> Tensor {
    let n = input_shape.len();
    let (h, w) = (input_shape[n - 2], input_shape[n - 1]);
    let c: usize = input_shape[..n - 2].iter().product();
    let (oh, ow) = (h * fh, w * fw);
    let g = grad_out.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * h + y / fh) * w + x / fw] += g[(ch * oh + y) * ow + x];
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

/// Numerically stable softmax along `axis` of a 1-D or 2-D tensor.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (d[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `(outer, axis_len, inner)` such that element `(o, j, i)` lives at
/// `(o·len + j)·inner + i`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(SanError::Config(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_projector() {
        let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let p = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        let b = Tensor::matrix(&[&[5.0], &[7.0]]).unwrap();
        assert_eq!(matmul(&p, &b).unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, SanError::Shape { .. }));
    }

    #[test]
    fn conv_scaling_and_sum_cases() {
        let ones = Tensor::ones(&[1, 3, 3]);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        let out = conv2d(&ones, &k, 1, 0).unwrap();
        assert_eq!(out, Tensor::full(&[1, 3, 3], 2.0));

        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = conv2d(&x, &Tensor::ones(&[1, 1, 2, 2]), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 2, 0), Err(SanError::Config(_))));
        assert!(conv2d(&x, &k, 1, 0).is_ok());
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 1, 7, 7]), 1, 1),
            Err(SanError::Config(_))
        ));
    }

    #[test]
    fn strided_padded_conv_shape() {
        let x = Tensor::zeros(&[3, 32, 32]);
        let k = Tensor::zeros(&[8, 3, 4, 4]);
        assert_eq!(conv2d(&x, &k, 2, 1).unwrap().shape(), &[8, 16, 16]);
    }

    #[test]
    fn pooling_cases() {
        let out = avg_pool2d(&Tensor::ones(&[4, 4]), 2, 2).unwrap();
        assert_eq!(out, Tensor::ones(&[2, 2]));
        let x = Tensor::matrix(&[&[1.0, 3.0], &[5.0, 7.0]]).unwrap();
        assert_eq!(avg_pool2d(&x, 2, 2).unwrap().data(), &[4.0]);
        assert!(matches!(
            avg_pool2d(&Tensor::ones(&[5, 4]), 2, 2),
            Err(SanError::Config(_))
        ));
    }

    #[test]
    fn upsample_nearest_definition() {
        let x = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let up = upsample_nearest(&x, 2, 2).unwrap();
        assert_eq!(
            up.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn softmax_uniform_and_axis() {
        let s = softmax(&Tensor::vector(&[0.7, 0.7, 0.7]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let m = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 5.0]]).unwrap();
        let cols = softmax(&m, 0).unwrap();
        assert!((cols.at(&[0, 0]) + cols.at(&[1, 0]) - 1.0).abs() < 1e-15);
        let rows = softmax(&m, 1).unwrap();
        assert!((rows.at(&[1, 0]) + rows.at(&[1, 1]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_and_softplus_are_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }
}
