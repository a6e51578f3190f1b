//! Forward and backward numerical kernels on plain tensors.
//!
//! These are graph-agnostic; [`crate::autograd`] wraps them into
//! differentiable operations.

use crate::error::{config_err, ComaError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(config_err!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec([m, n], out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(config_err!("matmul_nt {:?} x {:?}ᵀ", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor::from_vec([m, n], out)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(config_err!("matmul_tn {:?}ᵀ x {:?}", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec([m, n], out)
}

pub fn transpose2d<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    let d = a.data();
    Ok(Tensor::from_fn([c, r], |i| d[(i % r) * c + i / r]))
}

/// Stride, padding and rounding of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
    /// Allow `(H + 2q - k)` not divisible by the stride, dropping the
    /// trailing partial window. Off by default.
    pub truncate: bool,
}

impl Conv2dGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding, truncate: false }
    }

    pub fn truncating(stride: usize, padding: usize) -> Self {
        Self { stride, padding, truncate: true }
    }

    pub fn output_extent(&self, extent: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || kernel == 0 {
            return Err(config_err!("conv stride and kernel must be positive"));
        }
        let span = extent + 2 * self.padding;
        if span < kernel {
            return Err(config_err!(
                "conv kernel {kernel} larger than padded extent {span}"
            ));
        }
        let rem = (span - kernel) % self.stride;
        if rem != 0 && !self.truncate {
            return Err(config_err!(
                "conv extent {extent} (padding {}, kernel {kernel}) not divisible by stride {}",
                self.padding,
                self.stride
            ));
        }
        Ok((span - kernel) / self.stride + 1)
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: Conv2dGeometry,
) -> Result<ConvDims> {
    let [batch, cin, h, w] = input.shape()[..] else {
        return Err(config_err!("conv input must be B×C×H×W, got {:?}", input.shape()));
    };
    let [cout, cin2, kh, kw] = weight.shape()[..] else {
        return Err(config_err!("conv weight must be Co×Ci×k×k, got {:?}", weight.shape()));
    };
    if cin != cin2 || kh != kw {
        return Err(config_err!(
            "conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            input.shape()
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(config_err!("conv bias {:?}, expected [{cout}]", b.shape()));
        }
    }
    let oh = geom.output_extent(h, kh)?;
    let ow = geom.output_extent(w, kw)?;
    Ok(ConvDims { batch, cin, h, w, cout, k: kh, oh, ow })
}

/// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`, or `None` in the padding.
#[inline]
fn tap(o: usize, kk: usize, geom: Conv2dGeometry, extent: usize) -> Option<usize> {
    let pos = (o * geom.stride + kk) as isize - geom.padding as isize;
    (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
}

/// Direct cross-correlation.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: Conv2dGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, weight, bias, geom)?;
    let (x, wt) = (input.data(), weight.data());
    let mut out = vec![T::zero(); d.batch * d.cout * d.oh * d.ow];
    for b in 0..d.batch {
        for co in 0..d.cout {
            let base = bias.map_or(T::zero(), |bv| bv.data()[co]);
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = base;
                    for ci in 0..d.cin {
                        let xplane = &x[((b * d.cin + ci) * d.h) * d.w..][..d.h * d.w];
                        let wplane = &wt[((co * d.cin + ci) * d.k) * d.k..][..d.k * d.k];
                        for ky in 0..d.k {
                            let Some(iy) = tap(oy, ky, geom, d.h) else { continue };
                            for kx in 0..d.k {
                                let Some(ix) = tap(ox, kx, geom, d.w) else { continue };
                                acc += xplane[iy * d.w + ix] * wplane[ky * d.k + kx];
                            }
                        }
                    }
                    out[((b * d.cout + co) * d.oh + oy) * d.ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec([d.batch, d.cout, d.oh, d.ow], out)
}

/// Same contract as [`conv2d`], computed as an unfold followed by a matrix product.
pub fn conv2d_im2col<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: Conv2dGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, weight, bias, geom)?;
    let x = input.data();
    let patch = d.cin * d.k * d.k;
    let positions = d.oh * d.ow;
    let wmat = weight.reshape([d.cout, patch])?;
    let mut out = Vec::with_capacity(d.batch * d.cout * positions);
    for b in 0..d.batch {
        // columns: patch × positions
        let mut cols = vec![T::zero(); patch * positions];
        for ci in 0..d.cin {
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let r = (ci * d.k + ky) * d.k + kx;
                    for oy in 0..d.oh {
                        let Some(iy) = tap(oy, ky, geom, d.h) else { continue };
                        for ox in 0..d.ow {
                            let Some(ix) = tap(ox, kx, geom, d.w) else { continue };
                            cols[r * positions + oy * d.ow + ox] =
                                x[((b * d.cin + ci) * d.h + iy) * d.w + ix];
                        }
                    }
                }
            }
        }
        let cols = Tensor::from_vec([patch, positions], cols)?;
        let y = matmul(&wmat, &cols)?;
        for co in 0..d.cout {
            let base = bias.map_or(T::zero(), |bv| bv.data()[co]);
            out.extend(y.row(co).iter().map(|&v| v + base));
        }
    }
    Tensor::from_vec([d.batch, d.cout, d.oh, d.ow], out)
}

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: Conv2dGeometry,
) -> Result<Conv2dGrads<T>> {
    let d = conv_dims(input, weight, None, geom)?;
    if grad_out.shape() != [d.batch, d.cout, d.oh, d.ow] {
        return Err(config_err!("conv grad shape {:?}", grad_out.shape()));
    }
    let (x, wt, g) = (input.data(), weight.data(), grad_out.data());
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); d.cout];
    for b in 0..d.batch {
        for co in 0..d.cout {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let go = g[((b * d.cout + co) * d.oh + oy) * d.ow + ox];
                    gb[co] += go;
                    if go == T::zero() {
                        continue;
                    }
                    for ci in 0..d.cin {
                        let xoff = ((b * d.cin + ci) * d.h) * d.w;
                        let woff = ((co * d.cin + ci) * d.k) * d.k;
                        for ky in 0..d.k {
                            let Some(iy) = tap(oy, ky, geom, d.h) else { continue };
                            for kx in 0..d.k {
                                let Some(ix) = tap(ox, kx, geom, d.w) else { continue };
                                let xi = xoff + iy * d.w + ix;
                                let wi = woff + ky * d.k + kx;
                                gx[xi] += go * wt[wi];
                                gw[wi] += go * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::from_vec(input.shape().to_vec(), gx)?,
        weight: Tensor::from_vec(weight.shape().to_vec(), gw)?,
        bias: Tensor::from_vec([d.cout], gb)?,
    })
}

/// Non-overlapping `window × window` max pooling. Returns the pooled map and,
/// for every output, the flat input index it was taken from. Ties go to the
/// first maximum in row-major window order.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, window: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = input.shape()[..] else {
        return Err(config_err!("maxpool input must be B×C×H×W, got {:?}", input.shape()));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(config_err!("maxpool window {window} does not tile {h}×{w}"));
    }
    let (oh, ow) = (h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..b * c {
        let off = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = off + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = off + (oy * window + dy) * w + ox * window + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec([b, c, oh, ow], out)?, arg))
}

fn check_finite<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<()> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(ComaError::Numerical(format!("NaN input to {what}")));
    }
    Ok(())
}

/// Row-wise softmax over the last axis, with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite(x, "softmax")?;
    let cols = *x.shape().last().ok_or_else(|| config_err!("softmax of a scalar"))?;
    if cols == 0 {
        return Err(config_err!("softmax over an empty axis"));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Given `y = softmax(x)` and `dL/dy`, returns `dL/dx`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    y.expect_same_shape(grad)?;
    let cols = *y.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks_exact(cols).zip(grad.data().chunks_exact(cols)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::from_vec(y.shape().to_vec(), out)
}

/// Cached state of a layer-norm forward pass.
pub struct LayerNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-row normalization over the last axis (population variance), then `γ·x̂ + β`.
pub fn layer_norm_rows<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let cols = *x.shape().last().ok_or_else(|| config_err!("layer norm of a scalar"))?;
    if cols == 0 {
        return Err(config_err!("layer norm over an empty row"));
    }
    if gamma.shape() != [cols] || beta.shape() != [cols] {
        return Err(config_err!(
            "layer norm affine {:?}/{:?} for rows of {cols}",
            gamma.shape(),
            beta.shape()
        ));
    }
    if eps < T::zero() {
        return Err(config_err!("layer norm eps must be non-negative"));
    }
    let n = T::of_usize(cols);
    let mut xhat = Vec::with_capacity(x.numel());
    let mut out = Vec::with_capacity(x.numel());
    let mut inv_std = Vec::with_capacity(x.numel() / cols);
    for row in x.data().chunks_exact(cols) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        inv_std.push(rstd);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * rstd;
            xhat.push(h);
            out.push(gamma.data()[j] * h + beta.data()[j]);
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), out)?,
        LayerNormCache { normalized: Tensor::from_vec(x.shape().to_vec(), xhat)?, inv_std },
    ))
}

/// Returns `(dx, dγ, dβ)`.
pub fn layer_norm_rows_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let xhat = &cache.normalized;
    xhat.expect_same_shape(grad)?;
    let cols = gamma.numel();
    let n = T::of_usize(cols);
    let mut dx = Vec::with_capacity(xhat.numel());
    let mut dgamma = vec![T::zero(); cols];
    let mut dbeta = vec![T::zero(); cols];
    for ((hr, gr), &rstd) in xhat
        .data()
        .chunks_exact(cols)
        .zip(grad.data().chunks_exact(cols))
        .zip(&cache.inv_std)
    {
        let mut mean_d = T::zero();
        let mut mean_dh = T::zero();
        for j in 0..cols {
            let dh = gr[j] * gamma.data()[j];
            mean_d += dh;
            mean_dh += dh * hr[j];
            dgamma[j] += gr[j] * hr[j];
            dbeta[j] += gr[j];
        }
        mean_d /= n;
        mean_dh /= n;
        for j in 0..cols {
            let dh = gr[j] * gamma.data()[j];
            dx.push(rstd * (dh - mean_d - hr[j] * mean_dh));
        }
    }
    Ok((
        Tensor::from_vec(xhat.shape().to_vec(), dx)?,
        Tensor::from_vec([cols], dgamma)?,
        Tensor::from_vec([cols], dbeta)?,
    ))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `d/dx [x·Φ(x)] = Φ(x) + x·φ(x)`.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn conv_sums_a_single_window() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let w = Tensor::ones([1, 1, 2, 2]);
        let b = Tensor::zeros([1]);
        let y = conv2d(&x, &w, Some(&b), Conv2dGeometry::new(2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn unit_conv_is_identity() {
        let x = Tensor::<f64>::iota([2, 1, 3, 3]);
        let w = Tensor::ones([1, 1, 1, 1]);
        let y = conv2d(&x, &w, None, Conv2dGeometry::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_average_pool_of_iota() {
        // direct summation by hand: each 2×2 block of 0..15 averaged
        let x = Tensor::<f64>::iota([1, 1, 4, 4]);
        let w = Tensor::full([1, 1, 2, 2], 0.25);
        let y = conv2d(&x, &w, Some(&Tensor::zeros([1])), Conv2dGeometry::new(2, 0)).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn conv_rejects_indivisible_stride_unless_truncating() {
        let x = Tensor::<f64>::zeros([1, 1, 64, 64]);
        let w = Tensor::zeros([4, 1, 7, 7]);
        assert!(conv2d(&x, &w, None, Conv2dGeometry::new(4, 3)).is_err());
        let y = conv2d(&x, &w, None, Conv2dGeometry::truncating(4, 3)).unwrap();
        assert_eq!(y.shape(), &[1, 4, 16, 16]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 2, 2]);
        assert!(conv2d(&x, &w, None, Conv2dGeometry::new(2, 0)).is_err());
    }

    #[test]
    fn maxpool_of_iota() {
        let x = Tensor::<f64>::iota([1, 1, 4, 4]);
        let (y, arg) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[5., 7., 13., 15.]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }

    #[test]
    fn maxpool_constant_and_ties() {
        let x = Tensor::<f64>::full([1, 2, 2, 2], 3.0);
        let (y, arg) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[3., 3.]);
        // first element of each window wins
        assert_eq!(arg, vec![0, 4]);
        assert!(maxpool2d(&Tensor::<f64>::zeros([1, 1, 3, 2]), 2).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let y = softmax_rows(&t(&[1, 2], &[0.0, 3f64.ln()])).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
        let y = softmax_rows(&Tensor::<f64>::full([2, 5], 1.7)).unwrap();
        assert!(y.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert!(softmax_rows(&t(&[1, 2], &[f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = t(&[1, 4], &[0.3, -1.2, 2.0, 0.0]);
        let a = softmax_rows(&x).unwrap();
        let b = softmax_rows(&x.map(|v| v + 17.0)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::ones([3]);
        let b = Tensor::zeros([3]);
        let (y, _) = layer_norm_rows(&t(&[1, 3], &[1., 2., 3.]), &g, &b, 0.0).unwrap();
        let s = 1.5f64.sqrt();
        for (got, want) in y.data().iter().zip([-s, 0.0, s]) {
            assert!((got - want).abs() < 1e-12);
        }
        let (y, _) = layer_norm_rows(&Tensor::full([2, 3], 4.0), &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let beta = t(&[3], &[0.5, -1.0, 2.0]);
        let (y, _) =
            layer_norm_rows(&t(&[2, 3], &[1., 5., 2., 0., 3., 9.]), &Tensor::zeros([3]), &beta, 1e-5)
                .unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((gelu(30.0f64) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::<f64>::from_fn([3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn([4, 2], |i| (i as f64 * 1.3).cos());
        let c = matmul(&a, &b).unwrap();
        let c_nt = matmul_nt(&a, &transpose2d(&b).unwrap()).unwrap();
        let c_tn = matmul_tn(&transpose2d(&a).unwrap(), &b).unwrap();
        assert!(c.max_abs_diff(&c_nt) < 1e-14);
        assert!(c.max_abs_diff(&c_tn) < 1e-14);
        assert_eq!(matmul(&a, &Tensor::eye(4)).unwrap(), a);
        assert!(matmul(&a, &a).is_err());
    }
}
