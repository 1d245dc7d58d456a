//! Forward and backward kernels for the differentiable primitives.
//!
//! Every kernel is a pure function of its arguments. Sequence tensors used
//! by the model are time-major (`S × features`); the convolution kernels
//! follow the channel-major (`channels × length`) convention.

use super::array::{expect_shape, gemm};
use super::{NdArray, Scalar};
use crate::error::{dim_err, Error, Result};

pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

/// Strided 1-D convolution without padding.
///
/// `x: Cin × L`, `weight: Cout × Cin × K`, `bias: Cout` → `Cout × Lout`.
pub fn conv1d<T: Scalar>(
    x: &NdArray<T>,
    weight: &NdArray<T>,
    bias: Option<&NdArray<T>>,
    stride: usize,
) -> Result<NdArray<T>> {
    let (cin, len) = x.dims2("conv1d")?;
    let (cout, wcin, k) = weight.dims3("conv1d")?;
    if stride == 0 {
        return Err(Error::Config("conv1d stride must be at least 1".into()));
    }
    if wcin != cin {
        return Err(dim_err(
            "conv1d",
            format!("input channels: x has {cin}, weight expects {wcin}"),
        ));
    }
    if len < k {
        return Err(dim_err(
            "conv1d",
            format!("length axis {len} shorter than kernel axis {k}"),
        ));
    }
    if let Some(b) = bias {
        expect_shape(b, &[cout], "conv1d bias")?;
    }
    let lout = conv1d_out_len(len, k, stride);
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); cout * lout];
    for c in 0..cout {
        let b0 = bias.map_or(T::zero(), |b| b.data()[c]);
        let row = &mut out[c * lout..(c + 1) * lout];
        for (t, o) in row.iter_mut().enumerate() {
            let mut acc = b0;
            let base = t * stride;
            for i in 0..cin {
                let w = &wd[(c * cin + i) * k..(c * cin + i + 1) * k];
                let xs = &xd[i * len + base..i * len + base + k];
                for (&wv, &xv) in w.iter().zip(xs) {
                    acc += wv * xv;
                }
            }
            *o = acc;
        }
    }
    NdArray::from_vec(&[cout, lout], out)
}

/// Gradients of [`conv1d`]: `(dx, dweight, dbias)`.
pub fn conv1d_backward<T: Scalar>(
    x: &NdArray<T>,
    weight: &NdArray<T>,
    dy: &NdArray<T>,
    stride: usize,
) -> Result<(NdArray<T>, NdArray<T>, NdArray<T>)> {
    let (cin, len) = x.dims2("conv1d_backward")?;
    let (cout, _, k) = weight.dims3("conv1d_backward")?;
    let (_, lout) = dy.dims2("conv1d_backward")?;
    let xd = x.data();
    let wd = weight.data();
    let gd = dy.data();
    let mut dx = vec![T::zero(); cin * len];
    let mut dw = vec![T::zero(); cout * cin * k];
    let mut db = vec![T::zero(); cout];
    for c in 0..cout {
        for t in 0..lout {
            let g = gd[c * lout + t];
            db[c] += g;
            let base = t * stride;
            for i in 0..cin {
                let woff = (c * cin + i) * k;
                let xoff = i * len + base;
                for kk in 0..k {
                    dx[xoff + kk] += wd[woff + kk] * g;
                    dw[woff + kk] += xd[xoff + kk] * g;
                }
            }
        }
    }
    Ok((
        NdArray::from_vec(&[cin, len], dx)?,
        NdArray::from_vec(&[cout, cin, k], dw)?,
        NdArray::from_vec(&[cout], db)?,
    ))
}

/// Transposed 1-D convolution, the adjoint of [`conv1d`] in its input.
///
/// `x: Cin × L`, `weight: Cin × Cout × K` → `Cout × ((L−1)·stride + K)`.
pub fn transposed_conv1d<T: Scalar>(
    x: &NdArray<T>,
    weight: &NdArray<T>,
    stride: usize,
) -> Result<NdArray<T>> {
    let (cin, len) = x.dims2("transposed_conv1d")?;
    let (wcin, cout, k) = weight.dims3("transposed_conv1d")?;
    if stride == 0 {
        return Err(Error::Config(
            "transposed_conv1d stride must be at least 1".into(),
        ));
    }
    if wcin != cin {
        return Err(dim_err(
            "transposed_conv1d",
            format!("input channels: x has {cin}, weight expects {wcin}"),
        ));
    }
    let lout = (len - 1) * stride + k;
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); cout * lout];
    for i in 0..cin {
        for t in 0..len {
            let xv = xd[i * len + t];
            for c in 0..cout {
                let w = &wd[(i * cout + c) * k..(i * cout + c + 1) * k];
                let o = &mut out[c * lout + t * stride..c * lout + t * stride + k];
                for (ov, &wv) in o.iter_mut().zip(w) {
                    *ov += wv * xv;
                }
            }
        }
    }
    NdArray::from_vec(&[cout, lout], out)
}

/// Gradients of [`transposed_conv1d`]: `(dx, dweight)`.
pub fn transposed_conv1d_backward<T: Scalar>(
    x: &NdArray<T>,
    weight: &NdArray<T>,
    dy: &NdArray<T>,
    stride: usize,
) -> Result<(NdArray<T>, NdArray<T>)> {
    let (cin, len) = x.dims2("transposed_conv1d_backward")?;
    let (_, cout, k) = weight.dims3("transposed_conv1d_backward")?;
    let (_, lout) = dy.dims2("transposed_conv1d_backward")?;
    let xd = x.data();
    let wd = weight.data();
    let gd = dy.data();
    let mut dx = vec![T::zero(); cin * len];
    let mut dw = vec![T::zero(); cin * cout * k];
    for i in 0..cin {
        for t in 0..len {
            let xv = xd[i * len + t];
            let mut acc = T::zero();
            for c in 0..cout {
                let woff = (i * cout + c) * k;
                let g = &gd[c * lout + t * stride..c * lout + t * stride + k];
                for kk in 0..k {
                    acc += wd[woff + kk] * g[kk];
                    dw[woff + kk] += xv * g[kk];
                }
            }
            dx[i * len + t] = acc;
        }
    }
    Ok((
        NdArray::from_vec(&[cin, len], dx)?,
        NdArray::from_vec(&[cin, cout, k], dw)?,
    ))
}

fn check_depthwise<T: Scalar>(
    x: &NdArray<T>,
    weight: &NdArray<T>,
) -> Result<(usize, usize, usize)> {
    let (ch, len) = x.dims2("depthwise_conv1d")?;
    let (wch, k) = weight.dims2("depthwise_conv1d")?;
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "depthwise kernel size must be odd, got {k}"
        )));
    }
    if wch != ch {
        return Err(dim_err(
            "depthwise_conv1d",
            format!("channel axis: x has {ch}, weight has {wch}"),
        ));
    }
    Ok((ch, len, k))
}

/// Same-length per-channel convolution with symmetric zero padding.
///
/// `x: C × L`, `weight: C × K` (K odd) → `C × L`.
pub fn depthwise_conv1d<T: Scalar>(x: &NdArray<T>, weight: &NdArray<T>) -> Result<NdArray<T>> {
    let (ch, len, k) = check_depthwise(x, weight)?;
    let half = k / 2;
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); ch * len];
    for c in 0..ch {
        let xs = &xd[c * len..(c + 1) * len];
        let w = &wd[c * k..(c + 1) * k];
        let o = &mut out[c * len..(c + 1) * len];
        for (kk, &wv) in w.iter().enumerate() {
            // out[t] += w[kk] * x[t + kk - half]
            let lo = half.saturating_sub(kk);
            let hi = (len + half).saturating_sub(kk).min(len);
            for t in lo..hi {
                o[t] += wv * xs[t + kk - half];
            }
        }
    }
    NdArray::from_vec(&[ch, len], out)
}

/// Gradients of [`depthwise_conv1d`]: `(dx, dweight)`.
pub fn depthwise_conv1d_backward<T: Scalar>(
    x: &NdArray<T>,
    weight: &NdArray<T>,
    dy: &NdArray<T>,
) -> Result<(NdArray<T>, NdArray<T>)> {
    let (ch, len, k) = check_depthwise(x, weight)?;
    let half = k / 2;
    let xd = x.data();
    let wd = weight.data();
    let gd = dy.data();
    let mut dx = vec![T::zero(); ch * len];
    let mut dw = vec![T::zero(); ch * k];
    for c in 0..ch {
        let xs = &xd[c * len..(c + 1) * len];
        let g = &gd[c * len..(c + 1) * len];
        let dxs = &mut dx[c * len..(c + 1) * len];
        for kk in 0..k {
            let wv = wd[c * k + kk];
            let lo = half.saturating_sub(kk);
            let hi = (len + half).saturating_sub(kk).min(len);
            let mut acc = T::zero();
            for (t, &gt) in g.iter().enumerate().take(hi).skip(lo) {
                let src = t + kk - half;
                dxs[src] += wv * gt;
                acc += xs[src] * gt;
            }
            dw[c * k + kk] = acc;
        }
    }
    Ok((
        NdArray::from_vec(&[ch, len], dx)?,
        NdArray::from_vec(&[ch, k], dw)?,
    ))
}

/// [`depthwise_conv1d`] on time-major input: `x: L × C` → `L × C`, with
/// `weight: C × K` as before.
pub fn depthwise_conv1d_rows<T: Scalar>(x: &NdArray<T>, weight: &NdArray<T>) -> Result<NdArray<T>> {
    let (len, ch) = x.dims2("depthwise_conv1d")?;
    let k = check_rows_kernel(ch, weight)?;
    let half = k / 2;
    let wt = weight.transpose()?;
    let (xd, wd) = (x.data(), wt.data());
    let mut out = vec![T::zero(); len * ch];
    for (t, o) in out.chunks_exact_mut(ch).enumerate() {
        for kk in 0..k {
            let Some(src) = (t + kk).checked_sub(half).filter(|&s| s < len) else {
                continue;
            };
            let xs = &xd[src * ch..(src + 1) * ch];
            for ((o, &w), &xv) in o.iter_mut().zip(&wd[kk * ch..(kk + 1) * ch]).zip(xs) {
                *o += w * xv;
            }
        }
    }
    NdArray::from_vec(&[len, ch], out)
}

/// Gradients of [`depthwise_conv1d_rows`]: `(dx, dweight)`.
pub fn depthwise_conv1d_rows_backward<T: Scalar>(
    x: &NdArray<T>,
    weight: &NdArray<T>,
    dy: &NdArray<T>,
) -> Result<(NdArray<T>, NdArray<T>)> {
    let (len, ch) = x.dims2("depthwise_conv1d_backward")?;
    let k = check_rows_kernel(ch, weight)?;
    expect_shape(dy, &[len, ch], "depthwise_conv1d_backward grad")?;
    let half = k / 2;
    let wt = weight.transpose()?;
    let (xd, wd, gd) = (x.data(), wt.data(), dy.data());
    let mut dx = vec![T::zero(); len * ch];
    let mut dwt = vec![T::zero(); k * ch];
    for t in 0..len {
        let g = &gd[t * ch..(t + 1) * ch];
        for kk in 0..k {
            let Some(src) = (t + kk).checked_sub(half).filter(|&s| s < len) else {
                continue;
            };
            let w = &wd[kk * ch..(kk + 1) * ch];
            let xs = &xd[src * ch..(src + 1) * ch];
            for (((d, &wv), &gv), (acc, &xv)) in dx[src * ch..(src + 1) * ch]
                .iter_mut()
                .zip(w)
                .zip(g)
                .zip(dwt[kk * ch..(kk + 1) * ch].iter_mut().zip(xs))
            {
                *d += wv * gv;
                *acc += xv * gv;
            }
        }
    }
    Ok((
        NdArray::from_vec(&[len, ch], dx)?,
        NdArray::from_vec(&[k, ch], dwt)?.transpose()?,
    ))
}

fn check_rows_kernel<T: Scalar>(ch: usize, weight: &NdArray<T>) -> Result<usize> {
    let (wc, k) = weight.dims2("depthwise_conv1d weight")?;
    if wc != ch {
        return Err(dim_err(
            "depthwise_conv1d",
            format!("input has {ch} channels, weight has {wc}"),
        ));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "depthwise kernel size must be odd, got {k}"
        )));
    }
    Ok(k)
}

/// Saved statistics from a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: NdArray<T>,
    pub inv_std: Vec<T>,
}

/// Per-row normalization over the feature axis of `x: S × N`.
pub fn layer_norm<T: Scalar>(
    x: &NdArray<T>,
    gain: &NdArray<T>,
    bias: &NdArray<T>,
    eps: T,
) -> Result<(NdArray<T>, LayerNormCache<T>)> {
    let (rows, n) = x.dims2("layer_norm")?;
    expect_shape(gain, &[n], "layer_norm gain")?;
    expect_shape(bias, &[n], "layer_norm bias")?;
    let nf = T::of(n as f64);
    let mut out = vec![T::zero(); rows * n];
    let mut normalized = vec![T::zero(); rows * n];
    let mut inv_std = Vec::with_capacity(rows);
    let (gd, bd) = (gain.data(), bias.data());
    for (r, row) in x.data().chunks_exact(n).enumerate() {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rstd = T::one() / (var + eps).sqrt();
        inv_std.push(rstd);
        for j in 0..n {
            let xh = (row[j] - mean) * rstd;
            normalized[r * n + j] = xh;
            out[r * n + j] = gd[j] * xh + bd[j];
        }
    }
    Ok((
        NdArray::from_vec(&[rows, n], out)?,
        LayerNormCache {
            normalized: NdArray::from_vec(&[rows, n], normalized)?,
            inv_std,
        },
    ))
}

/// Gradients of [`layer_norm`]: `(dx, dgain, dbias)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &NdArray<T>,
    dy: &NdArray<T>,
) -> Result<(NdArray<T>, NdArray<T>, NdArray<T>)> {
    let (rows, n) = dy.dims2("layer_norm_backward")?;
    let nf = T::of(n as f64);
    let gd = gain.data();
    let xh = cache.normalized.data();
    let mut dx = vec![T::zero(); rows * n];
    let mut dgain = vec![T::zero(); n];
    let mut dbias = vec![T::zero(); n];
    let mut dxh = vec![T::zero(); n];
    for r in 0..rows {
        let g = &dy.data()[r * n..(r + 1) * n];
        let xr = &xh[r * n..(r + 1) * n];
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..n {
            dgain[j] += g[j] * xr[j];
            dbias[j] += g[j];
            dxh[j] = g[j] * gd[j];
            mean_dxh += dxh[j];
            mean_dxh_xh += dxh[j] * xr[j];
        }
        mean_dxh /= nf;
        mean_dxh_xh /= nf;
        let rstd = cache.inv_std[r];
        for j in 0..n {
            dx[r * n + j] = rstd * (dxh[j] - mean_dxh - xr[j] * mean_dxh_xh);
        }
    }
    Ok((
        NdArray::from_vec(&[rows, n], dx)?,
        NdArray::from_vec(&[n], dgain)?,
        NdArray::from_vec(&[n], dbias)?,
    ))
}

/// Per-frame affine map `x·Wᵀ + b` for `x: S × in`, `weight: out × in`.
///
/// A pointwise (kernel size 1) convolution in time-major layout.
pub fn linear<T: Scalar>(
    x: &NdArray<T>,
    weight: &NdArray<T>,
    bias: Option<&NdArray<T>>,
) -> Result<NdArray<T>> {
    let (rows, n_in) = x.dims2("linear")?;
    let (n_out, w_in) = weight.dims2("linear")?;
    if w_in != n_in {
        return Err(dim_err(
            "linear",
            format!("feature axis: x has {n_in}, weight expects {w_in}"),
        ));
    }
    let mut out = match bias {
        Some(b) => {
            expect_shape(b, &[n_out], "linear bias")?;
            let mut o = Vec::with_capacity(rows * n_out);
            for _ in 0..rows {
                o.extend_from_slice(b.data());
            }
            o
        }
        None => vec![T::zero(); rows * n_out],
    };
    gemm(
        false,
        true,
        rows,
        n_out,
        n_in,
        T::one(),
        x.data(),
        weight.data(),
        T::one(),
        &mut out,
    );
    NdArray::from_vec(&[rows, n_out], out)
}

/// Gradients of [`linear`]: `(dx, dweight, dbias)`.
pub fn linear_backward<T: Scalar>(
    x: &NdArray<T>,
    weight: &NdArray<T>,
    dy: &NdArray<T>,
) -> Result<(NdArray<T>, NdArray<T>, NdArray<T>)> {
    let (rows, n_in) = x.dims2("linear_backward")?;
    let (n_out, _) = weight.dims2("linear_backward")?;
    let mut dx = vec![T::zero(); rows * n_in];
    gemm(
        false,
        false,
        rows,
        n_in,
        n_out,
        T::one(),
        dy.data(),
        weight.data(),
        T::zero(),
        &mut dx,
    );
    let mut dw = vec![T::zero(); n_out * n_in];
    gemm(
        true,
        false,
        n_out,
        n_in,
        rows,
        T::one(),
        dy.data(),
        x.data(),
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); n_out];
    for row in dy.data().chunks_exact(n_out) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok((
        NdArray::from_vec(&[rows, n_in], dx)?,
        NdArray::from_vec(&[n_out, n_in], dw)?,
        NdArray::from_vec(&[n_out], db)?,
    ))
}

/// `x ⊙ scale + offset` with `scale`, `offset` broadcast over rows.
pub fn row_affine<T: Scalar>(
    x: &NdArray<T>,
    scale: &NdArray<T>,
    offset: &NdArray<T>,
) -> Result<NdArray<T>> {
    let (rows, n) = x.dims2("row_affine")?;
    expect_shape(scale, &[n], "row_affine scale")?;
    expect_shape(offset, &[n], "row_affine offset")?;
    let mut out = Vec::with_capacity(rows * n);
    for row in x.data().chunks_exact(n) {
        out.extend(
            row.iter()
                .zip(scale.data().iter().zip(offset.data()))
                .map(|(&v, (&a, &b))| v * a + b),
        );
    }
    NdArray::from_vec(&[rows, n], out)
}
