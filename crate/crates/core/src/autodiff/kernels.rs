//! Raw convolution, resampling and normalization kernels on `[N,C,H,W]` buffers.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [_, c, h, wd] = x;
        let (f, wc, k, k2) = match *w {
            [f, wc, k, k2] => (f, wc, k, k2),
            _ => return Err(Error::Shape(format!("conv weight must be 4-D, got {w:?}"))),
        };
        if k != k2 || k == 0 {
            return Err(Error::Shape(format!("conv kernel must be square and >= 1, got {k}x{k2}")));
        }
        if wc != c {
            return Err(Error::Shape(format!(
                "conv input has {c} channels, weight expects {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv input {h}x{wd} with padding {pad} is smaller than kernel {k}"
            )));
        }
        Ok(ConvGeom {
            c,
            h,
            w: wd,
            f,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Input index range `[lo, hi)` of outputs whose tap `t` lands inside `[0, n)`.
    #[inline]
    fn valid_range(&self, tap: usize, n: usize, out: usize) -> (usize, usize) {
        // i = o*stride + tap - pad must satisfy 0 <= i < n.
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = if (n as isize) - off <= 0 {
            0
        } else {
            (((n as isize) - off + s - 1) / s).min(out as isize)
        };
        (lo as usize, hi.max(lo) as usize)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let npix = g.col_cols();
    cols.fill(T::zero());
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ki, g.h, g.ho);
            for kj in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kj, g.w, g.wo);
                let row = ((c * g.k + ki) * g.k + kj) * npix;
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        dst[ox] = src[ox * g.stride + kj - g.pad];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let npix = g.col_cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ki, g.h, g.ho);
            for kj in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kj, g.w, g.wo);
                let row = ((c * g.k + ki) * g.k + kj) * npix;
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        let ix = ox * g.stride + kj - g.pad;
                        dst[ix] = dst[ix] + src[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let xd = x.dims4()?;
    let g = ConvGeom::new(xd, w.shape(), stride, pad)?;
    if b.shape() != [g.f] {
        return Err(Error::Shape(format!(
            "conv bias shape {:?}, expected [{}]",
            b.shape(),
            g.f
        )));
    }
    let n = xd[0];
    let (rows, npix) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * npix];
    let mut out = vec![T::zero(); n * g.f * npix];
    let in_len = g.c * g.h * g.w;
    for s in 0..n {
        im2col(&x.data()[s * in_len..(s + 1) * in_len], &g, &mut cols);
        let o = &mut out[s * g.f * npix..(s + 1) * g.f * npix];
        for (f, chunk) in o.chunks_mut(npix).enumerate() {
            chunk.fill(b.data()[f]);
        }
        // out[f, p] += W[f, r] * cols[r, p]
        unsafe {
            T::gemm(
                g.f,
                rows,
                npix,
                w.data(),
                rows as isize,
                1,
                &cols,
                npix as isize,
                1,
                T::one(),
                o,
                npix as isize,
                1,
            );
        }
    }
    Tensor::new(vec![n, g.f, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let xd = x.dims4()?;
    let g = ConvGeom::new(xd, w.shape(), stride, pad)?;
    let n = xd[0];
    let (rows, npix) = (g.col_rows(), g.col_cols());
    let in_len = g.c * g.h * g.w;
    let [need_dx, need_dw, need_db] = need;

    let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.numel()]);
    let mut db = need_db.then(|| vec![T::zero(); g.f]);
    let mut cols = vec![T::zero(); rows * npix];

    for s in 0..n {
        let gs = &grad.data()[s * g.f * npix..(s + 1) * g.f * npix];
        if let Some(db) = db.as_mut() {
            for (f, chunk) in gs.chunks(npix).enumerate() {
                db[f] = db[f] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[s * in_len..(s + 1) * in_len], &g, &mut cols);
            // dW[f, r] += G[f, p] * cols[r, p]^T
            unsafe {
                T::gemm(
                    g.f,
                    npix,
                    rows,
                    gs,
                    npix as isize,
                    1,
                    &cols,
                    1,
                    npix as isize,
                    T::one(),
                    dw,
                    rows as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[r, p] = W[f, r]^T * G[f, p]
            unsafe {
                T::gemm(
                    rows,
                    g.f,
                    npix,
                    w.data(),
                    1,
                    rows as isize,
                    gs,
                    npix as isize,
                    1,
                    T::zero(),
                    &mut cols,
                    npix as isize,
                    1,
                );
            }
            col2im(&cols, &g, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        dw: dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
        db: db.map(|d| Tensor::new(vec![g.f], d)).transpose()?,
    })
}

pub(crate) fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        let o = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            let src = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for xo in 0..w2 {
                o[y * w2 + xo] = src[xo / 2];
            }
        }
    }
    Tensor::new(vec![n, c, h2, w2], out)
}

pub(crate) fn upsample2x_backward<T: Scalar>(grad: &Tensor<T>, x_shape: &[usize]) -> Result<Tensor<T>> {
    let [n, c, h, w] = match *x_shape {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::Shape("upsample input must be 4-D".into())),
    };
    let w2 = 2 * w;
    let mut dx = vec![T::zero(); n * c * h * w];
    for (p, plane) in grad.data().chunks(4 * h * w).enumerate() {
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xo in 0..w2 {
                let i = (y / 2) * w + xo / 2;
                d[i] = d[i] + plane[y * w2 + xo];
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// Forward instance normalization; returns `(y, xhat, inv_std per plane)`.
pub(crate) fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let [_, c, h, w] = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "instance norm affine params must be [{c}], got {:?} / {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let m = h * w;
    if m < 2 {
        return Err(Error::Shape(format!(
            "instance norm needs at least 2 pixels per plane, got {h}x{w}"
        )));
    }
    let mut y = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(x.numel() / m);
    let mf = T::of(m as f64);
    for (p, plane) in x.data().chunks(m).enumerate() {
        let ch = p % c;
        let mean = plane.iter().copied().sum::<T>() / mf;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
        let is = T::one() / (var + T::of(eps)).sqrt();
        inv_std.push(is);
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for i in 0..m {
            let xh = (plane[i] - mean) * is;
            xhat[p * m + i] = xh;
            y[p * m + i] = xh * gm + bt;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, xhat, inv_std))
}

pub(crate) struct NormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub(crate) fn instance_norm_backward<T: Scalar>(
    grad: &Tensor<T>,
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
) -> Result<NormGrads<T>> {
    let [_, c, h, w] = grad.dims4()?;
    let m = h * w;
    let mf = T::of(m as f64);
    let mut dx = vec![T::zero(); grad.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (p, g) in grad.data().chunks(m).enumerate() {
        let ch = p % c;
        let xh = &xhat[p * m..(p + 1) * m];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..m {
            sum_g = sum_g + g[i];
            sum_gx = sum_gx + g[i] * xh[i];
        }
        dgamma[ch] = dgamma[ch] + sum_gx;
        dbeta[ch] = dbeta[ch] + sum_g;
        // dxhat = g * gamma; dx = inv_std / m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
        let gm = gamma.data()[ch];
        let scale = inv_std[p] / mf;
        for i in 0..m {
            dx[p * m + i] = scale * gm * (mf * g[i] - sum_g - xh[i] * sum_gx);
        }
    }
    Ok(NormGrads {
        dx: Tensor::new(grad.shape().to_vec(), dx)?,
        dgamma: Tensor::new(vec![c], dgamma)?,
        dbeta: Tensor::new(vec![c], dbeta)?,
    })
}
