//! Dense row-major n-dimensional arrays and the raw numeric kernels behind
//! the differentiable ops in [`crate::autodiff`].
//!
//! A [`Tensor`] is a plain value: it owns a shape and a contiguous buffer and
//! never participates in gradient tracking by itself. Gradient bookkeeping
//! (the `requires_grad` flag and the accumulated gradient buffer) lives on the
//! tape node that wraps the tensor.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {numel} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.numel() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.zip_map(other, |a, b| a - b)?.max_abs())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Dimensions of a 4-D `[N, C, H, W]` tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(format!(
                "expected a [N, C, H, W] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Selects sample `i` of a batched tensor, keeping a leading batch dim of 1.
    pub fn sample(&self, i: usize) -> Result<Self> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::dim("cannot index a scalar"))?;
        if i >= n {
            return Err(Error::dim(format!("sample {i} out of range for batch of {n}")));
        }
        let per = self.numel() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Tensor {
            shape,
            data: self.data[i * per..(i + 1) * per].to_vec(),
        })
    }

    /// Gathers the listed samples along the leading axis.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::dim("cannot index a scalar"))?;
        let per = self.numel() / n;
        let mut data = Vec::with_capacity(per * idx.len());
        for &i in idx {
            if i >= n {
                return Err(Error::dim(format!("sample {i} out of range for batch of {n}")));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::new(shape, data)
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("cannot stack an empty list"))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::dim(format!(
                    "cannot stack shape {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Self::new(shape, data)
    }
}

/// Maps every flat index of `out_shape` to the flat index of a tensor of
/// shape `b_shape` broadcast against it (trailing-aligned, numpy style).
/// `b_shape` may not have a higher rank than `out_shape`.
pub(crate) fn broadcast_index(out_shape: &[usize], b_shape: &[usize]) -> Result<Option<Vec<usize>>> {
    if out_shape == b_shape {
        return Ok(None);
    }
    if b_shape.len() > out_shape.len() {
        return Err(Error::dim(format!(
            "cannot broadcast {b_shape:?} to lower-rank {out_shape:?}"
        )));
    }
    let offset = out_shape.len() - b_shape.len();
    let mut strides = vec![0usize; out_shape.len()];
    let mut acc = 1;
    for (j, &bd) in b_shape.iter().enumerate().rev() {
        let od = out_shape[j + offset];
        if bd == od {
            strides[j + offset] = acc;
        } else if bd != 1 {
            return Err(Error::dim(format!(
                "cannot broadcast {b_shape:?} to {out_shape:?}"
            )));
        }
        acc *= bd;
    }
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; out_shape.len()];
    let mut cur = 0usize;
    for _ in 0..numel {
        map.push(cur);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            cur -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Ok(Some(map))
}

/// `c[m×n] = a[m×k] · b[k×n]`, row-major.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Geometry of a stride-1, same-padded 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize]) -> Result<Self> {
        let (n, cin, h, w) = match input[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::dim(format!("conv2d input must be [N,C,H,W], got {input:?}"))),
        };
        let (cout, kcin, kh, kw) = match kernel[..] {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => {
                return Err(Error::dim(format!(
                    "conv2d kernel must be [Cout,Cin,kh,kw], got {kernel:?}"
                )))
            }
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!(
                "conv2d kernel size must be odd for same padding, got {kh}x{kw}"
            )));
        }
        if kcin != cin {
            return Err(Error::dim(format!(
                "conv2d kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        Ok(ConvGeom { n, cin, cout, h, w, kh, kw })
    }

    /// Output index ranges `[lo, hi)` along one axis for kernel tap `k` so that
    /// `out + k - pad` stays inside `[0, len)`.
    #[inline]
    fn valid(len: usize, k: usize, pad: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (len + pad).saturating_sub(k).min(len);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plane = g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    for n in 0..g.n {
        for co in 0..g.cout {
            let o = &mut out[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.cin {
                let inp = &input[(n * g.cin + ci) * plane..(n * g.cin + ci + 1) * plane];
                for ky in 0..g.kh {
                    let (y0, y1) = ConvGeom::valid(g.h, ky, ph);
                    for kx in 0..g.kw {
                        let wv = kernel[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (x0, x1) = ConvGeom::valid(g.w, kx, pw);
                        for y in y0..y1 {
                            let yy = y + ky - ph;
                            let orow = &mut o[y * g.w + x0..y * g.w + x1];
                            let irow = &inp[yy * g.w + x0 + kx - pw..yy * g.w + x1 + kx - pw];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov = *ov + wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_input<T: Scalar>(g: ConvGeom, gout: &[T], kernel: &[T]) -> Vec<T> {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plane = g.h * g.w;
    let mut gin = vec![T::zero(); g.n * g.cin * plane];
    for n in 0..g.n {
        for ci in 0..g.cin {
            let gi = &mut gin[(n * g.cin + ci) * plane..(n * g.cin + ci + 1) * plane];
            for co in 0..g.cout {
                let go = &gout[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
                for ky in 0..g.kh {
                    let (y0, y1) = ConvGeom::valid(g.h, ky, ph);
                    for kx in 0..g.kw {
                        let wv = kernel[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (x0, x1) = ConvGeom::valid(g.w, kx, pw);
                        for y in y0..y1 {
                            let yy = y + ky - ph;
                            let grow = &go[y * g.w + x0..y * g.w + x1];
                            let irow = &mut gi[yy * g.w + x0 + kx - pw..yy * g.w + x1 + kx - pw];
                            for (iv, &gv) in irow.iter_mut().zip(grow) {
                                *iv = *iv + wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

pub(crate) fn conv2d_grad_kernel<T: Scalar>(g: ConvGeom, gout: &[T], input: &[T]) -> Vec<T> {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plane = g.h * g.w;
    let mut gk = vec![T::zero(); g.cout * g.cin * g.kh * g.kw];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for ky in 0..g.kh {
                let (y0, y1) = ConvGeom::valid(g.h, ky, ph);
                for kx in 0..g.kw {
                    let (x0, x1) = ConvGeom::valid(g.w, kx, pw);
                    let mut acc = T::zero();
                    for n in 0..g.n {
                        let go = &gout[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
                        let inp = &input[(n * g.cin + ci) * plane..(n * g.cin + ci + 1) * plane];
                        for y in y0..y1 {
                            let yy = y + ky - ph;
                            let grow = &go[y * g.w + x0..y * g.w + x1];
                            let irow = &inp[yy * g.w + x0 + kx - pw..yy * g.w + x1 + kx - pw];
                            for (&gv, &iv) in grow.iter().zip(irow) {
                                acc = acc + gv * iv;
                            }
                        }
                    }
                    gk[((co * g.cin + ci) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }
    gk
}

pub(crate) fn conv2d_grad_bias<T: Scalar>(g: ConvGeom, gout: &[T]) -> Vec<T> {
    let plane = g.h * g.w;
    let mut gb = vec![T::zero(); g.cout];
    for n in 0..g.n {
        for (co, b) in gb.iter_mut().enumerate() {
            let go = &gout[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
            *b = *b + go.iter().copied().sum::<T>();
        }
    }
    gb
}

/// Space-to-channel: `[N,C,H,W] -> [N,4C,H/2,W/2]`. Output channel `4c + k`
/// holds block position `k` of source channel `c`, in the order top-left,
/// top-right, bottom-left, bottom-right.
pub(crate) fn squeeze_raw<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let k = (y % 2) * 2 + (xx % 2);
                    let src = ((b * c + ch) * h + y) * w + xx;
                    let dst = ((b * 4 * c + 4 * ch + k) * h2 + y / 2) * w2 + xx / 2;
                    out[dst] = x[src];
                }
            }
        }
    }
    out
}

/// Inverse of [`squeeze_raw`]; `c` is the channel count of the squeezed tensor.
pub(crate) fn unsqueeze_raw<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let c0 = c / 4;
    let (h0, w0) = (h * 2, w * 2);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c0 {
            for y in 0..h0 {
                for xx in 0..w0 {
                    let k = (y % 2) * 2 + (xx % 2);
                    let dst = ((b * c0 + ch) * h0 + y) * w0 + xx;
                    let src = ((b * c + 4 * ch + k) * h + y / 2) * w + xx / 2;
                    out[dst] = x[src];
                }
            }
        }
    }
    out
}

/// Copies channels `[start, end)` of an `[N,C,...]` buffer whose per-channel plane has `plane` elements.
pub(crate) fn slice_channels_raw<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    start: usize,
    end: usize,
) -> Vec<T> {
    let width = end - start;
    let mut out = Vec::with_capacity(n * width * plane);
    for b in 0..n {
        out.extend_from_slice(&x[(b * c + start) * plane..(b * c + end) * plane]);
    }
    out
}
