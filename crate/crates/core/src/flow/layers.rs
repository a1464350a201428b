//! Invertible layers. Every forward returns the transformed value together with
//! its log|det| contribution, either a scalar (same for every sample) or a
//! per-sample `[N]` vector.

use rand::Rng;

use crate::autodiff::{concat_channels, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{Conv2d, Module, Param};
use crate::tensor::{Scalar, Tensor};

/// `out[c] = scale[c]·h[c] + bias[c]`; logdet `H·W·Σ log|scale|`.
pub fn actnorm_forward<'t, T: Scalar>(
    h: Var<'t, T>,
    scale: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (_, c, hh, ww) = h.value().dims4()?;
    check_scale(&scale.value(), c)?;
    let s = scale.reshape(&[c, 1, 1])?;
    let b = bias.reshape(&[c, 1, 1])?;
    let out = h.mul(s)?.add(b)?;
    let logdet = scale.abs()?.log()?.sum()?.scale(T::lit((hh * ww) as f64))?;
    Ok((out, logdet))
}

pub fn actnorm_inverse<'t, T: Scalar>(
    y: Var<'t, T>,
    scale: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (_, c, _, _) = y.value().dims4()?;
    check_scale(&scale.value(), c)?;
    y.sub(bias.reshape(&[c, 1, 1])?)?.div(scale.reshape(&[c, 1, 1])?)
}

fn check_scale<T: Scalar>(scale: &Tensor<T>, c: usize) -> Result<()> {
    if scale.shape() != [c] {
        return Err(Error::dim(format!(
            "actnorm scale must have shape [{c}], got {:?}",
            scale.shape()
        )));
    }
    if let Some(i) = scale.data().iter().position(|v| *v == T::zero()) {
        return Err(Error::Singularity(format!("actnorm scale is zero in channel {i}")));
    }
    Ok(())
}

/// Per-site channel mixing `out[:, y, x] = W · h[:, y, x]`; logdet `H·W·log|det W|`.
pub fn inv1x1_forward<'t, T: Scalar>(h: Var<'t, T>, w: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (_, c, hh, ww) = h.value().dims4()?;
    if w.shape() != [c, c] {
        return Err(Error::dim(format!(
            "1x1 mixing matrix must be {c}x{c}, got {:?}",
            w.shape()
        )));
    }
    let logdet = w.log_abs_det()?.scale(T::lit((hh * ww) as f64))?;
    let out = h.conv2d(w.reshape(&[c, c, 1, 1])?, None)?;
    Ok((out, logdet))
}

pub fn inv1x1_inverse<'t, T: Scalar>(y: Var<'t, T>, w: &Tensor<T>) -> Result<Var<'t, T>> {
    let c = w.shape()[0];
    let inv = linalg::invert(w.data(), c)?;
    let k = y.tape().constant(Tensor::new(vec![c, c, 1, 1], inv)?)?;
    y.conv2d(k, None)
}

/// Passthrough/transformed channel counts `(⌈C/2⌉, ⌊C/2⌋)`.
pub fn coupling_split(c: usize) -> (usize, usize) {
    (c.div_ceil(2), c / 2)
}

/// Affine map of the transformed half given stabilized `s` and shift `t`:
/// `h₂ ⊙ exp(s) + t`, with logdet `Σ s` per sample.
pub fn affine_forward<'t, T: Scalar>(
    h2: Var<'t, T>,
    s: Var<'t, T>,
    t: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let y2 = h2.mul(s.exp()?)?.add(t)?;
    Ok((y2, s.sum_per_sample()?))
}

/// `(y₂ − t) ⊙ exp(−s)`.
pub fn affine_inverse<'t, T: Scalar>(y2: Var<'t, T>, s: Var<'t, T>, t: Var<'t, T>) -> Result<Var<'t, T>> {
    y2.sub(t)?.mul(s.neg()?.exp()?)
}

/// The per-coupling network computing `(s, t)` from the passthrough half:
/// conv k×k → ReLU → conv 1×1 → ReLU → conv k×k (zero-initialized), whose
/// `2·d2` output channels hold the raw scale then the shift.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingNet<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub conv3: Conv2d<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coupling<T> {
    pub d1: usize,
    pub d2: usize,
    pub net: CouplingNet<T>,
}

impl<T: Scalar> Coupling<T> {
    pub fn new<R: Rng>(name: &str, channels: usize, hidden: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let (d1, d2) = coupling_split(channels);
        if d1 == 0 || d2 == 0 {
            return Err(Error::config(format!(
                "affine coupling needs at least 2 channels, got {channels}"
            )));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::config(format!("coupling kernel must be odd, got {kernel}")));
        }
        Ok(Coupling {
            d1,
            d2,
            net: CouplingNet {
                conv1: Conv2d::new(&format!("{name}.conv1"), d1, hidden, kernel, 1.0, rng),
                conv2: Conv2d::new(&format!("{name}.conv2"), hidden, hidden, 1, 1.0, rng),
                conv3: Conv2d::zeros(&format!("{name}.conv3"), hidden, 2 * d2, kernel),
            },
        })
    }

    /// Stabilized scale `2·tanh(raw/2)` and shift from the passthrough half.
    pub fn scale_shift<'t>(&self, tape: &'t Tape<T>, h1: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let a = self.net.conv1.forward(tape, h1)?.relu()?;
        let b = self.net.conv2.forward(tape, a)?.relu()?;
        let o = self.net.conv3.forward(tape, b)?;
        let raw = o.slice_channels(0, self.d2)?;
        let t = o.slice_channels(self.d2, 2 * self.d2)?;
        let s = raw.scale(T::lit(0.5))?.tanh()?.scale(T::lit(2.0))?;
        Ok((s, t))
    }

    fn check(&self, h: &Var<'_, T>) -> Result<()> {
        let c = h.value().dims4()?.1;
        if c != self.d1 + self.d2 {
            return Err(Error::dim(format!(
                "coupling expects {} channels, got {c}",
                self.d1 + self.d2
            )));
        }
        Ok(())
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, h: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check(&h)?;
        let h1 = h.slice_channels(0, self.d1)?;
        let h2 = h.slice_channels(self.d1, self.d1 + self.d2)?;
        let (s, t) = self.scale_shift(tape, h1)?;
        let (y2, logdet) = affine_forward(h2, s, t)?;
        Ok((concat_channels(&[h1, y2])?, logdet))
    }

    pub fn inverse<'t>(&self, tape: &'t Tape<T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check(&y)?;
        let y1 = y.slice_channels(0, self.d1)?;
        let y2 = y.slice_channels(self.d1, self.d1 + self.d2)?;
        let (s, t) = self.scale_shift(tape, y1)?;
        concat_channels(&[y1, affine_inverse(y2, s, t)?])
    }

    pub fn cast<U: Scalar>(&self) -> Coupling<U> {
        Coupling {
            d1: self.d1,
            d2: self.d2,
            net: CouplingNet {
                conv1: self.net.conv1.cast(),
                conv2: self.net.conv2.cast(),
                conv3: self.net.conv3.cast(),
            },
        }
    }
}

impl<T: Scalar> Module<T> for Coupling<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.net.conv1.params();
        v.extend(self.net.conv2.params());
        v.extend(self.net.conv3.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.net.conv1.params_mut();
        v.extend(self.net.conv2.params_mut());
        v.extend(self.net.conv3.params_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActNorm<T> {
    pub scale: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> ActNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        ActNorm {
            scale: Param::new(format!("{name}.scale"), Tensor::ones(&[channels])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, h: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        actnorm_forward(h, self.scale.bind(tape)?, self.bias.bind(tape)?)
    }

    pub fn inverse<'t>(&self, tape: &'t Tape<T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        actnorm_inverse(y, self.scale.bind(tape)?, self.bias.bind(tape)?)
    }

    /// Sets scale and bias so `h` has per-channel mean 0 and variance 1 afterwards.
    pub fn data_init(&mut self, h: &Tensor<T>) -> Result<()> {
        let (n, c, hh, ww) = h.dims4()?;
        let plane = hh * ww;
        let count = (n * plane) as f64;
        let mut scale = Vec::with_capacity(c);
        let mut bias = Vec::with_capacity(c);
        for ch in 0..c {
            let vals = (0..n).flat_map(|b| {
                h.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                    .iter()
                    .map(|v| v.as_f64())
            });
            let mean = vals.clone().sum::<f64>() / count;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let s = 1.0 / (var.sqrt() + 1e-6);
            scale.push(T::lit(s));
            bias.push(T::lit(-mean * s));
        }
        self.scale.value = Tensor::from_vec(scale);
        self.bias.value = Tensor::from_vec(bias);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ActNorm<U> {
        ActNorm {
            scale: self.scale.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for ActNorm<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.scale, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.scale, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inv1x1<T> {
    pub weight: Param<T>,
}

impl<T: Scalar> Inv1x1<T> {
    /// Random rotation initialization.
    pub fn new<R: Rng>(name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let raw: Tensor<T> = crate::nn::normal_tensor(rng, &[channels, channels], 1.0);
        let q = linalg::orthonormalize(raw.data(), channels)?;
        Ok(Inv1x1 {
            weight: Param::new(format!("{name}.weight"), Tensor::new(vec![channels, channels], q)?),
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, h: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        inv1x1_forward(h, self.weight.bind(tape)?)
    }

    pub fn inverse<'t>(&self, y: Var<'t, T>) -> Result<Var<'t, T>> {
        inv1x1_inverse(y, &self.weight.value)
    }

    pub fn cast<U: Scalar>(&self) -> Inv1x1<U> {
        Inv1x1 {
            weight: self.weight.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for Inv1x1<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight]
    }
}

/// Space-to-channel reshape of a single tensor; see [`Var::squeeze2x2`].
pub fn squeeze<T: Scalar>(h: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let v = tape.constant(batched(h)?)?.squeeze2x2()?.tensor();
    unbatch_like(v, h)
}

pub fn unsqueeze<T: Scalar>(h: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let v = tape.constant(batched(h)?)?.unsqueeze2x2()?.tensor();
    unbatch_like(v, h)
}

/// Splits channels into the half that stays in the flow and the half that exits.
pub fn split<T: Scalar>(h: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = Tape::no_grad();
    let (keep, out) = split_var(tape.constant(batched(h)?)?)?;
    Ok((unbatch_like(keep.tensor(), h)?, unbatch_like(out.tensor(), h)?))
}

pub fn unsplit<T: Scalar>(keep: &Tensor<T>, out: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let v = concat_channels(&[tape.constant(batched(keep)?)?, tape.constant(batched(out)?)?])?.tensor();
    unbatch_like(v, keep)
}

pub(crate) fn split_var<T: Scalar>(h: Var<'_, T>) -> Result<(Var<'_, T>, Var<'_, T>)> {
    let c = h.value().dims4()?.1;
    if c % 2 != 0 {
        return Err(Error::config(format!("split needs an even channel count, got {c}")));
    }
    Ok((h.slice_channels(0, c / 2)?, h.slice_channels(c / 2, c)?))
}

/// Promotes `[C, H, W]` to `[1, C, H, W]`; 4-D input passes through.
pub(crate) fn batched<T: Scalar>(h: &Tensor<T>) -> Result<Tensor<T>> {
    match h.shape() {
        [_, _, _] => {
            let mut s = vec![1];
            s.extend_from_slice(h.shape());
            h.reshape(&s)
        }
        [_, _, _, _] => Ok(h.clone()),
        s => Err(Error::dim(format!("expected [C,H,W] or [N,C,H,W], got {s:?}"))),
    }
}

fn unbatch_like<T: Scalar>(v: Tensor<T>, like: &Tensor<T>) -> Result<Tensor<T>> {
    if like.rank() == 3 {
        let s = v.shape()[1..].to_vec();
        v.reshape(&s)
    } else {
        Ok(v)
    }
}
