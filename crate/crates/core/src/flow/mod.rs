//! Multi-scale invertible flows built from actnorm, channel permutation or
//! 1×1 mixing, and affine coupling, with space-to-channel squeezes and
//! per-level channel splits.
//!
//! A flow maps `x` to a [`LatentCode`]: the parts split out after each level
//! except the last, followed by the top-level tensor. Flattening the parts
//! and the top in that order gives `z`.
//!
//! Conventions:
//! - a flow step is actnorm → channel reversal (or 1×1 mixing) → coupling;
//! - a coupling passes the first `⌈C/2⌉` channels through and transforms the rest;
//! - a split keeps the first half of the channels in the flow;
//! - squeeze orders each 2×2 block as top-left, top-right, bottom-left, bottom-right.

pub mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use layers::{
    actnorm_forward, actnorm_inverse, affine_forward, affine_inverse, coupling_split, inv1x1_forward,
    inv1x1_inverse, split, squeeze, unsplit, unsqueeze, ActNorm, Coupling, CouplingNet, Inv1x1,
};

use crate::autodiff::{concat_channels, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::tensor::{Scalar, Tensor};
use layers::{batched, split_var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Input `[C, H, W]`.
    pub input: [usize; 3],
    pub levels: usize,
    /// Flow steps per level.
    pub depth: usize,
    /// Hidden channels in each coupling network.
    pub hidden: usize,
    /// Spatial kernel of the coupling network's first and last convolution.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Use learned 1×1 mixing instead of the fixed channel reversal.
    #[serde(default)]
    pub inv1x1: bool,
    /// Squeeze 2×2 blocks into channels at the start of every level.
    #[serde(default = "default_true")]
    pub squeeze: bool,
    /// Split half the channels out after every level but the last.
    #[serde(default = "default_true")]
    pub split: bool,
}

fn default_kernel() -> usize {
    3
}

fn default_true() -> bool {
    true
}

impl FlowConfig {
    pub fn new(input: [usize; 3], levels: usize, depth: usize) -> Self {
        FlowConfig {
            input,
            levels,
            depth,
            hidden: 16,
            kernel: 3,
            inv1x1: false,
            squeeze: true,
            split: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("input shape {:?} has a zero dimension", self.input)));
        }
        if self.levels == 0 {
            return Err(Error::config("a flow needs at least one level"));
        }
        if self.hidden == 0 {
            return Err(Error::config("coupling hidden width must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("coupling kernel must be odd, got {}", self.kernel)));
        }
        if self.squeeze {
            let f = 1usize
                .checked_shl(self.levels as u32)
                .filter(|f| *f <= h.max(w))
                .ok_or_else(|| Error::config(format!("{} levels is too deep for {h}x{w}", self.levels)))?;
            if h % f != 0 || w % f != 0 {
                return Err(Error::config(format!(
                    "image size {h}x{w} must be divisible by 2^levels = {f}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowLayer<T> {
    ActNorm(ActNorm<T>),
    /// Fixed channel reversal.
    Reverse,
    Inv1x1(Inv1x1<T>),
    Coupling(Coupling<T>),
    Squeeze,
    Split,
}

impl<T: Scalar> FlowLayer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            FlowLayer::ActNorm(_) => "actnorm",
            FlowLayer::Reverse => "permutation",
            FlowLayer::Inv1x1(_) => "inv1x1",
            FlowLayer::Coupling(_) => "affine_coupling",
            FlowLayer::Squeeze => "squeeze",
            FlowLayer::Split => "split",
        }
    }

    /// Applies a non-split layer. Structural layers report no logdet.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, h: Var<'t, T>) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
        Ok(match self {
            FlowLayer::ActNorm(l) => {
                let (y, ld) = l.forward(tape, h)?;
                (y, Some(ld))
            }
            FlowLayer::Inv1x1(l) => {
                let (y, ld) = l.forward(tape, h)?;
                (y, Some(ld))
            }
            FlowLayer::Coupling(l) => {
                let (y, ld) = l.forward(tape, h)?;
                (y, Some(ld))
            }
            FlowLayer::Reverse => (h.reverse_channels()?, None),
            FlowLayer::Squeeze => (h.squeeze2x2()?, None),
            FlowLayer::Split => return Err(Error::contract("split is handled by the flow")),
        })
    }

    pub fn inverse<'t>(&self, tape: &'t Tape<T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            FlowLayer::ActNorm(l) => l.inverse(tape, y),
            FlowLayer::Inv1x1(l) => l.inverse(y),
            FlowLayer::Coupling(l) => l.inverse(tape, y),
            FlowLayer::Reverse => y.reverse_channels(),
            FlowLayer::Squeeze => y.unsqueeze2x2(),
            FlowLayer::Split => Err(Error::contract("unsplit is handled by the flow")),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FlowLayer<U> {
        match self {
            FlowLayer::ActNorm(l) => FlowLayer::ActNorm(l.cast()),
            FlowLayer::Inv1x1(l) => FlowLayer::Inv1x1(l.cast()),
            FlowLayer::Coupling(l) => FlowLayer::Coupling(l.cast()),
            FlowLayer::Reverse => FlowLayer::Reverse,
            FlowLayer::Squeeze => FlowLayer::Squeeze,
            FlowLayer::Split => FlowLayer::Split,
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        match self {
            FlowLayer::ActNorm(l) => l.params(),
            FlowLayer::Inv1x1(l) => l.params(),
            FlowLayer::Coupling(l) => l.params(),
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            FlowLayer::ActNorm(l) => l.params_mut(),
            FlowLayer::Inv1x1(l) => l.params_mut(),
            FlowLayer::Coupling(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }
}

/// Split-out parts in exit order, then the top-level tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<V> {
    pub parts: Vec<V>,
    pub top: V,
}

impl<V> LatentCode<V> {
    pub fn num_levels(&self) -> usize {
        self.parts.len() + 1
    }

    /// Code of level `i`: a split part for `i < levels − 1`, the top otherwise.
    pub fn level(&self, i: usize) -> &V {
        if i < self.parts.len() {
            &self.parts[i]
        } else {
            &self.top
        }
    }

    pub fn levels(&self) -> impl Iterator<Item = &V> {
        self.parts.iter().chain(std::iter::once(&self.top))
    }

    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> LatentCode<U> {
        LatentCode {
            parts: self.parts.iter().map(&mut f).collect(),
            top: f(&self.top),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&V) -> Result<U>) -> Result<LatentCode<U>> {
        Ok(LatentCode {
            parts: self.parts.iter().map(&mut f).collect::<Result<_>>()?,
            top: f(&self.top)?,
        })
    }
}

impl<T: Scalar> LatentCode<Tensor<T>> {
    /// Recorded per-level shapes, batch dim included.
    pub fn level_shapes(&self) -> Vec<Vec<usize>> {
        self.levels().map(|t| t.shape().to_vec()).collect()
    }

    pub fn element_count(&self) -> usize {
        self.levels().map(|t| t.numel()).sum()
    }

    /// `z` as `[N, D]`: each sample's parts then top, concatenated in order.
    pub fn flatten(&self) -> Result<Tensor<T>> {
        let n = self.top.shape()[0];
        let per: Vec<usize> = self.levels().map(|t| t.numel() / n).collect();
        let d: usize = per.iter().sum();
        let mut data = Vec::with_capacity(n * d);
        for b in 0..n {
            for (t, &k) in self.levels().zip(&per) {
                data.extend_from_slice(&t.data()[b * k..(b + 1) * k]);
            }
        }
        Tensor::new(vec![n, d], data)
    }

    /// Inverse of [`LatentCode::flatten`] given the level shapes.
    pub fn unflatten(z: &Tensor<T>, level_shapes: &[Vec<usize>]) -> Result<Self> {
        let (n, d) = match z.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::dim(format!("flat code must be [N, D], got {s:?}"))),
        };
        let per: Vec<usize> = level_shapes.iter().map(|s| s[1..].iter().product()).collect();
        if per.iter().sum::<usize>() != d || level_shapes.is_empty() {
            return Err(Error::dim(format!("flat code width {d} does not match level shapes")));
        }
        let mut bufs: Vec<Vec<T>> = per.iter().map(|&k| Vec::with_capacity(n * k)).collect();
        for b in 0..n {
            let mut off = b * d;
            for (buf, &k) in bufs.iter_mut().zip(&per) {
                buf.extend_from_slice(&z.data()[off..off + k]);
                off += k;
            }
        }
        let mut tensors = bufs
            .into_iter()
            .zip(level_shapes)
            .map(|(buf, s)| {
                let mut s = s.clone();
                s[0] = n;
                Tensor::new(s, buf)
            })
            .collect::<Result<Vec<_>>>()?;
        let top = tensors.pop().expect("non-empty");
        Ok(LatentCode { parts: tensors, top })
    }
}

impl<'t, T: Scalar> LatentCode<Var<'t, T>> {
    pub fn values(&self) -> LatentCode<Tensor<T>> {
        self.map(|v| v.tensor())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Flow<T> {
    input: [usize; 3],
    layers: Vec<FlowLayer<T>>,
    /// Per-sample input shape of every layer.
    layer_inputs: Vec<[usize; 3]>,
    /// Per-sample shape of each level's code (parts, then top).
    code_shapes: Vec<[usize; 3]>,
}

impl<T: Scalar> Flow<T> {
    /// Builds the multi-scale architecture described by `cfg`; parameter names start with `prefix`.
    pub fn new<R: Rng>(prefix: &str, cfg: &FlowConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut c = cfg.input[0];
        let mut layers = Vec::new();
        for level in 0..cfg.levels {
            if cfg.squeeze {
                layers.push(FlowLayer::Squeeze);
                c *= 4;
            }
            for step in 0..cfg.depth {
                let name = format!("{prefix}.l{level}.s{step}");
                layers.push(FlowLayer::ActNorm(ActNorm::new(&format!("{name}.actnorm"), c)));
                if cfg.inv1x1 {
                    layers.push(FlowLayer::Inv1x1(Inv1x1::new(&format!("{name}.inv1x1"), c, rng)?));
                } else {
                    layers.push(FlowLayer::Reverse);
                }
                layers.push(FlowLayer::Coupling(Coupling::new(
                    &format!("{name}.coupling"),
                    c,
                    cfg.hidden,
                    cfg.kernel,
                    rng,
                )?));
            }
            if cfg.split && level + 1 < cfg.levels {
                if !c.is_multiple_of(2) {
                    return Err(Error::config(format!(
                        "level {level} has {c} channels; a split needs an even count"
                    )));
                }
                layers.push(FlowLayer::Split);
                c /= 2;
            }
        }
        Self::from_layers(cfg.input, layers)
    }

    /// Wraps an explicit layer list, checking that shapes chain.
    pub fn from_layers(input: [usize; 3], layers: Vec<FlowLayer<T>>) -> Result<Self> {
        let [mut c, mut h, mut w] = input;
        let mut layer_inputs = Vec::with_capacity(layers.len());
        let mut code_shapes = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            layer_inputs.push([c, h, w]);
            let ctx = |e: Error| e.context(format!("layer {i} ({})", layer.kind()));
            match layer {
                FlowLayer::Squeeze => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(ctx(Error::dim(format!("cannot squeeze {h}x{w}"))));
                    }
                    c *= 4;
                    h /= 2;
                    w /= 2;
                }
                FlowLayer::Split => {
                    if c % 2 != 0 {
                        return Err(ctx(Error::config(format!("cannot split {c} channels"))));
                    }
                    c /= 2;
                    code_shapes.push([c, h, w]);
                }
                FlowLayer::ActNorm(l) if l.scale.value.shape() != [c] => {
                    return Err(ctx(Error::dim(format!(
                        "actnorm has {:?} channels, input has {c}",
                        l.scale.value.shape()
                    ))));
                }
                FlowLayer::Inv1x1(l) if l.weight.value.shape() != [c, c] => {
                    return Err(ctx(Error::dim(format!("1x1 mixing does not match {c} channels"))));
                }
                FlowLayer::Coupling(l) if l.d1 + l.d2 != c => {
                    return Err(ctx(Error::dim(format!(
                        "coupling expects {} channels, input has {c}",
                        l.d1 + l.d2
                    ))));
                }
                _ => {}
            }
        }
        code_shapes.push([c, h, w]);
        Ok(Flow {
            input,
            layers,
            layer_inputs,
            code_shapes,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn layers(&self) -> &[FlowLayer<T>] {
        &self.layers
    }

    /// Per-sample shapes of the level codes (parts, then top).
    pub fn code_shapes(&self) -> &[[usize; 3]] {
        &self.code_shapes
    }

    pub fn num_levels(&self) -> usize {
        self.code_shapes.len()
    }

    /// Appends a layer after the top level; the new layer sees the top code.
    pub fn push_layer(&mut self, layer: FlowLayer<T>) -> Result<()> {
        let mut layers = std::mem::take(&mut self.layers);
        layers.push(layer);
        *self = Self::from_layers(self.input, layers)?;
        Ok(())
    }

    /// Per-sample element count fed into coupling layers in one forward pass.
    pub fn coupling_input_elements(&self) -> usize {
        self.layers
            .iter()
            .zip(&self.layer_inputs)
            .filter(|(l, _)| matches!(l, FlowLayer::Coupling(_)))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.input {
            return Err(Error::dim(format!(
                "flow input: expected per-sample shape {:?}, got {:?}",
                self.input,
                [c, h, w]
            )));
        }
        Ok(())
    }

    /// `x ↦ (z, Σ log|det|)` with a per-sample `[N]` logdet.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<(LatentCode<Var<'t, T>>, Var<'t, T>)> {
        self.check_input(&x.value())?;
        let n = x.shape()[0];
        let mut logdet = tape.constant(Tensor::zeros(&[n]))?;
        let mut parts = Vec::new();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let ctx = |e: Error| e.context(format!("layer {i} ({})", layer.kind()));
            if let FlowLayer::Split = layer {
                let (keep, out) = split_var(h).map_err(ctx)?;
                parts.push(out);
                h = keep;
                continue;
            }
            let (y, ld) = layer.forward(tape, h).map_err(ctx)?;
            if let Some(ld) = ld {
                logdet = logdet.add(ld).map_err(ctx)?;
            }
            h = y;
        }
        Ok((LatentCode { parts, top: h }, logdet))
    }

    pub fn inverse<'t>(&self, tape: &'t Tape<T>, code: &LatentCode<Var<'t, T>>) -> Result<Var<'t, T>> {
        let mut parts = code.parts.clone();
        let mut h = code.top;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let ctx = |e: Error| e.context(format!("layer {i} ({})", layer.kind()));
            h = match layer {
                FlowLayer::Split => {
                    let out = parts
                        .pop()
                        .ok_or_else(|| ctx(Error::dim("latent code has too few split parts")))?;
                    concat_channels(&[h, out]).map_err(ctx)?
                }
                _ => layer.inverse(tape, h).map_err(ctx)?,
            };
        }
        if !parts.is_empty() {
            return Err(Error::dim("latent code has more split parts than the flow"));
        }
        Ok(h)
    }

    /// Gradient-free forward on a `[C,H,W]` or `[N,C,H,W]` tensor.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(LatentCode<Tensor<T>>, Tensor<T>)> {
        let tape = Tape::no_grad();
        let (code, logdet) = self.forward(&tape, tape.constant(batched(x)?)?)?;
        Ok((code.values(), logdet.tensor()))
    }

    /// Gradient-free inverse; returns `[N,C,H,W]`.
    pub fn decode(&self, code: &LatentCode<Tensor<T>>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let vars = code.try_map(|t| tape.constant(t.clone()))?;
        Ok(self.inverse(&tape, &vars)?.tensor())
    }

    /// Data-dependent actnorm initialization from a batch: every actnorm is
    /// set so that its output has per-channel mean 0 and variance 1.
    pub fn data_init(&mut self, x: &Tensor<T>) -> Result<()> {
        let x = batched(x)?;
        self.check_input(&x)?;
        let mut h = x;
        for i in 0..self.layers.len() {
            if let FlowLayer::ActNorm(a) = &mut self.layers[i] {
                a.data_init(&h)?;
            }
            let tape = Tape::no_grad();
            let v = tape.constant(h)?;
            h = match &self.layers[i] {
                FlowLayer::Split => split_var(v)?.0.tensor(),
                layer => layer.forward(&tape, v)?.0.tensor(),
            };
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Flow<U> {
        Flow {
            input: self.input,
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            layer_inputs: self.layer_inputs.clone(),
            code_shapes: self.code_shapes.clone(),
        }
    }
}

impl<T: Scalar> Module<T> for Flow<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
