//! The paired-flow conditional model.
//!
//! Two flows encode the source image `x_m` and the target image `x_p` into
//! multi-level codes `z_m` and `z_p`. For every level `i`, a one-layer
//! relation network maps level `i` of `z_m` to the mean and log-scale of a
//! diagonal Gaussian over level `i` of `z_p`. The conditional log-likelihood
//!
//! ```text
//! log p(x_p | x_m) = log N(z_p; μ(z_m), σ(z_m)) + log|det ∂z_p/∂x_p|
//! ```
//!
//! contains no source-side Jacobian term: the joint Jacobian of
//! `(x_p, x_m) ↦ (z_p, z_m)` is block diagonal, so the source log-det cancels
//! between the joint and the marginal. The training objective adds
//! `λ · log p(x_m)` with a standard normal prior on `z_m`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{concat_channels, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::{Flow, LatentCode};
use crate::nn::{Conv2d, Module, Param};
use crate::side::{build_discriminators, Discriminator};
use crate::tensor::{Scalar, Tensor};

/// `½·ln(2π)`.
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

/// `log σ` is clamped to `[−LOG_SIGMA_BOUND, LOG_SIGMA_BOUND]`.
pub const LOG_SIGMA_BOUND: f64 = 7.0;

/// Per-sample `Σ [−½ln(2π) − log σ − (z−μ)²/(2σ²)]` over all non-batch elements.
pub fn gaussian_logpdf<'t, T: Scalar>(
    z: Var<'t, T>,
    mu: Var<'t, T>,
    log_sigma: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if z.shape() != mu.shape() || z.shape() != log_sigma.shape() {
        return Err(Error::dim(format!(
            "gaussian_logpdf shapes differ: z {:?}, mu {:?}, log_sigma {:?}",
            z.shape(),
            mu.shape(),
            log_sigma.shape()
        )));
    }
    let inv_var = log_sigma.scale(T::lit(-2.0))?.exp()?;
    let quad = z.sub(mu)?.square()?.mul(inv_var)?.scale(T::lit(0.5))?;
    log_sigma
        .add(quad)?
        .neg()?
        .add_scalar(T::lit(-HALF_LOG_2PI))?
        .sum_per_sample()
}

/// Per-sample log-density under `N(0, I)`.
pub fn standard_normal_logpdf<'t, T: Scalar>(z: Var<'t, T>) -> Result<Var<'t, T>> {
    z.square()?
        .scale(T::lit(-0.5))?
        .add_scalar(T::lit(-HALF_LOG_2PI))?
        .sum_per_sample()
}

/// `−ll / (n · ln 2)`.
pub fn bits_per_dim(ll: f64, num_elements: usize) -> Result<f64> {
    if num_elements == 0 {
        return Err(Error::contract("bits_per_dim needs at least one element"));
    }
    Ok(-ll / (num_elements as f64 * std::f64::consts::LN_2))
}

/// Maps one level of the source code (plus the side channels at the top) to
/// `(μ, log σ)` for the matching target level.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationNet<T> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> RelationNet<T> {
    /// Zero-initialized, so every level starts at `μ = 0, log σ = 0`.
    pub fn new(name: &str, in_channels: usize, target_channels: usize, kernel: usize) -> Self {
        RelationNet {
            conv: Conv2d::zeros(name, in_channels, 2 * target_channels, kernel),
        }
    }

    pub fn target_channels(&self) -> usize {
        self.conv.out_channels() / 2
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, input: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let out = self.conv.forward(tape, input)?;
        let c = self.target_channels();
        let mu = out.slice_channels(0, c)?;
        let b = T::lit(LOG_SIGMA_BOUND);
        let log_sigma = out.slice_channels(c, 2 * c)?.clamp(-b, b)?;
        Ok((mu, log_sigma))
    }

    pub fn cast<U: Scalar>(&self) -> RelationNet<U> {
        RelationNet { conv: self.conv.cast() }
    }
}

/// Per-level parameters of `p(z_p | z_m)`.
#[derive(Clone, Debug)]
pub struct ConditionalGaussian<V> {
    pub mu: Vec<V>,
    pub log_sigma: Vec<V>,
}

/// Everything computed on the way to `log p(x_p | x_m)`; all per-sample terms are `[N]`.
pub struct CondLik<'t, T: Scalar> {
    /// `log p(z_p | z_m) + log|det ∂z_p/∂x_p|`.
    pub cond_ll: Var<'t, T>,
    pub log_p_zp: Var<'t, T>,
    pub logdet_p: Var<'t, T>,
    pub logdet_m: Var<'t, T>,
    pub z_m: LatentCode<Var<'t, T>>,
    pub z_p: LatentCode<Var<'t, T>>,
    pub gaussian: ConditionalGaussian<Var<'t, T>>,
}

pub struct Objective<'t, T: Scalar> {
    /// Batch-mean loss to minimize.
    pub loss: Var<'t, T>,
    /// Per-sample conditional log-likelihood.
    pub cond_ll: Var<'t, T>,
    /// Per-sample `log p(z_m) + log|det ∂z_m/∂x_m|`.
    pub marginal_m: Var<'t, T>,
    /// Unweighted batch-mean discriminator losses, in discriminator order.
    pub disc_losses: Vec<Var<'t, T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualGlowModel<T> {
    pub config: ModelConfig,
    pub flow_m: Flow<T>,
    pub flow_p: Flow<T>,
    pub relations: Vec<RelationNet<T>>,
    pub discriminators: Vec<Discriminator<T>>,
    /// Whether actnorm data-dependent initialization has run.
    pub initialized: bool,
}

impl<T: Scalar> DualGlowModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flow_m = Flow::new("flow_m", &config.flow, &mut rng)?;
        let flow_p = Flow::new("flow_p", &config.flow, &mut rng)?;
        let side = config.side.width();
        let levels = flow_m.num_levels();
        let relations = (0..levels)
            .map(|i| {
                let cm = flow_m.code_shapes()[i][0];
                let cp = flow_p.code_shapes()[i][0];
                let extra = if i + 1 == levels { side } else { 0 };
                RelationNet::new(&format!("relation.{i}"), cm + extra, cp, config.relation_kernel)
            })
            .collect();
        let discriminators = build_discriminators(&config.side, &flow_m, &flow_p, &mut rng);
        Ok(DualGlowModel {
            config,
            flow_m,
            flow_p,
            relations,
            discriminators,
            initialized: false,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.relations.len()
    }

    /// Elements per target image.
    pub fn dims(&self) -> usize {
        self.config.flow.input.iter().product()
    }

    pub fn lambda(&self) -> f64 {
        self.config.lambda
    }

    pub(crate) fn check_side(&self, c: Option<&Tensor<T>>, n: usize) -> Result<()> {
        let width = self.config.side.width();
        match (width, c) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(Error::contract("side label given to a model without side conditioning")),
            (_, None) => Err(Error::contract("side label missing for a side-conditioned model")),
            (w, Some(c)) if c.shape() != [n, w] => Err(Error::contract(format!(
                "side labels must have shape [{n}, {w}], got {:?}",
                c.shape()
            ))),
            _ => Ok(()),
        }
    }

    /// `(μ, log σ)` for every level of `z_p`, given `z_m` and optional side labels `[N, K]`.
    pub fn conditional_gaussian<'t>(
        &self,
        tape: &'t Tape<T>,
        z_m: &LatentCode<Var<'t, T>>,
        c: Option<&Tensor<T>>,
    ) -> Result<ConditionalGaussian<Var<'t, T>>> {
        let levels = self.num_levels();
        if z_m.num_levels() != levels {
            return Err(Error::dim(format!(
                "source code has {} levels, model has {levels}",
                z_m.num_levels()
            )));
        }
        let mut mu = Vec::with_capacity(levels);
        let mut log_sigma = Vec::with_capacity(levels);
        for (i, rel) in self.relations.iter().enumerate() {
            let mut input = *z_m.level(i);
            if i + 1 == levels {
                if let Some(c) = c {
                    let (n, _, h, w) = input.value().dims4()?;
                    input = concat_channels(&[input, tape.constant(side_planes(c, n, h, w)?)?])?;
                }
            }
            let (m, s) = rel
                .forward(tape, input)
                .map_err(|e| e.context(format!("relation level {i}")))?;
            mu.push(m);
            log_sigma.push(s);
        }
        Ok(ConditionalGaussian { mu, log_sigma })
    }

    /// `log p(x_p | x_m)` for a batch, with its intermediate terms.
    pub fn conditional_loglik<'t>(
        &self,
        tape: &'t Tape<T>,
        x_p: Var<'t, T>,
        x_m: Var<'t, T>,
        c: Option<&Tensor<T>>,
    ) -> Result<CondLik<'t, T>> {
        if x_p.shape() != x_m.shape() {
            return Err(Error::dim(format!(
                "source {:?} and target {:?} shapes differ",
                x_m.shape(),
                x_p.shape()
            )));
        }
        let n = x_p.value().dims4()?.0;
        self.check_side(c, n)?;
        let (z_m, logdet_m) = self.flow_m.forward(tape, x_m).map_err(|e| e.context("flow_m"))?;
        let (z_p, logdet_p) = self.flow_p.forward(tape, x_p).map_err(|e| e.context("flow_p"))?;
        let gaussian = self.conditional_gaussian(tape, &z_m, c)?;
        let mut log_p_zp: Option<Var<'t, T>> = None;
        for (i, z) in z_p.levels().enumerate() {
            let lp = gaussian_logpdf(*z, gaussian.mu[i], gaussian.log_sigma[i])
                .map_err(|e| e.context(format!("level {i} density")))?;
            log_p_zp = Some(match log_p_zp {
                Some(acc) => acc.add(lp)?,
                None => lp,
            });
        }
        let log_p_zp = log_p_zp.expect("at least one level");
        let cond_ll = log_p_zp.add(logdet_p)?;
        Ok(CondLik {
            cond_ll,
            log_p_zp,
            logdet_p,
            logdet_m,
            z_m,
            z_p,
            gaussian,
        })
    }

    /// `log N(z_m; 0, I) + log|det ∂z_m/∂x_m|` per sample.
    pub fn source_marginal<'t>(&self, lik: &CondLik<'t, T>) -> Result<Var<'t, T>> {
        let mut acc = lik.logdet_m;
        for z in lik.z_m.levels() {
            acc = acc.add(standard_normal_logpdf(*z)?)?;
        }
        Ok(acc)
    }

    /// `−mean[cond_ll + λ·(log p(z_m) + log|det ∂z_m/∂x_m|)]`.
    pub fn dualglow_objective<'t>(
        &self,
        tape: &'t Tape<T>,
        x_p: Var<'t, T>,
        x_m: Var<'t, T>,
    ) -> Result<Objective<'t, T>> {
        let lik = self.conditional_loglik(tape, x_p, x_m, None)?;
        self.likelihood_objective(lik)
    }

    pub(crate) fn likelihood_objective<'t>(&self, lik: CondLik<'t, T>) -> Result<Objective<'t, T>> {
        let marginal_m = self.source_marginal(&lik)?;
        let total = lik.cond_ll.add(marginal_m.scale(T::lit(self.config.lambda))?)?;
        let loss = total.mean()?.neg()?;
        Ok(Objective {
            loss,
            cond_ll: lik.cond_ll,
            marginal_m,
            disc_losses: Vec::new(),
        })
    }

    /// Draws `x_p` given `x_m`: `z_p = μ + temperature·σ·ε` with `ε` from a
    /// generator seeded by `seed`, mapped back through the target flow.
    pub fn sample_pet(&self, x_m: &Tensor<T>, temperature: f64, seed: u64) -> Result<Tensor<T>> {
        Ok(self.sample_with_code(x_m, None, temperature, seed)?.0)
    }

    /// Sampling with optional side labels; also returns the sampled `z_p`.
    pub fn sample_with_code(
        &self,
        x_m: &Tensor<T>,
        c: Option<&Tensor<T>>,
        temperature: f64,
        seed: u64,
    ) -> Result<(Tensor<T>, LatentCode<Tensor<T>>)> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::contract(format!(
                "temperature must be finite and ≥ 0, got {temperature}"
            )));
        }
        let x_m = crate::flow::layers::batched(x_m)?;
        let n = x_m.dims4()?.0;
        self.check_side(c, n)?;
        let tape = Tape::no_grad();
        let (z_m, _) = self.flow_m.forward(&tape, tape.constant(x_m)?)?;
        let g = self.conditional_gaussian(&tape, &z_m, c)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let temp = T::lit(temperature);
        let mut levels = Vec::with_capacity(g.mu.len());
        for (mu, ls) in g.mu.iter().zip(&g.log_sigma) {
            let mu = mu.value();
            let ls = ls.value();
            let mut z = (*mu).clone();
            if temperature > 0.0 {
                for (zv, &s) in z.data_mut().iter_mut().zip(ls.data()) {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    *zv = *zv + temp * s.exp() * T::lit(eps);
                }
            }
            levels.push(z);
        }
        let top = levels.pop().expect("at least one level");
        let code = LatentCode { parts: levels, top };
        let x_p = self.flow_p.decode(&code)?;
        Ok((x_p, code))
    }

    /// Data-dependent actnorm initialization of both flows from one batch.
    pub fn data_init(&mut self, x_m: &Tensor<T>, x_p: &Tensor<T>) -> Result<()> {
        self.flow_m.data_init(x_m)?;
        self.flow_p.data_init(x_p)?;
        self.initialized = true;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> DualGlowModel<U> {
        DualGlowModel {
            config: self.config.clone(),
            flow_m: self.flow_m.cast(),
            flow_p: self.flow_p.cast(),
            relations: self.relations.iter().map(|r| r.cast()).collect(),
            discriminators: self.discriminators.iter().map(|d| d.cast()).collect(),
            initialized: self.initialized,
        }
    }
}

impl<T: Scalar> Module<T> for DualGlowModel<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.flow_m.params();
        v.extend(self.flow_p.params());
        for r in &self.relations {
            v.extend(r.conv.params());
        }
        for d in &self.discriminators {
            v.extend(d.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.flow_m.params_mut();
        v.extend(self.flow_p.params_mut());
        for r in &mut self.relations {
            v.extend(r.conv.params_mut());
        }
        for d in &mut self.discriminators {
            v.extend(d.params_mut());
        }
        v
    }
}

/// Broadcasts side labels `[N, K]` into `K` constant planes `[N, K, H, W]`.
pub fn side_planes<T: Scalar>(c: &Tensor<T>, n: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let k = match c.shape() {
        [cn, k] if *cn == n => *k,
        s => return Err(Error::dim(format!("side labels must be [{n}, K], got {s:?}"))),
    };
    let mut data = Vec::with_capacity(n * k * h * w);
    for &v in c.data() {
        data.extend(std::iter::repeat_n(v, h * w));
    }
    Tensor::new(vec![n, k, h, w], data)
}
