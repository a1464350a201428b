//! Numerical self-checks: invertibility, log-determinants against numerical
//! Jacobians, and analytic gradients against central finite differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{concat_channels, Tape, Var};
use crate::config::{ModelConfig, SideConfig};
use crate::error::{Error, Result};
use crate::flow::layers::split_var;
use crate::flow::{Flow, FlowConfig, FlowLayer, LatentCode};
use crate::gradcheck::{fd_step, log_abs_det, numerical_gradient, numerical_jacobian, relative_error, MAX_JACOBIAN_INPUTS};
use crate::model::DualGlowModel;
use crate::nn::{normal_tensor, perturb, Module};
use crate::side::DiscTarget;
use crate::tensor::Tensor;

pub const ROUNDTRIP_TOL_F64: f64 = 1e-10;
pub const ROUNDTRIP_TOL_F32: f64 = 1e-5;
pub const LOGDET_TOL: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;
/// Allowed deviation of a coupling's passthrough block from `[I 0]`.
pub const BLOCK_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    pub fn below(name: impl Into<String>, observed: f64, tolerance: f64) -> Check {
        Check {
            name: name.into(),
            observed,
            tolerance,
            passed: observed < tolerance,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<48} observed {:.3e} (tolerance {:.0e})\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.observed,
                c.tolerance
            ));
        }
        out
    }
}

/// Injected faults for exercising the checks themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Inverse couplings subtract `−t` instead of `t`.
    NegateShift,
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random inputs per round-trip check.
    pub samples: usize,
    /// Coordinates checked per parameter tensor; `None` checks all of them.
    pub grad_coords: Option<usize>,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            samples: 8,
            grad_coords: Some(6),
            fault: None,
        }
    }
}

fn batch(shape: [usize; 3], n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    normal_tensor(rng, &[n, shape[0], shape[1], shape[2]], 1.0)
}

/// Inverse pass with a chosen fault, layer by layer.
fn inverse_with_fault(flow: &Flow<f64>, code: &LatentCode<Tensor<f64>>, fault: Option<Fault>) -> Result<Tensor<f64>> {
    let Some(Fault::NegateShift) = fault else {
        return flow.decode(code);
    };
    let tape = Tape::no_grad();
    let mut parts: Vec<Var<'_, f64>> = code.parts.iter().map(|t| tape.constant(t.clone())).collect::<Result<_>>()?;
    let mut h = tape.constant(code.top.clone())?;
    for layer in flow.layers().iter().rev() {
        h = match layer {
            FlowLayer::Split => {
                let out = parts.pop().ok_or_else(|| Error::dim("too few split parts"))?;
                concat_channels(&[h, out])?
            }
            FlowLayer::Coupling(c) => {
                let y1 = h.slice_channels(0, c.d1)?;
                let y2 = h.slice_channels(c.d1, c.d1 + c.d2)?;
                let (s, t) = c.scale_shift(&tape, y1)?;
                let x2 = y2.add(t)?.mul(s.neg()?.exp()?)?;
                concat_channels(&[y1, x2])?
            }
            other => other.inverse(&tape, h)?,
        };
    }
    Ok(h.tensor())
}

/// Largest `|f⁻¹(f(x)) − x|` over a batch.
pub fn roundtrip_error(flow: &Flow<f64>, x: &Tensor<f64>, fault: Option<Fault>) -> Result<f64> {
    let (code, _) = flow.encode(x)?;
    let back = inverse_with_fault(flow, &code, fault)?;
    back.max_abs_diff(x)
}

/// Reported and numerical log|det| of a whole flow at one input `[1, C, H, W]`.
pub fn flow_logdet_pair(flow: &Flow<f64>, x: &Tensor<f64>) -> Result<(f64, f64)> {
    let shape = x.shape().to_vec();
    if x.numel() > MAX_JACOBIAN_INPUTS {
        return Err(Error::contract(format!(
            "numerical Jacobian limited to {MAX_JACOBIAN_INPUTS} inputs, got {}",
            x.numel()
        )));
    }
    let (_, ld) = flow.encode(x)?;
    let f = |v: &[f64]| -> Result<Vec<f64>> {
        let t = Tensor::new(shape.clone(), v.to_vec())?;
        Ok(flow.encode(&t)?.0.flatten()?.into_data())
    };
    let flat = Tensor::from_vec(x.data().to_vec());
    let jac = numerical_jacobian(f, &flat)?;
    Ok((ld.data()[0], log_abs_det(&jac)?))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-8)
}

/// Per-layer log-det comparison for a flow, plus the `[I 0]` passthrough
/// block of every coupling. Returns `(layer name, logdet rel. error, block deviation)`.
pub fn layer_logdet_errors(flow: &Flow<f64>, x: &Tensor<f64>) -> Result<Vec<(String, f64, Option<f64>)>> {
    let mut out = Vec::new();
    let mut h = x.clone();
    for (i, layer) in flow.layers().iter().enumerate() {
        let tape = Tape::no_grad();
        if let FlowLayer::Split = layer {
            h = split_var(tape.constant(h)?)?.0.tensor();
            continue;
        }
        let shape = h.shape().to_vec();
        let (y, ld) = layer.forward(&tape, tape.constant(h.clone())?)?;
        let reported = match ld {
            Some(ld) => {
                let v = ld.value();
                v.data()[0]
            }
            None => 0.0,
        };
        if h.numel() <= MAX_JACOBIAN_INPUTS {
            let f = |v: &[f64]| -> Result<Vec<f64>> {
                let tape = Tape::no_grad();
                let t = tape.constant(Tensor::new(shape.clone(), v.to_vec())?)?;
                Ok(layer.forward(&tape, t)?.0.tensor().into_data())
            };
            let jac = numerical_jacobian(f, &Tensor::from_vec(h.data().to_vec()))?;
            let numeric = log_abs_det(&jac)?;
            let err = if reported == 0.0 && numeric.abs() < 1e-8 { 0.0 } else { rel(reported, numeric) };
            let block = match layer {
                FlowLayer::Coupling(c) => {
                    let n = h.numel();
                    let k = c.d1 * shape[2] * shape[3];
                    let mut dev: f64 = 0.0;
                    for r in 0..k {
                        for col in 0..n {
                            let want = if r == col { 1.0 } else { 0.0 };
                            dev = dev.max((jac.data()[r * n + col] - want).abs());
                        }
                    }
                    Some(dev)
                }
                _ => None,
            };
            out.push((format!("layer {i} ({})", layer.kind()), err, block));
        }
        h = y.tensor();
    }
    Ok(out)
}

/// Sign applied to discriminator `d`'s loss when differentiating with
/// respect to parameter `name`: reversed discriminators push the source
/// flow the other way.
fn disc_sign(model: &DualGlowModel<f64>, d: usize, name: &str) -> f64 {
    let disc = &model.discriminators[d];
    if disc.reversed && name.starts_with("flow_m.") {
        debug_assert!(matches!(disc.target, DiscTarget::SourcePart(_)));
        -1.0
    } else {
        1.0
    }
}

fn objective_parts(
    model: &DualGlowModel<f64>,
    x_p: &Tensor<f64>,
    x_m: &Tensor<f64>,
    c: Option<&Tensor<f64>>,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::no_grad();
    let (vp, vm) = (tape.constant(x_p.clone())?, tape.constant(x_m.clone())?);
    match c {
        None => Ok((model.dualglow_objective(&tape, vp, vm)?.loss.item(), Vec::new())),
        Some(c) => {
            let lik = model.conditional_loglik(&tape, vp, vm, Some(c))?;
            let discs = model.discriminator_losses(&tape, &lik, c)?.iter().map(|l| l.item()).collect();
            Ok((model.likelihood_objective(lik)?.loss.item(), discs))
        }
    }
}

/// Relative error between the tape gradient and central differences, per
/// parameter tensor. Uses the conditional objective when `c` is given.
pub fn gradient_errors(
    model: &DualGlowModel<f64>,
    x_p: &Tensor<f64>,
    x_m: &Tensor<f64>,
    c: Option<&Tensor<f64>>,
    coords: Option<usize>,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    let tape = Tape::new();
    let (vp, vm) = (tape.constant(x_p.clone())?, tape.constant(x_m.clone())?);
    let obj = match c {
        Some(c) => model.conditional_objective(&tape, vp, vm, c)?,
        None => model.dualglow_objective(&tape, vp, vm)?,
    };
    let grads = tape.backward(obj.loss)?;
    let w_cls = model.config.side.w_cls;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut out = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let analytic_full = grads
            .param(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(model.params()[k].value.shape()));
        let n = analytic_full.numel();
        let idx: Vec<usize> = match coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let signs: Vec<f64> = (0..model.discriminators.len()).map(|d| disc_sign(model, d, name)).collect();
        let x0: Vec<f64> = idx.iter().map(|&i| model.params()[k].value.data()[i]).collect();
        let f = |v: &[f64]| -> Result<f64> {
            let mut m = model.clone();
            {
                let mut ps = m.params_mut();
                let p = &mut ps[k];
                for (&i, &val) in idx.iter().zip(v) {
                    p.value.data_mut()[i] = val;
                }
            }
            let (main, discs) = objective_parts(&m, x_p, x_m, c)?;
            Ok(main + w_cls * discs.iter().zip(&signs).map(|(l, s)| s * l).sum::<f64>())
        };
        let numeric = numerical_gradient(f, &x0, fd_step)?;
        let analytic: Vec<f64> = idx.iter().map(|&i| analytic_full.data()[i]).collect();
        let err = relative_error(&analytic, &numeric, 1e-6);
        out.push((name.clone(), err));
    }
    Ok(out)
}

/// Full report for a model: round trips on both flows, log-dets when the
/// input is small enough for a numerical Jacobian, and gradient checks.
pub fn verify_model(model: &DualGlowModel<f64>, opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shape = model.flow_p.input_shape();
    let mut report = VerifyReport::default();
    for (label, flow) in [("flow_m", &model.flow_m), ("flow_p", &model.flow_p)] {
        let x = batch(shape, opts.samples.max(1), &mut rng);
        report.checks.push(Check::below(
            format!("{label} round trip"),
            roundtrip_error(flow, &x, opts.fault)?,
            ROUNDTRIP_TOL_F64,
        ));
        if shape.iter().product::<usize>() <= MAX_JACOBIAN_INPUTS {
            let x1 = batch(shape, 1, &mut rng);
            let (reported, numeric) = flow_logdet_pair(flow, &x1)?;
            let err = if reported == 0.0 && numeric.abs() < 1e-8 { 0.0 } else { rel(reported, numeric) };
            report.checks.push(Check::below(format!("{label} log-det vs Jacobian"), err, LOGDET_TOL));
            for (name, err, block) in layer_logdet_errors(flow, &x1)? {
                report.checks.push(Check::below(format!("{label} {name} log-det"), err, LOGDET_TOL));
                if let Some(dev) = block {
                    report.checks.push(Check::below(format!("{label} {name} block structure"), dev, BLOCK_TOL));
                }
            }
        }
    }
    let x_m = batch(shape, 2, &mut rng);
    let x_p = batch(shape, 2, &mut rng);
    let c = side_batch(&model.config.side, 2, &mut rng)?;
    for (name, err) in gradient_errors(model, &x_p, &x_m, c.as_ref(), opts.grad_coords, opts.seed)? {
        report.checks.push(Check::below(format!("gradient {name}"), err, GRAD_TOL));
    }
    Ok(report)
}

/// Random side labels for `n` samples, or `None` without side information.
pub fn side_batch(side: &SideConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Option<Tensor<f64>>> {
    use rand::Rng;
    use crate::config::SideKind;
    Ok(match side.kind {
        SideKind::None => None,
        SideKind::Continuous => Some(Tensor::from_f64(&[n, 1], &(0..n).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>())?),
        SideKind::Categorical => {
            let k = side.classes;
            let mut v = vec![0.0; n * k];
            for i in 0..n {
                v[i * k + rng.random_range(0..k)] = 1.0;
            }
            Some(Tensor::from_f64(&[n, k], &v)?)
        }
    })
}

/// A two-element model (`[2, 1, 1]` images, one level, `depth` couplings),
/// with every parameter perturbed by `N(0, noise²)`.
pub fn two_dim_model(seed: u64, depth: usize, noise: f64) -> Result<DualGlowModel<f64>> {
    let mut flow = FlowConfig::new([2, 1, 1], 1, depth);
    flow.squeeze = false;
    flow.kernel = 1;
    flow.hidden = 4;
    let mut cfg = ModelConfig::new(flow);
    cfg.relation_kernel = 1;
    let mut m = DualGlowModel::new(cfg, seed)?;
    perturb(&mut m, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), noise);
    Ok(m)
}

/// A small two-level model on `1×4×4` images for full gradient checks,
/// under 500 parameters with or without a continuous side label.
pub fn gradcheck_model(seed: u64, side: bool) -> Result<DualGlowModel<f64>> {
    let mut flow = FlowConfig::new([1, 4, 4], 2, 1);
    flow.kernel = 1;
    flow.hidden = 2;
    let mut cfg = ModelConfig::new(flow);
    cfg.relation_kernel = 1;
    if side {
        cfg.side = SideConfig {
            disc_hidden: 3,
            w_cls: 0.5,
            ..SideConfig::continuous()
        };
    }
    let mut m = DualGlowModel::new(cfg, seed)?;
    perturb(&mut m, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), 0.3);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_init_model_passes_with_zero_logdets() {
        let mut flow = FlowConfig::new([1, 4, 4], 2, 2);
        flow.hidden = 4;
        let m = DualGlowModel::<f64>::new(ModelConfig::new(flow), 1).unwrap();
        let (_, ld) = m.flow_p.encode(&Tensor::ones(&[1, 1, 4, 4])).unwrap();
        assert_eq!(ld.data(), &[0.0]);
        let r = verify_model(&m, &VerifyOptions::default()).unwrap();
        assert!(r.passed(), "{}", r.to_text());
    }

    #[test]
    fn perturbed_model_passes() {
        let m = gradcheck_model(3, true).unwrap();
        let r = verify_model(&m, &VerifyOptions::default()).unwrap();
        assert!(r.passed(), "{}", r.to_text());
        assert!(r.checks.iter().any(|c| c.name.contains("block structure")));
    }

    #[test]
    fn negated_shift_is_caught() {
        let m = gradcheck_model(3, false).unwrap();
        let opts = VerifyOptions {
            fault: Some(Fault::NegateShift),
            ..Default::default()
        };
        let r = verify_model(&m, &opts).unwrap();
        assert!(!r.passed());
        let failed: Vec<_> = r.failures().map(|c| c.name.clone()).collect();
        assert!(failed.iter().all(|n| n.contains("round trip")), "{failed:?}");
        assert!(r.failures().all(|c| c.observed > ROUNDTRIP_TOL_F64));
    }

    #[test]
    fn toy_sizes() {
        assert!(gradcheck_model(0, true).unwrap().num_params() <= 500);
        assert!(gradcheck_model(0, false).unwrap().num_params() <= 500);
    }
}
