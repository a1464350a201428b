//! Invariants of flows, the conditional model, data generators, metrics and
//! the optimizer, checked on random instances.

use std::collections::BTreeMap;

use dualglow::data::{generate, DatasetSpec, GeneratorKind};
use dualglow::flow::layers::{split, squeeze, unsplit, unsqueeze};
use dualglow::flow::{Flow, FlowConfig, FlowLayer};
use dualglow::metrics::{corcoef, mae, psnr, ssim};
use dualglow::nn::perturb;
use dualglow::train::{clip_global_norm, global_norm};
use dualglow::verify::{gradcheck_model, roundtrip_error};
use dualglow::{DualGlowModel, ModelConfig, SideConfig, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng))
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn sorted(t: &Tensor<f64>) -> Vec<u64> {
    let mut v: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
    v.sort_unstable();
    v
}

fn arch() -> impl Strategy<Value = (usize, usize, usize, bool, u64)> {
    (1usize..=3, 1usize..=3, 1usize..=2, any::<bool>(), any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composed_flows_are_bijective((levels, depth, c, inv, seed) in arch()) {
        let mut cfg = FlowConfig::new([c, 8, 8], levels, depth);
        cfg.hidden = 4;
        cfg.inv1x1 = inv;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flow = Flow::<f64>::new("f", &cfg, &mut rng).unwrap();
        perturb(&mut flow, &mut rng, 0.05);
        let x = normal(&mut rng, &[4, c, 8, 8]);
        flow.data_init(&x).unwrap();
        prop_assert!(roundtrip_error(&flow, &x, None).unwrap() < 1e-10);
        let code = flow.encode(&x).unwrap().0;
        prop_assert_eq!(code.element_count(), x.numel());
    }

    #[test]
    fn structural_ops_preserve_elements(seed in any::<u64>(), c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal(&mut rng, &[2, 2 * c, 4, 4]);
        let s = squeeze(&x).unwrap();
        prop_assert_eq!(sorted(&s), sorted(&x));
        prop_assert_eq!(unsqueeze(&s).unwrap(), x.clone());
        let (keep, out) = split(&x).unwrap();
        let mut joined = sorted(&keep);
        joined.extend(sorted(&out));
        joined.sort_unstable();
        prop_assert_eq!(joined, sorted(&x));
        prop_assert_eq!(unsplit(&keep, &out).unwrap(), x.clone());
        let tape = Tape::no_grad();
        for layer in [FlowLayer::<f64>::Reverse, FlowLayer::Squeeze] {
            let (y, ld) = layer.forward(&tape, tape.constant(x.clone()).unwrap()).unwrap();
            prop_assert!(ld.is_none_or(|v| v.value().data().iter().all(|&d| d == 0.0)));
            prop_assert_eq!(sorted(&y.tensor()), sorted(&x));
        }
    }

    #[test]
    fn sampled_code_is_recovered(seed in any::<u64>(), temperature in 0.0f64..1.5) {
        let model = gradcheck_model(seed % 1000, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_m = normal(&mut rng, &[3, 1, 4, 4]);
        let (x_p, code) = model.sample_with_code(&x_m, None, temperature, seed).unwrap();
        let (back, _) = model.flow_p.encode(&x_p).unwrap();
        prop_assert!(back.top.max_abs_diff(&code.top).unwrap() < 1e-9);
        for (a, b) in back.parts.iter().zip(&code.parts) {
            prop_assert!(a.max_abs_diff(b).unwrap() < 1e-9);
        }
    }

    #[test]
    fn discriminator_losses_are_nonnegative(seed in any::<u64>(), categorical in any::<bool>()) {
        let mut flow = FlowConfig::new([1, 4, 4], 2, 1);
        flow.hidden = 2;
        let mut cfg = ModelConfig::new(flow);
        cfg.side = if categorical { SideConfig::categorical(3) } else { SideConfig::continuous() };
        let mut model = DualGlowModel::<f64>::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        perturb(&mut model, &mut rng, 0.2);
        let c = dualglow::verify::side_batch(&model.config.side, 3, &mut rng).unwrap().unwrap();
        let (x_p, x_m) = (normal(&mut rng, &[3, 1, 4, 4]), normal(&mut rng, &[3, 1, 4, 4]));
        let tape = Tape::no_grad();
        let lik = model
            .conditional_loglik(&tape, tape.constant(x_p).unwrap(), tape.constant(x_m).unwrap(), Some(&c))
            .unwrap();
        for l in model.discriminator_losses(&tape, &lik, &c).unwrap() {
            prop_assert!(l.item() >= 0.0);
        }
    }

    #[test]
    fn clipping_never_increases_norm(values in prop::collection::vec(-100.0f64..100.0, 1..20), max in 0.1f64..60.0) {
        let mut grads = BTreeMap::new();
        let half = values.len() / 2;
        grads.insert("a".to_string(), Tensor::from_vec(values[..half].to_vec()));
        grads.insert("b".to_string(), Tensor::from_vec(values[half..].to_vec()));
        let before = global_norm(&grads);
        clip_global_norm(&mut grads, max);
        let after = global_norm(&grads);
        prop_assert!(after <= before * (1.0 + 1e-12));
        prop_assert!(after <= max * (1.0 + 1e-12) || after <= before);
    }

    #[test]
    fn metric_ranges_and_symmetry(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = normal(&mut rng, &[1, 9, 9]).map(|v| v.tanh());
        let b = normal(&mut rng, &[1, 9, 9]).map(|v| v.tanh());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(mae(&a, &b).unwrap() >= 0.0);
        prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        let r = corcoef(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((r - corcoef(&b, &a).unwrap()).abs() < 1e-12);
        let scale = rng.random_range(0.1..10.0);
        let shift = rng.random_range(-5.0..5.0);
        let moved = a.map(|v| scale * v + shift);
        prop_assert!((corcoef(&moved, &b).unwrap() - r).abs() < 1e-10);
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = normal(&mut rng, &[1, 16, 16]).map(|v| 0.5 * v.tanh());
        let noise = normal(&mut rng, &[1, 16, 16]);
        let values: Vec<f64> = [0.01, 0.03, 0.1, 0.3, 1.0]
            .iter()
            .map(|&s| psnr(&a.zip_map(&noise, |x, n| x + s * n).unwrap(), &a, 2.0).unwrap())
            .collect();
        prop_assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generators_are_seeded_and_bounded(seed in 0u64..1_000_000, kind in 0usize..4) {
        let kinds = [
            GeneratorKind::BlurPair,
            GeneratorKind::EdgePair,
            GeneratorKind::CflipPair,
            GeneratorKind::CmonotonePair,
        ];
        let kind = kinds[kind];
        let a = generate(&DatasetSpec::new(kind, 32, seed)).unwrap();
        prop_assert_eq!(&a, &generate(&DatasetSpec::new(kind, 32, seed)).unwrap());
        for t in [&a.x_m, &a.x_p] {
            prop_assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        prop_assert_eq!(a.c.is_some(), kind.has_labels());
        let b = generate(&DatasetSpec::new(kind, 32, seed + 1)).unwrap();
        let r = corcoef(&a.x_m, &b.x_m).unwrap();
        prop_assert!(r.abs() < 0.1, "correlation {r}");
    }
}
