//! Every differentiable primitive against central differences on random
//! inputs, plus tape replay and broadcasting behavior.

use dualglow::autodiff::BinaryOp;
use dualglow::gradcheck::{fd_step, numerical_gradient, relative_error};
use dualglow::{concat_channels, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

type Build = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Moves values at least `gap` away from each of `kinks`.
fn avoid(t: Tensor<f64>, kinks: &[f64], gap: f64) -> Tensor<f64> {
    t.map(|v| {
        let mut v = v;
        for &k in kinks {
            if (v - k).abs() < gap {
                v = if v >= k { k + gap } else { k - gap };
            }
        }
        v
    })
}

/// Scalar loss `Σ w ⊙ f(inputs)` with weights fixed by `seed`.
fn weighted<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, &out.shape(), -1.0, 1.0);
    out.mul(tape.constant(w)?)?.sum()
}

/// Largest relative error over all inputs of `f`.
fn grad_error(inputs: &[Tensor<f64>], f: &Build, seed: u64) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let loss = weighted(&tape, f(&tape, &vars).unwrap(), seed).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = numerical_gradient(
            |v: &[f64]| {
                let tape = Tape::no_grad();
                let vs: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let t = if j == k { Tensor::new(t.shape().to_vec(), v.to_vec()).unwrap() } else { t.clone() };
                        tape.constant(t).unwrap()
                    })
                    .collect();
                Ok(weighted(&tape, f(&tape, &vs)?, seed)?.item())
            },
            x.data(),
            fd_step,
        )
        .unwrap();
        worst = worst.max(relative_error(analytic.data(), &numeric, 1e-6));
    }
    worst
}

fn cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Box<Build>)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let u = |r: &mut ChaCha8Rng, s: &[usize]| uniform(r, s, -2.0, 2.0);
    let nonzero = |r: &mut ChaCha8Rng, s: &[usize]| avoid(uniform(r, s, -2.0, 2.0), &[0.0], 0.5);
    let a = u(&mut r, &[2, 3]);
    let b = u(&mut r, &[2, 3]);
    let row = u(&mut r, &[3]);
    let den = nonzero(&mut r, &[2, 3]);
    let pos = uniform(&mut r, &[2, 3], 0.1, 2.0);
    let kinked = avoid(u(&mut r, &[2, 3]), &[0.0], 0.05);
    let clampable = avoid(u(&mut r, &[2, 3]), &[-1.0, 1.0], 0.05);
    let img = u(&mut r, &[2, 4, 4, 4]);
    let img2 = u(&mut r, &[2, 2, 4, 4]);
    let kernel = u(&mut r, &[3, 4, 3, 3]);
    let bias = u(&mut r, &[3]);
    let m1 = u(&mut r, &[3, 4]);
    let m2 = u(&mut r, &[4, 2]);
    let mut sq = u(&mut r, &[3, 3]);
    for i in 0..3 {
        sq.data_mut()[i * 4] += 4.0;
    }
    let logits = u(&mut r, &[4, 3]);
    vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|_, v| v[0].add(v[1]))),
        ("add broadcast", vec![a.clone(), row.clone()], Box::new(|_, v| v[0].add(v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|_, v| v[0].sub(v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|_, v| v[0].mul(v[1]))),
        ("mul broadcast", vec![a.clone(), row], Box::new(|_, v| v[0].binary(BinaryOp::Mul, v[1]))),
        ("div", vec![a.clone(), den], Box::new(|_, v| v[0].div(v[1]))),
        ("exp", vec![a.clone()], Box::new(|_, v| v[0].exp())),
        ("log", vec![pos], Box::new(|_, v| v[0].log())),
        ("tanh", vec![a.clone()], Box::new(|_, v| v[0].tanh())),
        ("relu", vec![kinked.clone()], Box::new(|_, v| v[0].relu())),
        ("abs", vec![kinked], Box::new(|_, v| v[0].abs())),
        ("neg", vec![a.clone()], Box::new(|_, v| v[0].neg())),
        ("square", vec![a.clone()], Box::new(|_, v| v[0].square())),
        ("scale", vec![a.clone()], Box::new(|_, v| v[0].scale(-1.7))),
        ("add_scalar", vec![a.clone()], Box::new(|_, v| v[0].add_scalar(0.3))),
        ("clamp", vec![clampable], Box::new(|_, v| v[0].clamp(-1.0, 1.0))),
        ("sum", vec![a.clone()], Box::new(|_, v| v[0].sum())),
        ("mean", vec![a.clone()], Box::new(|_, v| v[0].mean())),
        ("sum_per_sample", vec![img.clone()], Box::new(|_, v| v[0].sum_per_sample())),
        ("mean_spatial", vec![img.clone()], Box::new(|_, v| v[0].mean_spatial())),
        ("reshape", vec![img.clone()], Box::new(|_, v| v[0].reshape(&[2, 64]))),
        ("matmul", vec![m1, m2], Box::new(|_, v| v[0].matmul(v[1]))),
        ("conv2d", vec![img.clone(), kernel, bias], Box::new(|_, v| v[0].conv2d(v[1], Some(v[2])))),
        ("slice_channels", vec![img.clone()], Box::new(|_, v| v[0].slice_channels(1, 3))),
        ("reverse_channels", vec![img.clone()], Box::new(|_, v| v[0].reverse_channels())),
        ("squeeze2x2", vec![img.clone()], Box::new(|_, v| v[0].squeeze2x2())),
        ("unsqueeze2x2", vec![img.clone()], Box::new(|_, v| v[0].unsqueeze2x2())),
        ("concat_channels", vec![img, img2], Box::new(|_, v| concat_channels(&[v[0], v[1]]))),
        ("log_abs_det", vec![sq], Box::new(|_, v| v[0].log_abs_det())),
        ("log_softmax", vec![logits], Box::new(|_, v| v[0].log_softmax())),
        ("tanh of product", vec![a, b], Box::new(|_, v| v[0].mul(v[1])?.tanh())),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn primitive_gradients_match_finite_differences(seed in any::<u64>()) {
        for (name, inputs, f) in cases(seed) {
            let err = grad_error(&inputs, f.as_ref(), seed ^ 0xabc);
            prop_assert!(err < TOL, "{name}: relative error {err:e}");
        }
    }

    #[test]
    fn grl_is_identity_forward_and_negation_backward(v in prop::collection::vec(-2.0f64..2.0, 6)) {
        let x0 = Tensor::new(vec![2, 3], v).unwrap();
        let run = |reverse: bool| {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone()).unwrap();
            let h = if reverse { x.grl().unwrap() } else { x };
            let value = h.tensor();
            let g = tape.backward(weighted(&tape, h.tanh().unwrap(), 3).unwrap()).unwrap();
            (value, g.get(x).unwrap().clone())
        };
        let (v_plain, g_plain) = run(false);
        let (v_rev, g_rev) = run(true);
        prop_assert!(v_plain.data().iter().zip(v_rev.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(g_plain.data().iter().zip(g_rev.data()).all(|(a, b)| (-a).to_bits() == b.to_bits()));
    }

    #[test]
    fn tape_replay_is_bitwise(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x0 = uniform(&mut r, &[2, 3, 4, 4], -2.0, 2.0);
        let k0 = uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone()).unwrap();
            let k = tape.param("k", &k0).unwrap();
            let y = x.conv2d(k, None).unwrap().tanh().unwrap().mean_spatial().unwrap();
            let g = tape.backward(weighted(&tape, y, 1).unwrap()).unwrap();
            (g.get(x).unwrap().clone(), g.param("k").unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn broadcasting_keeps_rank_or_fails(rows in 1usize..4, cols in 1usize..4, other in 1usize..5) {
        let tape = Tape::no_grad();
        let a = tape.constant(Tensor::<f64>::ones(&[rows, cols])).unwrap();
        let b = tape.constant(Tensor::<f64>::ones(&[other])).unwrap();
        match a.add(b) {
            Ok(out) => {
                prop_assert!(other == cols || other == 1);
                prop_assert_eq!(out.shape(), vec![rows, cols]);
            }
            Err(_) => prop_assert!(other != cols && other != 1),
        }
        let c = tape.constant(Tensor::<f64>::ones(&[rows, cols, 2])).unwrap();
        prop_assert!(a.add(c).is_err());
    }
}
