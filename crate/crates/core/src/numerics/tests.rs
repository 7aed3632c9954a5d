use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn naive_matmul(x: &Tensor, w: &Tensor) -> Vec<f64> {
    let (n, p, q) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut out = vec![0.0; n * q];
    for i in 0..n {
        for j in 0..q {
            for k in 0..p {
                out[i * q + j] += x.data()[i * p + k] * w.data()[k * q + j];
            }
        }
    }
    out
}

#[test]
fn affine_identity_and_zero_weight() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let zero = Tensor::zeros(&[2, 2]);
    let out = affine(&x, &eye, &Tensor::vector(vec![0.0, 0.0])).unwrap();
    assert_eq!(out.data(), &[1.0, 2.0]);
    let out = affine(&x, &zero, &Tensor::vector(vec![3.0, 4.0])).unwrap();
    assert_eq!(out.data(), &[3.0, 4.0]);
}

#[test]
fn affine_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x = random_tensor(&mut rng, &[3, 4], 1.0);
        let w = random_tensor(&mut rng, &[4, 2], 1.0);
        let b = random_tensor(&mut rng, &[2], 1.0);
        let out = affine(&x, &w, &b).unwrap();
        let expect = naive_matmul(&x, &w);
        for (i, (o, e)) in out.data().iter().zip(&expect).enumerate() {
            assert!((o - (e + b.data()[i % 2])).abs() < 1e-12);
        }
    }
}

#[test]
fn affine_rejects_mismatched_dims() {
    let x = Tensor::zeros(&[2, 3]);
    let w = Tensor::zeros(&[4, 2]);
    let err = affine(&x, &w, &Tensor::zeros(&[2])).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    let err = affine(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[5])).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

#[test]
fn softmax_examples() {
    let out = softmax_rows(&Tensor::vector(vec![0.0, 0.0]));
    assert_eq!(out.data(), &[0.5, 0.5]);
    let out = softmax_rows(&Tensor::vector(vec![2f64.ln(), 0.0]));
    assert!((out.data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((out.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    let out = softmax_rows(&Tensor::vector(vec![1000.0, 0.0]));
    assert!(out.is_finite());
    assert!((out.data()[0] - 1.0).abs() < 1e-12);
    assert!(out.data()[1] < 1e-300);
}

#[test]
fn layer_norm_examples() {
    let gain = Tensor::filled(&[4], 1.0);
    let bias = Tensor::zeros(&[4]);
    let out = layer_norm(&Tensor::filled(&[1, 4], 3.5), &gain, &bias, LAYER_NORM_EPS).unwrap();
    assert!(out.data().iter().all(|v| *v == 0.0));

    let g2 = Tensor::filled(&[2], 1.0);
    let b2 = Tensor::zeros(&[2]);
    let out = layer_norm(&Tensor::vector(vec![1.0, -1.0]), &g2, &b2, 1e-15).unwrap();
    assert!((out.data()[0] - 1.0).abs() < 1e-12);
    assert!((out.data()[1] + 1.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g8 = Tensor::filled(&[8], 1.0);
    let b8 = Tensor::zeros(&[8]);
    for _ in 0..10 {
        let x = random_tensor(&mut rng, &[5, 8], 4.0);
        let out = layer_norm(&x, &g8, &b8, LAYER_NORM_EPS).unwrap();
        for r in 0..5 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}

// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))) at x = -6 + 12 i / 100,
// evaluated with 40-digit arithmetic.
const GELU_GRID: [f64; 101] = [
    -8.4396467007622971e-11,
    -2.479436938627088e-10,
    -7.0219469469116493e-10,
    -1.918453922517947e-9,
    -5.0599676173239987e-9,
    -1.2893157469367593e-8,
    -3.1761286608699632e-8,
    -7.5696459269712828e-8,
    -1.7466361887114816e-7,
    -3.9047093826384709e-7,
    -8.4633727774376249e-7,
    -1.7798151520860475e-6,
    -3.634043699800458e-6,
    -7.2093345513098936e-6,
    -1.3905757509664972e-5,
    -2.6097066957287504e-5,
    -4.7685650426953708e-5,
    -8.4894981711945158e-5,
    -0.00014735725432052732,
    -0.00024954575083704746,
    -0.00041258021416358293,
    -0.00066639575452763072,
    -0.0010522098336719505,
    -0.0016251480925172578,
    -0.0024568016098187012,
    -0.0036373920817730188,
    -0.0052771267251390575,
    -0.0075062429465789996,
    -0.010473186836031686,
    -0.01434035268014098,
    -0.019276846155601713,
    -0.02544783420800985,
    -0.03300022111974055,
    -0.042044651637395948,
    -0.052634192001444274,
    -0.064740473154070283,
    -0.078228578126791818,
    -0.092832479076003446,
    -0.10813331709032707,
    -0.12354318592665039,
    -0.13829723086213509,
    -0.15145670897112958,
    -0.16192510519396789,
    -0.16847843817016066,
    -0.1698095715481534,
    -0.16458480076918525,
    -0.15150941069604198,
    -0.12939753091955215,
    -0.097240679697812884,
    -0.054269056440695706,
    0.0,
    0.065730943559304294,
    0.14275932030218712,
    0.23060246908044785,
    0.32849058930395802,
    0.43541519923081475,
    0.5501904284518466,
    0.67152156182983934,
    0.79807489480603211,
    0.92854329102887042,
    1.0617027691378649,
    1.1964568140733496,
    1.3318666829096729,
    1.4671675209239966,
    1.6017714218732082,
    1.7352595268459297,
    1.8673658079985557,
    1.9979553483626041,
    2.1269997788802594,
    2.2545521657919901,
    2.3807231538443983,
    2.505659647319859,
    2.6295268131639683,
    2.752493757053421,
    2.8747228732748609,
    2.996362607918227,
    3.1175431983901813,
    3.2383748519074827,
    3.358947790166328,
    3.4793336042454724,
    3.5995874197858364,
    3.719750454249163,
    3.8398526427456795,
    3.9599151050182881,
    4.079952314349573,
    4.1999739029330427,
    4.3199860942424903,
    4.4399927906654487,
    4.5599963659563002,
    4.6799982201848479,
    4.7999991536627223,
    4.9199996095290617,
    5.0399998253363811,
    5.1599999243035407,
    5.2799999682387134,
    5.3999999871068425,
    5.5199999949400324,
    5.6399999980815461,
    5.7599999992978053,
    5.8799999997520563,
    5.9999999999156035,
];

#[test]
fn gelu_matches_high_precision_grid() {
    let xs: Vec<f64> = (0..101).map(|i| -6.0 + 12.0 * i as f64 / 100.0).collect();
    let out = gelu(&Tensor::vector(xs.clone()));
    for (got, want) in out.data().iter().zip(GELU_GRID) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    for w in out.data()[50..].windows(2) {
        assert!(w[1] > w[0]);
    }
}

#[test]
fn gelu_asymptotes() {
    assert_eq!(ops::gelu_scalar(0.0), 0.0);
    assert!((ops::gelu_scalar(20.0) - 20.0).abs() < 1e-12);
    assert!(ops::gelu_scalar(-20.0).abs() < 1e-12);
}

#[test]
fn gelu_stays_within_tanh_approximation_error_of_erf_form() {
    // Abramowitz-Stegun 7.1.26 has absolute error < 1.5e-7, far below the
    // ~4.7e-4 gap between the tanh approximation and exact GELU.
    fn erf(x: f64) -> f64 {
        let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
        let poly = t
            * (0.254_829_592
                + t * (-0.284_496_736
                    + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
        let y = 1.0 - poly * (-x * x).exp();
        y.copysign(x)
    }
    for i in 0..101 {
        let x = -6.0 + 12.0 * i as f64 / 100.0;
        let exact = 0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2));
        assert!((ops::gelu_scalar(x) - exact).abs() < 5e-4);
    }
}

#[test]
fn cross_entropy_examples() {
    let logits = Tensor::zeros(&[1, 4]);
    assert!((cross_entropy(&logits, &[2], 99).unwrap() - 4f64.ln()).abs() < 1e-15);

    let logits = Tensor::from_rows(&[vec![10.0, -10.0]]).unwrap();
    assert!(cross_entropy(&logits, &[0], 99).unwrap() < 1e-8);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random_tensor(&mut rng, &[4, 5], 3.0);
    let targets = [1, 0, 4, 2];
    let mut manual = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        manual += -(row[t as usize].exp() / z).ln();
    }
    let ce = cross_entropy(&logits, &targets, 99).unwrap();
    assert!((ce - manual / 4.0).abs() < 1e-12);

    // ignored rows drop out of the mean
    let ce_ignored = cross_entropy(&logits, &[1, 99, 99, 2], 99).unwrap();
    let r0 = -(logits.row(0)[1].exp() / logits.row(0).iter().map(|v| v.exp()).sum::<f64>()).ln();
    let r3 = -(logits.row(3)[2].exp() / logits.row(3).iter().map(|v| v.exp()).sum::<f64>()).ln();
    assert!((ce_ignored - (r0 + r3) / 2.0).abs() < 1e-12);
}

#[test]
fn cross_entropy_all_ignored_is_an_error() {
    let logits = Tensor::zeros(&[2, 3]);
    assert!(matches!(
        cross_entropy(&logits, &[0, 0], 0),
        Err(Error::EmptyLoss)
    ));
}

#[test]
fn backward_simple_losses() {
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::vector(vec![1.5, -2.0, 0.25]), true);
    let mut tape = Tape::new(&store);
    let wv = tape.param(w);
    let loss = tape.sum(wv);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new(&store);
    let wv = tape.param(w);
    let loss = tape.half_squared_norm(wv);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.5, -2.0, 0.25]);
}

#[test]
fn backward_requires_recorded_scalar() {
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::vector(vec![1.0, 2.0]), true);
    let mut other = ParamStore::new();
    other.register("a", Tensor::scalar(1.0), true);
    let mut long_tape = Tape::new(&other);
    let a = long_tape.param(ParamId(0));
    let b = long_tape.scale(a, 2.0);
    let empty = Tape::new(&store);
    assert!(matches!(empty.backward(b), Err(Error::State(_))));

    let mut tape = Tape::new(&store);
    let wv = tape.param(w);
    assert!(matches!(tape.backward(wv), Err(Error::Shape(_))));
}

#[test]
fn frozen_parameters_get_zero_gradient() {
    let mut store = ParamStore::new();
    let a = store.register("a", Tensor::vector(vec![1.0, 2.0]), true);
    let b = store.register("b", Tensor::vector(vec![3.0, 4.0]), false);
    let grads = {
        let mut tape = Tape::new(&store);
        let (av, bv) = (tape.param(a), tape.param(b));
        let s = tape.add(av, bv).unwrap();
        let loss = tape.half_squared_norm(s);
        tape.backward(loss).unwrap()
    };
    assert!(grads.get(b).is_none());
    store.get_mut(b).grad.fill(7.0);
    store.accumulate(&grads, 1.0);
    assert_eq!(store.get(a).grad.data(), &[4.0, 6.0]);
    assert_eq!(store.get(b).grad.data(), &[0.0, 0.0]);
}

// Each case builds a small random problem and checks tape gradients against
// central differences at h = 1e-5.
fn check_case(
    seed: u64,
    build_store: impl Fn(&mut ChaCha8Rng) -> ParamStore,
    f: impl Fn(&mut Tape) -> crate::Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = build_store(&mut rng);
    let err = gradcheck::max_relative_error(&mut store, 1e-5, f).unwrap();
    assert!(err < 1e-4, "seed {seed}: relative error {err}");
}

fn pid(i: usize) -> ParamId {
    ParamId(i)
}

#[test]
fn gradcheck_affine_and_transposed() {
    for seed in 0..20 {
        check_case(
            seed,
            |rng| {
                let mut s = ParamStore::new();
                s.register("x", random_tensor(rng, &[3, 4], 1.0), true);
                s.register("w", random_tensor(rng, &[4, 5], 1.0), true);
                s.register("b", random_tensor(rng, &[5], 1.0), true);
                s.register("w2", random_tensor(rng, &[2, 5], 1.0), true);
                s
            },
            |t| {
                let (x, w, b, w2) = (
                    t.param(pid(0)),
                    t.param(pid(1)),
                    t.param(pid(2)),
                    t.param(pid(3)),
                );
                let y = t.affine(x, w, Some(b))?;
                let z = t.affine_transposed(y, w2, None)?;
                Ok(t.half_squared_norm(z))
            },
        );
    }
}

#[test]
fn gradcheck_layer_norm_gelu_add_scale() {
    for seed in 0..20 {
        check_case(
            seed,
            |rng| {
                let mut s = ParamStore::new();
                s.register("x", random_tensor(rng, &[3, 6], 2.0), true);
                s.register("g", random_tensor(rng, &[6], 1.0), true);
                s.register("b", random_tensor(rng, &[6], 1.0), true);
                s.register("y", random_tensor(rng, &[3, 6], 1.0), true);
                s
            },
            |t| {
                let (x, g, b, y) = (
                    t.param(pid(0)),
                    t.param(pid(1)),
                    t.param(pid(2)),
                    t.param(pid(3)),
                );
                let n = t.layer_norm(x, g, b)?;
                let a = t.gelu(n);
                let s = t.add(a, y)?;
                let s = t.scale(s, 0.7);
                let sq = t.half_squared_norm(s);
                let lin = t.sum(a);
                let total = t.add(sq, lin)?;
                Ok(total)
            },
        );
    }
}

#[test]
fn gradcheck_masked_attention() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let allow: Vec<bool> = (0..5 * 5)
            .map(|i| i % 5 == 0 || rng.gen_bool(0.6))
            .collect();
        check_case(
            seed,
            |rng| {
                let mut s = ParamStore::new();
                for name in ["q", "k", "v"] {
                    s.register(name, random_tensor(rng, &[5, 4], 1.0), true);
                }
                s
            },
            |t| {
                let (q, k, v) = (t.param(pid(0)), t.param(pid(1)), t.param(pid(2)));
                let o = t.attention(q, k, v, &allow, 2)?;
                Ok(t.half_squared_norm(o))
            },
        );
    }
}

#[test]
fn gradcheck_gather_stack_cross_entropy() {
    for seed in 0..20 {
        check_case(
            seed,
            |rng| {
                let mut s = ParamStore::new();
                s.register("table", random_tensor(rng, &[6, 4], 1.0), true);
                s.register("proj", random_tensor(rng, &[3, 4], 1.0), true);
                s.register("out", random_tensor(rng, &[7, 4], 1.0), true);
                s
            },
            |t| {
                let (table, proj, out) = (t.param(pid(0)), t.param(pid(1)), t.param(pid(2)));
                let g = t.gather_rows(table, &[1, 4, 1, 5])?;
                let s = t.stack_rows(&[(g, 0), (proj, 2), (g, 3), (proj, 0), (g, 2)])?;
                let logits = t.affine_transposed(s, out, None)?;
                t.cross_entropy(logits, &[3, 0, 6, 99, 2], 99)
            },
        );
    }
}

#[test]
fn gradcheck_dropout_with_fixed_mask() {
    for seed in 0..20 {
        check_case(
            seed,
            |rng| {
                let mut s = ParamStore::new();
                s.register("x", random_tensor(rng, &[4, 3], 1.0), true);
                s
            },
            move |t| {
                let x = t.param(pid(0));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = t.dropout(x, 0.3, &mut rng);
                Ok(t.half_squared_norm(d))
            },
        );
    }
}

#[test]
fn schedule_ramp_apex_and_end() {
    let cfg = AdamConfig {
        base_lr: 0.01,
        warmup_fraction: 0.1,
        ..AdamConfig::default()
    };
    let state = OptimizerState::new(cfg, 100);
    assert_eq!(lr_schedule(&state, 0), 0.0);
    assert_eq!(lr_schedule(&state, 10), 0.01);
    assert_eq!(lr_schedule(&state, 100), 0.0);
    assert!((lr_schedule(&state, 5) - 0.005).abs() < 1e-15);
    assert!((lr_schedule(&state, 55) - 0.005).abs() < 1e-15);
    // continuity around the apex
    assert!((lr_schedule(&state, 10) - lr_schedule(&state, 9)).abs() <= 0.001 + 1e-15);
}

#[test]
fn adam_zero_gradient_leaves_value() {
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::vector(vec![0.3, -0.7]), true);
    let mut state = OptimizerState::new(AdamConfig::default(), 10);
    adam_step(&mut store, &mut state);
    assert_eq!(store.get(w).value.data(), &[0.3, -0.7]);
}

#[test]
fn adam_single_scalar_step_matches_closed_form() {
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::scalar(1.0), true);
    store.get_mut(w).grad = Tensor::scalar(0.5);
    let cfg = AdamConfig {
        base_lr: 0.1,
        warmup_fraction: 0.0,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };
    let mut state = OptimizerState::new(cfg, 10);
    adam_step(&mut store, &mut state);
    // m = 0.05, v = 0.00025; bias correction recovers g and g^2
    let lr = 0.1 * 9.0 / 10.0;
    let m_hat = (0.1 * 0.5) / (1.0 - 0.9);
    let v_hat = (0.001 * 0.25) / (1.0 - 0.999);
    let expect = 1.0 - lr * m_hat / (f64::sqrt(v_hat) + 1e-8);
    assert!((store.get(w).value.item() - expect).abs() < 1e-12);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_never_touches_frozen_parameters() {
    let mut store = ParamStore::new();
    let live = store.register("live", Tensor::vector(vec![1.0, 2.0]), true);
    let frozen = store.register("frozen", Tensor::vector(vec![0.1, 0.2]), false);
    let before = store.get(frozen).value.clone();
    let mut state = OptimizerState::new(AdamConfig::default(), 5);
    for _ in 0..5 {
        store.get_mut(live).grad = Tensor::vector(vec![1.0, -1.0]);
        store.get_mut(frozen).grad = Tensor::vector(vec![5.0, 5.0]);
        adam_step(&mut store, &mut state);
    }
    let after = &store.get(frozen).value;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(after));
    assert_ne!(store.get(live).value.data(), &[1.0, 2.0]);
}

#[test]
fn clipping_caps_global_norm() {
    let mut store = ParamStore::new();
    let a = store.register("a", Tensor::vector(vec![0.0, 0.0]), true);
    store.get_mut(a).grad = Tensor::vector(vec![3.0, 4.0]);
    let norm = clip_grad_norm(&mut store, 1.0);
    assert_eq!(norm, 5.0);
    let g = store.get(a).grad.data();
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1000.0f64..1000.0, 1..12)) {
            let out = softmax_rows(&Tensor::vector(row));
            let sum: f64 = out.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(out.data().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn schedule_is_piecewise_linear_and_bounded(total in 1u64..500, frac in 0.0f64..1.0, step in 0u64..600) {
            let cfg = AdamConfig { base_lr: 1.0, warmup_fraction: frac, ..AdamConfig::default() };
            let state = OptimizerState::new(cfg, total);
            let lr = lr_schedule(&state, step);
            prop_assert!((0.0..=1.0).contains(&lr));
            if step >= total && (frac * total as f64) < total as f64 {
                prop_assert_eq!(lr, 0.0);
            }
        }
    }
}
