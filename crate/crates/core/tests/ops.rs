use proptest::prelude::*;
use seunet_core::ops::{sigmoid, softmax_rows, Mode, RunningStats};
use seunet_core::train::{bce_value, Adam, AdamConfig};
use seunet_core::{ParamStore, Tape, Tensor};

#[test]
fn two_token_attention_by_hand() {
    let ln3 = 3f64.ln();
    let mut t = Tape::<f64>::inference();
    let q = t.constant(Tensor::from_vec([1, 2, 1], vec![0.0, ln3]).unwrap());
    let k = t.constant(Tensor::from_vec([1, 2, 1], vec![0.0, ln3]).unwrap());
    let v = t.constant(Tensor::from_vec([1, 2, 1], vec![0.0, 1.0]).unwrap());
    let y = t.attention(q, k, v, 1).unwrap();
    let e = (ln3 * ln3).exp();
    let out = t.value(y).data();
    assert!((out[0] - 0.5).abs() < 1e-15);
    assert!((out[1] - e / (1.0 + e)).abs() < 1e-15);
}

#[test]
fn bce_reference_points() {
    let t = |v: f64| Tensor::from_vec([1], vec![v]).unwrap();
    assert!((bce_value(&t(0.0), &t(1.0)).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((bce_value(&t(0.0), &t(0.0)).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(bce_value(&t(30.0), &t(1.0)).unwrap() < 1e-8);
    assert!(bce_value(&t(-30.0), &t(0.0)).unwrap() < 1e-8);
    assert!(bce_value(&t(0.0), &t(0.5)).is_err());
}

#[test]
fn normalization_statistics() {
    let x: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37) % 11) as f64 - 3.0).collect();
    let mut t = Tape::<f64>::inference();
    let xv = t.constant(Tensor::from_vec([2, 3, 4, 4], x).unwrap());
    let g = t.constant(Tensor::ones([3]));
    let b = t.constant(Tensor::zeros([3]));
    let (y, stats) = t.batchnorm2d(xv, g, b, &RunningStats::new(3), Mode::Train).unwrap();
    assert!(stats.is_some());
    let y = t.value(y).clone();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|n| (0..16).map(move |i| (n, i))).map(|(n, i)| y.data()[(n * 3 + c) * 16 + i]).collect();
        let mean = vals.iter().sum::<f64>() / 32.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3, "{var}");
    }

    let tokens = t.constant(Tensor::from_vec([1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).unwrap());
    let (g, b) = (t.constant(Tensor::ones([4])), t.constant(Tensor::zeros([4])));
    let y = t.layernorm(tokens, g, b).unwrap();
    for row in t.value(y).data().chunks(4) {
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

fn store(order: &[(&str, f64)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, v) in order {
        s.register(*name, Tensor::from_vec([1], vec![*v]).unwrap()).unwrap();
    }
    s
}

#[test]
fn adam_first_step() {
    let mut s = store(&[("w", 0.0)]);
    let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
    let mut opt = Adam::new(&s, cfg);
    let id = s.id("w").unwrap();
    s.accumulate_grad(id, &Tensor::from_vec([1], vec![1.0]).unwrap()).unwrap();
    opt.step(&mut s).unwrap();
    // m̂ = v̂ = 1 after bias correction.
    let delta = s.value(id).item();
    assert!((delta + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
    assert!(s.get(id).grad.data().iter().all(|&g| g == 0.0));
    assert!(opt.step(&mut s).is_err(), "step without gradients");
}

#[test]
fn adam_zero_gradient_is_a_fixed_point_without_decay() {
    let mut s = store(&[("w", 0.7)]);
    let mut opt = Adam::new(&s, AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
    let id = s.id("w").unwrap();
    s.accumulate_grad(id, &Tensor::zeros([1])).unwrap();
    opt.step(&mut s).unwrap();
    assert_eq!(s.value(id).item(), 0.7);
}

#[test]
fn adam_coupled_decay_shrinks_weights() {
    let mut s = store(&[("w", 1.0)]);
    let mut opt = Adam::new(&s, AdamConfig::default());
    let id = s.id("w").unwrap();
    s.accumulate_grad(id, &Tensor::zeros([1])).unwrap();
    opt.step(&mut s).unwrap();
    // The effective gradient is λ·θ = 1e-4, normalized by Adam.
    let expected = 1.0 - 1e-4 * 1e-4 / (1e-4 + 1e-8);
    assert!((s.value(id).item() - expected).abs() < 1e-15);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 7), 1..6)) {
        let mut data: Vec<f64> = rows.concat();
        softmax_rows(&mut data, 7);
        for row in data.chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn sigmoid_is_symmetric(x in -50.0f64..50.0) {
        prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stable_bce_matches_the_naive_form(p in 1e-6f64..(1.0 - 1e-6), y in prop::bool::ANY) {
        let z = (p / (1.0 - p)).ln();
        let y = if y { 1.0 } else { 0.0 };
        let naive = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        let stable = bce_value(&Tensor::from_vec([1], vec![z]).unwrap(), &Tensor::from_vec([1], vec![y]).unwrap()).unwrap();
        prop_assert!((naive - stable).abs() < 1e-6);
    }

    #[test]
    fn adam_ignores_registration_order(a in -1.0f64..1.0, b in -1.0f64..1.0, ga in -1.0f64..1.0, gb in -1.0f64..1.0) {
        let mut s1 = store(&[("a", a), ("b", b)]);
        let mut s2 = store(&[("b", b), ("a", a)]);
        let (mut o1, mut o2) = (Adam::new(&s1, AdamConfig::default()), Adam::new(&s2, AdamConfig::default()));
        for _ in 0..3 {
            for (s, o) in [(&mut s1, &mut o1), (&mut s2, &mut o2)] {
                for (name, g) in [("a", ga), ("b", gb)] {
                    let id = s.id(name).unwrap();
                    s.accumulate_grad(id, &Tensor::from_vec([1], vec![g]).unwrap()).unwrap();
                }
                o.step(s).unwrap();
            }
        }
        for name in ["a", "b"] {
            prop_assert_eq!(s1.by_name(name).unwrap().value.item(), s2.by_name(name).unwrap().value.item());
        }
    }
}
