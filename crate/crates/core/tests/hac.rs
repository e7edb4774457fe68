mod common;

use clear_core::hac::{
    apply_adapter, apply_film, conditioned_update, generate, hac_forward, HacConfig, HacMode, HacParams, Modulation,
};
use clear_tensor::{finite_diff_check, GradCheckOptions, ParamStore, Rng, Tape, Tensor, TensorError};
use common::random_vec;
use proptest::prelude::*;

fn t64(dims: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(dims, data).unwrap()
}

fn cfg(mode: HacMode, r: usize) -> HacConfig {
    HacConfig {
        mode,
        had_feat_dim: 8,
        reduction: r,
        gate_bias_init: -2.0,
    }
}

/// Fresh parameters with every tensor perturbed.
fn randomized(c: &HacConfig, d: usize, seed: u64) -> (ParamStore<f64>, HacParams) {
    let mut rng = Rng::new(seed, 0);
    let mut store = ParamStore::new();
    let p = HacParams::init(c, d, &mut store, &mut rng).unwrap();
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.uniform_range(-0.3, 0.3);
        }
    }
    (store, p)
}

#[test]
fn film_head_starts_at_identity() {
    let c = cfg(HacMode::Film, 4);
    let mut store = ParamStore::<f64>::new();
    let p = HacParams::init(&c, 8, &mut store, &mut Rng::new(1, 0)).unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let z = tape.constant(t64(&[3, 8], &random_vec(&mut Rng::new(2, 0), 24, -5.0, 5.0)));
    let state = generate(z, &c, &p, &bound).unwrap();
    let Modulation::Film { gamma, beta } = state.modulation else { panic!("film expected") };
    assert!(gamma.to_tensor().data().iter().all(|&v| v == 1.0));
    assert!(beta.to_tensor().data().iter().all(|&v| v == 0.0));
    let expect = 1.0 / (1.0 + 2f64.exp());
    for &g in state.gate.to_tensor().data() {
        assert!((g - expect).abs() < 1e-15);
        assert!((g - 0.1192).abs() < 1e-4);
    }
}

#[test]
fn distinct_inputs_get_distinct_factors() {
    let c = cfg(HacMode::Film, 4);
    let (store, p) = randomized(&c, 8, 3);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let z = tape.constant(t64(&[2, 8], &random_vec(&mut Rng::new(4, 0), 16, -1.0, 1.0)));
    let Modulation::Film { gamma, beta } = generate(z, &c, &p, &bound).unwrap().modulation else { panic!() };
    let (g, b) = (gamma.to_tensor(), beta.to_tensor());
    assert_ne!(g.data()[..8], g.data()[8..]);
    assert_ne!(b.data()[..8], b.data()[8..]);
}

#[test]
fn film_examples() {
    let tape = Tape::new();
    let x = tape.constant(t64(&[2, 2], &[0.5, -1.0, 2.0, 3.0]));
    let one = tape.constant(Tensor::full(&[1, 2], 1.0));
    let zero = tape.constant(Tensor::zeros(&[1, 2]));
    assert_eq!(apply_film(x, one, zero).unwrap().to_tensor().data(), x.to_tensor().data());
    let c = tape.constant(t64(&[1, 2], &[7.0, -7.0]));
    assert_eq!(apply_film(x, zero, c).unwrap().to_tensor().data(), &[7.0, -7.0, 7.0, -7.0]);
    let x = tape.constant(t64(&[1, 1], &[0.5]));
    let out = apply_film(x, tape.constant(t64(&[1, 1], &[2.0])), tape.constant(t64(&[1, 1], &[-1.0]))).unwrap();
    assert_eq!(out.to_tensor().data(), &[0.0]);
}

#[test]
fn adapter_examples() {
    let mut rng = Rng::new(5, 0);
    let (b, d, r) = (2, 4, 2);
    let tape = Tape::new();
    let h = tape.constant(t64(&[b, d], &random_vec(&mut rng, b * d, -1.0, 1.0)));
    let down = tape.constant(t64(&[b, d, r], &random_vec(&mut rng, b * d * r, -1.0, 1.0)));
    let b_down = tape.constant(t64(&[b, r], &random_vec(&mut rng, b * r, -1.0, 1.0)));
    let up0 = tape.constant(Tensor::zeros(&[b, r, d]));
    let b_up0 = tape.constant(Tensor::zeros(&[b, d]));
    assert_eq!(apply_adapter(h, down, b_down, up0, b_up0).unwrap().to_tensor().data(), h.to_tensor().data());

    let h0 = tape.constant(Tensor::zeros(&[b, d]));
    let neg = tape.constant(t64(&[b, r], &random_vec(&mut rng, b * r, -1.0, 0.0)));
    let up = tape.constant(t64(&[b, r, d], &random_vec(&mut rng, b * r * d, -1.0, 1.0)));
    let out = apply_adapter(h0, down, neg, up, b_up0).unwrap().to_tensor();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn adapter_matches_naive_loops() {
    let mut rng = Rng::new(6, 0);
    let (b, d, r) = (3, 6, 3);
    let h = random_vec(&mut rng, b * d, -1.0, 1.0);
    let down = random_vec(&mut rng, b * d * r, -1.0, 1.0);
    let bd = random_vec(&mut rng, b * r, -0.5, 0.5);
    let up = random_vec(&mut rng, b * r * d, -1.0, 1.0);
    let bu = random_vec(&mut rng, b * d, -0.5, 0.5);
    let mut expect = vec![0.0; b * d];
    for s in 0..b {
        let mut hid = vec![0.0; r];
        for (j, hj) in hid.iter_mut().enumerate() {
            let mut acc = bd[s * r + j];
            for i in 0..d {
                acc += down[(s * d + i) * r + j] * h[s * d + i];
            }
            *hj = acc.max(0.0);
        }
        for o in 0..d {
            let mut acc = h[s * d + o] + bu[s * d + o];
            for j in 0..r {
                acc += up[(s * r + j) * d + o] * hid[j];
            }
            expect[s * d + o] = acc;
        }
    }
    let tape = Tape::new();
    let out = apply_adapter(
        tape.constant(t64(&[b, d], &h)),
        tape.constant(t64(&[b, d, r], &down)),
        tape.constant(t64(&[b, r], &bd)),
        tape.constant(t64(&[b, r, d], &up)),
        tape.constant(t64(&[b, d], &bu)),
    )
    .unwrap()
    .to_tensor();
    for (g, w) in out.data().iter().zip(&expect) {
        assert!((g - w).abs() < 1e-6);
    }
}

#[test]
fn update_examples() {
    let tape = Tape::new();
    let x = tape.constant(t64(&[1, 3], &[1.0, -2.0, 0.0]));
    let xt = tape.constant(t64(&[1, 3], &[5.0, 4.0, 2.0]));
    let a = |v: f64| tape.constant(t64(&[1, 1], &[v]));
    assert_eq!(conditioned_update(x, xt, a(0.0)).unwrap().to_tensor().data(), x.to_tensor().data());
    assert_eq!(conditioned_update(x, xt, a(1.0)).unwrap().to_tensor().data(), xt.to_tensor().data());
    assert_eq!(conditioned_update(x, xt, a(0.5)).unwrap().to_tensor().data()[2], 1.0);
    assert!(conditioned_update(x, xt, a(1.5)).is_err());
}

#[test]
fn zero_heads_are_exact_identity_in_both_modes() {
    let mut rng = Rng::new(7, 0);
    for mode in [HacMode::Film, HacMode::Adapter] {
        let c = cfg(mode, 2);
        let mut store = ParamStore::<f64>::new();
        let p = HacParams::init(&c, 8, &mut store, &mut rng).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let z = tape.constant(t64(&[2, 8], &random_vec(&mut rng, 16, -3.0, 3.0)));
        let x = tape.constant(t64(&[10, 8], &random_vec(&mut rng, 80, -3.0, 3.0)));
        let out = hac_forward(z, x, &c, &p, &bound).unwrap().to_tensor();
        let input = if mode == HacMode::Film { x } else { z };
        assert_eq!(out.data(), input.to_tensor().data(), "{mode}");
    }
}

#[test]
fn film_forward_is_generate_then_apply() {
    let c = cfg(HacMode::Film, 4);
    let (store, p) = randomized(&c, 8, 8);
    let mut rng = Rng::new(9, 0);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let z = tape.constant(t64(&[2, 8], &random_vec(&mut rng, 16, -1.0, 1.0)));
    let x = tape.constant(t64(&[6, 8], &random_vec(&mut rng, 48, -1.0, 1.0)));
    let out = hac_forward(z, x, &c, &p, &bound).unwrap().to_tensor();
    let state = generate(z, &c, &p, &bound).unwrap();
    let Modulation::Film { gamma, beta } = state.modulation else { panic!() };
    let manual = conditioned_update(x, apply_film(x, gamma, beta).unwrap(), state.gate).unwrap();
    assert_eq!(out.data(), manual.to_tensor().data());
}

#[test]
fn generator_gradient_matches_finite_differences() {
    let mut rng = Rng::new(10, 0);
    let z = t64(&[2, 8], &random_vec(&mut rng, 16, -1.0, 1.0));
    let x = t64(&[6, 8], &random_vec(&mut rng, 48, -1.0, 1.0));
    for mode in [HacMode::Film, HacMode::Adapter] {
        let c = cfg(mode, 2);
        let (mut store, p) = randomized(&c, 8, 11);
        let report = finite_diff_check(
            |tape, bound| {
                let out = hac_forward(tape.constant(z.clone()), tape.constant(x.clone()), &c, &p, bound)
                    .map_err(|e| TensorError::Graph(e.to_string()))?;
                out.mean_all()
            },
            &mut store,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{mode}: {:e}", report.max_rel_error());
    }
}

#[test]
fn invalid_reduction_is_rejected() {
    let c = cfg(HacMode::Adapter, 3);
    let mut store = ParamStore::<f64>::new();
    assert!(HacParams::init(&c, 8, &mut store, &mut Rng::new(0, 0)).is_err());
    assert!(HacConfig { had_feat_dim: 0, ..cfg(HacMode::Film, 1) }.validate(8).is_err());
    assert_eq!("adapter".parse::<HacMode>().unwrap(), HacMode::Adapter);
    assert!("lora".parse::<HacMode>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gate_stays_inside_unit_interval(seed in 0u64..10_000, scale in 0.1f64..100.0) {
        let c = cfg(HacMode::Film, 4);
        let (store, p) = randomized(&c, 8, seed);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let z = tape.constant(t64(&[4, 8], &random_vec(&mut Rng::new(seed, 1), 32, -scale, scale)));
        let g = generate(z, &c, &p, &bound).unwrap().gate.to_tensor();
        prop_assert!(g.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn update_moves_monotonically_toward_target(
        x in prop::collection::vec(-10.0f64..10.0, 4),
        xt in prop::collection::vec(-10.0f64..10.0, 4),
        a1 in 0.0f64..1.0,
        a2 in 0.0f64..1.0,
    ) {
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let tape = Tape::new();
        let xv = tape.constant(t64(&[1, 4], &x));
        let tv = tape.constant(t64(&[1, 4], &xt));
        let at = |a: f64| conditioned_update(xv, tv, tape.constant(t64(&[1, 1], &[a]))).unwrap().to_tensor();
        let (ol, oh) = (at(lo), at(hi));
        for i in 0..4 {
            let (dl, dh) = ((ol.data()[i] - xt[i]).abs(), (oh.data()[i] - xt[i]).abs());
            prop_assert!(dh <= dl + 1e-12);
            let (mn, mx) = (x[i].min(xt[i]), x[i].max(xt[i]));
            prop_assert!(ol.data()[i] >= mn - 1e-12 && ol.data()[i] <= mx + 1e-12);
        }
    }

    #[test]
    fn batch_order_does_not_matter(seed in 0u64..10_000) {
        let c = cfg(HacMode::Adapter, 2);
        let (store, p) = randomized(&c, 8, seed);
        let z = random_vec(&mut Rng::new(seed, 2), 24, -1.0, 1.0);
        let perm = [2usize, 0, 1];
        let zp: Vec<f64> = perm.iter().flat_map(|&i| z[i * 8..(i + 1) * 8].to_vec()).collect();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let run = |v: &[f64]| {
            let zv = tape.constant(t64(&[3, 8], v));
            hac_forward(zv, zv, &c, &p, &bound).unwrap().to_tensor()
        };
        let (out, outp) = (run(&z), run(&zp));
        for (j, &i) in perm.iter().enumerate() {
            for k in 0..8 {
                prop_assert!((outp.data()[j * 8 + k] - out.data()[i * 8 + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduction_one_with_zero_up_is_identity(seed in 0u64..10_000) {
        let c = cfg(HacMode::Adapter, 1);
        let mut store = ParamStore::<f64>::new();
        let p = HacParams::init(&c, 4, &mut store, &mut Rng::new(seed, 0)).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let z = tape.constant(t64(&[2, 4], &random_vec(&mut Rng::new(seed, 3), 8, -2.0, 2.0)));
        let out = hac_forward(z, z, &c, &p, &bound).unwrap().to_tensor();
        let zt = z.to_tensor();
        prop_assert_eq!(out.data(), zt.data());
    }
}
