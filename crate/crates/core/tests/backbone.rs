mod common;

use clear_core::backbone::{
    directional_scan, encode, features, fuse_with_gate, global_pool, im2col, patch_embed, BackboneConfig,
    BackboneParams, Direction, Scale,
};
use clear_core::scan::{raster_orders, selective_scan};
use clear_tensor::{finite_diff_check, GradCheckOptions, ParamStore, Rng, Tape, Tensor, TensorError};
use common::{random_vec, scan_oracle};
use proptest::prelude::*;

fn t64(dims: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(dims, data).unwrap()
}

fn small_cfg(blocks: usize) -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 4,
        in_channels: 3,
        embed_dim: 6,
        num_blocks: blocks,
        state_dim: 2,
    }
}

fn random_images(rng: &mut Rng, b: usize, cfg: &BackboneConfig) -> Tensor<f64> {
    let n = b * cfg.in_channels * cfg.image_size * cfg.image_size;
    t64(&[b, cfg.in_channels, cfg.image_size, cfg.image_size], &random_vec(rng, n, -1.0, 1.0))
}

fn run_scan(x: &[f64], a: &[f64], b: &[f64], c: &[f64], d: &[f64], t: usize, dd: usize, dir: Direction) -> Vec<f64> {
    let n = b.len() / dd;
    let tape = Tape::new();
    let y = directional_scan(
        tape.constant(t64(&[t, dd], x)),
        tape.constant(t64(&[t, dd], a)),
        tape.constant(t64(&[n, dd], b)),
        tape.constant(t64(&[n, dd], c)),
        tape.constant(t64(&[dd], d)),
        dir,
    )
    .unwrap();
    y.to_tensor().data().to_vec()
}

#[test]
fn patch_grid_sizes() {
    let mut rng = Rng::new(1, 0);
    for (size, expect) in [(28usize, 7usize), (224, 56)] {
        let cfg = BackboneConfig::preset(Scale::T, size, 4, 1);
        assert_eq!(cfg.grid(), expect);
        let mut store = ParamStore::<f32>::new();
        let p = BackboneParams::init(&cfg, &mut store, &mut rng).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let img = Tensor::<f32>::zeros(&[1, size, size]);
        let x = patch_embed(&tape, &img, &cfg, bound[p.w_embed], bound[p.b_embed]).unwrap();
        assert_eq!(x.dims(), vec![expect * expect, 64]);
        assert!(x.to_tensor().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn indivisible_image_is_rejected() {
    let mut cfg = BackboneConfig::preset(Scale::T, 30, 4, 3);
    assert!(cfg.validate().is_err());
    cfg.image_size = 28;
    cfg.in_channels = 2;
    assert!(cfg.validate().is_err());
    assert!(im2col(&Tensor::<f32>::zeros(&[1, 3, 30, 30]), 4).is_err());
}

#[test]
fn im2col_orders_channel_row_column() {
    let img = t64(&[1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
    let cols = im2col(&img, 2).unwrap();
    assert_eq!(cols.dims(), &[1, 8]);
    assert_eq!(cols.data(), &[1., 2., 3., 4., 5., 6., 7., 8.]);
    let cols = im2col(&img, 1).unwrap();
    assert_eq!(cols.dims(), &[4, 2]);
    assert_eq!(cols.data(), &[1., 5., 2., 6., 3., 7., 4., 8.]);
}

#[test]
fn single_step_scan_ignores_direction() {
    let (x, a, b, c, d) = ([0.5, -2.0], [0.3, 0.9], [1.5, -1.0], [2.0, 0.25], [0.1, 3.0]);
    for dir in [Direction::Forward, Direction::Backward] {
        let y = run_scan(&x, &a, &b, &c, &d, 1, 2, dir);
        for ch in 0..2 {
            let expect = c[ch] * b[ch] * x[ch] + d[ch] * x[ch];
            assert!((y[ch] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_decay_collapses_recurrence() {
    let mut rng = Rng::new(2, 0);
    let (t, dd) = (5, 3);
    let x = random_vec(&mut rng, t * dd, -1.0, 1.0);
    let b = random_vec(&mut rng, dd, -1.0, 1.0);
    let c = random_vec(&mut rng, dd, -1.0, 1.0);
    let d = random_vec(&mut rng, dd, -1.0, 1.0);
    let y = run_scan(&x, &vec![0.0; t * dd], &b, &c, &d, t, dd, Direction::Forward);
    for i in 0..t * dd {
        let ch = i % dd;
        assert!((y[i] - (c[ch] * b[ch] * x[i] + d[ch] * x[i])).abs() < 1e-12);
    }
}

#[test]
fn scan_matches_unrolled_loop() {
    let mut rng = Rng::new(3, 0);
    let (t, dd, n) = (6, 4, 2);
    let x = random_vec(&mut rng, t * dd, -1.0, 1.0);
    let a = random_vec(&mut rng, t * dd, 0.01, 0.99);
    let b = random_vec(&mut rng, n * dd, -1.0, 1.0);
    let c = random_vec(&mut rng, n * dd, -1.0, 1.0);
    let d = random_vec(&mut rng, dd, -1.0, 1.0);
    let fwd: Vec<usize> = (0..t).collect();
    let bwd: Vec<usize> = (0..t).rev().collect();
    for (dir, order) in [(Direction::Forward, fwd), (Direction::Backward, bwd)] {
        let expect = scan_oracle(&x, &a, &b, &c, &d, dd, &order);
        let tape = Tape::<f32>::new();
        let f = |v: &[f64], dims: &[usize]| tape.constant(Tensor::<f32>::from_f64(dims, v).unwrap());
        let y = directional_scan(f(&x, &[t, dd]), f(&a, &[t, dd]), f(&b, &[n, dd]), f(&c, &[n, dd]), f(&d, &[dd]), dir)
            .unwrap()
            .to_tensor();
        for (got, want) in y.data().iter().zip(&expect) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn mirrored_sequence_swaps_directions() {
    let mut rng = Rng::new(4, 0);
    let (t, dd) = (7, 2);
    let x = random_vec(&mut rng, t * dd, -1.0, 1.0);
    let a = random_vec(&mut rng, t * dd, 0.1, 0.9);
    let (b, c, d) = (vec![0.7, -0.4], vec![1.1, 0.6], vec![0.2, -0.3]);
    let mirror = |v: &[f64]| -> Vec<f64> { v.chunks(dd).rev().flatten().copied().collect() };
    let lr = run_scan(&mirror(&x), &mirror(&a), &b, &c, &d, t, dd, Direction::Forward);
    let rl = run_scan(&x, &a, &b, &c, &d, t, dd, Direction::Backward);
    assert_eq!(lr, mirror(&rl));
}

#[test]
fn four_direction_scan_matches_averaged_oracles() {
    let mut rng = Rng::new(5, 0);
    let (side, dd, n) = (3, 3, 2);
    let t = side * side;
    let x = random_vec(&mut rng, t * dd, -1.0, 1.0);
    let a = random_vec(&mut rng, t * 4 * dd, 0.05, 0.95);
    let b = random_vec(&mut rng, 4 * n * dd, -1.0, 1.0);
    let c = random_vec(&mut rng, 4 * n * dd, -1.0, 1.0);
    let d = random_vec(&mut rng, 4 * dd, -1.0, 1.0);

    let row: Vec<usize> = (0..t).collect();
    let col: Vec<usize> = vec![0, 3, 6, 1, 4, 7, 2, 5, 8];
    let orders = [row.clone(), row.iter().rev().copied().collect(), col.clone(), col.iter().rev().copied().collect()];
    assert_eq!(raster_orders(side, side), orders.to_vec());

    let mut expect = vec![0.0; t * dd];
    for (r, order) in orders.iter().enumerate() {
        let ar: Vec<f64> = (0..t).flat_map(|p| a[p * 4 * dd + r * dd..p * 4 * dd + (r + 1) * dd].to_vec()).collect();
        let slab = |v: &[f64]| v[r * n * dd..(r + 1) * n * dd].to_vec();
        let y = scan_oracle(&x, &ar, &slab(&b), &slab(&c), &d[r * dd..(r + 1) * dd], dd, order);
        for (e, v) in expect.iter_mut().zip(y) {
            *e += v / 4.0;
        }
    }
    let tape = Tape::new();
    let y = selective_scan(
        tape.constant(t64(&[t, dd], &x)),
        tape.constant(t64(&[t, 4 * dd], &a)),
        tape.constant(t64(&[4, n, dd], &b)),
        tape.constant(t64(&[4, n, dd], &c)),
        tape.constant(t64(&[4, dd], &d)),
        1,
        &orders,
    )
    .unwrap()
    .to_tensor();
    for (got, want) in y.data().iter().zip(&expect) {
        assert!((got - want).abs() < 1e-6);
    }
}

#[test]
fn one_by_one_grid_directions_agree() {
    let orders = raster_orders(1, 1);
    assert!(orders.iter().all(|o| o == &vec![0]));
    let tape = Tape::new();
    let (x, b, c, d) = ([0.5, -1.0], [2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0], [0.5; 8], [1.0; 8]);
    let y = selective_scan(
        tape.constant(t64(&[1, 2], &x)),
        tape.constant(t64(&[1, 8], &[0.5; 8])),
        tape.constant(t64(&[4, 1, 2], &b)),
        tape.constant(t64(&[4, 1, 2], &c)),
        tape.constant(t64(&[4, 2], &d)),
        1,
        &orders,
    )
    .unwrap()
    .to_tensor();
    assert_eq!(y.data(), &[0.5 * 2.0 * 0.5 + 0.5, 0.5 * 1.0 * -1.0 - 1.0]);
}

#[test]
fn zero_input_step_leaves_later_outputs() {
    let mut rng = Rng::new(6, 0);
    let (t, dd) = (4, 2);
    let x = random_vec(&mut rng, t * dd, -1.0, 1.0);
    let a = random_vec(&mut rng, t * dd, 0.1, 0.9);
    let (b, c, d) = (vec![0.8, -0.5], vec![1.2, 0.4], vec![0.3, 0.6]);
    let base = run_scan(&x, &a, &b, &c, &d, t, dd, Direction::Forward);
    let mut xs = vec![0.0; dd];
    xs.extend(&x);
    let mut as_ = random_vec(&mut rng, dd, 0.1, 0.9);
    as_.extend(&a);
    let shifted = run_scan(&xs, &as_, &b, &c, &d, t + 1, dd, Direction::Forward);
    assert!(shifted[..dd].iter().all(|&v| v == 0.0));
    assert_eq!(&shifted[dd..], &base[..]);
}

#[test]
fn gate_limits() {
    let tape = Tape::new();
    let x = tape.constant(t64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
    let y = tape.constant(t64(&[2, 2], &[4.0, 0.0, -1.0, 2.0]));
    let g0 = tape.constant(Tensor::zeros(&[2, 2]));
    let g1 = tape.constant(Tensor::full(&[2, 2], 1.0));
    assert_eq!(fuse_with_gate(x, y, g0).unwrap().to_tensor().data(), x.to_tensor().data());
    assert_eq!(fuse_with_gate(x, y, g1).unwrap().to_tensor().data(), y.to_tensor().data());
    let g = tape.constant(t64(&[2, 2], &[0.3, 0.7, 0.1, 0.9]));
    assert_eq!(fuse_with_gate(x, x, g).unwrap().to_tensor().data(), x.to_tensor().data());
}

#[test]
fn pooling_examples() {
    let tape = Tape::new();
    let z = global_pool(tape.constant(t64(&[4, 1], &[1., 3., 5., 7.])), 1).unwrap();
    assert_eq!(z.to_tensor().data(), &[4.0]);
    let z = global_pool(tape.constant(Tensor::full(&[6, 3], 2.5)), 2).unwrap();
    assert_eq!(z.to_tensor().data(), &[2.5; 6]);

    let mut rng = Rng::new(7, 0);
    let (b, p, d) = (3, 10, 4);
    let x = random_vec(&mut rng, b * p * d, -1.0, 1.0);
    let z = global_pool(tape.constant(t64(&[b * p, d], &x)), b).unwrap().to_tensor();
    for bi in 0..b {
        for ch in 0..d {
            let mut s = 0.0;
            for pos in 0..p {
                s += x[(bi * p + pos) * d + ch];
            }
            assert!((z.data()[bi * d + ch] - s / p as f64).abs() < 1e-7);
        }
    }
}

#[test]
fn encode_is_deterministic() {
    let cfg = small_cfg(2);
    let mut rng = Rng::new(8, 1);
    let images = random_images(&mut rng, 2, &cfg);
    let run = || {
        let mut store = ParamStore::<f64>::new();
        let p = BackboneParams::init(&cfg, &mut store, &mut Rng::new(9, 0)).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let z = encode(&tape, &images, &cfg, &p, &bound).unwrap().to_tensor();
        z.data().to_vec()
    };
    let z = run();
    assert_eq!(z.len(), 2 * 6);
    assert_eq!(z, run());
}

#[test]
fn empty_stack_pools_the_embedding() {
    let cfg = small_cfg(0);
    let mut rng = Rng::new(10, 0);
    let images = random_images(&mut rng, 2, &cfg);
    let mut store = ParamStore::<f64>::new();
    let p = BackboneParams::init(&cfg, &mut store, &mut rng).unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let z = encode(&tape, &images, &cfg, &p, &bound).unwrap().to_tensor();
    let embed = patch_embed(&tape, &images, &cfg, bound[p.w_embed], bound[p.b_embed]).unwrap();
    let pooled = global_pool(embed, 2).unwrap().to_tensor();
    assert_eq!(z.data(), pooled.data());
}

#[test]
fn encode_gradient_matches_finite_differences() {
    let cfg = small_cfg(1);
    let mut rng = Rng::new(11, 0);
    let images = random_images(&mut rng, 2, &cfg);
    let mut store = ParamStore::<f64>::new();
    let p = BackboneParams::init(&cfg, &mut store, &mut rng).unwrap();
    let report = finite_diff_check(
        |tape, bound| {
            let z = encode(tape, &images, &cfg, &p, bound).map_err(|e| TensorError::Graph(e.to_string()))?;
            z.mean_all()
        },
        &mut store,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "max rel error {:e}", report.max_rel_error());
}

#[test]
fn batch_rows_are_independent() {
    let cfg = small_cfg(2);
    let mut rng = Rng::new(12, 0);
    let images = random_images(&mut rng, 3, &cfg);
    let mut store = ParamStore::<f64>::new();
    let p = BackboneParams::init(&cfg, &mut store, &mut rng).unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let all = features(&tape, &images, &cfg, &p, &bound).unwrap().to_tensor();
    let per = images.numel() / 3;
    let rows = all.numel() / 3;
    for i in 0..3 {
        let one = t64(&[1, 3, 8, 8], &images.data()[i * per..(i + 1) * per]);
        let x = features(&tape, &one, &cfg, &p, &bound).unwrap().to_tensor();
        for (a, b) in x.data().iter().zip(&all.data()[i * rows..(i + 1) * rows]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decay_is_inside_unit_interval(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut rng = Rng::new(seed, 0);
        let tape = Tape::new();
        let x = tape.constant(t64(&[5, 3], &random_vec(&mut rng, 15, -scale, scale)));
        let w = tape.constant(t64(&[3, 12], &random_vec(&mut rng, 36, -1.0, 1.0)));
        let b = tape.constant(t64(&[12], &random_vec(&mut rng, 12, -1.0, 1.0)));
        let a = clear_core::backbone::decay(x, w, b).unwrap().to_tensor();
        prop_assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn patch_embed_is_linear(seed in 0u64..1000, k in -3.0f64..3.0) {
        let cfg = small_cfg(1);
        let mut rng = Rng::new(seed, 1);
        let u = random_images(&mut rng, 1, &cfg);
        let v = random_images(&mut rng, 1, &cfg);
        let mut store = ParamStore::<f64>::new();
        let p = BackboneParams::init(&cfg, &mut store, &mut rng).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let embed = |img: &Tensor<f64>| {
            let zero_bias = tape.constant(Tensor::zeros(&[6]));
            patch_embed(&tape, img, &cfg, bound[p.w_embed], zero_bias).unwrap().to_tensor()
        };
        let mix: Vec<f64> = u.data().iter().zip(v.data()).map(|(a, b)| a + k * b).collect();
        let lhs = embed(&t64(u.dims(), &mix));
        let (eu, ev) = (embed(&u), embed(&v));
        for i in 0..lhs.numel() {
            prop_assert!((lhs.data()[i] - (eu.data()[i] + k * ev.data()[i])).abs() < 1e-9);
        }
    }
}
