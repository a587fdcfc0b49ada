mod common;

use common::gradsuite::{composite_gradcheck, rand_tensor, tiny_discriminator, tiny_generator, tiny_nets};
use ctlesion::autodiff::{Tape, Tensor, Var};
use ctlesion::cyclegan::{
    adam_step, combine_losses, cycle_loss, identity_loss, iterations_per_epoch, load_checkpoint,
    lsgan_d_loss, lsgan_g_loss, synthesize_healthy, total_generator_loss, train, train_step,
    AdamParams, AdamState, LossWeights, TrainConfig, TrainSetup, TrainState, Translators,
};
use ctlesion::imgvol::SliceImage;
use ctlesion::nets::{build_generator, init_weights, ImageMap, Param};
use ctlesion::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Stub = fn(&mut Tape<f64>, Var) -> Result<Var>;

fn identity(_: &mut Tape<f64>, x: Var) -> Result<Var> {
    Ok(x)
}

/// Multiples of 1/1024 in [-1, 1]: adding and removing 0.5 is exact.
fn dyadic(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1024i32..=1024) as f64 / 1024.0)
}

fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
    tape.value(v).item().unwrap()
}

fn tiny_setup() -> TrainSetup {
    TrainSetup {
        generator: tiny_generator(),
        discriminator: tiny_discriminator(),
        train: TrainConfig {
            epochs: 4,
            decay_start_epoch: 2,
            crop_side: 8,
            seed: 5,
            stop_epoch: None,
            ..TrainConfig::paper()
        },
        weights: LossWeights::default(),
    }
}

fn pool(seed: u64, n: usize, side: usize) -> Vec<SliceImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = (0..side * side).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            SliceImage::new(side, side, data).unwrap()
        })
        .collect()
}

#[test]
fn d_loss_plateaus_and_oracle() {
    let mut tape = Tape::<f64>::new();
    let ones = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let zeros = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
    // D = identity on these inputs: D(real) = 1, D(fake) = 0.
    let l = lsgan_d_loss(&mut tape, &(identity as Stub), ones, zeros).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);
    let l = lsgan_d_loss(&mut tape, &(identity as Stub), zeros, zeros).unwrap();
    assert_eq!(scalar(&tape, l), 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let r = rand_tensor(&mut rng, &[2, 1, 4, 4]);
        let f = rand_tensor(&mut rng, &[2, 1, 4, 4]);
        let rv = tape.constant(r.clone());
        let fv = tape.constant(f.clone());
        let l = lsgan_d_loss(&mut tape, &(identity as Stub), rv, fv).unwrap();
        let n = r.numel() as f64;
        let want = r.data().iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / n
            + f.data().iter().map(|v| v * v).sum::<f64>() / n;
        assert!((scalar(&tape, l) - want).abs() < 1e-12);
    }
}

#[test]
fn d_loss_rejects_mismatched_outputs() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let b = tape.constant(Tensor::ones(vec![1, 1, 2, 2]));
    assert!(matches!(
        lsgan_d_loss(&mut tape, &(identity as Stub), a, b),
        Err(Error::Shape(_))
    ));
}

#[test]
fn d_loss_does_not_reach_the_generator() {
    let mut tape = Tape::<f64>::new();
    let g_in = tape.param(Tensor::full(vec![1, 1, 2, 2], 0.3));
    let fake = tape.scale(g_in, 2.0);
    let real = tape.param(Tensor::full(vec![1, 1, 2, 2], 0.1));
    let l = lsgan_d_loss(&mut tape, &(identity as Stub), real, fake).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(g_in).is_none());
    assert!(tape.grad(real).is_some());
}

#[test]
fn g_loss_plateaus_and_oracle() {
    let mut tape = Tape::<f64>::new();
    let ones = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let zeros = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
    let l = lsgan_g_loss(&mut tape, &(identity as Stub), ones).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);
    let l = lsgan_g_loss(&mut tape, &(identity as Stub), zeros).unwrap();
    assert_eq!(scalar(&tape, l), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = rand_tensor(&mut rng, &[1, 1, 5, 5]);
    let fv = tape.constant(f.clone());
    let l = lsgan_g_loss(&mut tape, &(identity as Stub), fv).unwrap();
    let want = f.data().iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / 25.0;
    assert!((scalar(&tape, l) - want).abs() < 1e-12);
}

#[test]
fn cycle_and_identity_vanish_for_identity_stubs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(rand_tensor(&mut rng, &[1, 1, 8, 8]));
    let y = tape.constant(rand_tensor(&mut rng, &[1, 1, 8, 8]));
    let id = identity as Stub;
    let c = cycle_loss(&mut tape, &id, &id, x, y).unwrap();
    let i = identity_loss(&mut tape, &id, &id, x, y).unwrap();
    assert_eq!(scalar(&tape, c), 0.0);
    assert_eq!(scalar(&tape, i), 0.0);
}

#[test]
fn cycle_vanishes_for_exact_inverse_offsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(dyadic(&mut rng, &[1, 1, 8, 8]));
    let y = tape.constant(dyadic(&mut rng, &[1, 1, 8, 8]));
    let plus = |t: &mut Tape<f64>, v: Var| Ok(t.add_scalar(v, 0.5));
    let minus = |t: &mut Tape<f64>, v: Var| Ok(t.add_scalar(v, -0.5));
    let c = cycle_loss(&mut tape, &plus, &minus, x, y).unwrap();
    assert_eq!(scalar(&tape, c), 0.0);
}

#[test]
fn offset_stubs_match_hand_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(rand_tensor(&mut rng, &[1, 1, 4, 4]));
    let y = tape.constant(rand_tensor(&mut rng, &[1, 1, 4, 4]));
    let (a, b) = (0.3, -0.05);
    let g_xy = move |t: &mut Tape<f64>, v: Var| Ok(t.add_scalar(v, a));
    let g_yx = move |t: &mut Tape<f64>, v: Var| Ok(t.add_scalar(v, b));
    let c = cycle_loss(&mut tape, &g_xy, &g_yx, x, y).unwrap();
    let i = identity_loss(&mut tape, &g_xy, &g_yx, x, y).unwrap();
    // Each reconstruction is off by a + b everywhere; each identity term by a or b.
    assert!((scalar(&tape, c) - 2.0 * f64::abs(a + b)).abs() < 1e-12);
    assert!((scalar(&tape, i) - (f64::abs(a) + f64::abs(b))).abs() < 1e-12);

    let g_yx_id = identity as Stub;
    let g_xy_01 = |t: &mut Tape<f64>, v: Var| Ok(t.add_scalar(v, 0.1));
    let i = identity_loss(&mut tape, &g_xy_01, &g_yx_id, x, y).unwrap();
    assert!((scalar(&tape, i) - 0.1).abs() < 1e-12);
}

#[test]
fn weighted_total_examples() {
    let w = LossWeights::default();
    assert_eq!(combine_losses(&w, 0.5, 0.5, 0.2, 0.1), 3.5);
    assert_eq!(combine_losses(&w, 0.0, 0.0, 0.0, 0.0), 0.0);
    let zero = LossWeights {
        lambda_cycle: 0.0,
        lambda_identity: 0.0,
    };
    assert_eq!(combine_losses(&zero, 0.25, 0.5, 9.0, 9.0), 0.75);
}

#[test]
fn tape_total_matches_scalar_combination() {
    let zero = LossWeights {
        lambda_cycle: 0.0,
        lambda_identity: 0.0,
    };
    for (seed, w) in [(0u64, LossWeights::default()), (1, zero)] {
        let nets = tiny_nets(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let b: Vec<_> = nets.iter().map(|n| n.bind(&mut tape, false)).collect();
        let x = tape.constant(rand_tensor(&mut rng, &[1, 1, 8, 8]));
        let y = tape.constant(rand_tensor(&mut rng, &[1, 1, 8, 8]));
        let t = Translators {
            g_xy: &b[0],
            g_yx: &b[1],
            d_x: &b[2],
            d_y: &b[3],
        };
        let obj = total_generator_loss(&mut tape, &t, x, y, &w).unwrap();
        let want = combine_losses(
            &w,
            scalar(&tape, obj.adv_xy),
            scalar(&tape, obj.adv_yx),
            scalar(&tape, obj.cycle),
            scalar(&tape, obj.identity),
        );
        assert!((scalar(&tape, obj.total) - want).abs() < 1e-12);
        if w.lambda_cycle == 0.0 {
            assert_eq!(
                scalar(&tape, obj.total),
                scalar(&tape, obj.adv_xy) + scalar(&tape, obj.adv_yx)
            );
        }
    }
}

#[test]
fn generator_objective_gradcheck() {
    for seed in 0..20u64 {
        for (name, r) in composite_gradcheck(seed) {
            assert!(r < 1e-3, "seed {seed} {name}: {r}");
        }
    }
}

fn adam_hp() -> AdamParams {
    AdamParams {
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
    }
}

fn one_param(v: f64) -> Vec<Param<f64>> {
    vec![Param {
        name: "w".into(),
        value: Tensor::scalar(v),
    }]
}

#[test]
fn adam_first_step_has_magnitude_lr() {
    for g in [3.0, -0.01, 250.0] {
        let mut p = one_param(1.0);
        let mut st = AdamState::for_params(&p);
        let grad = Tensor::scalar(g);
        adam_step(&mut p, &[Some(&grad)], &mut st, 1e-3, &adam_hp()).unwrap();
        let upd = p[0].value.data()[0] - 1.0;
        let want = -1e-3 * g / (g.abs() + 1e-8);
        assert!((upd - want).abs() < 1e-15, "{upd} vs {want}");
    }
}

#[test]
fn adam_zero_grad_and_zero_lr_leave_params() {
    let mut p = one_param(0.75);
    let mut st = AdamState::for_params(&p);
    let zero = Tensor::scalar(0.0);
    adam_step(&mut p, &[Some(&zero)], &mut st, 1e-3, &adam_hp()).unwrap();
    assert_eq!(p[0].value.data()[0], 0.75);
    assert_eq!(st.t, 1);
    let g = Tensor::scalar(2.0);
    adam_step(&mut p, &[Some(&g)], &mut st, 0.0, &adam_hp()).unwrap();
    assert_eq!(p[0].value.data()[0], 0.75);
    assert_eq!(st.t, 2);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut p = one_param(1.0);
    let mut st = AdamState::for_params(&p);
    let g = Tensor::scalar(f64::NAN);
    assert!(matches!(
        adam_step(&mut p, &[Some(&g)], &mut st, 1e-3, &adam_hp()),
        Err(Error::NonFinite(_))
    ));
    assert_eq!(p[0].value.data()[0], 1.0);
}

#[test]
fn adam_trajectory_matches_reference() {
    // Minimize w^2 from w = 1 and replay the recurrences by hand.
    let (lr, b1, b2, eps) = (0.1, 0.5, 0.999, 1e-8);
    let mut p = one_param(1.0);
    let mut st = AdamState::for_params(&p);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=10 {
        let g = 2.0 * p[0].value.data()[0];
        let grad = Tensor::scalar(g);
        adam_step(&mut p, &[Some(&grad)], &mut st, lr, &adam_hp()).unwrap();
        let gr = 2.0 * w;
        m = b1 * m + (1.0 - b1) * gr;
        v = b2 * v + (1.0 - b2) * gr * gr;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        w -= lr * mhat / (vhat.sqrt() + eps);
        assert!((p[0].value.data()[0] - w).abs() < 1e-14, "step {t}");
    }
}

#[test]
fn adam_with_zero_betas_is_normalized_sgd() {
    let hp = AdamParams {
        beta1: 0.0,
        beta2: 0.0,
        eps: 1e-8,
    };
    let mut p = one_param(0.0);
    let mut st = AdamState::for_params(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let g: f64 = rng.random_range(-5.0..5.0);
        let before = p[0].value.data()[0];
        let grad = Tensor::scalar(g);
        adam_step(&mut p, &[Some(&grad)], &mut st, 0.01, &hp).unwrap();
        let want = before - 0.01 * g / (g.abs() + 1e-8);
        assert!((p[0].value.data()[0] - want).abs() < 1e-15);
    }
}

fn batch(images: &[SliceImage]) -> Tensor<f32> {
    let side = images[0].height;
    let data = images.iter().flat_map(|i| i.data.iter().copied()).collect();
    Tensor::new(vec![images.len(), 1, side, side], data).unwrap()
}

#[test]
fn train_step_is_deterministic() {
    let setup = tiny_setup();
    let x = batch(&pool(1, 1, 8));
    let y = batch(&pool(2, 1, 8));
    let run = || {
        let mut st = TrainState::new(&setup).unwrap();
        let recs: Vec<_> = (0..3).map(|_| train_step(&mut st, &setup, &x, &y, 2e-4).unwrap()).collect();
        (recs, st)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn train_step_updates_every_parameter_with_gradient() {
    let setup = tiny_setup();
    let x = batch(&pool(3, 1, 8));
    let y = batch(&pool(4, 1, 8));
    let mut st = TrainState::new(&setup).unwrap();
    let before = st.clone();
    train_step(&mut st, &setup, &x, &y, 2e-4).unwrap();
    let pairs = [
        (&before.g_xy, &st.g_xy, &st.adam_g_xy),
        (&before.g_yx, &st.g_yx, &st.adam_g_yx),
        (&before.d_x, &st.d_x, &st.adam_d_x),
        (&before.d_y, &st.d_y, &st.adam_d_y),
    ];
    for (old, new, adam) in pairs {
        for (k, (p0, p1)) in old.params().iter().zip(new.params()).enumerate() {
            // After one step m = (1 - beta1) g, so a zero moment means a zero gradient.
            for j in 0..p0.value.numel() {
                let moved = p0.value.data()[j] != p1.value.data()[j];
                let had_grad = adam.m[k].data()[j] != 0.0;
                assert_eq!(moved, had_grad, "{} [{j}]", p0.name);
            }
        }
    }
}

#[test]
fn train_step_with_zero_lr_changes_nothing() {
    let setup = tiny_setup();
    let x = batch(&pool(5, 1, 8));
    let y = batch(&pool(6, 1, 8));
    let mut st = TrainState::new(&setup).unwrap();
    let before = st.clone();
    train_step(&mut st, &setup, &x, &y, 0.0).unwrap();
    assert_eq!(before.g_xy, st.g_xy);
    assert_eq!(before.g_yx, st.g_yx);
    assert_eq!(before.d_x, st.d_x);
    assert_eq!(before.d_y, st.d_y);
}

#[test]
fn iteration_count_contract() {
    let mut setup = tiny_setup();
    setup.train.stop_epoch = Some(2);
    let xs = pool(7, 4, 10);
    let ys = pool(8, 6, 9);
    let mut st = TrainState::new(&setup).unwrap();
    train(&setup, &xs, &ys, &mut st, None, |_| {}).unwrap();
    assert_eq!(st.history.len(), 8);
    assert_eq!(st.epoch, 2);
    assert_eq!(iterations_per_epoch(4, 6, 1), 4);
    assert!(st.history.iter().all(|r| r.g_total.is_finite()));
}

#[test]
fn empty_pool_is_rejected() {
    let setup = tiny_setup();
    let mut st = TrainState::new(&setup).unwrap();
    let err = train(&setup, &[], &pool(1, 2, 8), &mut st, None, |_| {}).unwrap_err();
    assert!(err.is_validation());
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    for fake_pool in [0usize, 2] {
        let mut setup = tiny_setup();
        setup.train.fake_pool = fake_pool;
        let xs = pool(9, 3, 10);
        let ys = pool(10, 4, 8);

        let full_dir = tempfile::tempdir().unwrap();
        let mut full = TrainState::new(&setup).unwrap();
        train(&setup, &xs, &ys, &mut full, Some(full_dir.path()), |_| {}).unwrap();

        let part_dir = tempfile::tempdir().unwrap();
        let mut first = TrainState::new(&setup).unwrap();
        let mut short = setup.clone();
        short.train.stop_epoch = Some(1);
        train(&short, &xs, &ys, &mut first, Some(part_dir.path()), |_| {}).unwrap();
        let ckpt = part_dir.path().join("checkpoints").join("1");
        let mut resumed = load_checkpoint(&ckpt, &setup).unwrap();
        assert_eq!(resumed, first);
        train(&setup, &xs, &ys, &mut resumed, Some(part_dir.path()), |_| {}).unwrap();

        assert_eq!(resumed, full);
        let a = std::fs::read(full_dir.path().join("losses.csv")).unwrap();
        let b = std::fs::read(part_dir.path().join("losses.csv")).unwrap();
        assert_eq!(a, b);
        for name in ["generator_xy.bin", "disc_y.adam.bin", "state.json"] {
            let a = std::fs::read(full_dir.path().join("checkpoints/4").join(name)).unwrap();
            let b = std::fs::read(part_dir.path().join("checkpoints/4").join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }
}

#[test]
fn checkpoint_rejects_other_architecture() {
    let setup = tiny_setup();
    let dir = tempfile::tempdir().unwrap();
    let mut st = TrainState::new(&setup).unwrap();
    let mut one = setup.clone();
    one.train.stop_epoch = Some(1);
    train(&one, &pool(1, 2, 8), &pool(2, 2, 8), &mut st, Some(dir.path()), |_| {}).unwrap();
    let mut other = setup.clone();
    other.generator.base_channels = 2;
    assert!(load_checkpoint(&dir.path().join("checkpoints/1"), &other).is_err());
}

#[test]
fn synthesize_preserves_shape_and_range() {
    let cfg = tiny_generator();
    let mut g = build_generator::<f32>(&cfg).unwrap();
    init_weights(&mut g, 1, 0.5).unwrap();
    let img = pool(11, 1, 8).pop().unwrap().with_provenance("v1", 3);
    let out = synthesize_healthy(&g, &img).unwrap();
    assert_eq!((out.height, out.width), (8, 8));
    assert!(out.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(out.provenance, img.provenance);
}

#[test]
fn untrained_generator_outputs_tanh_of_bias() {
    let cfg = tiny_generator();
    let mut g = build_generator::<f32>(&cfg).unwrap();
    for p in g.params_mut() {
        if p.name == "out.b" {
            p.value = Tensor::full(vec![1], 0.4);
        }
    }
    let img = pool(12, 1, 8).pop().unwrap();
    let out = synthesize_healthy(&g, &img).unwrap();
    let want = 0.4f32.tanh();
    assert!(out.data.iter().all(|&v| (v - want).abs() < 1e-6));
}

#[test]
fn wrong_side_is_a_shape_error() {
    let g = build_generator::<f32>(&tiny_generator()).unwrap();
    let img = pool(13, 1, 16).pop().unwrap();
    assert!(synthesize_healthy(&g, &img).is_err());
}

#[test]
fn image_map_is_usable_with_closures() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(vec![1]));
    let f = |t: &mut Tape<f64>, v: Var| Ok(t.scale(v, 3.0));
    let y = f.apply(&mut tape, x).unwrap();
    assert_eq!(scalar(&tape, y), 3.0);
}

#[test]
fn phantom_training_lowers_generator_loss() {
    use ctlesion::phantom::{gen_infected, PhantomSpec};
    use ctlesion::pipeline::{preprocess, PreprocessConfig};

    let prep = PreprocessConfig::phantom();
    let mut infected = Vec::new();
    let mut healthy = Vec::new();
    for seed in 0..2 {
        let inf = gen_infected(&PhantomSpec::default().with_seed(seed)).unwrap();
        let p = preprocess(&inf.volume, &inf.lung, &prep, "x").unwrap();
        let (lo, hi) = inf.lesion.bounding_box().unwrap();
        infected.extend(p.slices().unwrap().into_iter().filter(|s| (lo[2]..=hi[2]).contains(&s.provenance.slice_index)));
        let q = preprocess(&inf.healthy, &inf.lung, &prep, "y").unwrap();
        healthy.extend(q.slices().unwrap().into_iter().step_by(3));
    }
    for seed in 0..3 {
        let mut setup = TrainSetup::phantom();
        setup.train.seed = seed;
        setup.train.epochs = 5;
        setup.train.decay_start_epoch = 4;
        let mut state = TrainState::new(&setup).unwrap();
        train(&setup, &infected, &healthy, &mut state, None, |_| {}).unwrap();
        let first = state.history[0].g_total;
        let last: Vec<f64> = state.history.iter().filter(|r| r.epoch == 5).map(|r| r.g_total).collect();
        let mean = last.iter().sum::<f64>() / last.len() as f64;
        assert!(mean < first, "seed {seed}: {first} -> {mean}");
    }
}
