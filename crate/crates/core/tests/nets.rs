use ctlesion::autodiff::{Tape, Tensor};
use ctlesion::nets::{
    build_discriminator, build_generator, init_weights, receptive_field, DiscriminatorConfig,
    GeneratorConfig, ImageMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        stages: 4,
        base_channels: 4,
        max_channels: 16,
        input_side: 16,
        ..GeneratorConfig::paper()
    }
}

#[test]
fn paper_channel_list_and_sides() {
    let cfg = GeneratorConfig::paper();
    assert_eq!(cfg.channel_list(), vec![64, 128, 256, 512, 512, 512, 512, 512]);
    assert_eq!(cfg.encoder_sides(), vec![128, 64, 32, 16, 8, 4, 2, 1]);
}

#[test]
fn encoder_sides_match_repeated_halving() {
    for stages in 1..=9 {
        let cfg = GeneratorConfig {
            stages,
            input_side: 1 << stages,
            ..GeneratorConfig::paper()
        };
        let mut side = cfg.input_side;
        let mut want = Vec::new();
        while side > 1 {
            side /= 2;
            want.push(side);
        }
        assert_eq!(cfg.encoder_sides(), want);
    }
}

#[test]
fn phantom_generator_preserves_shape_and_range() {
    let cfg = GeneratorConfig::phantom();
    let mut g = build_generator::<f32>(&cfg).unwrap();
    init_weights(&mut g, 1, 0.02).unwrap();
    let y = g.forward(&noise(2, &[1, 1, 64, 64])).unwrap();
    assert_eq!(y.shape(), &[1, 1, 64, 64]);
    assert!(y.data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn generator_rejects_wrong_input() {
    let g = build_generator::<f32>(&small_generator()).unwrap();
    assert!(g.forward(&noise(0, &[1, 1, 8, 8])).is_err());
    assert!(g.forward(&noise(0, &[1, 2, 16, 16])).is_err());
}

#[test]
fn generator_side_must_be_power_of_stages() {
    let cfg = GeneratorConfig {
        input_side: 128,
        ..GeneratorConfig::paper()
    };
    assert!(build_generator::<f32>(&cfg).unwrap_err().is_validation());
}

#[test]
fn discriminator_output_sizes() {
    let cfg = DiscriminatorConfig::paper();
    let mut d = build_discriminator::<f32>(&DiscriminatorConfig::phantom()).unwrap();
    init_weights(&mut d, 3, 0.02).unwrap();
    let out = d.forward(&noise(4, &[1, 1, 64, 64])).unwrap();
    assert_eq!(out.shape(), &[1, 1, 6, 6]);

    let sides = cfg.output_sides(70).unwrap();
    let su = *sides.last().unwrap();
    assert!(su >= 1);
    assert!(receptive_field(cfg.kernel, &cfg.strides) >= 70);
    let out = d.forward(&noise(5, &[1, 1, 70, 70])).unwrap();
    assert_eq!(out.shape(), &[1, 1, su, su]);
}

#[test]
fn discriminator_batch_only_scales_leading_dim() {
    let mut d = build_discriminator::<f32>(&DiscriminatorConfig::phantom()).unwrap();
    init_weights(&mut d, 6, 0.02).unwrap();
    let one = d.forward(&noise(7, &[1, 1, 64, 64])).unwrap();
    let two = d.forward(&noise(7, &[2, 1, 64, 64])).unwrap();
    assert_eq!(two.shape()[0], 2);
    assert_eq!(&two.shape()[1..], &one.shape()[1..]);
}

#[test]
fn measured_receptive_field_is_70() {
    // Backpropagate from one interior output unit through the bare conv stack
    // and measure the width of the input support of its gradient.
    let cfg = DiscriminatorConfig::paper();
    let side = 134;
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(vec![1, 1, side, side]));
    let mut h = x;
    for &stride in &cfg.strides {
        let w = tape.constant(Tensor::ones(vec![1, 1, cfg.kernel, cfg.kernel]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        h = tape.conv2d(h, w, b, stride, cfg.padding).unwrap();
    }
    let su = tape.value(h).shape()[2];
    let mut pick = Tensor::zeros(vec![1, 1, su, su]);
    pick.data_mut()[(su / 2) * su + su / 2] = 1.0;
    let pick = tape.constant(pick);
    let unit = tape.mul(h, pick).unwrap();
    let loss = tape.sum(unit);
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    let cols: Vec<usize> = (0..side)
        .filter(|&c| (0..side).any(|r| g.data()[r * side + c] != 0.0))
        .collect();
    let width = cols.last().unwrap() - cols.first().unwrap() + 1;
    assert!(*cols.first().unwrap() > 0 && *cols.last().unwrap() < side - 1);
    assert_eq!(width, receptive_field(cfg.kernel, &cfg.strides));
    assert_eq!(width, 70);
}

#[test]
fn init_is_deterministic() {
    let cfg = small_generator();
    let mut a = build_generator::<f32>(&cfg).unwrap();
    let mut b = build_generator::<f32>(&cfg).unwrap();
    init_weights(&mut a, 42, 0.02).unwrap();
    init_weights(&mut b, 42, 0.02).unwrap();
    assert_eq!(a, b);
    init_weights(&mut b, 43, 0.02).unwrap();
    assert_ne!(a, b);
}

#[test]
fn init_statistics() {
    let mut d = build_discriminator::<f64>(&DiscriminatorConfig::phantom()).unwrap();
    init_weights(&mut d, 9, 0.02).unwrap();
    let weights: Vec<f64> = d
        .params()
        .iter()
        .filter(|p| p.name.ends_with(".w"))
        .flat_map(|p| p.value.data().iter().copied())
        .take(100_000)
        .collect();
    assert_eq!(weights.len(), 100_000);
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let sd = (weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 4.0 * 0.02 / n.sqrt());
    assert!((0.018..=0.022).contains(&sd));
    assert!(weights.iter().all(|w| w.abs() < 0.2));
    for p in d.params() {
        if p.name.ends_with(".gamma") {
            assert!(p.value.data().iter().all(|&v| v == 1.0));
        } else if !p.name.ends_with(".w") {
            assert!(p.value.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn forward_is_finite_for_many_seeds() {
    let gcfg = small_generator();
    let dcfg = DiscriminatorConfig {
        strides: vec![2, 1, 1, 1, 1],
        channels: vec![4, 4, 4, 4, 1],
        ..DiscriminatorConfig::paper()
    };
    for seed in 0..100u64 {
        let mut g = build_generator::<f32>(&gcfg).unwrap();
        let mut d = build_discriminator::<f32>(&dcfg).unwrap();
        init_weights(&mut g, seed, 0.02 + 0.01 * (seed % 5) as f64).unwrap();
        init_weights(&mut d, seed + 1000, 0.02).unwrap();
        let x = noise(seed, &[1, 1, 16, 16]);
        let y = g.forward(&x).unwrap();
        assert!(y.is_finite());
        assert!(d.forward(&y).unwrap().is_finite());
    }
}

#[test]
fn bound_parameters_receive_gradients() {
    let cfg = small_generator();
    let mut g = build_generator::<f64>(&cfg).unwrap();
    init_weights(&mut g, 10, 0.1).unwrap();
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape, true);
    let x = tape.constant(noise(11, &[1, 1, 16, 16]).cast());
    let y = bound.apply(&mut tape, x).unwrap();
    let loss = tape.mean(y);
    tape.backward(loss).unwrap();
    for (p, &v) in g.params().iter().zip(bound.vars()) {
        assert!(tape.grad(v).is_some(), "{} has no gradient", p.name);
    }
}
