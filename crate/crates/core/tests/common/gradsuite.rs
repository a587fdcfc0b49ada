//! Gradient-check suites shared by the unit-level tests and the acceptance run.

use ctlesion::autodiff::{gradcheck, Tape, Tensor, Var, INSTANCE_NORM_EPS};
use ctlesion::cyclegan::{total_generator_loss, LossWeights, Translators};
use ctlesion::nets::{
    build_discriminator, build_generator, init_weights, DiscriminatorConfig, GeneratorConfig, Network,
};
use ctlesion::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from 0 so kinks are never straddled by a finite difference.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Contract a tensor with fixed random weights so every coordinate matters.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> ctlesion::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = rand_tensor(&mut rng, tape.value(y).shape());
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Worst relative error per op for one seed of randomized small shapes.
pub fn op_gradcheck(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;

    let x = rand_tensor(&mut rng, &[1, 2, 6, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let stride = 1 + (seed as usize % 2);
    {
        let (w, b) = (w.clone(), b.clone());
        let r = gradcheck(
            |t, v| {
                let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
                let y = t.conv2d(v, wv, bv, stride, 1)?;
                weighted_sum(t, y, seed)
            },
            &x,
            h,
        )
        .unwrap();
        out.push(("conv2d/x", r.max_rel_error));
    }
    {
        let (x, b) = (x.clone(), b.clone());
        let r = gradcheck(
            |t, v| {
                let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
                let y = t.conv2d(xv, v, bv, stride, 1)?;
                weighted_sum(t, y, seed)
            },
            &w,
            h,
        )
        .unwrap();
        out.push(("conv2d/w", r.max_rel_error));
    }
    {
        let (x, w) = (x.clone(), w.clone());
        let r = gradcheck(
            |t, v| {
                let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
                let y = t.conv2d(xv, wv, v, stride, 0)?;
                weighted_sum(t, y, seed)
            },
            &b,
            h,
        )
        .unwrap();
        out.push(("conv2d/b", r.max_rel_error));
    }
    {
        let xs = rand_tensor(&mut rng, &[1, 2, 3, 4]);
        let (w, b) = (w.clone(), b.clone());
        let r = gradcheck(
            |t, v| {
                let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
                let y = t.upsample_conv(v, wv, bv)?;
                weighted_sum(t, y, seed)
            },
            &xs,
            h,
        )
        .unwrap();
        out.push(("upsample_conv", r.max_rel_error));
    }
    {
        let xn = rand_tensor(&mut rng, &[1, 4, 8, 8]);
        let gamma = rand_tensor(&mut rng, &[4]);
        let beta = rand_tensor(&mut rng, &[4]);
        let (g2, b2) = (gamma.clone(), beta.clone());
        let r = gradcheck(
            |t, v| {
                let (gv, bv) = (t.constant(g2.clone()), t.constant(b2.clone()));
                let y = t.instance_norm(v, gv, bv, INSTANCE_NORM_EPS)?;
                weighted_sum(t, y, seed)
            },
            &xn,
            h,
        )
        .unwrap();
        out.push(("instance_norm/x", r.max_rel_error));
        let xn2 = xn.clone();
        let r = gradcheck(
            |t, v| {
                let (xv, bv) = (t.constant(xn2.clone()), t.constant(beta.clone()));
                let y = t.instance_norm(xv, v, bv, INSTANCE_NORM_EPS)?;
                weighted_sum(t, y, seed)
            },
            &gamma,
            h,
        )
        .unwrap();
        out.push(("instance_norm/gamma", r.max_rel_error));
    }
    {
        let xa = rand_away_from_zero(&mut rng, &[1, 2, 4, 4]);
        for (name, op) in [("leaky_relu", 0), ("relu", 1), ("tanh", 2)] {
            let r = gradcheck(
                |t, v| {
                    let y = match op {
                        0 => t.leaky_relu(v, 0.2),
                        1 => t.relu(v),
                        _ => t.tanh(v),
                    };
                    weighted_sum(t, y, seed)
                },
                &xa,
                h,
            )
            .unwrap();
            out.push((name, r.max_rel_error));
        }
    }
    {
        let a = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let other = rand_tensor(&mut rng, &[1, 3, 3, 3]);
        let r = gradcheck(
            |t, v| {
                let o = t.constant(other.clone());
                let y = t.concat_channels(o, v)?;
                weighted_sum(t, y, seed)
            },
            &a,
            h,
        )
        .unwrap();
        out.push(("concat", r.max_rel_error));
    }
    {
        let a = rand_tensor(&mut rng, &[1, 1, 4, 4]);
        // Offsets bounded away from zero keep |a - b| off its kink.
        let off = rand_away_from_zero(&mut rng, &[1, 1, 4, 4]);
        let target = Tensor::new(
            vec![1, 1, 4, 4],
            a.data().iter().zip(off.data()).map(|(x, o)| x + o).collect(),
        )
        .unwrap();
        let r = gradcheck(
            |t, v| {
                let tv = t.constant(target.clone());
                t.l1_loss(v, tv)
            },
            &a,
            h,
        )
        .unwrap();
        out.push(("l1_loss", r.max_rel_error));
        let r = gradcheck(
            |t, v| {
                let tv = t.constant(target.clone());
                t.mse_loss(tv, v)
            },
            &a,
            h,
        )
        .unwrap();
        out.push(("mse_loss", r.max_rel_error));
    }
    out
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        stages: 3,
        base_channels: 4,
        max_channels: 4,
        input_side: 8,
        ..GeneratorConfig::paper()
    }
}

pub fn tiny_discriminator() -> DiscriminatorConfig {
    DiscriminatorConfig {
        strides: vec![1, 1, 1, 1, 1],
        channels: vec![4, 4, 4, 4, 1],
        ..DiscriminatorConfig::paper()
    }
}

pub fn tiny_nets(seed: u64) -> [Network<f64>; 4] {
    let g = tiny_generator();
    let d = tiny_discriminator();
    let mut nets = [
        build_generator(&g).unwrap(),
        build_generator(&g).unwrap(),
        build_discriminator(&d).unwrap(),
        build_discriminator(&d).unwrap(),
    ];
    for (k, n) in nets.iter_mut().enumerate() {
        init_weights(n, seed * 10 + k as u64, 0.7).unwrap();
    }
    nets
}

/// Generator objective as a function of one tensor: the input batch or one parameter of G_XY.
pub fn objective<'a>(
    nets: &'a [Network<f64>; 4],
    y: &Tensor<f64>,
    x: Option<&Tensor<f64>>,
    param: usize,
) -> impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'a {
    let y = y.clone();
    let x = x.cloned();
    move |tape: &mut Tape<f64>, v: Var| {
        let (xv, gxy_vars) = match &x {
            None => {
                let vars = nets[0].params().iter().map(|p| tape.constant(p.value.clone())).collect();
                (v, vars)
            }
            Some(xt) => {
                let xv = tape.constant(xt.clone());
                let vars = nets[0]
                    .params()
                    .iter()
                    .enumerate()
                    .map(|(k, p)| if k == param { v } else { tape.constant(p.value.clone()) })
                    .collect();
                (xv, vars)
            }
        };
        let g_xy = nets[0].bind_vars(tape, gxy_vars)?;
        let g_yx = nets[1].bind(tape, false);
        let d_x = nets[2].bind(tape, false);
        let d_y = nets[3].bind(tape, false);
        let yv = tape.constant(y.clone());
        let t = Translators {
            g_xy: &g_xy,
            g_yx: &g_yx,
            d_x: &d_x,
            d_y: &d_y,
        };
        Ok(total_generator_loss(tape, &t, xv, yv, &LossWeights::default())?.total)
    }
}

/// Worst relative error of the full generator objective for one seed:
/// the input batch, then every parameter of G_XY.
pub fn composite_gradcheck(seed: u64) -> Vec<(String, f64)> {
    let nets = tiny_nets(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let x = rand_tensor(&mut rng, &[1, 1, 8, 8]);
    let y = rand_tensor(&mut rng, &[1, 1, 8, 8]);
    let mut out = vec![("input".to_string(), gradcheck(objective(&nets, &y, None, 0), &x, 1e-4).unwrap().max_rel_error)];
    for (k, p) in nets[0].params().iter().enumerate() {
        let r = gradcheck(objective(&nets, &y, Some(&x), k), &p.value, 1e-4).unwrap();
        out.push((p.name.clone(), r.max_rel_error));
    }
    out
}
