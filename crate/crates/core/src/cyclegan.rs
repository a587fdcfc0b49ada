//! Cycle-consistent adversarial training of the infected-to-healthy translator.
//!
//! Domain X holds infected slices and domain Y healthy ones. `G_XY` maps
//! infected to healthy and is the network used at segmentation time; `D_Y`
//! judges healthy slices and `D_X` infected ones. Adversarial terms use least
//! squares targets (real 1, fake 0).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_blob, write_blob, NamedTensor, Scalar, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::imgvol::{SliceImage, SliceLabel};
use crate::nets::{
    build_discriminator, build_generator, init_weights, Architecture, DiscriminatorConfig,
    GeneratorConfig, ImageMap, Network, Param,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cycle: f64,
    pub lambda_identity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cycle: 10.0,
            lambda_identity: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cycle", self.lambda_cycle),
            ("lambda_identity", self.lambda_identity),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub decay_start_epoch: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stop after this epoch instead of running all `epochs`.
    pub stop_epoch: Option<usize>,
    pub crop_side: usize,
    pub seed: u64,
    pub init_std: f64,
    /// Capacity of the history of generated images shown to the
    /// discriminators; 0 feeds them only the current fakes.
    pub fake_pool: usize,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 100,
            lr0: 2e-4,
            decay_start_epoch: 50,
            batch_size: 1,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            stop_epoch: Some(85),
            crop_side: 256,
            seed: 0,
            init_std: 0.02,
            fake_pool: 0,
        }
    }

    pub fn phantom() -> Self {
        TrainConfig {
            epochs: 20,
            decay_start_epoch: 10,
            stop_epoch: None,
            crop_side: 64,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.decay_start_epoch && self.decay_start_epoch < self.epochs) {
            return Err(invalid!(
                "need 0 < decay_start_epoch ({}) < epochs ({})",
                self.decay_start_epoch,
                self.epochs
            ));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(invalid!("lr0 must be > 0, got {}", self.lr0));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be >= 1"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(invalid!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if let Some(stop) = self.stop_epoch {
            if stop == 0 || stop > self.epochs {
                return Err(invalid!("stop_epoch {stop} outside 1..={}", self.epochs));
            }
        }
        if self.crop_side == 0 {
            return Err(invalid!("crop_side must be >= 1"));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(invalid!("init_std must be > 0, got {}", self.init_std));
        }
        Ok(())
    }

    pub fn last_epoch(&self) -> usize {
        self.stop_epoch.unwrap_or(self.epochs)
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSetup {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
}

impl TrainSetup {
    pub fn phantom() -> Self {
        TrainSetup {
            generator: GeneratorConfig::phantom(),
            discriminator: DiscriminatorConfig::phantom(),
            train: TrainConfig::phantom(),
            weights: LossWeights::default(),
        }
    }

    pub fn paper() -> Self {
        TrainSetup {
            generator: GeneratorConfig::paper(),
            discriminator: DiscriminatorConfig::paper(),
            train: TrainConfig::paper(),
            weights: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        self.weights.validate()?;
        if self.train.crop_side != self.generator.input_side {
            return Err(invalid!(
                "crop_side {} must equal the generator input side {}",
                self.train.crop_side,
                self.generator.input_side
            ));
        }
        if self.generator.in_channels != 1
            || self.generator.out_channels != 1
            || self.discriminator.in_channels != 1
        {
            return Err(invalid!("slices are single-channel; networks must take and emit 1 channel"));
        }
        self.discriminator.output_sides(self.train.crop_side)?;
        Ok(())
    }
}

/// Learning rate for 1-based `epoch`: constant, then linear decay to 0 at `epochs`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch <= cfg.decay_start_epoch {
        return cfg.lr0;
    }
    let left = cfg.epochs.saturating_sub(epoch) as f64;
    let span = (cfg.epochs - cfg.decay_start_epoch) as f64;
    cfg.lr0 * (left / span)
}

/// Least-squares discriminator loss `mean((D(real)-1)^2) + mean(D(fake)^2)`.
///
/// `fake` is detached first so no gradient reaches its generator.
pub fn lsgan_d_loss<T: Scalar>(
    tape: &mut Tape<T>,
    d: &impl ImageMap<T>,
    real: Var,
    fake: Var,
) -> Result<Var> {
    let fake = tape.detach(fake);
    let dr = d.apply(tape, real)?;
    let df = d.apply(tape, fake)?;
    if tape.value(dr).shape() != tape.value(df).shape() {
        return Err(Error::Shape(format!(
            "discriminator outputs differ: {:?} vs {:?}",
            tape.value(dr).shape(),
            tape.value(df).shape()
        )));
    }
    let a = tape.mse_to(dr, 1.0)?;
    let b = tape.mse_to(df, 0.0)?;
    tape.add(a, b)
}

/// Least-squares generator loss `mean((D(fake)-1)^2)`.
pub fn lsgan_g_loss<T: Scalar>(tape: &mut Tape<T>, d: &impl ImageMap<T>, fake: Var) -> Result<Var> {
    let df = d.apply(tape, fake)?;
    tape.mse_to(df, 1.0)
}

fn cycle_from<T: Scalar>(
    tape: &mut Tape<T>,
    g_xy: &impl ImageMap<T>,
    g_yx: &impl ImageMap<T>,
    (x, y): (Var, Var),
    (fake_y, fake_x): (Var, Var),
) -> Result<Var> {
    let rec_x = g_yx.apply(tape, fake_y)?;
    let rec_y = g_xy.apply(tape, fake_x)?;
    let a = tape.l1_loss(rec_x, x)?;
    let b = tape.l1_loss(rec_y, y)?;
    tape.add(a, b)
}

/// `mean|G_YX(G_XY(x)) - x| + mean|G_XY(G_YX(y)) - y|`.
pub fn cycle_loss<T: Scalar>(
    tape: &mut Tape<T>,
    g_xy: &impl ImageMap<T>,
    g_yx: &impl ImageMap<T>,
    x: Var,
    y: Var,
) -> Result<Var> {
    let fake_y = g_xy.apply(tape, x)?;
    let fake_x = g_yx.apply(tape, y)?;
    cycle_from(tape, g_xy, g_yx, (x, y), (fake_y, fake_x))
}

/// `mean|G_XY(y) - y| + mean|G_YX(x) - x|`.
pub fn identity_loss<T: Scalar>(
    tape: &mut Tape<T>,
    g_xy: &impl ImageMap<T>,
    g_yx: &impl ImageMap<T>,
    x: Var,
    y: Var,
) -> Result<Var> {
    let same_y = g_xy.apply(tape, y)?;
    let same_x = g_yx.apply(tape, x)?;
    let a = tape.l1_loss(same_y, y)?;
    let b = tape.l1_loss(same_x, x)?;
    tape.add(a, b)
}

/// Scalar form of the generator objective.
pub fn combine_losses(w: &LossWeights, adv_xy: f64, adv_yx: f64, cycle: f64, identity: f64) -> f64 {
    adv_xy + adv_yx + w.lambda_cycle * cycle + w.lambda_identity * identity
}

/// Terms of the generator objective as recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: Var,
    pub adv_xy: Var,
    pub adv_yx: Var,
    pub cycle: Var,
    pub identity: Var,
    pub fake_y: Var,
    pub fake_x: Var,
}

pub struct Translators<'a, G, D> {
    pub g_xy: &'a G,
    pub g_yx: &'a G,
    pub d_x: &'a D,
    pub d_y: &'a D,
}

/// `adv(D_Y, G_XY(x)) + adv(D_X, G_YX(y)) + lambda_c * cycle + lambda_i * identity`.
pub fn total_generator_loss<T: Scalar, G: ImageMap<T>, D: ImageMap<T>>(
    tape: &mut Tape<T>,
    nets: &Translators<'_, G, D>,
    x: Var,
    y: Var,
    w: &LossWeights,
) -> Result<GeneratorLoss> {
    let fake_y = nets.g_xy.apply(tape, x)?;
    let fake_x = nets.g_yx.apply(tape, y)?;
    let adv_xy = lsgan_g_loss(tape, nets.d_y, fake_y)?;
    let adv_yx = lsgan_g_loss(tape, nets.d_x, fake_x)?;
    let cycle = cycle_from(tape, nets.g_xy, nets.g_yx, (x, y), (fake_y, fake_x))?;
    let identity = identity_loss(tape, nets.g_xy, nets.g_yx, x, y)?;
    let adv = tape.add(adv_xy, adv_yx)?;
    let c = tape.scale(cycle, w.lambda_cycle);
    let i = tape.scale(identity, w.lambda_identity);
    let total = tape.add(adv, c)?;
    let total = tape.add(total, i)?;
    Ok(GeneratorLoss {
        total,
        adv_xy,
        adv_yx,
        cycle,
        identity,
        fake_y,
        fake_x,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_params(params: &[Param<T>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero.
pub fn adam_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Option<&Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam got {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} does not match parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let (c1, c2) = (T::of(1.0 - hp.beta1), T::of(1.0 - hp.beta2));
    let bc1 = T::of(1.0 - hp.beta1.powi(t));
    let bc2 = T::of(1.0 - hp.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(hp.eps));
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.value.data_mut();
        match grads[i] {
            Some(g) => {
                for (j, &gj) in g.data().iter().enumerate() {
                    m[j] = b1 * m[j] + c1 * gj;
                    v[j] = b2 * v[j] + c2 * gj * gj;
                }
            }
            None => {
                for j in 0..m.len() {
                    m[j] = b1 * m[j];
                    v[j] = b2 * v[j];
                }
            }
        }
        for j in 0..w.len() {
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w[j] = w[j] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Losses of one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub g_adv_xy: f64,
    pub g_adv_yx: f64,
    pub cycle: f64,
    pub identity: f64,
    pub g_total: f64,
    pub d_x: f64,
    pub d_y: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,epoch,g_adv_xy,g_adv_yx,cycle,identity,g_total,d_x,d_y,lr";

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.iteration, r.epoch, r.g_adv_xy, r.g_adv_yx, r.cycle, r.identity, r.g_total, r.d_x, r.d_y, r.lr
        );
    }
    s
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRecord>> {
    let bad = |line: usize, why: &str| Error::Format {
        path: PathBuf::from("losses.csv"),
        reason: format!("line {line}: {why}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad(i + 2, "expected 10 fields"));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(i + 2, f[k]));
        out.push(LossRecord {
            iteration: f[0].parse().map_err(|_| bad(i + 2, f[0]))?,
            epoch: f[1].parse().map_err(|_| bad(i + 2, f[1]))?,
            g_adv_xy: num(2)?,
            g_adv_yx: num(3)?,
            cycle: num(4)?,
            identity: num(5)?,
            g_total: num(6)?,
            d_x: num(7)?,
            d_y: num(8)?,
            lr: num(9)?,
        });
    }
    Ok(out)
}

/// Networks, optimizer moments, counters and loss history of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub g_xy: Network<f32>,
    pub g_yx: Network<f32>,
    pub d_x: Network<f32>,
    pub d_y: Network<f32>,
    pub adam_g_xy: AdamState<f32>,
    pub adam_g_yx: AdamState<f32>,
    pub adam_d_x: AdamState<f32>,
    pub adam_d_y: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: u64,
    pub history: Vec<LossRecord>,
    pub pool_x: Vec<Tensor<f32>>,
    pub pool_y: Vec<Tensor<f32>>,
}

/// Independent 64-bit seed for `stream` under a master seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_G_XY: u64 = 1;
const STREAM_G_YX: u64 = 2;
const STREAM_D_X: u64 = 3;
const STREAM_D_Y: u64 = 4;
const STREAM_EPOCH: u64 = 1 << 32;
const STREAM_POOL: u64 = 1 << 48;

impl TrainState {
    /// Freshly initialized networks.
    pub fn new(setup: &TrainSetup) -> Result<Self> {
        setup.validate()?;
        let seed = setup.train.seed;
        let std = setup.train.init_std;
        let generator = |stream| -> Result<Network<f32>> {
            let mut g = build_generator(&setup.generator)?;
            init_weights(&mut g, derive_seed(seed, stream), std)?;
            Ok(g)
        };
        let discriminator = |stream| -> Result<Network<f32>> {
            let mut d = build_discriminator(&setup.discriminator)?;
            init_weights(&mut d, derive_seed(seed, stream), std)?;
            Ok(d)
        };
        let (g_xy, g_yx) = (generator(STREAM_G_XY)?, generator(STREAM_G_YX)?);
        let (d_x, d_y) = (discriminator(STREAM_D_X)?, discriminator(STREAM_D_Y)?);
        Ok(TrainState {
            adam_g_xy: AdamState::for_params(g_xy.params()),
            adam_g_yx: AdamState::for_params(g_yx.params()),
            adam_d_x: AdamState::for_params(d_x.params()),
            adam_d_y: AdamState::for_params(d_y.params()),
            g_xy,
            g_yx,
            d_x,
            d_y,
            epoch: 0,
            iteration: 0,
            history: Vec::new(),
            pool_x: Vec::new(),
            pool_y: Vec::new(),
        })
    }
}

fn grads_of<'t, T: Scalar>(tape: &'t Tape<T>, vars: &[Var]) -> Vec<Option<&'t Tensor<T>>> {
    vars.iter().map(|&v| tape.grad(v)).collect()
}

fn scalar_of(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).item().map(f64::from).unwrap_or(f64::NAN)
}

/// Replace each fake with a stored one half the time once the pool is full.
fn query_pool(pool: &mut Vec<Tensor<f32>>, capacity: usize, fake: Tensor<f32>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    if capacity == 0 {
        return fake;
    }
    if pool.len() < capacity {
        pool.push(fake.clone());
        return fake;
    }
    if rng.random_bool(0.5) {
        let k = rng.random_range(0..capacity);
        std::mem::replace(&mut pool[k], fake)
    } else {
        fake
    }
}

fn discriminator_step(
    d: &mut Network<f32>,
    adam: &mut AdamState<f32>,
    real: &Tensor<f32>,
    fake: Tensor<f32>,
    lr: f64,
    hp: &AdamParams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = d.bind(&mut tape, true);
    let vars = bound.vars().to_vec();
    let rv = tape.constant(real.clone());
    let fv = tape.constant(fake);
    let loss = lsgan_d_loss(&mut tape, &bound, rv, fv)?;
    drop(bound);
    let value = scalar_of(&tape, loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("discriminator loss {value}")));
    }
    tape.backward(loss)?;
    adam_step(d.params_mut(), &grads_of(&tape, &vars), adam, lr, hp)?;
    Ok(value)
}

/// One generator update on both translators, then one update of each discriminator.
///
/// `x` is a batch of infected slices and `y` a batch of healthy ones, both
/// shaped `[B, 1, side, side]`.
pub fn train_step(
    state: &mut TrainState,
    setup: &TrainSetup,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    lr: f64,
) -> Result<LossRecord> {
    let hp = setup.train.adam();
    let mut tape = Tape::<f32>::new();
    let g_xy = state.g_xy.bind(&mut tape, true);
    let g_yx = state.g_yx.bind(&mut tape, true);
    let d_x = state.d_x.bind(&mut tape, false);
    let d_y = state.d_y.bind(&mut tape, false);
    let (vars_xy, vars_yx) = (g_xy.vars().to_vec(), g_yx.vars().to_vec());
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let nets = Translators {
        g_xy: &g_xy,
        g_yx: &g_yx,
        d_x: &d_x,
        d_y: &d_y,
    };
    let obj = total_generator_loss(&mut tape, &nets, xv, yv, &setup.weights)?;
    drop((g_xy, g_yx, d_x, d_y));
    let g_total = scalar_of(&tape, obj.total);
    if !g_total.is_finite() {
        return Err(Error::NonFinite(format!(
            "generator loss {g_total} at iteration {}",
            state.iteration + 1
        )));
    }
    tape.backward(obj.total)?;
    adam_step(state.g_xy.params_mut(), &grads_of(&tape, &vars_xy), &mut state.adam_g_xy, lr, &hp)?;
    adam_step(state.g_yx.params_mut(), &grads_of(&tape, &vars_yx), &mut state.adam_g_yx, lr, &hp)?;

    let mut pool_rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.train.seed, STREAM_POOL + state.iteration));
    let cap = setup.train.fake_pool;
    let fake_y = query_pool(&mut state.pool_y, cap, tape.value(obj.fake_y).clone(), &mut pool_rng);
    let fake_x = query_pool(&mut state.pool_x, cap, tape.value(obj.fake_x).clone(), &mut pool_rng);
    let d_y = discriminator_step(&mut state.d_y, &mut state.adam_d_y, y, fake_y, lr, &hp)?;
    let d_x = discriminator_step(&mut state.d_x, &mut state.adam_d_x, x, fake_x, lr, &hp)?;

    state.iteration += 1;
    Ok(LossRecord {
        iteration: state.iteration,
        epoch: state.epoch + 1,
        g_adv_xy: scalar_of(&tape, obj.adv_xy),
        g_adv_yx: scalar_of(&tape, obj.adv_yx),
        cycle: scalar_of(&tape, obj.cycle),
        identity: scalar_of(&tape, obj.identity),
        g_total,
        d_x,
        d_y,
        lr,
    })
}

/// Iterations in one epoch over pools of the given sizes.
pub fn iterations_per_epoch(n_x: usize, n_y: usize, batch: usize) -> usize {
    n_x.min(n_y) / batch.max(1)
}

fn random_crop(img: &SliceImage, side: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    if img.height < side || img.width < side {
        return Err(Error::Shape(format!(
            "slice {}x{} is smaller than crop side {side}",
            img.height, img.width
        )));
    }
    let r0 = rng.random_range(0..=img.height - side);
    let c0 = rng.random_range(0..=img.width - side);
    let mut out = Vec::with_capacity(side * side);
    for r in r0..r0 + side {
        out.extend_from_slice(&img.data[r * img.width + c0..r * img.width + c0 + side]);
    }
    Ok(out)
}

/// Where checkpoints and the loss curve of a run live.
pub fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(epoch.to_string())
}

/// Run epochs `state.epoch + 1 ..= last_epoch`, checkpointing after each one
/// when `out` is given. `on_epoch` sees the state after every epoch.
pub fn train(
    setup: &TrainSetup,
    x_pool: &[SliceImage],
    y_pool: &[SliceImage],
    state: &mut TrainState,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&TrainState),
) -> Result<()> {
    setup.validate()?;
    if x_pool.is_empty() || y_pool.is_empty() {
        return Err(invalid!(
            "training needs both pools non-empty (infected {}, healthy {})",
            x_pool.len(),
            y_pool.len()
        ));
    }
    let cfg = &setup.train;
    let batch = cfg.batch_size;
    let per_epoch = iterations_per_epoch(x_pool.len(), y_pool.len(), batch);
    if per_epoch == 0 {
        return Err(invalid!("batch_size {batch} exceeds the smaller pool"));
    }
    let side = cfg.crop_side;
    for epoch in state.epoch + 1..=cfg.last_epoch() {
        let lr = lr_schedule(epoch, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EPOCH + epoch as u64));
        let mut order_x: Vec<usize> = (0..x_pool.len()).collect();
        let mut order_y: Vec<usize> = (0..y_pool.len()).collect();
        order_x.shuffle(&mut rng);
        order_y.shuffle(&mut rng);
        for it in 0..per_epoch {
            let mut xs = Vec::with_capacity(batch * side * side);
            let mut ys = Vec::with_capacity(batch * side * side);
            for b in 0..batch {
                xs.extend(random_crop(&x_pool[order_x[it * batch + b]], side, &mut rng)?);
                ys.extend(random_crop(&y_pool[order_y[it * batch + b]], side, &mut rng)?);
            }
            let xt = Tensor::new(vec![batch, 1, side, side], xs)?;
            let yt = Tensor::new(vec![batch, 1, side, side], ys)?;
            let record = train_step(state, setup, &xt, &yt, lr).map_err(|e| match (e, out) {
                (Error::NonFinite(msg), Some(dir)) if state.epoch > 0 => Error::NonFinite(format!(
                    "{msg}; last good checkpoint {}",
                    checkpoint_dir(dir, state.epoch).display()
                )),
                (e, _) => e,
            })?;
            state.history.push(record);
        }
        state.epoch = epoch;
        log::info!(
            "epoch {epoch}: lr {lr:.3e}, g_total {:.4}",
            state.history.last().map_or(f64::NAN, |r| r.g_total)
        );
        if let Some(dir) = out {
            save_checkpoint(state, setup, &checkpoint_dir(dir, epoch))?;
            let csv = dir.join("losses.csv");
            fs::write(&csv, loss_csv(&state.history)).map_err(|e| Error::io(&csv, e))?;
        }
        on_epoch(state);
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRecord {
    epoch: usize,
    iteration: u64,
    setup: TrainSetup,
}

const NETS: [&str; 4] = ["generator_xy", "generator_yx", "disc_x", "disc_y"];

fn adam_blob(adam: &AdamState<f32>) -> Vec<NamedTensor> {
    let named = |prefix: &str, ts: &[Tensor<f32>]| {
        ts.iter()
            .enumerate()
            .map(|(i, t)| NamedTensor {
                name: format!("{prefix}{i}"),
                value: t.clone(),
            })
            .collect::<Vec<_>>()
    };
    let mut out = named("m", &adam.m);
    out.extend(named("v", &adam.v));
    out
}

fn adam_from_blob(path: &Path, net: &Network<f32>) -> Result<AdamState<f32>> {
    let (tensors, meta) = read_blob(path)?;
    let t = meta["t"].as_u64().ok_or_else(|| Error::Format {
        path: path.into(),
        reason: "missing step counter".into(),
    })?;
    let n = net.params().len();
    if tensors.len() != 2 * n {
        return Err(Error::Shape(format!(
            "{} holds {} moments for {n} parameters",
            path.display(),
            tensors.len()
        )));
    }
    let mut it = tensors.into_iter().map(|t| t.value);
    let m: Vec<_> = it.by_ref().take(n).collect();
    let v: Vec<_> = it.collect();
    for (p, (mi, vi)) in net.params().iter().zip(m.iter().zip(&v)) {
        if mi.shape() != p.value.shape() || vi.shape() != p.value.shape() {
            return Err(Error::Shape(format!("moment shape mismatch for {}", p.name)));
        }
    }
    Ok(AdamState { m, v, t })
}

fn pool_blob(pool: &[Tensor<f32>]) -> Vec<NamedTensor> {
    pool.iter()
        .enumerate()
        .map(|(i, t)| NamedTensor {
            name: format!("fake{i}"),
            value: t.clone(),
        })
        .collect()
}

/// Write every piece of `state` needed to continue training into `dir`.
pub fn save_checkpoint(state: &TrainState, setup: &TrainSetup, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let nets = [&state.g_xy, &state.g_yx, &state.d_x, &state.d_y];
    let adams = [&state.adam_g_xy, &state.adam_g_yx, &state.adam_d_x, &state.adam_d_y];
    for ((name, net), adam) in NETS.iter().zip(nets).zip(adams) {
        net.save(dir.join(format!("{name}.json")))?;
        write_blob(
            dir.join(format!("{name}.adam.json")),
            &adam_blob(adam),
            serde_json::json!({ "t": adam.t }),
        )?;
    }
    write_blob(dir.join("fake_pool_x.json"), &pool_blob(&state.pool_x), serde_json::Value::Null)?;
    write_blob(dir.join("fake_pool_y.json"), &pool_blob(&state.pool_y), serde_json::Value::Null)?;
    let record = StateRecord {
        epoch: state.epoch,
        iteration: state.iteration,
        setup: setup.clone(),
    };
    let path = dir.join("state.json");
    fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
    let csv = dir.join("losses.csv");
    fs::write(&csv, loss_csv(&state.history)).map_err(|e| Error::io(&csv, e))
}

/// Restore a checkpoint. Network shapes and the seed must match `setup`;
/// epoch counts and learning-rate settings may differ to extend a run.
pub fn load_checkpoint(dir: &Path, setup: &TrainSetup) -> Result<TrainState> {
    let path = dir.join("state.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let record: StateRecord = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if record.setup.train.seed != setup.train.seed {
        return Err(invalid!(
            "checkpoint seed {} differs from configured seed {}",
            record.setup.train.seed,
            setup.train.seed
        ));
    }
    let g_arch = Architecture::Generator(setup.generator.clone());
    let d_arch = Architecture::Discriminator(setup.discriminator.clone());
    let load = |name: &str, arch: &Architecture| Network::load(dir.join(format!("{name}.json")), arch);
    let g_xy = load(NETS[0], &g_arch)?;
    let g_yx = load(NETS[1], &g_arch)?;
    let d_x = load(NETS[2], &d_arch)?;
    let d_y = load(NETS[3], &d_arch)?;
    let adam = |name: &str, net: &Network<f32>| adam_from_blob(&dir.join(format!("{name}.adam.json")), net);
    let pool = |name: &str| -> Result<Vec<Tensor<f32>>> {
        Ok(read_blob(dir.join(name))?.0.into_iter().map(|t| t.value).collect())
    };
    let csv = dir.join("losses.csv");
    let history = parse_loss_csv(&fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?)?;
    Ok(TrainState {
        adam_g_xy: adam(NETS[0], &g_xy)?,
        adam_g_yx: adam(NETS[1], &g_yx)?,
        adam_d_x: adam(NETS[2], &d_x)?,
        adam_d_y: adam(NETS[3], &d_y)?,
        g_xy,
        g_yx,
        d_x,
        d_y,
        epoch: record.epoch,
        iteration: record.iteration,
        history,
        pool_x: pool("fake_pool_x.json")?,
        pool_y: pool("fake_pool_y.json")?,
    })
}

/// Highest-numbered checkpoint under `out`, if any.
pub fn latest_checkpoint(out: &Path) -> Option<(usize, PathBuf)> {
    let root = out.join("checkpoints");
    fs::read_dir(&root)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let epoch = e.file_name().to_str()?.parse::<usize>().ok()?;
            e.path().join("state.json").is_file().then(|| (epoch, e.path()))
        })
        .max_by_key(|(epoch, _)| *epoch)
}

/// Translate an infected slice into a synthetic healthy one.
pub fn synthesize_healthy(g_xy: &Network<f32>, infected: &SliceImage) -> Result<SliceImage> {
    let x = Tensor::new(vec![1, 1, infected.height, infected.width], infected.data.clone())?;
    let y = g_xy.forward(&x)?;
    let data = y.into_data().into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let mut out = SliceImage::new(infected.height, infected.width, data)?.with_label(SliceLabel::Healthy);
    out.provenance = infected.provenance.clone();
    Ok(out)
}
