//! U-net generator and patch discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::autodiff::{read_blob, write_blob, NamedTensor, Scalar, Tape, Tensor, Var, INSTANCE_NORM_EPS};
use crate::error::{invalid, Error, Result};

const ENCODER_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input_side: usize,
}

impl GeneratorConfig {
    /// 8 stages on 256x256 slices, 64 channels doubling up to 512.
    pub fn paper() -> Self {
        GeneratorConfig {
            stages: 8,
            base_channels: 64,
            max_channels: 512,
            kernel: 3,
            in_channels: 1,
            out_channels: 1,
            input_side: 256,
        }
    }

    /// 6 stages on 64x64 phantom slices.
    pub fn phantom() -> Self {
        GeneratorConfig {
            stages: 6,
            base_channels: 16,
            max_channels: 128,
            input_side: 64,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages > 16 {
            return Err(invalid!("generator stages must be in 1..=16, got {}", self.stages));
        }
        if self.input_side != 1 << self.stages {
            return Err(invalid!(
                "generator input side {} must equal 2^stages = {}",
                self.input_side,
                1usize << self.stages
            ));
        }
        if self.kernel != 3 {
            return Err(invalid!("generator kernel must be 3, got {}", self.kernel));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid!("generator channel counts must be positive"));
        }
        if self.max_channels < self.base_channels {
            return Err(invalid!(
                "max_channels {} is below base_channels {}",
                self.max_channels,
                self.base_channels
            ));
        }
        Ok(())
    }

    /// Encoder output channels at stage `s` (0-based).
    pub fn channels(&self, s: usize) -> usize {
        let doubled = self.base_channels.saturating_mul(1usize.checked_shl(s as u32).unwrap_or(usize::MAX));
        doubled.min(self.max_channels)
    }

    pub fn channel_list(&self) -> Vec<usize> {
        (0..self.stages).map(|s| self.channels(s)).collect()
    }

    /// Feature-map side after each encoder stage.
    pub fn encoder_sides(&self) -> Vec<usize> {
        (1..=self.stages).map(|s| self.input_side >> s).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
    pub padding: usize,
    pub in_channels: usize,
}

impl DiscriminatorConfig {
    /// The 70x70 patch discriminator.
    pub fn paper() -> Self {
        DiscriminatorConfig {
            kernel: 4,
            strides: vec![2, 2, 2, 1, 1],
            channels: vec![64, 128, 256, 512, 1],
            leaky_slope: 0.2,
            padding: 1,
            in_channels: 1,
        }
    }

    /// Same geometry with narrower layers.
    pub fn phantom() -> Self {
        DiscriminatorConfig {
            channels: vec![16, 32, 64, 128, 1],
            ..Self::paper()
        }
    }

    pub fn layers(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(invalid!("discriminator needs at least one layer"));
        }
        if self.strides.len() != self.channels.len() {
            return Err(invalid!(
                "discriminator has {} strides for {} layers",
                self.strides.len(),
                self.channels.len()
            ));
        }
        if self.kernel == 0 || self.strides.contains(&0) {
            return Err(invalid!("discriminator kernel and strides must be positive"));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(invalid!("discriminator channel counts must be positive"));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(invalid!("leaky slope must be finite and non-negative"));
        }
        Ok(())
    }

    fn normalized(&self, layer: usize) -> bool {
        layer > 0 && layer + 1 < self.layers()
    }

    /// Spatial side of every layer output for a square input.
    pub fn output_sides(&self, input_side: usize) -> Result<Vec<usize>> {
        let mut side = input_side;
        let mut out = Vec::with_capacity(self.layers());
        for (l, &stride) in self.strides.iter().enumerate() {
            let padded = side + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::Shape(format!(
                    "discriminator layer {} sees side {side}, smaller than kernel {}",
                    l + 1,
                    self.kernel
                )));
            }
            side = (padded - self.kernel) / stride + 1;
            if self.normalized(l) && side < 2 {
                return Err(Error::Shape(format!(
                    "discriminator layer {} output side {side} is too small to normalize",
                    l + 1
                )));
            }
            out.push(side);
        }
        Ok(out)
    }
}

/// Receptive field of one output unit of a conv stack with a shared kernel size.
pub fn receptive_field(kernel: usize, strides: &[usize]) -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for &s in strides {
        rf += (kernel - 1) * jump;
        jump *= s;
    }
    rf
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Generator(GeneratorConfig),
    Discriminator(DiscriminatorConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameters plus the architecture that consumes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    params: Vec<Param<T>>,
}

struct Builder<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> Builder<T> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        self.params.push(Param {
            name: format!("{name}.w"),
            value: Tensor::zeros(vec![cout, cin, k, k]),
        });
        self.params.push(Param {
            name: format!("{name}.b"),
            value: Tensor::zeros(vec![cout]),
        });
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.params.push(Param {
            name: format!("{name}.gamma"),
            value: Tensor::ones(vec![c]),
        });
        self.params.push(Param {
            name: format!("{name}.beta"),
            value: Tensor::zeros(vec![c]),
        });
    }
}

/// Build an untrained generator: zero weights and biases, unit gammas.
pub fn build_generator<T: Scalar>(cfg: &GeneratorConfig) -> Result<Network<T>> {
    cfg.validate()?;
    let mut b = Builder { params: Vec::new() };
    let k = cfg.kernel;
    let mut cin = cfg.in_channels;
    for s in 0..cfg.stages {
        let c = cfg.channels(s);
        b.conv(&format!("enc{s}"), c, cin, k);
        if !generator_skips_norm(cfg, s) {
            b.norm(&format!("enc{s}"), c);
        }
        cin = c;
    }
    for t in (1..cfg.stages).rev() {
        let cin = if t == cfg.stages - 1 { cfg.channels(t) } else { 2 * cfg.channels(t) };
        let cout = cfg.channels(t - 1);
        b.conv(&format!("dec{t}"), cout, cin, k);
        b.norm(&format!("dec{t}"), cout);
    }
    let cin = if cfg.stages == 1 { cfg.channels(0) } else { 2 * cfg.channels(0) };
    b.conv("out", cfg.out_channels, cin, k);
    Ok(Network {
        arch: Architecture::Generator(cfg.clone()),
        params: b.params,
    })
}

fn generator_skips_norm(cfg: &GeneratorConfig, stage: usize) -> bool {
    stage + 1 == cfg.stages
}

pub fn build_discriminator<T: Scalar>(cfg: &DiscriminatorConfig) -> Result<Network<T>> {
    cfg.validate()?;
    let mut b = Builder { params: Vec::new() };
    let mut cin = cfg.in_channels;
    for (l, &c) in cfg.channels.iter().enumerate() {
        let name = format!("conv{}", l + 1);
        b.conv(&name, c, cin, cfg.kernel);
        if cfg.normalized(l) {
            b.norm(&name, c);
        }
        cin = c;
    }
    Ok(Network {
        arch: Architecture::Discriminator(cfg.clone()),
        params: b.params,
    })
}

/// Draw conv weights from N(0, std^2); reset biases and betas to 0, gammas to 1.
pub fn init_weights<T: Scalar>(net: &mut Network<T>, seed: u64, std: f64) -> Result<()> {
    if !(std.is_finite() && std > 0.0) {
        return Err(invalid!("init std must be positive, got {std}"));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut net.params {
        let fill = if p.name.ends_with(".w") {
            None
        } else if p.name.ends_with(".gamma") {
            Some(T::one())
        } else {
            Some(T::zero())
        };
        for v in p.value.data_mut() {
            *v = match fill {
                Some(c) => c,
                None => T::of(normal.sample(&mut rng)),
            };
        }
    }
    Ok(())
}

impl<T: Scalar> Network<T> {
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Replace parameter values, checking names and shapes.
    pub fn load_params(&mut self, values: Vec<Param<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (dst, src) in self.params.iter().zip(&values) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
        }
        self.params = values;
        Ok(())
    }

    /// Put the parameters on `tape`, as trainable leaves or constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>, trainable: bool) -> Bound<'a, T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        Bound { net: self, vars }
    }

    /// Use caller-provided tape values as the parameters, e.g. to substitute one.
    pub fn bind_vars<'a>(&'a self, tape: &Tape<T>, vars: Vec<Var>) -> Result<Bound<'a, T>> {
        if vars.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        for (p, &v) in self.params.iter().zip(&vars) {
            if tape.value(v).shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "handle for {} has shape {:?}, expected {:?}",
                    p.name,
                    tape.value(v).shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Bound { net: self, vars })
    }

    /// Inference on a detached tape.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = bound.apply(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

impl Network<f32> {
    /// Write the parameters with an architecture echo for validation on load.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let tensors: Vec<NamedTensor> = self
            .params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                value: p.value.clone(),
            })
            .collect();
        write_blob(path, &tensors, serde_json::to_value(&self.arch)?)
    }

    /// Load parameters saved by [`Network::save`]; the stored architecture must equal `arch`.
    pub fn load(path: impl AsRef<Path>, arch: &Architecture) -> Result<Self> {
        let path = path.as_ref();
        let (tensors, meta) = read_blob(path)?;
        let stored: Architecture = serde_json::from_value(meta).map_err(|e| Error::Format {
            path: path.into(),
            reason: format!("architecture echo: {e}"),
        })?;
        if &stored != arch {
            return Err(Error::Shape(format!(
                "{} holds {stored:?}, expected {arch:?}",
                path.display()
            )));
        }
        let mut net = match arch {
            Architecture::Generator(cfg) => build_generator(cfg)?,
            Architecture::Discriminator(cfg) => build_discriminator(cfg)?,
        };
        net.load_params(
            tensors
                .into_iter()
                .map(|t| Param {
                    name: t.name,
                    value: t.value,
                })
                .collect(),
        )?;
        Ok(net)
    }
}

/// Anything that maps an image batch to an image batch on a tape.
pub trait ImageMap<T: Scalar> {
    fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

impl<T: Scalar, F> ImageMap<T> for F
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

/// A network whose parameters live on a tape.
pub struct Bound<'a, T> {
    net: &'a Network<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    /// Tape handles of the parameters, in `Network::params` order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn generator(&self, cfg: &GeneratorConfig, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        if c != cfg.in_channels || h != cfg.input_side || w != cfg.input_side {
            return Err(Error::Shape(format!(
                "generator expects [N, {}, {side}, {side}], got {:?}",
                cfg.in_channels,
                tape.value(x).shape(),
                side = cfg.input_side
            )));
        }
        let mut p = self.vars.iter().copied();
        let mut next = || p.next().expect("parameter list matches architecture");
        let mut skips = Vec::with_capacity(cfg.stages);
        let mut hcur = x;
        for s in 0..cfg.stages {
            let (wv, bv) = (next(), next());
            hcur = tape.conv2d(hcur, wv, bv, 2, 1)?;
            if !generator_skips_norm(cfg, s) {
                let (g, b) = (next(), next());
                hcur = tape.instance_norm(hcur, g, b, INSTANCE_NORM_EPS)?;
            }
            hcur = tape.leaky_relu(hcur, ENCODER_SLOPE);
            skips.push(hcur);
        }
        for t in (1..cfg.stages).rev() {
            let (wv, bv) = (next(), next());
            hcur = tape.upsample_conv(hcur, wv, bv)?;
            let (g, b) = (next(), next());
            hcur = tape.instance_norm(hcur, g, b, INSTANCE_NORM_EPS)?;
            hcur = tape.relu(hcur);
            hcur = tape.concat_channels(hcur, skips[t - 1])?;
        }
        let (wv, bv) = (next(), next());
        let out = tape.upsample_conv(hcur, wv, bv)?;
        Ok(tape.tanh(out))
    }

    fn discriminator(&self, cfg: &DiscriminatorConfig, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut p = self.vars.iter().copied();
        let mut next = || p.next().expect("parameter list matches architecture");
        let mut h = x;
        for l in 0..cfg.layers() {
            let (wv, bv) = (next(), next());
            h = tape.conv2d(h, wv, bv, cfg.strides[l], cfg.padding)?;
            if cfg.normalized(l) {
                let (g, b) = (next(), next());
                h = tape.instance_norm(h, g, b, INSTANCE_NORM_EPS)?;
            }
            if l + 1 < cfg.layers() {
                h = tape.leaky_relu(h, cfg.leaky_slope);
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> ImageMap<T> for Bound<'_, T> {
    fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match &self.net.arch {
            Architecture::Generator(cfg) => self.generator(cfg, tape, x),
            Architecture::Discriminator(cfg) => self.discriminator(cfg, tape, x),
        }
    }
}
