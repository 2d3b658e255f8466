//! Conditional noise-prediction U-Net.
//!
//! Layout, for `levels = L` and per-level widths `C_l = base * mult[l]`:
//!
//! ```text
//! [x_t | y] (4 ch) ─► down_0 ─► ... ─► down_{L-1} ─► mid ─► up_{L-1} ─► ... ─► up_0 ─► out conv
//!                       │                  │                  ▲                 ▲
//!                       │                  └──── skip ────────┘                 │
//!                       └──────────────────────── skip ─────────────────────────┘
//! down_l: res(C_l), res(C_l), [attention], skip saved, 3x3 stride-2 conv (halves extent)
//! mid:    res, attention, res
//! up_l:   4x4 stride-2 transposed conv (doubles extent), concat skip_l, res(C_l), res(C_l), [attention]
//! ```
//!
//! A res block is `conv3x3 -> group norm -> SiLU`, plus a projection of the
//! time embedding added per channel, plus a residual shortcut (1x1 conv when
//! the channel count changes). The diffusion step is encoded with
//! [`sinusoidal_embed`] and passed through a two-layer MLP shared by all
//! blocks.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::ddpm::{sinusoidal_embed, ConditionTensor, NoiseSchedule, TimeInput};
use crate::error::{ModelError, TensorError};
use crate::rng::GaussianRng;
use crate::tensor::{Real, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;
const DOWN_KERNEL: usize = 3;
const UP_KERNEL: usize = 4;
/// Keeps the initial noise prediction small without silencing it.
const OUT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub groups: usize,
    pub time_embed_dim: usize,
    /// levels (0-based) whose down and up sections end with self-attention
    pub attention_levels: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            base_channels: 16,
            channel_mult: vec![1, 2],
            groups: 4,
            time_embed_dim: 32,
            attention_levels: vec![1],
            in_channels: 4,
            out_channels: 2,
        }
    }
}

impl UNetConfig {
    /// Four sections per path, as in the full-size model.
    pub fn reference() -> Self {
        Self {
            levels: 4,
            base_channels: 32,
            channel_mult: vec![1, 2, 2, 4],
            groups: 8,
            time_embed_dim: 64,
            attention_levels: vec![3],
            in_channels: 4,
            out_channels: 2,
        }
    }

    /// The smallest config used for gradient checks and overfit probes.
    pub fn tiny() -> Self {
        Self {
            levels: 2,
            base_channels: 8,
            channel_mult: vec![1, 2],
            groups: 2,
            time_embed_dim: 16,
            attention_levels: vec![1],
            in_channels: 4,
            out_channels: 2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        if self.channel_mult.len() < self.levels || self.channel_mult.contains(&0) {
            return bad(format!(
                "channel_mult needs {} positive entries, got {:?}",
                self.levels, self.channel_mult
            ));
        }
        if self.base_channels == 0 || self.groups == 0 || !self.base_channels.is_multiple_of(self.groups) {
            return bad(format!(
                "base_channels {} not divisible by groups {}",
                self.base_channels, self.groups
            ));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!("time_embed_dim must be even, got {}", self.time_embed_dim));
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= self.levels) {
            return bad(format!("attention level {l} >= levels {}", self.levels));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    /// Grid extents must halve cleanly `levels` times.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<(), ModelError> {
        let m = 1usize << self.levels;
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(ModelError::InvalidConfig(format!(
                "grid {h}x{w} not divisible by 2^levels = {m}"
            )));
        }
        Ok(())
    }
}

/// Named, ordered network parameters.
#[derive(Clone, PartialEq)]
pub struct DenoiserParams<E = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    index: HashMap<String, usize>,
}

impl<E: Real> std::fmt::Debug for DenoiserParams<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.names.iter().zip(self.tensors.iter().map(Tensor::shape)))
            .finish()
    }
}

impl<E: Real> Default for DenoiserParams<E> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<E: Real> DenoiserParams<E> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor; panics on duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<E>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<F: Real>(&self) -> DenoiserParams<F> {
        let mut out = DenoiserParams::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }
}

fn conv_count(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

fn linear_count(cin: usize, cout: usize) -> usize {
    cout * cin + cout
}

fn res_count(cin: usize, cout: usize, d: usize) -> usize {
    let shortcut = if cin != cout { conv_count(cin, cout, 1) } else { 0 };
    conv_count(cin, cout, 3) + 2 * cout + linear_count(d, cout) + shortcut
}

/// Number of scalar parameters [`build_unet`] creates for `config`.
pub fn count_params(config: &UNetConfig) -> usize {
    let d = config.time_embed_dim;
    let attn = |c: usize| 4 * c * c;
    let mut total = 2 * linear_count(d, d);
    let mut cin = config.in_channels;
    for l in 0..config.levels {
        let c = config.width(l);
        total += res_count(cin, c, d) + res_count(c, c, d);
        if config.attention_levels.contains(&l) {
            total += attn(c);
        }
        total += conv_count(c, c, DOWN_KERNEL);
        cin = c;
    }
    total += 2 * res_count(cin, cin, d) + attn(cin);
    for l in (0..config.levels).rev() {
        let c = config.width(l);
        total += conv_count(cin, cin, UP_KERNEL);
        total += res_count(cin + c, c, d) + res_count(c, c, d);
        if config.attention_levels.contains(&l) {
            total += attn(c);
        }
        cin = c;
    }
    total + conv_count(cin, config.out_channels, 3)
}

struct Init<'a, E: Real> {
    rng: GaussianRng,
    params: &'a mut DenoiserParams<E>,
}

impl<E: Real> Init<'_, E> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let t = Tensor::from_fn(shape, |_| E::from_f64(std * self.rng.normal()));
        self.params.insert(name, t);
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) {
        self.params.insert(name, Tensor::full(shape, E::from_f64(v)));
    }

    /// `gain` is 2 ahead of a rectifying nonlinearity and 1 on purely linear paths.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        let fan_in = (cin * k * k) as f64;
        self.normal(format!("{name}.w"), &[cout, cin, k, k], (gain / fan_in).sqrt());
        self.constant(format!("{name}.b"), &[cout], 0.0);
    }

    fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        // each output sees about cin * (k / stride)^2 inputs
        let fan_in = (cin * k * k / 4).max(1) as f64;
        self.normal(format!("{name}.w"), &[cin, cout, k, k], (1.0 / fan_in).sqrt());
        self.constant(format!("{name}.b"), &[cout], 0.0);
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, gain: f64) {
        self.normal(format!("{name}.w"), &[cout, cin], (gain / cin as f64).sqrt());
        self.constant(format!("{name}.b"), &[cout], 0.0);
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, d: usize) {
        self.conv(&format!("{name}.conv"), cin, cout, 3, 2.0);
        self.constant(format!("{name}.norm.g"), &[cout], 1.0);
        self.constant(format!("{name}.norm.b"), &[cout], 0.0);
        self.linear(&format!("{name}.temb"), d, cout, 1.0);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1, 1.0);
        }
    }

    fn attention(&mut self, name: &str, c: usize) {
        let std = (1.0 / c as f64).sqrt();
        for p in ["q", "k", "v", "o"] {
            self.normal(format!("{name}.{p}"), &[c, c], std);
        }
    }
}

/// Creates freshly initialized parameters for `config`, fully determined by `seed`.
pub fn build_unet<E: Real>(config: &UNetConfig, seed: u64) -> Result<DenoiserParams<E>, ModelError> {
    config.validate()?;
    let mut params = DenoiserParams::new();
    let mut init = Init {
        rng: GaussianRng::new(seed),
        params: &mut params,
    };
    let d = config.time_embed_dim;
    init.linear("time.fc0", d, d, 2.0);
    init.linear("time.fc1", d, d, 2.0);
    let mut cin = config.in_channels;
    for l in 0..config.levels {
        let c = config.width(l);
        init.res(&format!("down{l}.res0"), cin, c, d);
        init.res(&format!("down{l}.res1"), c, c, d);
        if config.attention_levels.contains(&l) {
            init.attention(&format!("down{l}.attn"), c);
        }
        init.conv(&format!("down{l}.down"), c, c, DOWN_KERNEL, 1.0);
        cin = c;
    }
    init.res("mid.res0", cin, cin, d);
    init.attention("mid.attn", cin);
    init.res("mid.res1", cin, cin, d);
    for l in (0..config.levels).rev() {
        let c = config.width(l);
        init.conv_transpose(&format!("up{l}.up"), cin, cin, UP_KERNEL);
        init.res(&format!("up{l}.res0"), cin + c, c, d);
        init.res(&format!("up{l}.res1"), c, c, d);
        if config.attention_levels.contains(&l) {
            init.attention(&format!("up{l}.attn"), c);
        }
        cin = c;
    }
    init.conv("out", cin, config.out_channels, 3, OUT_GAIN);
    debug_assert_eq!(params.total_elements(), count_params(config));
    Ok(params)
}

pub(crate) fn layer_err(layer: &str) -> impl Fn(TensorError) -> ModelError + '_ {
    move |e| match e {
        TensorError::NonFinite { .. } => ModelError::NonFiniteActivation { layer: layer.to_string() },
        other => ModelError::Layer {
            layer: layer.to_string(),
            source: other,
        },
    }
}

/// Parameters placed on a tape, addressable by name.
pub struct TapeParams<'a, E: Real> {
    params: &'a DenoiserParams<E>,
    vars: Vec<Var>,
}

impl<'a, E: Real> TapeParams<'a, E> {
    /// Records every parameter as a leaf; `trainable` decides whether they collect gradients.
    pub fn attach(tape: &mut Tape<E>, params: &'a DenoiserParams<E>, trainable: bool) -> Self {
        let vars = params.tensors().iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        Self { params, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Leaf handles in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Optional wiring overrides used to probe the network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace the skip tensor of this level with zeros.
    pub zero_skip: Option<usize>,
}

struct Ctx<'t, 'p, E: Real> {
    tape: &'t mut Tape<E>,
    p: &'t TapeParams<'p, E>,
    groups: usize,
    temb: Var,
}

impl<E: Real> Ctx<'_, '_, E> {
    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var, ModelError> {
        let w = self.p.var(&format!("{name}.w"))?;
        let b = self.p.var(&format!("{name}.b"))?;
        self.tape.conv2d(x, w, b, stride, pad).map_err(layer_err(name))
    }

    fn res(&mut self, name: &str, x: Var) -> Result<Var, ModelError> {
        let h = self.conv(&format!("{name}.conv"), x, 1, 1)?;
        let err = layer_err(name);
        let g = self.p.var(&format!("{name}.norm.g"))?;
        let b = self.p.var(&format!("{name}.norm.b"))?;
        let h = self.tape.group_norm(h, self.groups, g, b, E::from_f64(NORM_EPS)).map_err(&err)?;
        let h = self.tape.silu(h).map_err(&err)?;
        let tw = self.p.var(&format!("{name}.temb.w"))?;
        let tb = self.p.var(&format!("{name}.temb.b"))?;
        let proj = self.tape.linear(self.temb, tw, tb).map_err(&err)?;
        let h = self.tape.add_channel(h, proj).map_err(&err)?;
        let shortcut = if self.p.params.get(&format!("{name}.skip.w")).is_some() {
            self.conv(&format!("{name}.skip"), x, 1, 0)?
        } else {
            x
        };
        self.tape.add(h, shortcut).map_err(&err)
    }

    fn attention(&mut self, name: &str, x: Var) -> Result<Var, ModelError> {
        let err = layer_err(name);
        let shape = self.tape.shape(x).to_vec();
        let flat = self.tape.reshape(x, &[shape[0], shape[1] * shape[2]]).map_err(&err)?;
        let [q, k, v, o] = ["q", "k", "v", "o"].map(|s| self.p.var(&format!("{name}.{s}")));
        let out = self.tape.self_attention(flat, q?, k?, v?, o?).map_err(&err)?;
        self.tape.reshape(out, &shape).map_err(&err)
    }
}

/// Records the network on `tape` and returns the predicted noise.
///
/// `xt` is `[out_channels, H, W]`, `y` is `[in_channels - out_channels, H, W]`
/// and `position` is the scalar fed to the sinusoidal embedding.
pub fn forward<E: Real>(
    config: &UNetConfig,
    tape: &mut Tape<E>,
    params: &TapeParams<'_, E>,
    xt: Var,
    y: Var,
    position: f64,
    options: ForwardOptions,
) -> Result<Var, ModelError> {
    let (h, w) = {
        let s = tape.shape(xt);
        if s.len() != 3 || s[0] != config.out_channels {
            return Err(ModelError::InvalidConfig(format!(
                "x_t must be [{}, H, W], got {s:?}",
                config.out_channels
            )));
        }
        (s[1], s[2])
    };
    config.check_extent(h, w)?;
    let ys = tape.shape(y);
    if ys != [config.in_channels - config.out_channels, h, w] {
        return Err(ModelError::InvalidConfig(format!("condition shape {ys:?} does not match x_t")));
    }

    let d = config.time_embed_dim;
    let code = sinusoidal_embed(position, d)?;
    let code = tape.constant(Tensor::new(vec![d], code.into_iter().map(E::from_f64).collect()).expect("embedding shape"));
    let err = layer_err("time");
    let (w0, b0) = (params.var("time.fc0.w")?, params.var("time.fc0.b")?);
    let (w1, b1) = (params.var("time.fc1.w")?, params.var("time.fc1.b")?);
    let e = tape.linear(code, w0, b0).map_err(&err)?;
    let e = tape.silu(e).map_err(&err)?;
    let e = tape.linear(e, w1, b1).map_err(&err)?;
    let temb = tape.silu(e).map_err(&err)?;

    let mut x = tape.concat_channels(xt, y).map_err(layer_err("input"))?;
    let mut cx = Ctx {
        tape,
        p: params,
        groups: config.groups,
        temb,
    };
    let mut skips = Vec::with_capacity(config.levels);
    for l in 0..config.levels {
        x = cx.res(&format!("down{l}.res0"), x)?;
        x = cx.res(&format!("down{l}.res1"), x)?;
        if config.attention_levels.contains(&l) {
            x = cx.attention(&format!("down{l}.attn"), x)?;
        }
        skips.push(x);
        x = cx.conv(&format!("down{l}.down"), x, 2, 1)?;
    }
    x = cx.res("mid.res0", x)?;
    x = cx.attention("mid.attn", x)?;
    x = cx.res("mid.res1", x)?;
    for l in (0..config.levels).rev() {
        let name = format!("up{l}");
        let up = format!("{name}.up");
        let (uw, ub) = (params.var(&format!("{up}.w"))?, params.var(&format!("{up}.b"))?);
        x = cx.tape.conv2d_transpose(x, uw, ub, 2, 1).map_err(layer_err(&up))?;
        let skip = if options.zero_skip == Some(l) {
            let shape = cx.tape.shape(skips[l]).to_vec();
            cx.tape.constant(Tensor::zeros(&shape))
        } else {
            skips[l]
        };
        x = cx.tape.concat_channels(x, skip).map_err(layer_err(&name))?;
        x = cx.res(&format!("{name}.res0"), x)?;
        x = cx.res(&format!("{name}.res1"), x)?;
        if config.attention_levels.contains(&l) {
            x = cx.attention(&format!("{name}.attn"), x)?;
        }
    }
    cx.conv("out", x, 1, 1)
}

/// A network together with its configuration and time-input convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<E: Real = f32> {
    pub config: UNetConfig,
    pub params: DenoiserParams<E>,
    pub time_input: TimeInput,
}

impl<E: Real> Denoiser<E> {
    pub fn new(config: UNetConfig, seed: u64, time_input: TimeInput) -> Result<Self, ModelError> {
        let params = build_unet(&config, seed)?;
        Ok(Self {
            config,
            params,
            time_input,
        })
    }

    /// Predicts the noise in `xt` at step `t` under condition `y` (no gradients).
    pub fn denoise(
        &self,
        xt: &Tensor<E>,
        t: usize,
        y: &ConditionTensor,
        sched: &NoiseSchedule,
    ) -> Result<Tensor<E>, ModelError> {
        self.denoise_with(xt, t, y, sched, ForwardOptions::default())
    }

    pub fn denoise_with(
        &self,
        xt: &Tensor<E>,
        t: usize,
        y: &ConditionTensor,
        sched: &NoiseSchedule,
        options: ForwardOptions,
    ) -> Result<Tensor<E>, ModelError> {
        sched.check_step(t)?;
        let mut tape = Tape::new();
        let p = TapeParams::attach(&mut tape, &self.params, false);
        let xv = tape.constant(xt.clone());
        let yv = tape.constant(y.to_tensor());
        let pos = self.time_input.position(t, sched.steps());
        let out = forward(&self.config, &mut tape, &p, xv, yv, pos, options)?;
        Ok(tape.value(out).clone())
    }
}
