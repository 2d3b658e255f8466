//! The ε-prediction training loop: Adam with cosine learning-rate decay.
//!
//! All randomness is a function of `(seed, iteration)` or `(seed, epoch)`,
//! so a checkpoint only needs the iteration counter to resume exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{NormStats, TrainingPair};
use crate::ddpm::{make_schedule, q_sample, NoiseSchedule, TimeInput};
use crate::error::{IoError, ModelError, TrainError};
use crate::fdt::{read_named, write_bytes, write_named};
use crate::rng::{derive_seed, GaussianRng};
use crate::tensor::{Real, Tape, Tensor};
use crate::unet::{build_unet, forward, layer_err, DenoiserParams, ForwardOptions, TapeParams, UNetConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_VERSION: u32 = 1;

const INIT_STREAM: u64 = 1 << 62;
const SHUFFLE_STREAM: u64 = (1 << 62) + 1;
const NOISE_STREAM: u64 = (1 << 62) + 2;

/// First and second moment buffers, aligned with the parameter list.
#[derive(Clone, PartialEq)]
pub struct AdamState<E: Real = f32> {
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
    pub step: u64,
}

impl<E: Real> std::fmt::Debug for AdamState<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdamState")
            .field("buffers", &self.m.len())
            .field("step", &self.step)
            .finish()
    }
}

impl<E: Real> AdamState<E> {
    pub fn new(params: &DenoiserParams<E>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is non-finite.
pub fn adam_step<E: Real>(
    params: &mut DenoiserParams<E>,
    grads: &[Tensor<E>],
    state: &mut AdamState<E>,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (name, g) in params.names().iter().zip(grads) {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient { name: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v, g) = (state.m[i].data_mut(), state.v[i].data_mut(), grads[i].data());
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g[k].as_f64();
            let mk = ADAM_BETA1 * m[k].as_f64() + (1.0 - ADAM_BETA1) * gk;
            let vk = ADAM_BETA2 * v[k].as_f64() + (1.0 - ADAM_BETA2) * gk * gk;
            m[k] = E::from_f64(mk);
            v[k] = E::from_f64(vk);
            let update = lr * (mk / c1) / ((vk / c2).sqrt() + ADAM_EPS);
            *w = E::from_f64(w.as_f64() - update);
        }
    }
    Ok(())
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64, TrainError> {
    if step > total_steps {
        return Err(TrainError::LrStepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// diffusion steps T
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    pub time_input: TimeInput,
    /// write a checkpoint every this many iterations; 0 writes only the final one
    pub checkpoint_every: usize,
    /// global gradient-norm clip; off when `None`
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            epochs: 10,
            batch_size: 8,
            steps: 400,
            beta_start: 1e-4,
            beta_end: 0.02,
            seed: 0,
            time_input: TimeInput::Integer,
            checkpoint_every: 0,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return bad(format!("max_grad_norm must be positive, got {c}"));
            }
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, TrainError> {
        Ok(make_schedule(self.steps, self.beta_start, self.beta_end)?)
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Decay horizon of the cosine schedule.
    pub fn total_iterations(&self, n: usize) -> usize {
        self.epochs * self.batches_per_epoch(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Everything stored in `config.json` of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub train: TrainConfig,
    pub unet: UNetConfig,
    pub normalization: NormStats,
    /// (H, W) of the training data
    pub grid_size: [usize; 2],
    /// simulated horizon the condition's time channel is normalized by
    pub total_time: f64,
    pub n_train_pairs: usize,
    /// next iteration to run; the only generator state needed to resume
    pub iteration: usize,
    pub total_iterations: usize,
    pub schedule_alpha_bar_final: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<E: Real = f32> {
    pub meta: CheckpointMeta,
    pub params: DenoiserParams<E>,
    pub adam: AdamState<E>,
    pub losses: Vec<LossRecord>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn losses_to_csv(losses: &[LossRecord]) -> String {
    let mut s = String::from("iteration,lr,loss\n");
    for r in losses {
        writeln!(s, "{},{},{}", r.iteration, r.lr, r.loss).unwrap();
    }
    s
}

pub fn losses_from_csv(text: &str) -> Result<Vec<LossRecord>, IoError> {
    let mut lines = text.lines();
    if lines.next() != Some("iteration,lr,loss") {
        return Err(IoError::Malformed("loss.csv header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || IoError::Malformed(format!("loss.csv row {line:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(LossRecord {
                iteration: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

impl<E: Real> Checkpoint<E> {
    pub fn save(&self, dir: &Path) -> Result<(), IoError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let meta = serde_json::to_string_pretty(&self.meta)? + "\n";
        write_bytes(&dir.join("config.json"), meta.as_bytes())?;
        let entries: Vec<(&str, &Tensor<E>)> = self.params.iter().collect();
        write_named(&dir.join("params.fdt"), &entries)?;

        let step = Tensor::<f64>::scalar(self.adam.step as f64);
        let mut owned: Vec<(String, Tensor<f64>)> = vec![("step".into(), step)];
        for (i, name) in self.params.names().iter().enumerate() {
            owned.push((format!("m.{name}"), self.adam.m[i].cast()));
            owned.push((format!("v.{name}"), self.adam.v[i].cast()));
        }
        let refs: Vec<(&str, &Tensor<f64>)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_named(&dir.join("adam.fdt"), &refs)?;
        write_bytes(&dir.join("loss.csv"), losses_to_csv(&self.losses).as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self, IoError> {
        let text = fs::read(dir.join("config.json")).map_err(io(&dir.join("config.json")))?;
        let meta: CheckpointMeta = serde_json::from_slice(&text)?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(IoError::VersionMismatch {
                found: meta.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut params = DenoiserParams::new();
        for (name, t) in read_named(&dir.join("params.fdt"))? {
            params.insert(name, t.into_typed::<E>()?);
        }
        let expected = build_unet::<E>(&meta.unet, 0).map_err(|e| IoError::Manifest(e.to_string()))?;
        if expected.names() != params.names()
            || expected.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(IoError::Manifest("params.fdt does not match the U-Net config".into()));
        }

        let adam_entries = read_named(&dir.join("adam.fdt"))?;
        let mut it = adam_entries.into_iter();
        let step = match it.next() {
            Some((n, t)) if n == "step" => t.into_typed::<f64>()?.item().unwrap_or(-1.0),
            _ => return Err(IoError::Malformed("adam.fdt must start with step".into())),
        };
        if !(step >= 0.0) || step.fract() != 0.0 {
            return Err(IoError::Malformed(format!("adam step {step}")));
        }
        let mut adam = AdamState::new(&params);
        adam.step = step as u64;
        for (i, name) in params.names().iter().enumerate() {
            for (slot, prefix) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
                match it.next() {
                    Some((n, t)) if n == format!("{prefix}.{name}") => {
                        let t = t.into_typed::<f64>()?;
                        if t.shape() != slot.shape() {
                            return Err(IoError::Malformed(format!("{n} shape")));
                        }
                        *slot = t.cast();
                    }
                    _ => return Err(IoError::Malformed(format!("adam.fdt missing {prefix}.{name}"))),
                }
            }
        }
        let csv = fs::read_to_string(dir.join("loss.csv")).map_err(io(&dir.join("loss.csv")))?;
        Ok(Self {
            meta,
            params,
            adam,
            losses: losses_from_csv(&csv)?,
        })
    }
}

/// Per-sample draw for one iteration: diffusion step and noise.
fn draw_noise<E: Real>(rng: &mut GaussianRng, steps: usize, shape: &[usize]) -> (usize, Tensor<E>) {
    let t = rng.int_in(1, steps);
    (t, rng.normal_tensor(shape))
}

/// Diffusion steps drawn for the samples of `iteration`, as the trainer would draw them.
pub fn iteration_steps(seed: u64, iteration: usize, batch: usize, steps: usize, shape: &[usize]) -> Vec<usize> {
    let mut rng = GaussianRng::new(derive_seed(derive_seed(seed, NOISE_STREAM), iteration as u64));
    (0..batch).map(|_| draw_noise::<f32>(&mut rng, steps, shape).0).collect()
}

/// Resumable training state over an in-memory set of pairs.
pub struct Trainer<'a, E: Real = f32> {
    data: &'a [TrainingPair],
    x0: Vec<Tensor<E>>,
    y: Vec<Tensor<E>>,
    cfg: TrainConfig,
    unet: UNetConfig,
    sched: NoiseSchedule,
    params: DenoiserParams<E>,
    adam: AdamState<E>,
    iteration: usize,
    losses: Vec<LossRecord>,
    normalization: NormStats,
}

impl<'a, E: Real> Trainer<'a, E> {
    pub fn new(
        data: &'a [TrainingPair],
        cfg: TrainConfig,
        unet: UNetConfig,
        normalization: NormStats,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let params = build_unet(&unet, derive_seed(cfg.seed, INIT_STREAM))?;
        let adam = AdamState::new(&params);
        Self::assemble(data, cfg, unet, normalization, params, adam, 0, Vec::new())
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(data: &'a [TrainingPair], ckpt: Checkpoint<E>) -> Result<Self, TrainError> {
        let m = ckpt.meta;
        if m.n_train_pairs != data.len() {
            return Err(TrainError::InvalidConfig(format!(
                "checkpoint was trained on {} pairs, got {}",
                m.n_train_pairs,
                data.len()
            )));
        }
        Self::assemble(data, m.train, m.unet, m.normalization, ckpt.params, ckpt.adam, m.iteration, ckpt.losses)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        data: &'a [TrainingPair],
        cfg: TrainConfig,
        unet: UNetConfig,
        normalization: NormStats,
        params: DenoiserParams<E>,
        adam: AdamState<E>,
        iteration: usize,
        losses: Vec<LossRecord>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        unet.validate()?;
        let first = data.first().ok_or(TrainError::EmptyDataset)?;
        let shape = first.x0.shape().to_vec();
        if shape.len() != 3 || shape[0] != unet.out_channels {
            return Err(ModelError::InvalidConfig(format!("x0 shape {shape:?}")).into());
        }
        unet.check_extent(shape[1], shape[2])?;
        if data.iter().any(|p| p.x0.shape() != shape || p.y.spatial() != (shape[1], shape[2])) {
            return Err(TrainError::InvalidConfig("training pairs differ in shape".into()));
        }
        if data.iter().any(|p| p.y.total_time() != first.y.total_time()) {
            return Err(TrainError::InvalidConfig("training pairs differ in total_time".into()));
        }
        Ok(Self {
            x0: data.iter().map(|p| p.x0.cast()).collect(),
            y: data.iter().map(|p| p.y.to_tensor()).collect(),
            data,
            sched: cfg.schedule()?,
            cfg,
            unet,
            params,
            adam,
            iteration,
            losses,
            normalization,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn total_iterations(&self) -> usize {
        self.cfg.total_iterations(self.data.len())
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.total_iterations()
    }

    pub fn losses(&self) -> &[LossRecord] {
        &self.losses
    }

    pub fn params(&self) -> &DenoiserParams<E> {
        &self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Dataset indices making up the batch of `iteration`.
    pub fn batch_indices(&self, iteration: usize) -> Vec<usize> {
        let n = self.data.len();
        let bpe = self.cfg.batches_per_epoch(n);
        let (epoch, b) = (iteration / bpe, iteration % bpe);
        let shuffle = derive_seed(derive_seed(self.cfg.seed, SHUFFLE_STREAM), epoch as u64);
        let perm = GaussianRng::new(shuffle).permutation(n);
        let end = ((b + 1) * self.cfg.batch_size).min(n);
        perm[b * self.cfg.batch_size..end].to_vec()
    }

    fn sample_grad(&self, idx: usize, t: usize, eps: &Tensor<E>) -> Result<(f64, Vec<Tensor<E>>), TrainError> {
        let xt = q_sample(&self.x0[idx], t, eps, &self.sched)?;
        let mut tape = Tape::new();
        let tp = TapeParams::attach(&mut tape, &self.params, true);
        let xv = tape.constant(xt);
        let yv = tape.constant(self.y[idx].clone());
        let target = tape.constant(eps.clone());
        let pos = self.cfg.time_input.position(t, self.sched.steps());
        let pred = forward(&self.unet, &mut tape, &tp, xv, yv, pos, ForwardOptions::default())?;
        let loss = tape.mse(pred, target).map_err(layer_err("loss"))?;
        let value = tape.value(loss).data()[0].as_f64();
        tape.backward(loss).map_err(layer_err("loss"))?;
        let grads = tp
            .vars()
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, p)| tape.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, grads))
    }

    /// Runs one iteration and returns its record. On error the state is untouched.
    pub fn step(&mut self) -> Result<LossRecord, TrainError> {
        let total = self.total_iterations();
        let it = self.iteration;
        let lr = cosine_lr(it.min(total), total, self.cfg.base_lr)?;
        let batch = self.batch_indices(it);
        let shape = self.x0[0].shape().to_vec();
        let mut rng = GaussianRng::new(derive_seed(derive_seed(self.cfg.seed, NOISE_STREAM), it as u64));
        let draws: Vec<(usize, Tensor<E>)> =
            batch.iter().map(|_| draw_noise(&mut rng, self.sched.steps(), &shape)).collect();

        let results: Vec<Result<(f64, Vec<Tensor<E>>), TrainError>> = batch
            .par_iter()
            .zip(&draws)
            .map(|(&idx, (t, eps))| self.sample_grad(idx, *t, eps))
            .collect();

        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Tensor<E>> = self.params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        for r in results {
            let (l, g) = match r {
                Ok(v) => v,
                Err(TrainError::Model(ModelError::NonFiniteActivation { layer })) => {
                    log::error!("iteration {it}: non-finite activation in {layer}");
                    return Err(TrainError::NonFiniteLoss { iteration: it });
                }
                Err(e) => return Err(e),
            };
            loss += l * scale;
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a = *a + *b;
                }
            }
        }
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration: it });
        }
        let mut gscale = scale;
        if let Some(max) = self.cfg.max_grad_norm {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| (v.as_f64() * scale).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > max {
                gscale *= max / norm;
            }
        }
        let gs = E::from_f64(gscale);
        for g in &mut grads {
            for v in g.data_mut() {
                *v = *v * gs;
            }
        }
        adam_step(&mut self.params, &grads, &mut self.adam, lr)?;
        let rec = LossRecord {
            iteration: it,
            lr,
            loss,
        };
        self.losses.push(rec);
        self.iteration += 1;
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Checkpoint<E> {
        let first = &self.data[0];
        let (h, w) = first.y.spatial();
        Checkpoint {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_VERSION,
                train: self.cfg.clone(),
                unet: self.unet.clone(),
                normalization: self.normalization.clone(),
                grid_size: [h, w],
                total_time: first.y.total_time(),
                n_train_pairs: self.data.len(),
                iteration: self.iteration,
                total_iterations: self.total_iterations(),
                schedule_alpha_bar_final: self.sched.alpha_bar(self.sched.steps()),
            },
            params: self.params.clone(),
            adam: self.adam.clone(),
            losses: self.losses.clone(),
        }
    }

    /// Trains to completion. With `out`, writes periodic and final checkpoints
    /// there; on a non-finite loss the last good state is saved before returning.
    pub fn run(&mut self, out: Option<&Path>) -> Result<(), TrainError> {
        self.run_until(out, self.total_iterations())
    }

    /// Like [`Trainer::run`] but stops once `stop` iterations are done.
    pub fn run_until(&mut self, out: Option<&Path>, stop: usize) -> Result<(), TrainError> {
        let stop = stop.min(self.total_iterations());
        while self.iteration < stop {
            match self.step() {
                Ok(rec) => {
                    log::debug!("iteration {} lr {:.3e} loss {:.6}", rec.iteration, rec.lr, rec.loss);
                    let every = self.cfg.checkpoint_every;
                    if let Some(dir) = out {
                        if every > 0 && self.iteration.is_multiple_of(every) && self.iteration < stop {
                            self.checkpoint().save(dir)?;
                        }
                    }
                }
                Err(e) => {
                    if let (Some(dir), TrainError::NonFiniteLoss { .. }) = (out, &e) {
                        self.checkpoint().save(dir)?;
                    }
                    return Err(e);
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(dir)?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final checkpoint.
pub fn train<E: Real>(
    data: &[TrainingPair],
    cfg: &TrainConfig,
    unet: &UNetConfig,
    normalization: &NormStats,
) -> Result<Checkpoint<E>, TrainError> {
    let mut t = Trainer::new(data, cfg.clone(), unet.clone(), normalization.clone())?;
    t.run(None)?;
    Ok(t.checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(x: f64) -> DenoiserParams<f64> {
        let mut p = DenoiserParams::new();
        p.insert("x", Tensor::scalar(x));
        p
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4).unwrap(), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4).unwrap() - 5e-5).abs() < 1e-18);
        assert!(matches!(cosine_lr(101, 100, 1e-4), Err(TrainError::LrStepOutOfRange { .. })));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_params(2.5);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(0.0)], &mut s, 0.1).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 2.5);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 1e-3).unwrap();
        let moved = -p.tensors()[0].data()[0];
        assert!((moved - 1e-3 / (1.0 + ADAM_EPS)).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_is_named_and_harmless() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, 0.1).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { ref name } if name == "x"));
        assert_eq!(s.step, 0);
        assert_eq!(p.tensors()[0].data()[0], 1.0);
    }

    #[test]
    fn loss_csv_roundtrip() {
        let l = vec![
            LossRecord { iteration: 0, lr: 1e-4, loss: 1.0 / 3.0 },
            LossRecord { iteration: 1, lr: 9.99e-5, loss: 0.1 + 0.2 },
        ];
        assert_eq!(losses_from_csv(&losses_to_csv(&l)).unwrap(), l);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig { base_lr: 0.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::default().total_iterations(96), 120);
    }
}
