//! Conditional prediction with a trained denoiser, and the cases fed to [`crate::metrics`].

use rayon::prelude::*;

use crate::dataset::{velocity_grids, NormStats, TrainingPair};
use crate::ddpm::{ancestral_sample, ConditionTensor, NoiseSchedule};
use crate::error::ModelError;
use crate::fluid::Grid;
use crate::metrics::EvalCase;
use crate::rng::derive_seed;
use crate::tensor::{Real, Tensor};
use crate::train::Checkpoint;
use crate::unet::Denoiser;

impl<E: Real> Checkpoint<E> {
    pub fn denoiser(&self) -> Denoiser<E> {
        Denoiser {
            config: self.meta.unet.clone(),
            params: self.params.clone(),
            time_input: self.meta.train.time_input,
        }
    }
}

impl<E: Real> Denoiser<E> {
    /// One ancestral sample of the normalized velocity under condition `y`.
    pub fn sample(&self, y: &ConditionTensor, sched: &NoiseSchedule, seed: u64) -> Result<Tensor<E>, ModelError> {
        let (h, w) = y.spatial();
        self.config.check_extent(h, w)?;
        let mut failure = None;
        let out = ancestral_sample(
            |x, t, y| {
                self.denoise(x, t, y, sched).map_err(|e| match e {
                    ModelError::Diffusion(d) => d,
                    other => {
                        failure = Some(other);
                        crate::DiffusionError::NonFiniteDenoiser { t }
                    }
                })
            },
            y,
            sched,
            &[self.config.out_channels, h, w],
            seed,
        );
        match (out, failure) {
            (_, Some(e)) => Err(e),
            (r, None) => Ok(r?),
        }
    }

    /// Mean of `samples` draws; draw `s` uses seed `derive_seed(seed, s)`.
    pub fn sample_mean(
        &self,
        y: &ConditionTensor,
        sched: &NoiseSchedule,
        samples: usize,
        seed: u64,
    ) -> Result<Tensor<f64>, ModelError> {
        let (h, w) = y.spatial();
        let mut acc = Tensor::<f64>::zeros(&[self.config.out_channels, h, w]);
        for s in 0..samples.max(1) {
            let x: Tensor<f64> = self.sample(y, sched, derive_seed(seed, s as u64))?.cast();
            for (a, v) in acc.data_mut().iter_mut().zip(x.data()) {
                *a += v;
            }
        }
        let n = samples.max(1) as f64;
        acc.data_mut().iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

fn physical(t: &Tensor<f64>, stats: &NormStats) -> [Grid; 2] {
    let (ux, uy) = velocity_grids(t, stats).expect("prediction has shape [2, H, W]");
    [ux, uy]
}

/// Predicts every pair; case `i` draws from `derive_seed(seed, i)`.
/// Cases are computed in parallel and returned in input order.
pub fn predict_pairs<E: Real>(
    net: &Denoiser<E>,
    sched: &NoiseSchedule,
    pairs: &[TrainingPair],
    stats: &NormStats,
    samples: usize,
    seed: u64,
) -> Result<Vec<EvalCase>, ModelError> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mean = net.sample_mean(&p.y, sched, samples, derive_seed(seed, i as u64))?;
            Ok(EvalCase {
                scene: p.scene,
                tau: p.tau,
                pred: physical(&mean, stats),
                truth: physical(&p.x0, stats),
            })
        })
        .collect()
}

/// Truth predicted by itself; every metric is zero.
pub fn oracle_cases(pairs: &[TrainingPair], stats: &NormStats) -> Vec<EvalCase> {
    pairs
        .iter()
        .map(|p| {
            let truth = physical(&p.x0, stats);
            EvalCase {
                scene: p.scene,
                tau: p.tau,
                pred: truth.clone(),
                truth,
            }
        })
        .collect()
}

/// The predict-zero-velocity baseline.
pub fn zero_cases(pairs: &[TrainingPair], stats: &NormStats) -> Vec<EvalCase> {
    oracle_cases(pairs, stats)
        .into_iter()
        .map(|mut c| {
            let (h, w) = (c.truth[0].ny(), c.truth[0].nx());
            c.pred = [Grid::zeros(h, w), Grid::zeros(h, w)];
            c
        })
        .collect()
}
