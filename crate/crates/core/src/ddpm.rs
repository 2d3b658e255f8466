//! Diffusion-chain mathematics.
//!
//! Steps are 1-based: `t` runs over `1..=T`, and `alpha_bar(0) = 1` so the
//! first posterior is well defined with zero variance.

use serde::{Deserialize, Serialize};

use crate::error::{DiffusionError, TensorError};
use crate::fluid::Grid;
use crate::rng::GaussianRng;
use crate::tensor::{Real, Tensor};

/// Precomputed constants of a linear-beta forward process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
}

/// Linear schedule: `beta_t` interpolates `beta_start` (t = 1) to `beta_end` (t = T).
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::InvalidSchedule("T must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma2 = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        beta_start,
        beta_end,
        beta,
        alpha,
        alpha_bar,
        sigma2,
    })
}

impl NoiseSchedule {
    /// The paper-scale schedule: T = 400, beta in [1e-4, 0.02].
    pub fn reference() -> Self {
        make_schedule(400, 1e-4, 0.02).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps {
            return Err(DiffusionError::StepOutOfRange { t, max: self.steps });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of `alpha` up to `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior variance of `q(x_{t-1} | x_t, x_0)`.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    /// CSV rows `t,beta,alpha,alpha_bar,sigma2` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar,sigma2\n");
        for t in 1..=self.steps {
            out.push_str(&format!(
                "{t},{:?},{:?},{:?},{:?}\n",
                self.beta(t),
                self.alpha(t),
                self.alpha_bar(t),
                self.sigma2(t)
            ));
        }
        out
    }
}

fn same_shape<E: Real>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

fn axpby<E: Real>(a: f64, x: &Tensor<E>, b: f64, y: &Tensor<E>) -> Tensor<E> {
    let (a, b) = (E::from_f64(a), E::from_f64(b));
    x.zip_map(y, |xv, yv| a * xv + b * yv).expect("shapes checked by caller")
}

/// Closed-form marginal `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample<E: Real>(
    x0: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>, DiffusionError> {
    sched.check_step(t)?;
    same_shape("q_sample", x0, eps)?;
    let ab = sched.alpha_bar(t);
    Ok(axpby(ab.sqrt(), x0, (1.0 - ab).sqrt(), eps))
}

/// Runs the one-step transitions `x_s = sqrt(1 - beta_s) x_{s-1} + sqrt(beta_s) z_s`
/// for `s = 1..=t`, drawing each `z_s` from `noise(s)`.
pub fn iterate_forward_with<E: Real>(
    x0: &Tensor<E>,
    t: usize,
    sched: &NoiseSchedule,
    mut noise: impl FnMut(usize) -> Tensor<E>,
) -> Result<Tensor<E>, DiffusionError> {
    sched.check_step(t)?;
    let mut x = x0.clone();
    for s in 1..=t {
        let z = noise(s);
        same_shape("iterate_forward", x0, &z)?;
        let b = sched.beta(s);
        x = axpby((1.0 - b).sqrt(), &x, b.sqrt(), &z);
    }
    Ok(x)
}

/// [`iterate_forward_with`] using fresh standard normal draws.
pub fn iterate_forward<E: Real>(
    x0: &Tensor<E>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut GaussianRng,
) -> Result<Tensor<E>, DiffusionError> {
    iterate_forward_with(x0, t, sched, |_| rng.normal_tensor(x0.shape()))
}

/// Mean and variance of `q(x_{t-1} | x_t, x_0)`.
pub fn posterior_mean_var<E: Real>(
    x0: &Tensor<E>,
    xt: &Tensor<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Tensor<E>, f64), DiffusionError> {
    sched.check_step(t)?;
    same_shape("posterior_mean_var", x0, xt)?;
    let (ab, ab_prev, beta) = (sched.alpha_bar(t), sched.alpha_bar(t - 1), sched.beta(t));
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    Ok((axpby(c0, x0, ct, xt), sched.sigma2(t)))
}

/// Reverse-process mean from a noise prediction:
/// `(x_t - (1 - alpha_t) / sqrt(1 - ab_t) * eps) / sqrt(alpha_t)`.
pub fn eps_posterior_mean<E: Real>(
    xt: &Tensor<E>,
    eps: &Tensor<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>, DiffusionError> {
    sched.check_step(t)?;
    same_shape("eps_posterior_mean", xt, eps)?;
    let inv = 1.0 / sched.alpha(t).sqrt();
    let c = (1.0 - sched.alpha(t)) / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(axpby(inv, xt, -inv * c, eps))
}

/// One KL term of the variational bound for `t >= 2`:
/// `||mu(x_t, x_0) - mu_theta||^2 / (2 sigma2_t)`, summed over elements.
///
/// Evaluated as a diagnostic only; training minimizes [`diffusion_loss`].
pub fn variational_term<E: Real>(
    x0: &Tensor<E>,
    xt: &Tensor<E>,
    eps_pred: &Tensor<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<f64, DiffusionError> {
    sched.check_step(t)?;
    if t == 1 {
        return Err(DiffusionError::StepOutOfRange { t, max: sched.steps() });
    }
    let (mu, sigma2) = posterior_mean_var(x0, xt, t, sched)?;
    let mu_theta = eps_posterior_mean(xt, eps_pred, t, sched)?;
    let sq: f64 = mu
        .data()
        .iter()
        .zip(mu_theta.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sq / (2.0 * sigma2))
}

/// Transformer-style position code: `v[2k] = sin(w_k s)`, `v[2k+1] = cos(w_k s)`,
/// with `w_k = 10000^(-2k/d)`.
pub fn sinusoidal_embed(s: f64, d: usize) -> Result<Vec<f64>, DiffusionError> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(DiffusionError::OddEmbedding(d));
    }
    let mut v = vec![0.0; d];
    for k in 0..d / 2 {
        let w = 10000f64.powf(-2.0 * k as f64 / d as f64);
        v[2 * k] = (w * s).sin();
        v[2 * k + 1] = (w * s).cos();
    }
    Ok(v)
}

/// How the diffusion step is presented to the denoiser's embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeInput {
    /// the integer step `t`
    #[default]
    Integer,
    /// the fraction `t / T`
    Normalized,
}

impl TimeInput {
    pub fn position(self, t: usize, steps: usize) -> f64 {
        match self {
            TimeInput::Integer => t as f64,
            TimeInput::Normalized => t as f64 / steps as f64,
        }
    }
}

/// Conditioning channels: initial density and the normalized query time.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTensor {
    channels: Tensor<f64>,
    tau: f64,
    total_time: f64,
}

pub fn build_condition(rho0: &Grid, tau: f64, total_time: f64) -> Result<ConditionTensor, DiffusionError> {
    if !(total_time > 0.0) || !(0.0..=total_time).contains(&tau) {
        return Err(DiffusionError::TimeOutOfRange { tau, total_time });
    }
    let (h, w) = (rho0.ny(), rho0.nx());
    let frac = tau / total_time;
    let mut data = rho0.data().to_vec();
    data.extend(std::iter::repeat_n(frac, h * w));
    Ok(ConditionTensor {
        channels: Tensor::new(vec![2, h, w], data)?,
        tau,
        total_time,
    })
}

impl ConditionTensor {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    /// `(H, W)` of the conditioning grids.
    pub fn spatial(&self) -> (usize, usize) {
        (self.channels.shape()[1], self.channels.shape()[2])
    }

    pub fn channels(&self) -> &Tensor<f64> {
        &self.channels
    }

    pub fn to_tensor<E: Real>(&self) -> Tensor<E> {
        self.channels.cast()
    }

    /// Same density, different query time.
    pub fn with_tau(&self, tau: f64) -> Result<Self, DiffusionError> {
        let rho0 = self.channels.slice_channels(0, 1)?;
        let (h, w) = self.spatial();
        let grid = Grid::from_vec(h, w, rho0.into_data()).expect("condition shape");
        build_condition(&grid, tau, self.total_time)
    }
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss<E: Real>(eps_pred: &Tensor<E>, eps: &Tensor<E>) -> Result<f64, DiffusionError> {
    same_shape("diffusion_loss", eps_pred, eps)?;
    let sq: f64 = eps_pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sq / eps.numel() as f64)
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
///
/// `denoiser(x_t, t, y)` predicts the noise in `x_t`. Fresh noise is added
/// at every step except `t = 1`. The draw is a pure function of `seed`.
pub fn ancestral_sample<E, F>(
    mut denoiser: F,
    y: &ConditionTensor,
    sched: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor<E>, DiffusionError>
where
    E: Real,
    F: FnMut(&Tensor<E>, usize, &ConditionTensor) -> Result<Tensor<E>, DiffusionError>,
{
    let mut rng = GaussianRng::new(seed);
    let mut x: Tensor<E> = rng.normal_tensor(shape);
    for t in (1..=sched.steps()).rev() {
        let eps = denoiser(&x, t, y)?;
        if eps.shape() != x.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ancestral_sample",
                expected: format!("{:?}", x.shape()),
                got: format!("{:?}", eps.shape()),
            }
            .into());
        }
        if !eps.is_finite() {
            return Err(DiffusionError::NonFiniteDenoiser { t });
        }
        let mean = eps_posterior_mean(&x, &eps, t, sched)?;
        x = if t > 1 {
            let z: Tensor<E> = rng.normal_tensor(shape);
            axpby(1.0, &mean, sched.sigma2(t).sqrt(), &z)
        } else {
            mean
        };
        if !x.is_finite() {
            return Err(DiffusionError::NonFiniteDenoiser { t });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::reference();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(400) - 0.02).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert_eq!(s.sigma2(1), 0.0);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn q_sample_without_noise_scales_x0() {
        let s = NoiseSchedule::reference();
        let x0 = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let out = q_sample(&x0, 37, &Tensor::zeros(&[2, 3]), &s).unwrap();
        let c = s.alpha_bar(37).sqrt();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, c * x);
        }
        assert!(q_sample(&x0, 0, &x0, &s).is_err());
        assert!(q_sample(&x0, 401, &x0, &s).is_err());
    }

    #[test]
    fn q_sample_at_first_step_is_close_to_x0() {
        let s = NoiseSchedule::reference();
        let mut rng = GaussianRng::new(1);
        let x0: Tensor<f64> = rng.normal_tensor(&[16]);
        let eps: Tensor<f64> = rng.normal_tensor(&[16]);
        let out = q_sample(&x0, 1, &eps, &s).unwrap();
        for i in 0..16 {
            let bound = s.beta(1).sqrt() * eps.data()[i].abs() + 1e-4 * x0.data()[i].abs();
            assert!((out.data()[i] - x0.data()[i]).abs() <= bound);
        }
    }

    #[test]
    fn forward_iteration_special_cases() {
        let s = NoiseSchedule::reference();
        let x0 = Tensor::<f64>::from_fn(&[4], |i| i as f64 + 1.0);
        let z = Tensor::<f64>::from_fn(&[4], |i| 0.3 - i as f64);
        let one = iterate_forward_with(&x0, 1, &s, |_| z.clone()).unwrap();
        let closed = q_sample(&x0, 1, &z, &s).unwrap();
        for (a, b) in one.data().iter().zip(closed.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let quiet = iterate_forward_with(&x0, 250, &s, |_| Tensor::zeros(&[4])).unwrap();
        let c = s.alpha_bar(250).sqrt();
        for (a, x) in quiet.data().iter().zip(x0.data()) {
            assert!((a - c * x).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_at_first_step() {
        let s = NoiseSchedule::reference();
        let x0 = Tensor::<f64>::from_fn(&[3], |i| i as f64);
        let xt = Tensor::<f64>::from_fn(&[3], |i| 10.0 - i as f64);
        let (mu, var) = posterior_mean_var(&x0, &xt, 1, &s).unwrap();
        assert_eq!(var, 0.0);
        for (m, x) in mu.data().iter().zip(x0.data()) {
            assert!((m - x).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_two_step_toy_by_hand() {
        // betas [0.1, 0.2]: ab1 = 0.9, ab2 = 0.72, alpha2 = 0.8
        // c0 = sqrt(0.9) * 0.2 / 0.28, ct = sqrt(0.8) * 0.1 / 0.28
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        let (mu, var) = posterior_mean_var(
            &Tensor::<f64>::scalar(1.0),
            &Tensor::scalar(0.5),
            2,
            &s,
        )
        .unwrap();
        let expected_mu = 0.948_683_298_050_513_8 * 0.2 / 0.28 + 0.894_427_190_999_915_9 * 0.1 / 0.28 * 0.5;
        assert!((mu.data()[0] - expected_mu).abs() < 1e-12, "{}", mu.data()[0]);
        assert!((var - 0.1 / 0.28 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn embedding_cases() {
        assert_eq!(sinusoidal_embed(0.0, 6).unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        // d = 4, k = 1: w = 0.01
        let v = sinusoidal_embed(100.0, 4).unwrap();
        assert!((v[2] - 1f64.sin()).abs() < 1e-12);
        assert!((v[3] - 1f64.cos()).abs() < 1e-12);
        assert!(sinusoidal_embed(1.0, 5).is_err());
        assert!(sinusoidal_embed(1.0, 0).is_err());
    }

    #[test]
    fn condition_channels() {
        let rho = Grid::from_fn(3, 4, |j, i| (j * 4 + i) as f64 / 12.0);
        let c0 = build_condition(&rho, 0.0, 8.0).unwrap();
        assert_eq!(c0.channels().shape(), &[2, 3, 4]);
        assert_eq!(&c0.channels().data()[..12], rho.data());
        assert!(c0.channels().data()[12..].iter().all(|&v| v == 0.0));
        let c1 = build_condition(&rho, 8.0, 8.0).unwrap();
        assert!(c1.channels().data()[12..].iter().all(|&v| v == 1.0));
        assert!(build_condition(&rho, 8.5, 8.0).is_err());
        assert!(build_condition(&rho, -0.1, 8.0).is_err());
        assert_eq!(c0.with_tau(8.0).unwrap(), c1);
    }

    #[test]
    fn loss_cases() {
        let a = Tensor::<f64>::from_fn(&[2, 2], |i| i as f64);
        assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.5);
        assert!((diffusion_loss(&shifted, &a).unwrap() - 0.25).abs() < 1e-15);
        assert!(diffusion_loss(&a, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn single_step_sampler_is_deterministic_rescale() {
        let s = make_schedule(1, 0.05, 0.05).unwrap();
        let y = build_condition(&Grid::zeros(2, 2), 0.0, 1.0).unwrap();
        let out: Tensor<f64> =
            ancestral_sample(|x, _, _| Ok(Tensor::zeros(x.shape())), &y, &s, &[1, 2, 2], 42).unwrap();
        let x1: Tensor<f64> = GaussianRng::new(42).normal_tensor(&[1, 2, 2]);
        for (o, x) in out.data().iter().zip(x1.data()) {
            assert!((o - x / 0.95f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_rejects_non_finite_predictions() {
        let s = make_schedule(5, 0.01, 0.02).unwrap();
        let y = build_condition(&Grid::zeros(2, 2), 0.0, 1.0).unwrap();
        let err = ancestral_sample::<f64, _>(
            |x, t, _| Ok(if t == 3 { x.map(|_| f64::NAN) } else { x.clone() }),
            &y,
            &s,
            &[1, 2, 2],
            1,
        )
        .unwrap_err();
        assert_eq!(err, DiffusionError::NonFiniteDenoiser { t: 3 });
    }
}
