//! Shared fixtures for the criterion benches in `benches/`.

use fluiddiff::ddpm::{build_condition, ConditionTensor};
use fluiddiff::fluid::{init_scene, step, FluidState, Grid, SimParams};
use fluiddiff::rng::GaussianRng;
use fluiddiff::Tensor;

pub fn randn(seed: u64, shape: &[usize]) -> Tensor<f32> {
    GaussianRng::new(seed).normal_tensor(shape)
}

/// A square scene advanced a few steps so the velocity field is nontrivial.
pub fn warm_scene(n: usize, steps: usize) -> (FluidState, SimParams) {
    let params = SimParams {
        height: n,
        width: n,
        total_time: 1.0,
        ..SimParams::default()
    };
    let mut s = init_scene(3, &params);
    for _ in 0..steps {
        step(&mut s, &params).expect("warm-up step");
    }
    (s, params)
}

pub fn condition(n: usize) -> ConditionTensor {
    let mut rng = GaussianRng::new(5);
    let rho = Grid::from_fn(n, n, |_, _| rng.uniform());
    build_condition(&rho, 4.0, 8.0).expect("tau inside horizon")
}
