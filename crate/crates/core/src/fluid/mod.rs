//! Incompressible 2-D smoke on a MAC grid.
//!
//! Velocity components live on cell faces (`u` on vertical faces, shape
//! `H x (W+1)`; `v` on horizontal faces, shape `(H+1) x W`), density and
//! pressure at cell centres. The box is closed: boundary-normal faces are
//! held at zero. Row index `j` grows in the +y ("up") direction, which is
//! where buoyancy pushes.
//!
//! One [`step`] is: semi-Lagrangian self-advection of velocity, advection of
//! density, explicit viscosity, Boussinesq buoyancy, pressure projection.

mod grid;

use serde::{Deserialize, Serialize};

pub use grid::Grid;

use crate::error::FluidError;
use crate::rng::GaussianRng;

/// Cell size in grid units.
pub const DX: f64 = 1.0;

/// Largest `nu * dt / dx^2` accepted by the explicit viscosity update.
pub const DIFFUSION_LIMIT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// kinematic viscosity
    pub nu: f64,
    /// buoyancy coefficient
    pub eta: f64,
    /// solver time step, seconds
    pub dt: f64,
    pub height: usize,
    pub width: usize,
    pub total_time: f64,
    pub record_every: f64,
    pub pressure_tol: f64,
    pub pressure_max_iter: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            nu: 0.03,
            eta: 0.5,
            dt: 0.1,
            height: 64,
            width: 64,
            total_time: 40.0,
            record_every: 1.0,
            pressure_tol: 1e-8,
            pressure_max_iter: 10_000,
        }
    }
}

/// `value / unit` as an integer, if it is one (to a relative 1e-9).
fn whole_multiple(value: f64, unit: f64) -> Option<usize> {
    let n = (value / unit).round();
    (n >= 1.0 && (n * unit - value).abs() <= 1e-9 * value.abs().max(unit)).then_some(n as usize)
}

impl SimParams {
    pub fn validate(&self) -> Result<(), FluidError> {
        let bad = |m: String| Err(FluidError::InvalidParams(m));
        if !(self.nu >= 0.0) {
            return bad(format!("nu must be >= 0, got {}", self.nu));
        }
        if !(self.eta >= 0.0) {
            return bad(format!("eta must be >= 0, got {}", self.eta));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if self.height < 2 || self.width < 2 {
            return bad(format!("grid must be at least 2x2, got {}x{}", self.height, self.width));
        }
        if !(self.pressure_tol > 0.0) || self.pressure_max_iter == 0 {
            return bad("pressure solver needs tol > 0 and max_iter >= 1".into());
        }
        if whole_multiple(self.record_every, self.dt).is_none() {
            return bad(format!(
                "record_every {} is not an integer multiple of dt {}",
                self.record_every, self.dt
            ));
        }
        if whole_multiple(self.total_time, self.record_every).is_none() {
            return bad(format!(
                "total_time {} is not an integer multiple of record_every {}",
                self.total_time, self.record_every
            ));
        }
        Ok(())
    }

    pub fn steps_per_record(&self) -> usize {
        whole_multiple(self.record_every, self.dt).unwrap_or(1)
    }

    pub fn snapshot_count(&self) -> usize {
        whole_multiple(self.total_time, self.record_every).unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidState {
    pub u: Grid,
    pub v: Grid,
    pub rho: Grid,
    pub p: Grid,
    pub tau: f64,
}

/// Where a field's samples sit inside their cell, in cell units.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Stagger {
    Center,
    XFace,
    YFace,
}

impl Stagger {
    fn of(field: &Grid, h: usize, w: usize) -> Option<Self> {
        match (field.ny(), field.nx()) {
            (a, b) if (a, b) == (h, w) => Some(Stagger::Center),
            (a, b) if (a, b) == (h, w + 1) => Some(Stagger::XFace),
            (a, b) if (a, b) == (h + 1, w) => Some(Stagger::YFace),
            _ => None,
        }
    }

    /// (x, y) offset of sample (0, 0) from the domain origin.
    fn offset(self) -> (f64, f64) {
        match self {
            Stagger::Center => (0.5, 0.5),
            Stagger::XFace => (0.0, 0.5),
            Stagger::YFace => (0.5, 0.0),
        }
    }
}

fn sample_at(field: &Grid, stagger: Stagger, x: f64, y: f64) -> f64 {
    let (ox, oy) = stagger.offset();
    field.sample(y / DX - oy, x / DX - ox)
}

impl FluidState {
    /// Fluid at rest with zero density.
    pub fn at_rest(height: usize, width: usize) -> Self {
        Self {
            u: Grid::zeros(height, width + 1),
            v: Grid::zeros(height + 1, width),
            rho: Grid::zeros(height, width),
            p: Grid::zeros(height, width),
            tau: 0.0,
        }
    }

    pub fn height(&self) -> usize {
        self.rho.ny()
    }

    pub fn width(&self) -> usize {
        self.rho.nx()
    }

    /// Velocity at a point, interpolated from the faces.
    pub fn velocity_at(&self, x: f64, y: f64) -> (f64, f64) {
        (
            sample_at(&self.u, Stagger::XFace, x, y),
            sample_at(&self.v, Stagger::YFace, x, y),
        )
    }

    /// Per-cell discrete divergence `(u_e - u_w + v_n - v_s) / dx`.
    pub fn divergence(&self) -> Grid {
        let (h, w) = (self.height(), self.width());
        Grid::from_fn(h, w, |j, i| {
            (self.u.get(j, i + 1) - self.u.get(j, i) + self.v.get(j + 1, i) - self.v.get(j, i)) / DX
        })
    }

    pub fn max_abs_divergence(&self) -> f64 {
        self.divergence().max_abs()
    }

    pub fn max_abs_velocity(&self) -> f64 {
        self.u.max_abs().max(self.v.max_abs())
    }

    /// Zeroes the boundary-normal faces of the closed box.
    pub fn enforce_walls(&mut self) {
        let (h, w) = (self.height(), self.width());
        for j in 0..h {
            self.u.set(j, 0, 0.0);
            self.u.set(j, w, 0.0);
        }
        for i in 0..w {
            self.v.set(0, i, 0.0);
            self.v.set(h, i, 0.0);
        }
    }

    /// Cell-centred `(u_x, u_y)`, averaging the two faces of each cell.
    pub fn centered_velocity(&self) -> (Grid, Grid) {
        let (h, w) = (self.height(), self.width());
        let ux = Grid::from_fn(h, w, |j, i| 0.5 * (self.u.get(j, i) + self.u.get(j, i + 1)));
        let uy = Grid::from_fn(h, w, |j, i| 0.5 * (self.v.get(j, i) + self.v.get(j + 1, i)));
        (ux, uy)
    }
}

/// Random still smoke: a sum of 4 to 10 Gaussian blobs clamped to `[0, 1]`.
pub fn init_scene(seed: u64, params: &SimParams) -> FluidState {
    let (h, w) = (params.height, params.width);
    let mut rng = GaussianRng::new(seed);
    let blobs = rng.int_in(4, 10);
    let hf = h as f64;
    let spec: Vec<(f64, f64, f64, f64)> = (0..blobs)
        .map(|_| {
            let cx = rng.uniform_in(0.0, w as f64 * DX);
            let cy = rng.uniform_in(0.0, hf * DX);
            let radius = rng.uniform_in(hf / 16.0, hf / 4.0) * DX;
            let amp = rng.uniform_in(0.5, 1.0);
            (cx, cy, radius, amp)
        })
        .collect();
    let mut state = FluidState::at_rest(h, w);
    state.rho = Grid::from_fn(h, w, |j, i| {
        let (x, y) = ((i as f64 + 0.5) * DX, (j as f64 + 0.5) * DX);
        let total: f64 = spec
            .iter()
            .map(|&(cx, cy, r, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
            .sum();
        total.clamp(0.0, 1.0)
    });
    state
}

/// Semi-Lagrangian transport of `field` by the face velocities `(u, v)`.
///
/// The staggering of `field` is inferred from its shape relative to the
/// `H x W` cell grid implied by `u`. Backtraced points are clamped to the
/// domain, then sampled bilinearly, so the result never leaves
/// `[min(field), max(field)]`.
pub fn advect(field: &Grid, u: &Grid, v: &Grid, dt: f64) -> Grid {
    let (h, w) = (u.ny(), u.nx() - 1);
    assert_eq!((v.ny(), v.nx()), (h + 1, w), "v faces must be (H+1) x W");
    let stagger = Stagger::of(field, h, w).expect("field must be cell- or face-centred on the velocity grid");
    let (ox, oy) = stagger.offset();
    let (xmax, ymax) = (w as f64 * DX, h as f64 * DX);
    Grid::from_fn(field.ny(), field.nx(), |j, i| {
        let x = (i as f64 + ox) * DX;
        let y = (j as f64 + oy) * DX;
        let vx = sample_at(u, Stagger::XFace, x, y);
        let vy = sample_at(v, Stagger::YFace, x, y);
        let bx = (x - dt * vx).clamp(0.0, xmax);
        let by = (y - dt * vy).clamp(0.0, ymax);
        sample_at(field, stagger, bx, by)
    })
}

/// Wall treatment for the viscosity stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WallBc {
    /// Out-of-range neighbours mirror the cell itself (scalars).
    ZeroGradient,
    /// Out-of-range neighbours are zero (velocity).
    ZeroValue,
}

/// Explicit update `field + nu * dt * lap(field)` with the 5-point stencil.
pub fn diffuse(field: &Grid, nu: f64, dt: f64, bc: WallBc) -> Result<Grid, FluidError> {
    let ratio = nu * dt / (DX * DX);
    if ratio > DIFFUSION_LIMIT {
        return Err(FluidError::UnstableDiffusion { value: ratio });
    }
    if nu == 0.0 {
        return Ok(field.clone());
    }
    let (ny, nx) = (field.ny(), field.nx());
    Ok(Grid::from_fn(ny, nx, |j, i| {
        let c = field.get(j, i);
        let ghost = match bc {
            WallBc::ZeroGradient => c,
            WallBc::ZeroValue => 0.0,
        };
        let n = |dj: isize, di: isize| {
            let (jj, ii) = (j as isize + dj, i as isize + di);
            if jj < 0 || ii < 0 || jj >= ny as isize || ii >= nx as isize {
                ghost
            } else {
                field.get(jj as usize, ii as usize)
            }
        };
        let lap = n(-1, 0) + n(1, 0) + n(0, -1) + n(0, 1) - 4.0 * c;
        c + ratio * lap
    }))
}

/// Adds `eta * mean(rho on both sides) * dt` to every interior `v` face.
pub fn apply_buoyancy(state: &mut FluidState, eta: f64, dt: f64) {
    let (h, w) = (state.height(), state.width());
    for j in 1..h {
        for i in 0..w {
            let avg = 0.5 * (state.rho.get(j - 1, i) + state.rho.get(j, i));
            state.v.set(j, i, state.v.get(j, i) + eta * avg * dt);
        }
    }
}

/// Outcome of a converged pressure solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectStats {
    pub iterations: usize,
    /// max |residual| of the Poisson system at exit
    pub residual: f64,
}

/// `-lap(p)` with homogeneous Neumann walls: only in-domain neighbours count.
fn neg_laplacian(p: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for j in 0..h {
        for i in 0..w {
            let c = p[j * w + i];
            let mut acc = 0.0;
            if i > 0 {
                acc += c - p[j * w + i - 1];
            }
            if i + 1 < w {
                acc += c - p[j * w + i + 1];
            }
            if j > 0 {
                acc += c - p[(j - 1) * w + i];
            }
            if j + 1 < h {
                acc += c - p[(j + 1) * w + i];
            }
            out[j * w + i] = acc / (DX * DX);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn remove_mean(a: &mut [f64]) {
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    a.iter_mut().for_each(|v| *v -= mean);
}

/// Makes the face velocities discretely divergence-free.
///
/// Solves `lap(p) = div(u) / dt` by conjugate gradients (warm-started from
/// the previous pressure), then subtracts `dt * grad(p)` from interior faces.
/// Converges when max |residual| <= `tol`, which bounds the remaining
/// divergence by `dt * tol`. The pressure is returned mean-free.
pub fn pressure_project(
    state: &mut FluidState,
    dt: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ProjectStats, FluidError> {
    if !(tol > 0.0) || !(dt > 0.0) {
        return Err(FluidError::InvalidParams(format!("projection needs tol > 0 and dt > 0, got {tol}, {dt}")));
    }
    let (h, w) = (state.height(), state.width());
    let n = h * w;
    // A = -lap, b = -div / dt; A is PSD with constants in its nullspace
    let mut b: Vec<f64> = state.divergence().data().iter().map(|d| -d / dt).collect();
    remove_mean(&mut b);

    let mut p = state.p.data().to_vec();
    remove_mean(&mut p);
    let mut ap = vec![0.0; n];
    neg_laplacian(&p, h, w, &mut ap);
    let mut r: Vec<f64> = b.iter().zip(&ap).map(|(bi, a)| bi - a).collect();
    let mut d = r.clone();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    let mut residual = max_abs(&r);
    while residual > tol {
        if iterations == max_iter {
            return Err(FluidError::PressureSolve { iterations, residual });
        }
        neg_laplacian(&d, h, w, &mut ap);
        let dad = dot(&d, &ap);
        if dad <= 0.0 {
            return Err(FluidError::PressureSolve { iterations, residual });
        }
        let alpha = rr / dad;
        for k in 0..n {
            p[k] += alpha * d[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for k in 0..n {
            d[k] = r[k] + beta * d[k];
        }
        rr = rr_new;
        residual = max_abs(&r);
        iterations += 1;
    }
    remove_mean(&mut p);

    let scale = dt / DX;
    for j in 0..h {
        for i in 1..w {
            let g = p[j * w + i] - p[j * w + i - 1];
            state.u.set(j, i, state.u.get(j, i) - scale * g);
        }
    }
    for j in 1..h {
        for i in 0..w {
            let g = p[j * w + i] - p[(j - 1) * w + i];
            state.v.set(j, i, state.v.get(j, i) - scale * g);
        }
    }
    state.enforce_walls();
    state.p = Grid::from_vec(h, w, p).expect("pressure shape");
    Ok(ProjectStats { iterations, residual })
}

/// Advances the state by one solver step of `params.dt`.
pub fn step(state: &mut FluidState, params: &SimParams) -> Result<ProjectStats, FluidError> {
    let dt = params.dt;
    let (u0, v0) = (state.u.clone(), state.v.clone());
    state.u = advect(&u0, &u0, &v0, dt);
    state.v = advect(&v0, &u0, &v0, dt);
    state.enforce_walls();
    state.rho = advect(&state.rho, &u0, &v0, dt);
    state.u = diffuse(&state.u, params.nu, dt, WallBc::ZeroValue)?;
    state.v = diffuse(&state.v, params.nu, dt, WallBc::ZeroValue)?;
    state.enforce_walls();
    apply_buoyancy(state, params.eta, dt);
    let stats = pressure_project(state, dt, params.pressure_tol, params.pressure_max_iter)?;
    state.tau += dt;
    Ok(stats)
}

/// One recorded, cell-centred frame of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub tau: f64,
    pub ux: Grid,
    pub uy: Grid,
    pub rho: Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rho0: Grid,
    pub snapshots: Vec<Snapshot>,
}

/// Runs one scene from [`init_scene`], recording every `record_every` seconds.
///
/// The initial state is not recorded; snapshot `k` (zero-based) sits at
/// `tau = (k + 1) * record_every`.
pub fn simulate(seed: u64, params: &SimParams) -> Result<Trajectory, FluidError> {
    params.validate()?;
    let mut state = init_scene(seed, params);
    let rho0 = state.rho.clone();
    let per_record = params.steps_per_record();
    let count = params.snapshot_count();
    let mut snapshots = Vec::with_capacity(count);
    let mut steps = 0usize;
    for k in 1..=count {
        for _ in 0..per_record {
            step(&mut state, params)?;
            steps += 1;
            // recompute from the step count so tau does not drift
            state.tau = steps as f64 * params.dt;
        }
        let (ux, uy) = state.centered_velocity();
        snapshots.push(Snapshot {
            tau: k as f64 * params.record_every,
            ux,
            uy,
            rho: state.rho.clone(),
        });
    }
    Ok(Trajectory { rho0, snapshots })
}
