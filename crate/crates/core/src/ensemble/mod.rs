//! Ensemble state, Cucker-Smale dynamics, time stepping, moments and the
//! consensus cost shared by every controller in the crate.
//!
//! States are stored agent-major: row `i` of `positions`/`velocities` holds
//! agent `i`. The alignment force on agent `i` is
//!
//! ```text
//! dv_i/dt = 1/N sum_j a(|x_j - x_i|) (v_j - v_i) + u_i,   a(r) = K / (1 + r^2)^beta
//! ```

mod io;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{read_moments_csv, read_trajectory_csv, write_moments_csv, write_trajectory_csv};

/// Time integration scheme used by [`step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub kernel_gain: f64,
    pub kernel_exponent: f64,
    pub gamma: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Fixed velocity target for the variance observable; `None` means zero.
    #[serde(default)]
    pub target_velocity: Option<Vec<f64>>,
    #[serde(default)]
    pub integrator: Integrator,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            kernel_gain: 1.0,
            kernel_exponent: 1.0,
            gamma: 0.1,
            horizon: 10.0,
            dt: 0.01,
            target_velocity: None,
            integrator: Integrator::Euler,
        }
    }
}

impl SimParams {
    pub fn new(gamma: f64, horizon: f64, dt: f64) -> Self {
        Self {
            gamma,
            horizon,
            dt,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{name} must be finite and > 0, got {v}")))
            }
        };
        positive("kernel_gain", self.kernel_gain)?;
        positive("gamma", self.gamma)?;
        positive("horizon", self.horizon)?;
        positive("dt", self.dt)?;
        if !(self.kernel_exponent.is_finite() && self.kernel_exponent >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "kernel_exponent must be finite and >= 0, got {}",
                self.kernel_exponent
            )));
        }
        if self.dt > self.horizon {
            return Err(Error::InvalidInput(format!(
                "dt ({}) exceeds horizon ({})",
                self.dt, self.horizon
            )));
        }
        Ok(())
    }

    /// Number of steps on `[0, T]`, rounded to the nearest integer.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round().max(1.0) as usize
    }

    pub fn target(&self, d: usize) -> DVector<f64> {
        match &self.target_velocity {
            Some(t) if t.len() == d => DVector::from_column_slice(t),
            _ => DVector::zeros(d),
        }
    }

    /// Kernel as a function of the squared distance.
    #[inline]
    pub fn kernel_sq(&self, r2: f64) -> f64 {
        if self.kernel_exponent == 1.0 {
            self.kernel_gain / (1.0 + r2)
        } else {
            self.kernel_gain * (1.0 + r2).powf(-self.kernel_exponent)
        }
    }

    /// Derivative of the kernel with respect to the squared distance.
    #[inline]
    pub fn kernel_sq_derivative(&self, r2: f64) -> f64 {
        let beta = self.kernel_exponent;
        if beta == 1.0 {
            let s = 1.0 + r2;
            -self.kernel_gain / (s * s)
        } else {
            -beta * self.kernel_gain * (1.0 + r2).powf(-beta - 1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub positions: DMatrix<f64>,
    pub velocities: DMatrix<f64>,
    pub time: f64,
}

impl EnsembleState {
    pub fn new(positions: DMatrix<f64>, velocities: DMatrix<f64>, time: f64) -> Result<Self> {
        let s = Self {
            positions,
            velocities,
            time,
        };
        s.validate()?;
        Ok(s)
    }

    /// Build from per-agent rows, e.g. `&[[0.0, 1.0], [2.0, 3.0]]`.
    pub fn from_rows<const D: usize>(positions: &[[f64; D]], velocities: &[[f64; D]]) -> Result<Self> {
        let n = positions.len();
        let x = DMatrix::from_fn(n, D, |i, k| positions[i][k]);
        let v = DMatrix::from_fn(velocities.len(), D, |i, k| velocities[i][k]);
        Self::new(x, v, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.positions.shape();
        if n == 0 || d == 0 {
            return Err(Error::InvalidInput("ensemble needs N >= 1 and d >= 1".into()));
        }
        if self.velocities.shape() != (n, d) {
            return Err(Error::DimensionMismatch(format!(
                "positions {:?} vs velocities {:?}",
                self.positions.shape(),
                self.velocities.shape()
            )));
        }
        if !self.is_finite() || !self.time.is_finite() || self.time < 0.0 {
            return Err(Error::InvalidInput("state entries must be finite".into()));
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.positions.nrows()
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().chain(self.velocities.iter()).all(|v| v.is_finite())
    }

    /// Apply an agent relabeling: new agent `k` is old agent `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.dim();
        Self {
            positions: DMatrix::from_fn(perm.len(), d, |i, k| self.positions[(perm[i], k)]),
            velocities: DMatrix::from_fn(perm.len(), d, |i, k| self.velocities[(perm[i], k)]),
            time: self.time,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    pub values: DMatrix<f64>,
}

impl ControlField {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            values: DMatrix::zeros(n, d),
        }
    }

    pub fn zeros_like(state: &EnsembleState) -> Self {
        Self::zeros(state.n_agents(), state.dim())
    }

    pub fn new(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    fn check(&self, state: &EnsembleState) -> Result<()> {
        if self.values.shape() != state.velocities.shape() {
            return Err(Error::DimensionMismatch(format!(
                "control {:?} vs state {:?}",
                self.values.shape(),
                state.velocities.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentTrace {
    pub times: Vec<f64>,
    pub mean_velocity: Vec<DVector<f64>>,
    /// Mean squared distance of the velocities to the fixed target.
    pub variance: Vec<f64>,
}

impl MomentTrace {
    pub fn record(&mut self, state: &EnsembleState, target: &DVector<f64>) {
        self.times.push(state.time);
        self.mean_velocity.push(mean_velocity(state));
        self.variance.push(velocity_variance(state, target));
    }

    /// Variance about the instantaneous mean, recovered from the stored moments.
    pub fn spread(&self, idx: usize, target: &DVector<f64>) -> f64 {
        let shift = (&self.mean_velocity[idx] - target).norm_squared();
        (self.variance[idx] - shift).max(0.0)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_variance(&self) -> f64 {
        self.variance.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<EnsembleState>,
    /// `controls[h]` acts on `[t_h, t_{h+1})`; one fewer than `states`.
    pub controls: Vec<ControlField>,
    pub cost_accumulated: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &EnsembleState {
        self.states.last().expect("trajectory has at least the initial state")
    }

    /// Variance about the instantaneous mean at the final time.
    pub fn final_spread(&self) -> f64 {
        let s = self.final_state();
        velocity_variance(s, &mean_velocity(s))
    }
}

pub fn kernel_eval(r: f64, params: &SimParams) -> Result<f64> {
    if !r.is_finite() || r < 0.0 {
        return Err(Error::InvalidInput(format!("kernel distance must be finite and >= 0, got {r}")));
    }
    Ok(params.kernel_sq(r * r))
}

pub fn mean_velocity(state: &EnsembleState) -> DVector<f64> {
    let n = state.n_agents() as f64;
    DVector::from_iterator(state.dim(), state.velocities.column_iter().map(|c| c.sum() / n))
}

/// `(1/N) sum_i |v_i - target|^2`.
pub fn velocity_variance(state: &EnsembleState, target: &DVector<f64>) -> f64 {
    let (n, d) = state.velocities.shape();
    let mut acc = 0.0;
    for k in 0..d {
        let t = target[k];
        for i in 0..n {
            let e = state.velocities[(i, k)] - t;
            acc += e * e;
        }
    }
    acc / n as f64
}

/// Alignment part of the velocity rate, without control.
pub fn alignment(positions: &DMatrix<f64>, velocities: &DMatrix<f64>, params: &SimParams) -> DMatrix<f64> {
    let (n, d) = positions.shape();
    let inv_n = 1.0 / n as f64;
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut r2 = 0.0;
            for k in 0..d {
                let dx = positions[(j, k)] - positions[(i, k)];
                r2 += dx * dx;
            }
            let w = params.kernel_sq(r2) * inv_n;
            for k in 0..d {
                let dv = w * (velocities[(j, k)] - velocities[(i, k)]);
                out[(i, k)] += dv;
                out[(j, k)] -= dv;
            }
        }
    }
    out
}

/// Position and velocity rates of the controlled system.
pub fn drift(
    state: &EnsembleState,
    control: &ControlField,
    params: &SimParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    control.check(state)?;
    let vel_rate = alignment(&state.positions, &state.velocities, params) + &control.values;
    Ok((state.velocities.clone(), vel_rate))
}

/// One step of the configured integrator; the control is held over the step.
pub fn step(state: &EnsembleState, control: &ControlField, params: &SimParams) -> Result<EnsembleState> {
    control.check(state)?;
    let dt = params.dt;
    let (positions, velocities) = match params.integrator {
        Integrator::Euler => {
            let acc = alignment(&state.positions, &state.velocities, params) + &control.values;
            (
                &state.positions + &state.velocities * dt,
                &state.velocities + acc * dt,
            )
        }
        Integrator::Rk4 => {
            let u = &control.values;
            let rate = |x: &DMatrix<f64>, v: &DMatrix<f64>| (v.clone(), alignment(x, v, params) + u);
            let (k1x, k1v) = rate(&state.positions, &state.velocities);
            let (k2x, k2v) = rate(
                &(&state.positions + &k1x * (0.5 * dt)),
                &(&state.velocities + &k1v * (0.5 * dt)),
            );
            let (k3x, k3v) = rate(
                &(&state.positions + &k2x * (0.5 * dt)),
                &(&state.velocities + &k2v * (0.5 * dt)),
            );
            let (k4x, k4v) = rate(&(&state.positions + &k3x * dt), &(&state.velocities + &k3v * dt));
            (
                &state.positions + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0),
                &state.velocities + (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (dt / 6.0),
            )
        }
    };
    let next = EnsembleState {
        positions,
        velocities,
        time: state.time + dt,
    };
    if !next.is_finite() {
        return Err(Error::Blowup { time: next.time });
    }
    Ok(next)
}

/// Integrand of the consensus cost: `1/N sum_j |vbar - v_j|^2 + gamma |u_j|^2`.
pub fn running_cost(state: &EnsembleState, control: &ControlField, params: &SimParams) -> f64 {
    let vbar = mean_velocity(state);
    let n = state.n_agents() as f64;
    velocity_variance(state, &vbar) + params.gamma * control.values.norm_squared() / n
}

/// Integrate `[0, T]` under a state feedback, recording moments at every node.
pub fn simulate<F>(state0: &EnsembleState, mut feedback: F, params: &SimParams) -> Result<(Trajectory, MomentTrace)>
where
    F: FnMut(&EnsembleState) -> Result<ControlField>,
{
    params.validate()?;
    state0.validate()?;
    let steps = params.steps();
    let target = params.target(state0.dim());
    let mut traj = Trajectory {
        states: Vec::with_capacity(steps + 1),
        controls: Vec::with_capacity(steps),
        cost_accumulated: 0.0,
    };
    let mut moments = MomentTrace::default();
    let mut state = state0.clone();
    moments.record(&state, &target);
    for _ in 0..steps {
        let u = feedback(&state)?;
        traj.cost_accumulated += params.dt * running_cost(&state, &u, params);
        let next = step(&state, &u, params)?;
        traj.states.push(state);
        traj.controls.push(u);
        moments.record(&next, &target);
        state = next;
    }
    traj.states.push(state);
    Ok((traj, moments))
}

pub fn simulate_uncontrolled(state0: &EnsembleState, params: &SimParams) -> Result<(Trajectory, MomentTrace)> {
    let (n, d) = state0.positions.shape();
    simulate(state0, |_| Ok(ControlField::zeros(n, d)), params)
}

/// Left-rectangle quadrature of the consensus cost over the stored steps.
pub fn total_cost(traj: &Trajectory, params: &SimParams) -> f64 {
    traj.states
        .iter()
        .zip(&traj.controls)
        .map(|(s, u)| params.dt * running_cost(s, u, params))
        .sum()
}
