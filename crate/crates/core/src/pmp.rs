//! Open-loop optimal control by forward-backward sweeps.
//!
//! The control is a grid function `u_h` on `[t_h, t_{h+1})`. States follow the
//! explicit Euler recursion and the cost is the left-rectangle sum of the
//! consensus integrand, so the backward sweep below is the exact discrete
//! adjoint: `r_H = 0` and
//!
//! ```text
//! r_h = r_{h+1} + dt * (DF(s_h)^T r_{h+1} + grad_s l(s_h))
//! ```
//!
//! which gives `dJ/ds_0 = r_0` and `dJ/du_h = dt * (2 gamma / N u_h + q_{h+1})`.
//! The Jacobian products are taken from the alignment dynamics directly; with
//! `a = a(|x_j - x_i|^2)` the position costate picks up
//! `2/N sum_j a'(.) (x_i - x_j) <v_j - v_i, q_i - q_j>` and the velocity costate
//! `p_i + 1/N sum_j a (q_j - q_i) + 2/N (v_i - vbar)`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::{alignment, mean_velocity, running_cost, ControlField, EnsembleState, SimParams};
use crate::sdre::flatten_pair;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl AdjointState {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            p: DMatrix::zeros(n, d),
            q: DMatrix::zeros(n, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradientSolverConfig {
    pub max_iters: usize,
    pub initial_step: f64,
    /// Backtracking contraction factor.
    pub armijo_factor: f64,
    pub sufficient_decrease: f64,
    /// Stop when `max |dJ/du|` (per unit time) falls below this.
    pub grad_tolerance: f64,
}

impl Default for GradientSolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            initial_step: 10.0,
            armijo_factor: 0.5,
            sufficient_decrease: 1e-4,
            grad_tolerance: 1e-6,
        }
    }
}

impl GradientSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0
            || !(self.initial_step > 0.0)
            || !(self.armijo_factor > 0.0 && self.armijo_factor < 1.0)
            || !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0)
            || !(self.grad_tolerance > 0.0)
        {
            return Err(Error::InvalidInput(format!("bad gradient solver config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OpenLoopSolution {
    pub times: Vec<f64>,
    pub states: Vec<EnsembleState>,
    pub controls: Vec<ControlField>,
    pub adjoints: Vec<AdjointState>,
    /// Discrete cost of the returned control, i.e. the value at the initial state.
    pub cost: f64,
    /// `(p, q)` at `t = 0` in the flat layout of [`crate::sdre::flatten_state`].
    pub initial_gradient: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Cost of every accepted iterate, starting with `u = 0`.
    pub cost_history: Vec<f64>,
}

impl OpenLoopSolution {
    pub fn trajectory(&self) -> crate::ensemble::Trajectory {
        crate::ensemble::Trajectory {
            states: self.states.clone(),
            controls: self.controls.clone(),
            cost_accumulated: self.cost,
        }
    }
}

fn euler_step(state: &EnsembleState, u: &DMatrix<f64>, params: &SimParams) -> Result<EnsembleState> {
    let dt = params.dt;
    let acc = alignment(&state.positions, &state.velocities, params) + u;
    let next = EnsembleState {
        positions: &state.positions + &state.velocities * dt,
        velocities: &state.velocities + acc * dt,
        time: state.time + dt,
    };
    if !next.is_finite() {
        return Err(Error::Blowup { time: next.time });
    }
    Ok(next)
}

/// Euler forward pass; returns the state on every node and the discrete cost.
pub fn forward_sweep(
    state0: &EnsembleState,
    controls: &[ControlField],
    params: &SimParams,
) -> Result<(Vec<EnsembleState>, f64)> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut cost = 0.0;
    let mut s = state0.clone();
    for u in controls {
        if u.values.shape() != s.velocities.shape() {
            return Err(Error::DimensionMismatch("control grid does not match state".into()));
        }
        cost += params.dt * running_cost(&s, u, params);
        let next = euler_step(&s, &u.values, params)?;
        states.push(s);
        s = next;
    }
    states.push(s);
    Ok((states, cost))
}

/// `DF(s)^T r + grad_s l(s)` split into position and velocity blocks.
fn adjoint_rate(state: &EnsembleState, adj: &AdjointState, params: &SimParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, d) = state.positions.shape();
    let inv_n = 1.0 / n as f64;
    let x = &state.positions;
    let v = &state.velocities;
    let q = &adj.q;
    let mut dx = DMatrix::zeros(n, d);
    let mut dv = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut r2 = 0.0;
            let mut inner = 0.0;
            for k in 0..d {
                let e = x[(j, k)] - x[(i, k)];
                r2 += e * e;
                inner += (v[(j, k)] - v[(i, k)]) * (q[(i, k)] - q[(j, k)]);
            }
            let a = params.kernel_sq(r2) * inv_n;
            let c = 2.0 * params.kernel_sq_derivative(r2) * inv_n * inner;
            for k in 0..d {
                let dq = a * (q[(j, k)] - q[(i, k)]);
                dv[(i, k)] += dq;
                dv[(j, k)] -= dq;
                let e = c * (x[(i, k)] - x[(j, k)]);
                dx[(i, k)] += e;
                dx[(j, k)] -= e;
            }
        }
    }
    let vbar = mean_velocity(state);
    for i in 0..n {
        for k in 0..d {
            dv[(i, k)] += adj.p[(i, k)] + 2.0 * inv_n * (v[(i, k)] - vbar[k]);
        }
    }
    (dx, dv)
}

/// Backward costate pass from `(p, q)(T) = 0` over the stored forward states.
pub fn backward_sweep(
    states: &[EnsembleState],
    controls: &[ControlField],
    params: &SimParams,
) -> Result<Vec<AdjointState>> {
    if states.len() != controls.len() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} states for {} controls",
            states.len(),
            controls.len()
        )));
    }
    let (n, d) = states[0].positions.shape();
    let dt = params.dt;
    let mut adjoints = vec![AdjointState::zeros(n, d); states.len()];
    for h in (0..controls.len()).rev() {
        let (dx, dv) = adjoint_rate(&states[h], &adjoints[h + 1], params);
        let next = &adjoints[h + 1];
        let cur = AdjointState {
            p: &next.p + dx * dt,
            q: &next.q + dv * dt,
        };
        if cur.p.iter().chain(cur.q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Blowup { time: states[h].time });
        }
        adjoints[h] = cur;
    }
    Ok(adjoints)
}

/// Per-step gradient density `dJ/du_h / dt = 2 gamma / N u_h + q_{h+1}`.
pub fn control_gradient(
    controls: &[ControlField],
    adjoints: &[AdjointState],
    params: &SimParams,
) -> Result<Vec<DMatrix<f64>>> {
    if adjoints.len() != controls.len() + 1 {
        return Err(Error::DimensionMismatch("adjoint grid does not match controls".into()));
    }
    Ok(controls
        .iter()
        .enumerate()
        .map(|(h, u)| {
            let n = u.values.nrows() as f64;
            &u.values * (2.0 * params.gamma / n) + &adjoints[h + 1].q
        })
        .collect())
}

fn grid_dot(a: &[DMatrix<f64>], b: &[DMatrix<f64>], dt: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum::<f64>() * dt
}

fn max_abs(g: &[DMatrix<f64>]) -> f64 {
    g.iter().map(|m| m.amax()).fold(0.0, f64::max)
}

/// Reduced-gradient descent from `u = 0` with Barzilai-Borwein trial steps
/// safeguarded by Armijo backtracking. Accepted iterates never increase the
/// cost. Non-convergence is reported through `converged = false`.
pub fn solve_pmp(state0: &EnsembleState, params: &SimParams, config: &GradientSolverConfig) -> Result<OpenLoopSolution> {
    params.validate()?;
    state0.validate()?;
    config.validate()?;
    let (n, d) = state0.positions.shape();
    let steps = params.steps();
    let dt = params.dt;

    let mut controls = vec![ControlField::zeros(n, d); steps];
    let (mut states, mut cost) = forward_sweep(state0, &controls, params)?;
    let mut adjoints = backward_sweep(&states, &controls, params)?;
    let mut grad = control_gradient(&controls, &adjoints, params)?;
    let mut history = vec![cost];
    let mut alpha = config.initial_step;
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..config.max_iters {
        if max_abs(&grad) <= config.grad_tolerance {
            converged = true;
            break;
        }
        iterations = it + 1;
        let slope = grid_dot(&grad, &grad, dt);
        let mut accepted = None;
        let mut trial_alpha = alpha;
        while trial_alpha > 1e-14 * config.initial_step.min(1.0) {
            let trial: Vec<ControlField> = controls
                .iter()
                .zip(&grad)
                .map(|(u, g)| ControlField::new(&u.values - g * trial_alpha))
                .collect();
            if let Ok((s, c)) = forward_sweep(state0, &trial, params) {
                if c <= cost - config.sufficient_decrease * trial_alpha * slope {
                    accepted = Some((trial, s, c));
                    break;
                }
            }
            trial_alpha *= config.armijo_factor;
        }
        let Some((new_controls, new_states, new_cost)) = accepted else {
            break;
        };
        let new_adjoints = backward_sweep(&new_states, &new_controls, params)?;
        let new_grad = control_gradient(&new_controls, &new_adjoints, params)?;

        // BB1 step from the secant pair (s, y) = (-alpha g, g_new - g).
        let y: Vec<DMatrix<f64>> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = -trial_alpha * grid_dot(&grad, &y, dt);
        let ss = trial_alpha * trial_alpha * slope;
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { 2.0 * trial_alpha };

        controls = new_controls;
        states = new_states;
        cost = new_cost;
        adjoints = new_adjoints;
        grad = new_grad;
        history.push(cost);
    }
    if !converged && max_abs(&grad) <= config.grad_tolerance {
        converged = true;
    }
    if !converged {
        warn!(
            "PMP solve stopped after {iterations} iterations with max gradient {:.3e}",
            max_abs(&grad)
        );
    }

    let initial_gradient = flatten_pair(&adjoints[0].p, &adjoints[0].q);
    Ok(OpenLoopSolution {
        times: states.iter().map(|s| s.time).collect(),
        states,
        controls,
        adjoints,
        cost,
        initial_gradient,
        iterations,
        converged,
        cost_history: history,
    })
}

/// `(u(0), V(s_0), grad V(s_0))` training labels from an open-loop solve.
pub fn extract_sample(sol: &OpenLoopSolution) -> (DMatrix<f64>, f64, DVector<f64>) {
    (sol.controls[0].values.clone(), sol.cost, sol.initial_gradient.clone())
}
