//! Moment-driven predictive control.
//!
//! The ensemble is linearized around consensus with the interaction matrix
//! `P = pbar (E / N - I)`. The symmetric Riccati matrix of that linear model
//! is parametrized by two scalars,
//!
//! ```text
//! K22 = kd / N I + ko / N^2 (E - I)
//! ```
//!
//! which obey a pair of coupled ODEs integrated backward from `kd(T) = ko(T) = 0`.
//! A variance-gap bound predicts how far the open-loop feedback may drift
//! before the linear shadow model has to be re-anchored on measured data.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ensemble::{step, velocity_variance, ControlField, EnsembleState, MomentTrace, SimParams, Trajectory};
use crate::{Error, Result};

/// `P_ii = pbar (1 - N) / N`, `P_ij = pbar / N`.
pub fn build_p(n: usize, pbar: f64) -> Result<DMatrix<f64>> {
    if n == 0 || !(pbar > 0.0) {
        return Err(Error::InvalidInput("build_p needs N >= 1 and pbar > 0".into()));
    }
    let nf = n as f64;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            pbar * (1.0 - nf) / nf
        } else {
            pbar / nf
        }
    }))
}

/// Reduced gains sampled on the forward grid `t_h = h dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedGains {
    pub dt: f64,
    pub n_agents: usize,
    pub pbar: f64,
    pub nu: f64,
    pub kd: Vec<f64>,
    pub ko: Vec<f64>,
}

impl ReducedGains {
    pub fn horizon(&self) -> f64 {
        self.dt * (self.kd.len() - 1) as f64
    }

    pub fn time(&self, idx: usize) -> f64 {
        idx as f64 * self.dt
    }

    /// Nearest grid node to `t`.
    pub fn index(&self, t: f64) -> Result<usize> {
        let last = self.kd.len() - 1;
        let tol = 1e-9 * self.dt.max(self.horizon());
        if !(t >= -tol && t <= self.horizon() + tol) {
            return Err(Error::InvalidInput(format!("t = {t} outside [0, {}]", self.horizon())));
        }
        Ok(((t / self.dt).round().max(0.0) as usize).min(last))
    }
}

fn reduced_rhs(kd: f64, ko: f64, n: f64, pbar: f64, nu: f64) -> (f64, f64) {
    let alpha = (n - 1.0) / n;
    let shift = kd - ko / n;
    let fd = -2.0 * pbar * alpha * shift - (kd * kd + alpha / n * ko * ko) / nu + 1.0;
    let fo = 2.0 * pbar * shift - (2.0 * kd * ko + alpha * ko * ko - ko * ko / n) / nu;
    (fd, fo)
}

/// Integrates the reduced Riccati pair backward from `T` with classical RK4.
pub fn solve_reduced_riccati(horizon: f64, dt: f64, n: usize, pbar: f64, nu: f64) -> Result<ReducedGains> {
    if !(horizon > 0.0 && dt > 0.0 && pbar > 0.0 && nu > 0.0) || n == 0 {
        return Err(Error::InvalidInput("reduced Riccati needs positive T, dt, pbar, nu and N".into()));
    }
    let steps = (horizon / dt).round() as usize;
    if steps == 0 {
        return Err(Error::InvalidInput("horizon shorter than one step".into()));
    }
    let nf = n as f64;
    let mut kd = vec![0.0; steps + 1];
    let mut ko = vec![0.0; steps + 1];
    let f = |a: f64, b: f64| reduced_rhs(a, b, nf, pbar, nu);
    for h in (0..steps).rev() {
        let (d0, o0) = (kd[h + 1], ko[h + 1]);
        let k1 = f(d0, o0);
        let k2 = f(d0 + 0.5 * dt * k1.0, o0 + 0.5 * dt * k1.1);
        let k3 = f(d0 + 0.5 * dt * k2.0, o0 + 0.5 * dt * k2.1);
        let k4 = f(d0 + dt * k3.0, o0 + dt * k3.1);
        kd[h] = d0 + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        ko[h] = o0 + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        if !(kd[h].is_finite() && ko[h].is_finite()) {
            return Err(Error::Blowup { time: h as f64 * dt });
        }
    }
    Ok(ReducedGains {
        dt,
        n_agents: n,
        pbar,
        nu,
        kd,
        ko,
    })
}

pub fn expand_k22(gains: &ReducedGains, t: f64, n: usize) -> Result<DMatrix<f64>> {
    let h = gains.index(t)?;
    let nf = n as f64;
    let (kd, ko) = (gains.kd[h], gains.ko[h]);
    Ok(DMatrix::from_fn(n, n, |i, j| if i == j { kd / nf } else { ko / (nf * nf) }))
}

/// `u_i = -((kd - ko/N) w_i + ko/N sum_j w_j) / gamma`, per coordinate.
pub fn riccati_feedback(gains: &ReducedGains, t: f64, velocities: &DMatrix<f64>, gamma: f64) -> Result<ControlField> {
    let h = gains.index(t)?;
    Ok(feedback_at(gains, h, velocities, gamma))
}

fn feedback_at(gains: &ReducedGains, h: usize, w: &DMatrix<f64>, gamma: f64) -> ControlField {
    let (n, d) = w.shape();
    let nf = n as f64;
    let (kd, ko) = (gains.kd[h], gains.ko[h]);
    let sums: Vec<f64> = (0..d).map(|k| w.column(k).sum()).collect();
    ControlField::new(DMatrix::from_fn(n, d, |i, k| {
        -((kd - ko / nf) * w[(i, k)] + ko / nf * sums[k]) / gamma
    }))
}

/// Exponential rates of the variance sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BoundParams {
    fn default() -> Self {
        Self { alpha: 0.0, beta: 1.0 }
    }
}

/// Lower and upper variance bounds for every grid node from `start` to the
/// end of the gain grid, anchored at `sigma2_t0`. Integrals use the trapezoid
/// rule on the gain grid.
pub fn bound_curve(gains: &ReducedGains, start: usize, sigma2_t0: f64, bounds: BoundParams) -> Vec<(f64, f64)> {
    let last = gains.kd.len() - 1;
    let dt = gains.dt;
    let nu = gains.nu;
    let (alpha, beta) = (bounds.alpha, bounds.beta);
    let mut out = Vec::with_capacity(last + 1 - start.min(last + 1));
    if start > last {
        return out;
    }
    out.push((sigma2_t0, sigma2_t0));

    let integrand = |m: usize, kd_int: f64| {
        let s = (m - start) as f64 * dt;
        let kd = gains.kd[m];
        let eta = (-2.0 * gains.pbar * s - kd_int / nu).exp();
        (eta * kd * (beta * s).exp(), eta * kd * (-alpha * s).exp())
    };
    let mut kd_int = 0.0;
    let mut prev = integrand(start, 0.0);
    let (mut b_plus, mut b_minus) = (0.0, 0.0);
    for m in (start + 1)..=last {
        kd_int += 0.5 * dt * (gains.kd[m - 1] + gains.kd[m]);
        let cur = integrand(m, kd_int);
        b_plus += 0.5 * dt * (prev.0 + cur.0) / nu;
        b_minus += 0.5 * dt * (prev.1 + cur.1) / nu;
        prev = cur;
        let delta = (m - start) as f64 * dt;
        let lower = sigma2_t0 * (-2.0 * beta * delta).exp() * (1.0 - b_plus).powi(2);
        let upper = sigma2_t0 * (2.0 * alpha * delta).exp() * (1.0 + b_minus).powi(2);
        out.push((lower, upper));
    }
    out
}

/// Bounds at time `t` for an anchor at `t0`.
pub fn variance_bounds(
    t0: f64,
    t: f64,
    sigma2_t0: f64,
    gains: &ReducedGains,
    bounds: BoundParams,
) -> Result<(f64, f64)> {
    let (i0, i) = (gains.index(t0)?, gains.index(t)?);
    if i < i0 || !(sigma2_t0 >= 0.0) {
        return Err(Error::InvalidInput("variance bounds need t >= t0 and sigma2 >= 0".into()));
    }
    Ok(bound_curve(gains, i0, sigma2_t0, bounds)[i - i0])
}

/// Predicted variance gap `upper - lower`.
pub fn variance_gap(t0: f64, t: f64, sigma2_t0: f64, gains: &ReducedGains, bounds: BoundParams) -> Result<f64> {
    let (lower, upper) = variance_bounds(t0, t, sigma2_t0, gains, bounds)?;
    Ok(upper - lower)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpcConfig {
    pub params: SimParams,
    pub pbar: f64,
    pub delta_tol: f64,
    pub bounds: BoundParams,
}

impl MdpcConfig {
    pub fn new(params: SimParams, delta_tol: f64) -> Self {
        Self {
            pbar: params.kernel_gain,
            params,
            delta_tol,
            bounds: BoundParams::default(),
        }
    }
}

/// One row of the bounds file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub t: f64,
    pub lower: f64,
    pub upper: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateLog {
    pub delta_tol: f64,
    pub update_times: Vec<f64>,
    pub step_count: usize,
    #[serde(skip)]
    pub update_steps: Vec<usize>,
    #[serde(skip)]
    pub bounds: Vec<BoundRow>,
}

fn trigger_after(curve: &[(f64, f64)], start: usize, delta_tol: f64) -> Option<usize> {
    curve
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, (lo, up))| up - lo > delta_tol)
        .map(|(off, _)| start + off)
}

/// Runs the event-triggered loop on the nonlinear ensemble.
///
/// Gains are computed once for the whole horizon. The control is evaluated
/// on a linear shadow copy of the velocities, `w' = P w + u`, and the same
/// signal drives the nonlinear ensemble. Whenever the predicted variance gap
/// since the last anchor exceeds `delta_tol`, the shadow is reset to the
/// measured velocities and the bounds are re-seeded with the measured
/// variance about the target.
pub fn run_mdpc(state0: &EnsembleState, config: &MdpcConfig) -> Result<(Trajectory, UpdateLog, MomentTrace)> {
    let params = &config.params;
    params.validate()?;
    state0.validate()?;
    if !(config.delta_tol > 0.0) {
        return Err(Error::InvalidInput("delta_tol must be positive".into()));
    }
    let (n, d) = state0.velocities.shape();
    let steps = params.steps();
    let gains = solve_reduced_riccati(steps as f64 * params.dt, params.dt, n, config.pbar, params.gamma)?;
    let p = build_p(n, config.pbar)?;
    let target = params.target(d);

    let mut log = UpdateLog {
        delta_tol: config.delta_tol,
        step_count: steps,
        ..Default::default()
    };
    let mut traj = Trajectory {
        states: vec![state0.clone()],
        ..Default::default()
    };
    let mut moments = MomentTrace::default();
    moments.record(state0, &target);

    let mut s = state0.clone();
    let mut w = s.velocities.clone();
    let mut anchor = 0usize;
    let mut curve = bound_curve(&gains, 0, velocity_variance(&s, &target), config.bounds);
    let mut next = trigger_after(&curve, anchor, config.delta_tol);
    let push_row = |log: &mut UpdateLog, h: usize, curve: &[(f64, f64)], anchor: usize, sigma2: f64| {
        let (lower, upper) = curve[h - anchor];
        log.bounds.push(BoundRow {
            t: h as f64 * params.dt,
            lower,
            upper,
            sigma2,
        });
    };
    push_row(&mut log, 0, &curve, anchor, velocity_variance(&s, &target));

    for h in 0..steps {
        let u = feedback_at(&gains, h, &w, params.gamma);
        traj.cost_accumulated += params.dt * crate::ensemble::running_cost(&s, &u, params);
        let pw = &p * &w;
        w += (pw + &u.values) * params.dt;
        s = step(&s, &u, params)?;
        traj.controls.push(u);

        let now = h + 1;
        let sigma2 = velocity_variance(&s, &target);
        if next == Some(now) {
            w.copy_from(&s.velocities);
            anchor = now;
            curve = bound_curve(&gains, anchor, sigma2, config.bounds);
            next = trigger_after(&curve, anchor, config.delta_tol);
            log.update_times.push(s.time);
            log.update_steps.push(now);
        }
        push_row(&mut log, now, &curve, anchor, sigma2);
        moments.record(&s, &target);
        traj.states.push(s.clone());
    }
    Ok((traj, log, moments))
}
