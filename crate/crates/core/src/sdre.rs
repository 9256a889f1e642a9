//! State-dependent Riccati feedback for the consensus problem.
//!
//! Flat vectors use the layout `(x_1^1, .., x_1^d, .., x_N^d, v_1^1, .., v_N^d)`:
//! all positions agent by agent, then all velocities. With `B = (0, I)^T` and a
//! cost that only weighs velocities, the Riccati matrix has zero position
//! blocks, so only the `dN x dN` velocity block is solved for:
//!
//! ```text
//! A^T Pi + Pi A - Pi R^{-1} Pi + Q = 0,   A = A_vel(x),  Q = (I - C) / N,  R = gamma / N I
//! ```
//!
//! `A_vel` is a scaled graph Laplacian and therefore symmetric; the Lyapunov
//! steps of the Newton-Kleinman iteration are solved in the eigenbasis of the
//! (symmetric) closed-loop matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::ensemble::{step, ControlField, EnsembleState, MomentTrace, SimParams, Trajectory};
use crate::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const STABILITY_SLACK: f64 = 1e-10;
const MAX_NEWTON_ITERS: usize = 100;

/// Default residual tolerance for the velocity CARE.
pub const CARE_TOL: f64 = 1e-9;

/// Row-major flattening of an `N x d` agent matrix: index `i * d + k`.
pub fn flatten_agents(m: &DMatrix<f64>) -> DVector<f64> {
    let (n, d) = m.shape();
    DVector::from_fn(n * d, |idx, _| m[(idx / d, idx % d)])
}

pub fn unflatten_agents(v: &[f64], n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, d, v)
}

pub fn flatten_pair(x: &DMatrix<f64>, v: &DMatrix<f64>) -> DVector<f64> {
    let nd = x.len();
    let mut out = DVector::zeros(2 * nd);
    out.rows_mut(0, nd).copy_from(&flatten_agents(x));
    out.rows_mut(nd, nd).copy_from(&flatten_agents(v));
    out
}

pub fn flatten_state(state: &EnsembleState) -> DVector<f64> {
    flatten_pair(&state.positions, &state.velocities)
}

pub fn unflatten_state(s: &DVector<f64>, n: usize, d: usize, time: f64) -> Result<EnsembleState> {
    if s.len() != 2 * n * d {
        return Err(Error::DimensionMismatch(format!(
            "flat state of length {} for N={n}, d={d}",
            s.len()
        )));
    }
    let nd = n * d;
    EnsembleState::new(
        unflatten_agents(&s.as_slice()[..nd], n, d),
        unflatten_agents(&s.as_slice()[nd..], n, d),
        time,
    )
}

/// Agent-level alignment matrix: `a_ij / N` off the diagonal, minus the row
/// sum on it.
pub fn build_agent_laplacian(state: &EnsembleState, params: &SimParams) -> DMatrix<f64> {
    let (n, d) = state.positions.shape();
    let inv_n = 1.0 / n as f64;
    let x = &state.positions;
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r2: f64 = (0..d).map(|k| (x[(j, k)] - x[(i, k)]).powi(2)).sum();
            let w = params.kernel_sq(r2) * inv_n;
            a[(i, j)] = w;
            a[(j, i)] = w;
        }
    }
    for i in 0..n {
        let s: f64 = (0..n).filter(|&j| j != i).map(|j| a[(i, j)]).sum();
        a[(i, i)] = -s;
    }
    a
}

/// `M (x) I_d` in the interleaved layout.
fn kron_identity(m: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n * d, n * d, |r, c| if r % d == c % d { m[(r / d, c / d)] } else { 0.0 })
}

/// Velocity block of the semilinear factorization, `A_vel vec(v) = alignment`.
pub fn build_a_vel(state: &EnsembleState, params: &SimParams) -> DMatrix<f64> {
    kron_identity(&build_agent_laplacian(state, params), state.dim())
}

/// Per-coordinate averaging operator.
pub fn averaging_operator(n: usize, d: usize) -> DMatrix<f64> {
    kron_identity(&DMatrix::from_element(n, n, 1.0 / n as f64), d)
}

/// `(Q_vel, R)` with `v^T Q_vel v = 1/N sum_i |v_i - vbar|^2` and `R = gamma/N I`.
pub fn build_cost_operators(n: usize, d: usize, gamma: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let nd = n * d;
    let c = averaging_operator(n, d);
    let eye = DMatrix::<f64>::identity(nd, nd);
    let q = (&eye + c.transpose() * &c - &c * 2.0) / n as f64;
    let r = eye * (gamma / n as f64);
    (q, r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    pub pi: DMatrix<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Frobenius norm of `A^T Pi + Pi A - Pi R^{-1} Pi + Q` for `R = rho I`.
pub fn care_residual(a: &DMatrix<f64>, q: &DMatrix<f64>, rho: f64, pi: &DMatrix<f64>) -> f64 {
    (a.transpose() * pi + pi * a - pi * pi / rho + q).norm()
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= SYMMETRY_TOL * scale
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn scalar_weight(r: &DMatrix<f64>) -> Result<f64> {
    let n = r.nrows();
    if r.ncols() != n || n == 0 {
        return Err(Error::DimensionMismatch("R must be square".into()));
    }
    let rho = r[(0, 0)];
    let ok = (0..n).all(|i| (0..n).all(|j| {
        let expect = if i == j { rho } else { 0.0 };
        (r[(i, j)] - expect).abs() <= SYMMETRY_TOL * rho.abs().max(1.0)
    }));
    if !ok {
        return Err(Error::Unsupported("R must be a positive multiple of the identity".into()));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidInput("R must be positive definite".into()));
    }
    Ok(rho)
}

/// Solves `A X + X A = M` for symmetric `A`; modes with `lambda_i + lambda_j = 0`
/// (pairs of marginal modes) get zero.
fn lyapunov_symmetric(a: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let u = &eig.eigenvectors;
    let lam = &eig.eigenvalues;
    let scale = lam.amax().max(1.0);
    let mut mt = u.transpose() * m * u;
    for i in 0..mt.nrows() {
        for j in 0..mt.ncols() {
            let s = lam[i] + lam[j];
            mt[(i, j)] = if s.abs() <= 1e-12 * scale { 0.0 } else { mt[(i, j)] / s };
        }
    }
    symmetrize(&(u * mt * u.transpose()))
}

fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.max()
}

/// Closed form `rho (A + sqrt(A^2 + Q / rho))`, exact when `A` and `Q` commute.
pub fn commuting_care_guess(a: &DMatrix<f64>, q: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let m = symmetrize(&(a * a + q / rho));
    let eig = SymmetricEigen::new(m);
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
    symmetrize(&((a + root) * rho))
}

/// Continuous-time algebraic Riccati equation with `B = I` and `R = rho I`,
/// solved by Newton-Kleinman iteration.
pub fn solve_care(a: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, tol: f64) -> Result<CareSolution> {
    solve_care_from(a, q, r, tol, None)
}

/// As [`solve_care`], starting from `initial` when it is stabilizing.
pub fn solve_care_from(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    initial: Option<&DMatrix<f64>>,
) -> Result<CareSolution> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) || r.shape() != (n, n) {
        return Err(Error::DimensionMismatch("A, Q, R must be square and of equal size".into()));
    }
    if !is_symmetric(a) {
        return Err(Error::Unsupported("Newton-Kleinman here needs a symmetric A".into()));
    }
    if !is_symmetric(q) {
        return Err(Error::InvalidInput("Q must be symmetric".into()));
    }
    let rho = scalar_weight(r)?;

    let stabilizing = |pi: &DMatrix<f64>| max_eigenvalue(&(a - pi / rho)) <= STABILITY_SLACK;
    let mut pi = match initial {
        Some(p0) if p0.shape() == (n, n) && stabilizing(p0) => symmetrize(p0),
        _ => commuting_care_guess(a, q, rho),
    };

    let mut residual = care_residual(a, q, rho, &pi);
    let mut iterations = 0;
    while residual > tol {
        if iterations == MAX_NEWTON_ITERS || !residual.is_finite() {
            return Err(Error::CareNotConverged { iterations, residual });
        }
        let closed = symmetrize(&(a - &pi / rho));
        let rhs = -(q + &pi * &pi / rho);
        pi = lyapunov_symmetric(&closed, &rhs);
        residual = care_residual(a, q, rho, &pi);
        iterations += 1;
    }

    let min_eig = SymmetricEigen::new(pi.clone()).eigenvalues.min();
    if min_eig < -STABILITY_SLACK {
        return Err(Error::InvalidInput(format!("Riccati solution not PSD (min eigenvalue {min_eig:e})")));
    }
    let abscissa = max_eigenvalue(&(a - &pi / rho));
    if abscissa > STABILITY_SLACK {
        return Err(Error::InvalidInput(format!("Riccati solution not stabilizing (abscissa {abscissa:e})")));
    }
    Ok(CareSolution {
        pi,
        residual_norm: residual,
        iterations,
    })
}

/// Velocity CARE for the frozen state.
///
/// `A_vel`, `Q_vel` and `R` are all of the form `M (x) I_d`, so the solve runs
/// on the `N x N` agent factor and is expanded afterwards; the residual of the
/// expanded solution is `sqrt(d)` times the agent-level one. Without a warm
/// start the iteration begins at the solution for the kernel-averaged
/// alignment matrix `abar (C - I)`.
pub fn velocity_care(state: &EnsembleState, params: &SimParams, warm: Option<&DMatrix<f64>>) -> Result<CareSolution> {
    let (n, d) = state.positions.shape();
    let a = build_agent_laplacian(state, params);
    let (q, r) = build_cost_operators(n, 1, params.gamma);
    let rho = params.gamma / n as f64;

    let initial = match warm {
        Some(w) => agent_block(w, n, d),
        None => {
            let abar = if n > 1 { -a.trace() / (n as f64 - 1.0) } else { 0.0 };
            let gain = rho * (-abar + (abar * abar + 1.0 / (n as f64 * rho)).sqrt());
            let c = DMatrix::from_element(n, n, 1.0 / n as f64);
            (DMatrix::identity(n, n) - c) * gain
        }
    };
    let sol = solve_care_from(&a, &q, &r, CARE_TOL / (d as f64).sqrt(), Some(&initial))?;
    Ok(CareSolution {
        pi: kron_identity(&sol.pi, d),
        residual_norm: sol.residual_norm * (d as f64).sqrt(),
        iterations: sol.iterations,
    })
}

fn agent_block(pi_vel: &DMatrix<f64>, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| pi_vel[(i * d, j * d)])
}

/// `u = -R^{-1} Pi_vel vec(v)` reshaped to `N x d`.
pub fn sdre_feedback(state: &EnsembleState, params: &SimParams, care: &CareSolution) -> ControlField {
    let (n, d) = state.velocities.shape();
    let rho = params.gamma / n as f64;
    let u = -(&care.pi * flatten_agents(&state.velocities)) / rho;
    ControlField::new(unflatten_agents(u.as_slice(), n, d))
}

/// Frozen-Riccati receding horizon loop: relinearize and re-solve every
/// `refresh_steps` steps, holding `Pi` fixed in between.
pub fn frozen_sdre_mpc(
    state0: &EnsembleState,
    params: &SimParams,
    refresh_steps: usize,
) -> Result<(Trajectory, MomentTrace)> {
    if refresh_steps == 0 {
        return Err(Error::InvalidInput("refresh_steps must be >= 1".into()));
    }
    let mut care: Option<CareSolution> = None;
    let mut counter = 0usize;
    crate::ensemble::simulate(
        state0,
        |s| {
            if counter % refresh_steps == 0 {
                let warm = care.as_ref().map(|c| &c.pi);
                let sol = velocity_care(s, params, warm).map_err(|e| Error::CareAt {
                    time: s.time,
                    source: Box::new(e),
                })?;
                care = Some(sol);
            }
            counter += 1;
            Ok(sdre_feedback(s, params, care.as_ref().expect("solved above")))
        },
        params,
    )
}

/// Simulates with a single fixed `Pi` (no refresh). Mostly for testing.
pub fn fixed_riccati_rollout(
    state0: &EnsembleState,
    params: &SimParams,
    care: &CareSolution,
) -> Result<Trajectory> {
    let mut traj = Trajectory {
        states: vec![state0.clone()],
        ..Default::default()
    };
    let mut s = state0.clone();
    for _ in 0..params.steps() {
        let u = sdre_feedback(&s, params, care);
        traj.cost_accumulated += params.dt * crate::ensemble::running_cost(&s, &u, params);
        s = step(&s, &u, params)?;
        traj.controls.push(u);
        traj.states.push(s.clone());
    }
    Ok(traj)
}

/// `(u, V, grad V)` from the quadratic ansatz `V = v^T Pi_vel v`.
pub fn sdre_sample(state: &EnsembleState, params: &SimParams) -> Result<(DMatrix<f64>, f64, DVector<f64>)> {
    let care = velocity_care(state, params, None)?;
    let (n, d) = state.velocities.shape();
    let v = flatten_agents(&state.velocities);
    let pv = &care.pi * &v;
    let value = v.dot(&pv);
    let mut grad = DVector::zeros(2 * n * d);
    grad.rows_mut(n * d, n * d).copy_from(&(pv * 2.0));
    let u = sdre_feedback(state, params, &care);
    Ok((u.values, value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{alignment, velocity_variance, mean_velocity};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_state(n: usize, d: usize, seed: u64) -> EnsembleState {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.gen_range(0.0..1.0));
        let v = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        EnsembleState::new(x, v, 0.0).unwrap()
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn flatten_round_trip() {
        let s = random_state(3, 2, 1);
        let flat = flatten_state(&s);
        assert_eq!(flat[1], s.positions[(0, 1)]);
        assert_eq!(flat[2], s.positions[(1, 0)]);
        assert_eq!(flat[6], s.velocities[(0, 0)]);
        assert_eq!(unflatten_state(&flat, 3, 2, 0.0).unwrap(), s);
    }

    #[test]
    fn a_vel_reproduces_alignment() {
        let s = random_state(5, 2, 7);
        let p = SimParams::default();
        let a = build_a_vel(&s, &p);
        let lhs = &a * flatten_agents(&s.velocities);
        let rhs = flatten_agents(&alignment(&s.positions, &s.velocities, &p));
        assert!((lhs - rhs).amax() <= 1e-13);

        let consensus = EnsembleState::new(s.positions.clone(), DMatrix::from_element(5, 2, 0.7), 0.0).unwrap();
        let z = build_a_vel(&consensus, &p) * flatten_agents(&consensus.velocities);
        assert!(z.amax() <= 1e-15);
    }

    #[test]
    fn a_vel_two_agents_unit_distance() {
        let s = EnsembleState::from_rows(&[[0.0], [1.0]], &[[0.0], [0.0]]).unwrap();
        let a = build_a_vel(&s, &SimParams::default());
        let expected = DMatrix::from_row_slice(2, 2, &[-0.25, 0.25, 0.25, -0.25]);
        assert!((a - expected).amax() < 1e-15);
    }

    #[test]
    fn cost_operators() {
        let (q, r) = build_cost_operators(1, 2, 0.3);
        assert!(q.amax() < 1e-15);
        assert!((r - DMatrix::identity(2, 2) * 0.3).amax() < 1e-15);

        let c = averaging_operator(3, 2);
        assert!((c.transpose() * &c - &c).amax() < 1e-14);
        assert!((c.transpose() - &c).amax() < 1e-14);

        let s = random_state(4, 2, 3);
        let (q, _) = build_cost_operators(4, 2, 0.1);
        let v = flatten_agents(&s.velocities);
        let quad = v.dot(&(&q * &v)) * 4.0;
        let direct = 4.0 * velocity_variance(&s, &mean_velocity(&s));
        assert!((quad - direct).abs() < 1e-12);
    }

    #[test]
    fn scalar_care_cases() {
        let sol = solve_care(&scalar(0.0), &scalar(1.0), &scalar(1.0), 1e-12).unwrap();
        assert!((sol.pi[(0, 0)] - 1.0).abs() < 1e-10);
        let sol = solve_care(&scalar(-1.0), &scalar(1.0), &scalar(1.0), 1e-12).unwrap();
        assert!((sol.pi[(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-10);

        // Same equations from a poor starting point exercise the Newton steps.
        let sol = solve_care_from(&scalar(0.0), &scalar(1.0), &scalar(1.0), 1e-12, Some(&scalar(7.0))).unwrap();
        assert!(sol.iterations > 2);
        assert!((sol.pi[(0, 0)] - 1.0).abs() < 1e-10);
        let sol = solve_care_from(&scalar(-1.0), &scalar(1.0), &scalar(1.0), 1e-12, Some(&scalar(3.0))).unwrap();
        assert!((sol.pi[(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-10);
    }

    #[test]
    fn rejects_unsupported_inputs() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let q = DMatrix::identity(2, 2);
        assert!(matches!(solve_care(&a, &q, &q, 1e-9), Err(Error::Unsupported(_))));
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        assert!(matches!(solve_care(&q, &q, &r, 1e-9), Err(Error::Unsupported(_))));
    }

    #[test]
    fn velocity_care_matches_closed_form() {
        // A_vel and Q_vel commute (A 1 = 0), so the closed form is exact and
        // independent of the Newton iteration.
        let s = random_state(8, 2, 5);
        let p = SimParams::default();
        let sol = velocity_care(&s, &p, None).unwrap();
        let a = build_a_vel(&s, &p);
        let (q, r) = build_cost_operators(8, 2, p.gamma);
        let oracle = commuting_care_guess(&a, &q, r[(0, 0)]);
        assert!((&sol.pi - oracle).amax() < 1e-10);
        assert!(sol.residual_norm <= CARE_TOL);
        assert!(care_residual(&a, &q, r[(0, 0)], &sol.pi) <= CARE_TOL);
        assert!(sol.iterations >= 1);
    }

    #[test]
    fn full_size_newton_agrees_with_agent_reduction() {
        let s = random_state(6, 2, 15);
        let p = SimParams::default();
        let a = build_a_vel(&s, &p);
        let (q, r) = build_cost_operators(6, 2, p.gamma);
        // Zero on the consensus mode, which is unobservable and marginal.
        let start = (DMatrix::identity(12, 12) - averaging_operator(6, 2)) * 0.05;
        let full = solve_care_from(&a, &q, &r, CARE_TOL, Some(&start)).unwrap();
        let reduced = velocity_care(&s, &p, None).unwrap();
        assert!((full.pi - reduced.pi).amax() < 1e-9);
    }

    #[test]
    fn feedback_invariant_under_joint_scaling() {
        let s = random_state(5, 1, 9);
        let p = SimParams::default();
        let a = build_a_vel(&s, &p);
        let (q, r) = build_cost_operators(5, 1, p.gamma);
        let base = solve_care(&a, &q, &r, 1e-12).unwrap();
        let c = 3.7;
        let scaled = solve_care(&a, &(&q * c), &(&r * c), 1e-12).unwrap();
        assert!((&scaled.pi - &base.pi * c).amax() < 1e-10 * c);
        let v = flatten_agents(&s.velocities);
        let u1 = &base.pi * &v / r[(0, 0)];
        let u2 = &scaled.pi * &v / (r[(0, 0)] * c);
        assert!((u1 - u2).amax() < 1e-10);
    }

    #[test]
    fn feedback_edge_cases() {
        let p = SimParams::new(1.0, 1.0, 0.01);
        let s = EnsembleState::from_rows(&[[0.3]], &[[2.0]]).unwrap();
        let care = velocity_care(&s, &p, None).unwrap();
        assert_eq!(care.pi[(0, 0)], 0.0);
        assert_eq!(sdre_feedback(&s, &p, &care).values[(0, 0)], 0.0);

        let s = random_state(4, 2, 2);
        let s0 = EnsembleState::new(s.positions.clone(), DMatrix::zeros(4, 2), 0.0).unwrap();
        let (u, v, g) = sdre_sample(&s0, &p).unwrap();
        assert_eq!((u.amax(), v, g.amax()), (0.0, 0.0, 0.0));

        let s = EnsembleState::from_rows(&[[0.0], [1.0]], &[[1.0], [-1.0]]).unwrap();
        let p = SimParams::default();
        let care = velocity_care(&s, &p, None).unwrap();
        let u = sdre_feedback(&s, &p, &care).values;
        assert!(u[(0, 0)] < 0.0);
        assert!((u[(0, 0)] + u[(1, 0)]).abs() < 1e-12);
    }

    #[test]
    fn sample_labels_are_consistent() {
        let s = random_state(6, 2, 31);
        let p = SimParams::default();
        let (u, v, g) = sdre_sample(&s, &p).unwrap();
        assert!(v >= 0.0);
        assert!(g.rows(0, 12).amax() == 0.0);
        let from_grad = g.rows(12, 12) * (-(6.0) / (2.0 * p.gamma));
        assert!((from_grad - flatten_agents(&u)).amax() < 1e-10);
    }

    #[test]
    fn single_linearization_equals_fixed_pi() {
        let s = random_state(4, 2, 4);
        let p = SimParams::new(0.1, 0.5, 0.01);
        let (traj, _) = frozen_sdre_mpc(&s, &p, p.steps()).unwrap();
        let care = velocity_care(&s, &p, None).unwrap();
        let fixed = fixed_riccati_rollout(&s, &p, &care).unwrap();
        assert_eq!(traj.final_state(), fixed.final_state());
    }

    #[test]
    fn frozen_mpc_reduces_spread() {
        let s = random_state(10, 2, 6);
        let p = SimParams::new(0.1, 3.0, 0.01);
        let (traj, _) = frozen_sdre_mpc(&s, &p, 5).unwrap();
        let (free, _) = crate::ensemble::simulate_uncontrolled(&s, &p).unwrap();
        assert!(traj.final_spread() < free.final_spread());
        assert!(frozen_sdre_mpc(&s, &p, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn care_certificate_holds(seed in 0u64..10_000) {
            let s = random_state(6, 2, seed);
            let p = SimParams::default();
            let sol = velocity_care(&s, &p, None).unwrap();
            prop_assert!(sol.residual_norm <= CARE_TOL);
            prop_assert!((&sol.pi - sol.pi.transpose()).amax() <= 1e-12);
            let eig = SymmetricEigen::new(sol.pi.clone()).eigenvalues;
            prop_assert!(eig.min() >= -1e-10);
            let a = build_a_vel(&s, &p);
            let closed = &a - &sol.pi / (p.gamma / 6.0);
            prop_assert!(SymmetricEigen::new(closed).eigenvalues.max() <= 1e-10);
        }

        #[test]
        fn feedback_is_permutation_equivariant(seed in 0u64..10_000, rot in 1usize..5) {
            let s = random_state(5, 2, seed);
            let perm: Vec<usize> = (0..5).map(|i| (i + rot) % 5).collect();
            let p = SimParams::default();
            let u = sdre_feedback(&s, &p, &velocity_care(&s, &p, None).unwrap()).values;
            let sp = s.permuted(&perm);
            let up = sdre_feedback(&sp, &p, &velocity_care(&sp, &p, None).unwrap()).values;
            for i in 0..5 {
                for k in 0..2 {
                    prop_assert!((up[(i, k)] - u[(perm[i], k)]).abs() < 1e-10);
                }
            }
        }
    }
}
