//! Forward simulation of the stochastic differential delayed equation
//! `dX̂_s = (a_s X̂_s + μ_{s-θ} X̂_{s-θ}) ds
//!        + (X̂_{s-} b_{s-} + X̂_{(s-θ)-} σ_{(s-θ)-})(Ψ†_s)' dM_s`
//! with `X̂_{t0} = 1` and `X̂ = 0` on `[t0-θ, t0)`, plus the Monte-Carlo
//! side of the duality closed formula
//! `Y_{t0} = E[X̂_T U_T + ∫_{t0}^T X̂_s φ_s ds
//!            + ∫_T^{T+θ} (μ_{s-θ} X̂_{s-θ} U_s + σ_{s-θ} X̂_{s-θ} V_s) ds]`.
//!
//! Method of steps: the grid step divides θ, and the integrator walks a
//! breakpoint set closed under shifts by θ (the uniform lattice plus every
//! chain jump time translated by integer multiples of θ). Delayed values
//! are then exact stored-point lookups resolved by index arithmetic, with
//! no interpolation anywhere. The `dM` integral is split analytically: the
//! compensator `-(...)(Ψ†)'A X ds` joins the drift with `Ψ†` at the running
//! state, and at each chain jump the increment uses the pre-jump state and
//! left limits.
//!
//! Times on a path's clock start at `t0`: a `ChainPath` handed to this
//! module describes the chain on `[t0, t0 + horizon]` with its own time
//! origin at `t0`.

use std::collections::HashMap;

use nalgebra::DVector;

use crate::chain::{path_rng, simulate_path_with_rng, ChainPath, PsiSet, RateMatrix};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::mc::{McEstimate, MeanAccumulator};

/// Coefficient functions `(t, state)` with declared sup-norms and the delay.
pub struct SddeCoefficients<'a> {
    pub a: Box<dyn Fn(f64, usize) -> f64 + 'a>,
    pub mu: Box<dyn Fn(f64, usize) -> f64 + 'a>,
    pub b: Box<dyn Fn(f64, usize) -> DVector<f64> + 'a>,
    pub sigma: Box<dyn Fn(f64, usize) -> DVector<f64> + 'a>,
    pub phi: Box<dyn Fn(f64, usize) -> f64 + 'a>,
    pub theta: f64,
    pub bounds: CoefficientBounds,
}

#[derive(Debug, Clone, Copy)]
pub struct CoefficientBounds {
    pub a: f64,
    pub mu: f64,
    pub b: f64,
    pub sigma: f64,
}

impl<'a> SddeCoefficients<'a> {
    /// Time- and state-constant coefficients; bounds derive directly.
    pub fn constant(
        a: f64,
        mu: f64,
        b: DVector<f64>,
        sigma: DVector<f64>,
        phi: f64,
        theta: f64,
    ) -> Self {
        let bounds = CoefficientBounds {
            a: a.abs(),
            mu: mu.abs(),
            b: b.norm(),
            sigma: sigma.norm(),
        };
        Self {
            a: Box::new(move |_, _| a),
            mu: Box::new(move |_, _| mu),
            b: Box::new(move |_, _| b.clone()),
            sigma: Box::new(move |_, _| sigma.clone()),
            phi: Box::new(move |_, _| phi),
            theta,
            bounds,
        }
    }

    /// Spot-check the declared bounds on the grid nodes.
    pub fn validate_bounds(&self, grid: &TimeGrid, n_states: usize) -> Result<()> {
        let tol = 1e-9;
        for k in 0..grid.n_nodes() {
            let t = grid.node(k);
            for i in 0..n_states {
                if (self.a)(t, i).abs() > self.bounds.a + tol
                    || (self.mu)(t, i).abs() > self.bounds.mu + tol
                    || (self.b)(t, i).norm() > self.bounds.b + tol
                    || (self.sigma)(t, i).norm() > self.bounds.sigma + tol
                {
                    return Err(Error::Domain(format!(
                        "coefficient exceeds its declared bound at t = {t}, state {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The simulated `X̂` on the uniform grid over `[t0-θ, T+θ]`.
#[derive(Debug, Clone)]
pub struct SddePath {
    pub times: Vec<f64>,
    pub xhat: Vec<f64>,
}

/// Breakpoints carry their provenance so that shifting by θ is exact index
/// arithmetic: lattice nodes shift by `n_per_delay`, jump translates shift
/// by one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum TraceKey {
    Lattice(usize),
    JumpShift { jump: usize, shift: i64 },
}

pub(crate) struct SddeTrace {
    keys: Vec<TraceKey>,
    times: Vec<f64>,
    /// value just before any jump applied at this breakpoint
    pre: Vec<f64>,
    /// value including a jump at this breakpoint
    post: Vec<f64>,
    index: HashMap<TraceKey, usize>,
    start: usize,
    horizon_idx: usize,
    n_per_delay: usize,
}

impl SddeTrace {
    fn delayed_index(&self, w: usize) -> usize {
        let key = match self.keys[w] {
            TraceKey::Lattice(k) => TraceKey::Lattice(k - self.n_per_delay),
            TraceKey::JumpShift { jump, shift } => TraceKey::JumpShift {
                jump,
                shift: shift - 1,
            },
        };
        self.index[&key]
    }
}

struct SddeRun<'r> {
    coeffs: &'r SddeCoefficients<'r>,
    psi_set: &'r PsiSet,
    path: &'r ChainPath,
    t0: f64,
    theta_eff: f64,
    n_per_delay: usize,
}

impl SddeRun<'_> {
    fn state_at(&self, t_abs: f64) -> usize {
        self.path.state_at(t_abs - self.t0)
    }

    fn state_before(&self, t_abs: f64) -> usize {
        self.path.state_before(t_abs - self.t0)
    }

    /// drift rate p(τ) = a(τ, i) - b(τ, i)·Ψ†_i A e_i in state i
    fn drift_rate(&self, t: f64, state: usize) -> f64 {
        (self.coeffs.a)(t, state)
            - (self.coeffs.b)(t, state).dot(self.psi_set.dagger_a_column(state))
    }

    /// delayed source q(τ) = X̂_{τ-θ} (μ_{τ-θ} - σ_{τ-θ}·Ψ†_i A e_i); the
    /// delayed value and state are one-sided limits supplied by the caller
    fn delayed_source(&self, t: f64, state: usize, r: f64, delayed_state: usize) -> f64 {
        if r == 0.0 {
            return 0.0;
        }
        let td = t - self.theta_eff;
        r * ((self.coeffs.mu)(td, delayed_state)
            - (self.coeffs.sigma)(td, delayed_state).dot(self.psi_set.dagger_a_column(state)))
    }

    fn build_breakpoints(&self, grid: &TimeGrid, n_t_idx: usize) -> SddeTrace {
        let n_total = grid.n_steps();
        let mut entries: Vec<(TraceKey, f64)> = (0..=n_total)
            .map(|k| (TraceKey::Lattice(k), grid.node(k)))
            .collect();
        let (lo, hi) = (grid.t_start(), grid.t_end());
        for (m, &u_rel) in self.path.jump_times.iter().enumerate() {
            let u = self.t0 + u_rel;
            let j_lo = ((lo - u) / self.theta_eff - 1e-12).ceil() as i64;
            let j_hi = ((hi - u) / self.theta_eff + 1e-12).floor() as i64;
            for j in j_lo..=j_hi {
                entries.push((
                    TraceKey::JumpShift { jump: m, shift: j },
                    u + j as f64 * self.theta_eff,
                ));
            }
        }
        entries.sort_by(|x, y| {
            x.1.partial_cmp(&y.1)
                .unwrap()
                .then_with(|| lattice_first(x.0).cmp(&lattice_first(y.0)))
        });
        let keys: Vec<TraceKey> = entries.iter().map(|e| e.0).collect();
        let times: Vec<f64> = entries.iter().map(|e| e.1).collect();
        let index: HashMap<TraceKey, usize> =
            keys.iter().enumerate().map(|(w, &k)| (k, w)).collect();
        let start = index[&TraceKey::Lattice(self.n_per_delay)];
        let horizon_idx = index[&TraceKey::Lattice(n_t_idx)];
        SddeTrace {
            keys,
            times,
            pre: Vec::new(),
            post: Vec::new(),
            index,
            start,
            horizon_idx,
            n_per_delay: self.n_per_delay,
        }
    }

    fn integrate(&self, mut trace: SddeTrace) -> Result<SddeTrace> {
        let len = trace.keys.len();
        trace.pre = vec![0.0; len];
        trace.post = vec![0.0; len];
        trace.post[trace.start] = 1.0;
        let mut x = 1.0;
        for w in (trace.start + 1)..len {
            let (t_prev, t_cur) = (trace.times[w - 1], trace.times[w]);
            let dt = t_cur - t_prev;
            let state = self.state_at(t_prev);
            if dt > 0.0 {
                // trapezoid endpoints approach the delayed data one-sided:
                // X̂ and the chain are right-continuous at τ_prev - θ and
                // left-limited at τ_cur - θ (X̂ jumps at t0 and at chain
                // jumps, both of which have breakpoint translates here)
                let r_prev = trace.post[trace.delayed_index(w - 1)];
                let r_cur = trace.pre[trace.delayed_index(w)];
                let p_bar = 0.5 * (self.drift_rate(t_prev, state) + self.drift_rate(t_cur, state));
                let growth = (p_bar * dt).exp();
                let q_prev = self.delayed_source(
                    t_prev,
                    state,
                    r_prev,
                    self.state_at(t_prev - self.theta_eff),
                );
                let q_cur = self.delayed_source(
                    t_cur,
                    state,
                    r_cur,
                    self.state_before(t_cur - self.theta_eff),
                );
                x = growth * x + 0.5 * dt * (growth * q_prev + q_cur);
            }
            trace.pre[w] = x;
            if let TraceKey::JumpShift { jump, shift: 0 } = trace.keys[w] {
                let i_pre = state;
                let j_post = self.path.post_jump_states[jump];
                let wvec = self.psi_set.jump_vector(i_pre, j_post);
                let mut dx = x * (self.coeffs.b)(t_cur, i_pre).dot(wvec);
                let td = t_cur - self.theta_eff;
                let r_pre = trace.pre[trace.delayed_index(w)];
                if r_pre != 0.0 {
                    let jd = self.state_before(td);
                    dx += r_pre * (self.coeffs.sigma)(td, jd).dot(wvec);
                }
                x += dx;
            }
            if !x.is_finite() {
                return Err(Error::Numerical {
                    context: "sdde forward step".into(),
                    t: t_cur,
                    state,
                });
            }
            trace.post[w] = x;
        }
        Ok(trace)
    }
}

// Sort discriminant for coincident times (lattice points first).
fn lattice_first(k: TraceKey) -> (u8, usize, i64) {
    match k {
        TraceKey::Lattice(i) => (0, i, 0),
        TraceKey::JumpShift { jump, shift } => (1, jump, shift),
    }
}

// The effective θ used for all shifts is n_per_delay * h, so the lattice
// and the jump translates stay mutually consistent in floating point.
struct Resolved {
    n_per_delay: usize,
    theta_eff: f64,
}

fn resolve_delay(grid: &TimeGrid, theta: f64) -> Result<Resolved> {
    if theta <= 0.0 || !theta.is_finite() {
        return Err(Error::Domain("delay θ must be positive".into()));
    }
    let ratio = theta / grid.step();
    let n_per_delay = ratio.round() as usize;
    if n_per_delay == 0 || (n_per_delay as f64 * grid.step() - theta).abs() > 1e-9 * theta.max(1.0)
    {
        return Err(Error::Grid(format!(
            "grid step {:.6e} must divide the delay θ = {theta}",
            grid.step()
        )));
    }
    Ok(Resolved {
        n_per_delay,
        theta_eff: n_per_delay as f64 * grid.step(),
    })
}

fn run_trace(
    path: &ChainPath,
    coeffs: &SddeCoefficients<'_>,
    a: &RateMatrix,
    psi_set: &PsiSet,
    t0: f64,
    grid: &TimeGrid,
) -> Result<SddeTrace> {
    let resolved = resolve_delay(grid, coeffs.theta)?;
    if (grid.t_start() - (t0 - resolved.theta_eff)).abs() > 1e-9 {
        return Err(Error::Grid(format!(
            "grid must start at t0 - θ = {}, starts at {}",
            t0 - resolved.theta_eff,
            grid.t_start()
        )));
    }
    if path.horizon < grid.t_end() - t0 - 1e-12 {
        return Err(Error::Domain(
            "chain path does not cover the simulation window".into(),
        ));
    }
    coeffs.validate_bounds(grid, a.n_states())?;
    let run = SddeRun {
        coeffs,
        psi_set,
        path,
        t0,
        theta_eff: resolved.theta_eff,
        n_per_delay: resolved.n_per_delay,
    };
    let n_t_idx = grid.n_steps() - resolved.n_per_delay; // lattice index of T
    let trace = run.build_breakpoints(grid, n_t_idx);
    run.integrate(trace)
}

/// Simulate `X̂` for one chain path. The grid must span `[t0-θ, T+θ]` with a
/// step dividing θ; the path's clock starts at `t0`.
pub fn simulate_sdde(
    path: &ChainPath,
    coeffs: &SddeCoefficients<'_>,
    a: &RateMatrix,
    t0: f64,
    grid: &TimeGrid,
) -> Result<SddePath> {
    let psi_set = PsiSet::new(a)?;
    let trace = run_trace(path, coeffs, a, &psi_set, t0, grid)?;
    let mut times = Vec::with_capacity(grid.n_nodes());
    let mut xhat = Vec::with_capacity(grid.n_nodes());
    for k in 0..grid.n_nodes() {
        let w = trace.index[&TraceKey::Lattice(k)];
        times.push(trace.times[w]);
        xhat.push(trace.post[w]);
    }
    Ok(SddePath { times, xhat })
}

#[derive(Debug, Clone, Copy)]
pub struct DualitySetup {
    pub t0: f64,
    /// The terminal time `T` of the anticipated problem.
    pub horizon: f64,
    pub initial_state: usize,
    /// Grid resolution: `h = θ / steps_per_delay`.
    pub steps_per_delay: usize,
}

/// Monte-Carlo estimate of the duality functional starting from
/// `X_{t0} = e_{initial_state}`. Deterministic for a fixed seed and
/// independent of path-evaluation order by construction.
pub fn duality_estimate(
    coeffs: &SddeCoefficients<'_>,
    u_term: &dyn Fn(f64, usize) -> f64,
    v_term: &dyn Fn(f64, usize) -> DVector<f64>,
    a: &RateMatrix,
    setup: &DualitySetup,
    n_paths: usize,
    rng_seed: u64,
) -> Result<McEstimate> {
    a.check_state(setup.initial_state)?;
    if setup.steps_per_delay == 0 {
        return Err(Error::Grid("steps_per_delay must be positive".into()));
    }
    let h = coeffs.theta / setup.steps_per_delay as f64;
    let span = setup.horizon - setup.t0;
    let n_t_steps = (span / h).round() as usize;
    if n_t_steps == 0 || (n_t_steps as f64 * h - span).abs() > 1e-9 * span.max(1.0) {
        return Err(Error::Grid(format!(
            "θ / steps_per_delay = {h:.6e} must divide T - t0 = {span}"
        )));
    }
    let grid = TimeGrid::from_step(
        setup.t0 - setup.steps_per_delay as f64 * h,
        h,
        n_t_steps + 2 * setup.steps_per_delay,
    )?;
    let psi_set = PsiSet::new(a)?;
    let horizon_rel = grid.t_end() - setup.t0;
    let theta_eff = setup.steps_per_delay as f64 * h;

    let mut acc = MeanAccumulator::new();
    for p in 0..n_paths {
        let mut rng = path_rng(rng_seed, p as u64);
        let path = simulate_path_with_rng(a, setup.initial_state, horizon_rel, &mut rng)?;
        let trace = run_trace(&path, coeffs, a, &psi_set, setup.t0, &grid)?;

        // X̂_T U(T, X_T)
        let w_t = trace.horizon_idx;
        let t_abs = trace.times[w_t];
        let mut value = trace.post[w_t] * u_term(t_abs, path.state_at(t_abs - setup.t0));

        // ∫_{t0}^{T} X̂_s φ_s ds, trapezoid on the breakpoint partition with
        // post values on segment left ends and pre values on right ends
        for w in (trace.start + 1)..=w_t {
            let (t0s, t1s) = (trace.times[w - 1], trace.times[w]);
            let dt = t1s - t0s;
            if dt <= 0.0 {
                continue;
            }
            let st = path.state_at(t0s - setup.t0);
            let left = trace.post[w - 1] * (coeffs.phi)(t0s, st);
            let right = trace.pre[w] * (coeffs.phi)(t1s, st);
            value += 0.5 * dt * (left + right);
        }

        // ∫_T^{T+θ} (μ_{s-θ} X̂_{s-θ} U_s + σ_{s-θ} X̂_{s-θ} V_s) ds
        for w in (w_t + 1)..trace.keys.len() {
            let (t0s, t1s) = (trace.times[w - 1], trace.times[w]);
            let dt = t1s - t0s;
            if dt <= 0.0 {
                continue;
            }
            let st = path.state_at(t0s - setup.t0);
            let tail = |s: f64, r: f64, jd: usize| -> f64 {
                if r == 0.0 {
                    return 0.0;
                }
                let td = s - theta_eff;
                let v_proj = psi_set.project(st, &v_term(s, st));
                r * ((coeffs.mu)(td, jd) * u_term(s, st)
                    + (coeffs.sigma)(td, jd).dot(&v_proj))
            };
            // same one-sided endpoint convention as the drift integration
            let left = tail(
                t0s,
                trace.post[trace.delayed_index(w - 1)],
                path.state_at(t0s - theta_eff - setup.t0),
            );
            let right = tail(
                t1s,
                trace.pre[trace.delayed_index(w)],
                path.state_before(t1s - theta_eff - setup.t0),
            );
            value += 0.5 * dt * (left + right);
        }
        acc.push(value);
    }
    Ok(acc.estimate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{doleans_exponential, simulate_path};
    use approx::assert_abs_diff_eq;

    fn two_state() -> RateMatrix {
        RateMatrix::from_rows(2, &[-1.0, 1.0, 1.0, -1.0]).unwrap()
    }

    fn zero2() -> DVector<f64> {
        DVector::zeros(2)
    }

    fn grid_for(theta: f64, t_span: f64, steps_per_delay: usize) -> TimeGrid {
        let h = theta / steps_per_delay as f64;
        let n = (t_span / h).round() as usize + 2 * steps_per_delay;
        TimeGrid::from_step(-theta, h, n).unwrap()
    }

    #[test]
    fn all_zero_coefficients_keep_xhat_at_one() {
        let a = two_state();
        let coeffs = SddeCoefficients::constant(0.0, 0.0, zero2(), zero2(), 0.0, 0.25);
        let grid = grid_for(0.25, 1.0, 10);
        let path = simulate_path(&a, 0, 1.3, 5).unwrap();
        let sp = simulate_sdde(&path, &coeffs, &a, 0.0, &grid).unwrap();
        for (t, x) in sp.times.iter().zip(&sp.xhat) {
            if *t < -1e-12 {
                assert_eq!(*x, 0.0);
            } else {
                assert_eq!(*x, 1.0);
            }
        }
    }

    #[test]
    fn pure_drift_is_exact_exponential() {
        let a = two_state();
        let r = -0.4;
        let coeffs = SddeCoefficients::constant(r, 0.0, zero2(), zero2(), 0.0, 0.25);
        let grid = grid_for(0.25, 1.0, 10);
        let path = simulate_path(&a, 1, 1.3, 17).unwrap();
        let sp = simulate_sdde(&path, &coeffs, &a, 0.0, &grid).unwrap();
        for (t, x) in sp.times.iter().zip(&sp.xhat) {
            if *t >= 0.0 {
                assert_abs_diff_eq!(*x, (r * t).exp(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn history_is_zero_and_start_is_one() {
        let a = two_state();
        let coeffs =
            SddeCoefficients::constant(0.3, 0.2, DVector::from_vec(vec![0.1, -0.1]), zero2(), 0.0, 0.5);
        let grid = grid_for(0.5, 1.0, 20);
        for seed in 0..50 {
            let path = simulate_path(&a, (seed % 2) as usize, 1.6, seed).unwrap();
            let sp = simulate_sdde(&path, &coeffs, &a, 0.0, &grid).unwrap();
            for (t, x) in sp.times.iter().zip(&sp.xhat) {
                if *t < -1e-12 {
                    assert_eq!(*x, 0.0);
                }
            }
            let k0 = sp.times.iter().position(|&t| t.abs() < 1e-12).unwrap();
            assert_eq!(sp.xhat[k0], 1.0);
        }
    }

    #[test]
    fn undelayed_reduction_matches_doleans() {
        // μ = σ = 0 turns the SDDE into dU = U a ds + U_- b_- (Ψ†)'dM.
        let a = two_state();
        let b = DVector::from_vec(vec![0.3, -0.2]);
        let coeffs = SddeCoefficients::constant(-0.25, 0.0, b.clone(), zero2(), 0.0, 0.25);
        let grid = grid_for(0.25, 1.0, 40);
        let ref_grid = TimeGrid::new(0.0, 1.25, 200).unwrap();
        for seed in 0..40 {
            let path = simulate_path(&a, (seed % 2) as usize, 1.3, seed).unwrap();
            let sp = simulate_sdde(&path, &coeffs, &a, 0.0, &grid).unwrap();
            let b_fn = |_: f64, _: usize| b.clone();
            let u =
                doleans_exponential(&path, &|_, _| -0.25, &b_fn, &a, 0.0, &ref_grid).unwrap();
            // compare at T + θ
            let x_end = *sp.xhat.last().unwrap();
            let u_end = *u.last().unwrap();
            assert_abs_diff_eq!(x_end, u_end, epsilon = 2e-4 * u_end.abs().max(1.0));
        }
    }

    #[test]
    fn grid_must_divide_the_delay() {
        let a = two_state();
        let coeffs = SddeCoefficients::constant(0.0, 0.0, zero2(), zero2(), 0.0, 0.25);
        let grid = TimeGrid::from_step(-0.25, 0.11, 12).unwrap();
        let path = simulate_path(&a, 0, 2.0, 3).unwrap();
        assert!(matches!(
            simulate_sdde(&path, &coeffs, &a, 0.0, &grid),
            Err(Error::Grid(_))
        ));
    }

    #[test]
    fn trivial_duality_functional_is_constant() {
        let a = two_state();
        let coeffs = SddeCoefficients::constant(0.0, 0.0, zero2(), zero2(), 0.0, 0.25);
        let setup = DualitySetup {
            t0: 0.0,
            horizon: 1.0,
            initial_state: 0,
            steps_per_delay: 10,
        };
        let est = duality_estimate(
            &coeffs,
            &|_, _| 2.5,
            &|_, _| DVector::zeros(2),
            &a,
            &setup,
            200,
            9,
        )
        .unwrap();
        assert_eq!(est.mean, 2.5);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn undelayed_duality_reduces_to_the_classical_linear_formula() {
        // μ = σ = 0: the bracket degenerates to E[ξ(X_T) U_T + ∫ φ U_s ds],
        // the classical linear-BSDE duality; compare with the backward
        // solver for f = a y + b z + φ.
        let a = two_state();
        let b = DVector::from_vec(vec![0.1, -0.05]);
        let (ca, cphi) = (-0.25, 0.4);
        let coeffs = SddeCoefficients::constant(ca, 0.0, b.clone(), zero2(), cphi, 0.25);
        let setup = DualitySetup {
            t0: 0.0,
            horizon: 1.0,
            initial_state: 0,
            steps_per_delay: 20,
        };
        let xi = [0.8, -0.4];
        let est = duality_estimate(
            &coeffs,
            &|_, i: usize| xi[i],
            &|_, _| DVector::zeros(2),
            &a,
            &setup,
            40_000,
            33,
        )
        .unwrap();

        let set = PsiSet::new(&a).unwrap();
        let l2 = (0..2)
            .map(|i| set.dual_seminorm_sq(i, &b).sqrt())
            .fold(0.0f64, f64::max);
        let driver = crate::bsde::ClassicDriver::new(ca.abs(), l2, move |_, y, z, _| {
            ca * y + b.dot(z) + cphi
        });
        let grid = TimeGrid::new(0.0, 1.0, 400).unwrap();
        let terminal = DVector::from_vec(xi.to_vec());
        let surface = crate::bsde::solve_classical(&terminal, &driver, &a, &grid).unwrap();
        let gap = (est.mean - surface.u_at(0, 0)).abs();
        assert!(
            gap <= 3.0 * est.std_error,
            "reduction gap {gap:.4e} vs 3 se {:.4e}",
            3.0 * est.std_error
        );
    }

    #[test]
    fn doubling_paths_shrinks_the_standard_error() {
        let a = two_state();
        let coeffs = SddeCoefficients::constant(
            -0.2,
            0.1,
            DVector::from_vec(vec![0.05, -0.05]),
            zero2(),
            0.3,
            0.25,
        );
        let setup = DualitySetup {
            t0: 0.0,
            horizon: 1.0,
            initial_state: 0,
            steps_per_delay: 10,
        };
        let u = |_: f64, _: usize| 1.0;
        let v = |_: f64, _: usize| DVector::zeros(2);
        let e1 = duality_estimate(&coeffs, &u, &v, &a, &setup, 4000, 123).unwrap();
        let e2 = duality_estimate(&coeffs, &u, &v, &a, &setup, 8000, 123).unwrap();
        let ratio = e2.std_error / e1.std_error;
        let target = 0.5f64.sqrt();
        assert!(
            (ratio - target).abs() <= 0.2 * target,
            "se ratio {ratio:.3} not within 20% of 1/sqrt(2)"
        );
    }

    #[test]
    fn duality_estimate_is_deterministic_for_a_seed() {
        let a = two_state();
        let coeffs = SddeCoefficients::constant(
            -0.2,
            0.1,
            DVector::from_vec(vec![0.05, -0.05]),
            zero2(),
            0.3,
            0.25,
        );
        let setup = DualitySetup {
            t0: 0.0,
            horizon: 1.0,
            initial_state: 1,
            steps_per_delay: 8,
        };
        let u = |_: f64, _: usize| 1.0;
        let v = |_: f64, _: usize| DVector::zeros(2);
        let e1 = duality_estimate(&coeffs, &u, &v, &a, &setup, 3000, 7).unwrap();
        let e2 = duality_estimate(&coeffs, &u, &v, &a, &setup, 3000, 7).unwrap();
        assert_eq!(e1.mean.to_bits(), e2.mean.to_bits());
        assert_eq!(e1.std_error.to_bits(), e2.std_error.to_bits());
    }
}
