//! Doléans-Dade exponential of `dV = a ds + b (Ψ†)' dM` along one simulated
//! path: `dU = U a ds + U_- b_- (Ψ†)' dM`, `U_{t0} = 1`.
//!
//! The `dM` integral splits into its jump part and its compensator. Between
//! jumps the state is frozen, so the drift `a - b (Ψ†)' A X` integrates in
//! closed form (Simpson in time for time-dependent coefficients); at a jump
//! the factor `1 + b_-(Ψ†)'ΔX` applies, with `b` and `Ψ†` taken at the
//! pre-jump state.

use super::{ChainPath, PsiSet, RateMatrix};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use nalgebra::DVector;

pub fn doleans_exponential(
    path: &ChainPath,
    a_coef: &dyn Fn(f64, usize) -> f64,
    b_coef: &dyn Fn(f64, usize) -> DVector<f64>,
    a: &RateMatrix,
    t0: f64,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    if (grid.t_start() - t0).abs() > 1e-12 * t0.abs().max(1.0) {
        return Err(Error::Grid(format!(
            "grid must start at t0 = {t0}, starts at {}",
            grid.t_start()
        )));
    }
    if grid.t_end() > path.horizon + 1e-12 {
        return Err(Error::Grid(
            "grid extends beyond the simulated horizon".into(),
        ));
    }
    let psi_set = PsiSet::new(a)?;

    // log-drift a(s, i) - b(s, i) . Ψ†_i A e_i in state i
    let g = |s: f64, i: usize| a_coef(s, i) - b_coef(s, i).dot(psi_set.dagger_a_column(i));
    let drift_factor = |lo: f64, hi: f64, i: usize| {
        let mid = 0.5 * (lo + hi);
        let integral = (hi - lo) / 6.0 * (g(lo, i) + 4.0 * g(mid, i) + g(hi, i));
        integral.exp()
    };

    let mut u = 1.0;
    let mut out = Vec::with_capacity(grid.n_nodes());
    out.push(u);
    // jumps strictly after t0, processed in order
    let mut jump_idx = path.jump_times.partition_point(|&v| v <= t0);
    for k in 0..grid.n_steps() {
        let mut pos = grid.node(k);
        let target = grid.node(k + 1);
        while jump_idx < path.jump_times.len() && path.jump_times[jump_idx] <= target {
            let v = path.jump_times[jump_idx];
            let i = path.state_before(v);
            let j = path.post_jump_states[jump_idx];
            if v > pos {
                u *= drift_factor(pos, v, i);
            }
            u *= 1.0 + b_coef(v, i).dot(psi_set.jump_vector(i, j));
            pos = v;
            jump_idx += 1;
        }
        if target > pos {
            u *= drift_factor(pos, target, path.state_at(pos));
        }
        out.push(u);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{path_rng, simulate_path, simulate_path_with_rng};
    use crate::mc::MeanAccumulator;
    use approx::assert_abs_diff_eq;

    fn two_state() -> RateMatrix {
        RateMatrix::from_rows(2, &[-1.0, 1.0, 1.0, -1.0]).unwrap()
    }

    fn zero_b(_: f64, _: usize) -> DVector<f64> {
        DVector::zeros(2)
    }

    #[test]
    fn constant_rate_gives_exact_exponential() {
        let a = two_state();
        let path = simulate_path(&a, 0, 2.0, 3).unwrap();
        let grid = TimeGrid::new(0.0, 2.0, 8).unwrap();
        let u = doleans_exponential(&path, &|_, _| 0.3, &zero_b, &a, 0.0, &grid).unwrap();
        for (k, &uk) in u.iter().enumerate() {
            assert_abs_diff_eq!(uk, (0.3 * grid.node(k)).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn bounded_b_keeps_jump_factors_in_unit_band() {
        // c2 = 1 / (||Ψ†|| sqrt(6m)) makes |ΔV| <= 1; with ||b|| = 0.9 c2 sqrt(3m)
        // every jump factor stays in [0, 2] and U stays nonnegative.
        let a = two_state();
        let m = a.m_bound();
        let set = PsiSet::new(&a).unwrap();
        let dagger_norm = (0..2)
            .map(|i| set.op(i).dagger_norm())
            .fold(0.0f64, f64::max);
        let c2 = 1.0 / (dagger_norm * (6.0 * m).sqrt());
        let scale = 0.9 * c2 * (3.0 * m).sqrt() / 2.0f64.sqrt();
        let b = move |_: f64, _: usize| DVector::from_vec(vec![scale, -scale]);

        let grid = TimeGrid::new(0.0, 2.0, 16).unwrap();
        for seed in 0..200 {
            let path = simulate_path(&a, (seed % 2) as usize, 2.0, seed).unwrap();
            for (m_idx, &v) in path.jump_times.iter().enumerate() {
                let i = path.state_before(v);
                let j = path.post_jump_states[m_idx];
                let dv = b(v, i).dot(set.jump_vector(i, j));
                assert!(dv.abs() <= 1.0 + 1e-12, "|ΔV| = {} exceeds 1", dv.abs());
            }
            let u = doleans_exponential(&path, &|_, _| 0.0, &b, &a, 0.0, &grid).unwrap();
            assert!(u.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn driftless_exponential_is_mean_one() {
        let a = two_state();
        let b = |_: f64, _: usize| DVector::from_vec(vec![0.4, -0.2]);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let mut acc = MeanAccumulator::new();
        for p in 0..100_000 {
            let mut rng = path_rng(314, p);
            let path = simulate_path_with_rng(&a, 0, 1.0, &mut rng).unwrap();
            let u = doleans_exponential(&path, &|_, _| 0.0, &b, &a, 0.0, &grid).unwrap();
            acc.push(*u.last().unwrap());
        }
        assert!(
            (acc.mean() - 1.0).abs() <= 3.0 * acc.std_error(),
            "E[U_T] = {} (se {})",
            acc.mean(),
            acc.std_error()
        );
    }

    #[test]
    fn grid_must_start_at_t0() {
        let a = two_state();
        let path = simulate_path(&a, 0, 2.0, 1).unwrap();
        let grid = TimeGrid::new(0.5, 1.5, 4).unwrap();
        assert!(doleans_exponential(&path, &|_, _| 0.0, &zero_b, &a, 0.0, &grid).is_err());
    }
}
