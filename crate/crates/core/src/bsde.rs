//! Backward solver for classical chain BSDEs
//! `Y_t = ξ + ∫_t^T f(s, Y_s, Z_s) ds - ∫_t^T Z'_s dM_s`.
//!
//! For chain-Markovian data the solution is `Y_t = u(t)'X_t` with `u`
//! solving the coupled terminal-value system
//! `du_i/dt = -f(t, u_i, z(t, i), i) - (A'u)_i`, `u(T) = ξ`,
//! where `z(t, i) = Ψ(e_i)Ψ†(e_i) u(t)` is the projected integrand. The
//! system is integrated backward with classical fourth-order Runge-Kutta.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::chain::{ChainPath, PsiSet, RateMatrix};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Driver `f(t, y, z, state)` with its Lipschitz constants in `y` and in the
/// `||.||_X` seminorm of `z`.
pub struct ClassicDriver<'a> {
    #[allow(clippy::type_complexity)]
    pub f: Box<dyn Fn(f64, f64, &DVector<f64>, usize) -> f64 + 'a>,
    pub l1: f64,
    pub l2: f64,
}

impl<'a> ClassicDriver<'a> {
    pub fn new(
        l1: f64,
        l2: f64,
        f: impl Fn(f64, f64, &DVector<f64>, usize) -> f64 + 'a,
    ) -> Self {
        Self {
            f: Box::new(f),
            l1,
            l2,
        }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, |_, _, _, _| 0.0)
    }

    /// Spot-check the declared Lipschitz constants on random argument pairs
    /// sharing a time and state. Integrand probes are drawn from the range
    /// of `Ψ`, where the seminorm controls the driver.
    pub fn spot_check(
        &self,
        psi_set: &PsiSet,
        t_range: (f64, f64),
        n_probes: usize,
        seed: u64,
    ) -> Result<()> {
        let n = psi_set.n_states();
        let mut rng = crate::chain::path_rng(seed, 4);
        let mut sample = move |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        for _ in 0..n_probes {
            let t = sample(t_range.0, t_range.1);
            let state = (sample(0.0, n as f64) as usize).min(n - 1);
            let y1 = sample(-2.0, 2.0);
            let y2 = sample(-2.0, 2.0);
            let z1 = psi_set.project(state, &DVector::from_fn(n, |_, _| sample(-2.0, 2.0)));
            let z2 = psi_set.project(state, &DVector::from_fn(n, |_, _| sample(-2.0, 2.0)));
            let f1 = (self.f)(t, y1, &z1, state);
            let f2 = (self.f)(t, y2, &z2, state);
            let dz = psi_set.seminorm_sq(state, &(&z1 - &z2)).sqrt();
            let bound = self.l1 * (y1 - y2).abs() + self.l2 * dz;
            let slack = 1e-8 * (1.0 + f1.abs() + f2.abs() + bound);
            if (f1 - f2).abs() > bound + slack {
                return Err(Error::Domain(format!(
                    "driver fails its Lipschitz spot check at t = {t}, state {state}: \
                     |Δf| = {:.6e} > {:.6e}",
                    (f1 - f2).abs(),
                    bound
                )));
            }
        }
        Ok(())
    }
}

/// Grid-indexed solution pair: `u[k][i]` is the value in state `i` at node
/// `k`, `z[k]` holds the projected integrands as columns.
#[derive(Debug, Clone)]
pub struct SolutionSurface {
    grid: TimeGrid,
    u: Vec<DVector<f64>>,
    z: Vec<DMatrix<f64>>,
}

impl SolutionSurface {
    pub(crate) fn from_parts(
        grid: TimeGrid,
        u: Vec<DVector<f64>>,
        z: Vec<DMatrix<f64>>,
    ) -> Self {
        assert_eq!(u.len(), grid.n_nodes());
        assert_eq!(z.len(), grid.n_nodes());
        Self { grid, u, z }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_states(&self) -> usize {
        self.u[0].len()
    }

    pub fn u_at(&self, node: usize, state: usize) -> f64 {
        self.u[node][state]
    }

    pub fn u_node(&self, node: usize) -> &DVector<f64> {
        &self.u[node]
    }

    pub fn z_node(&self, node: usize) -> &DMatrix<f64> {
        &self.z[node]
    }

    pub fn z_at(&self, node: usize, state: usize) -> DVector<f64> {
        self.z[node].column(state).into_owned()
    }

    /// Linear interpolation of `u(., state)` in time, clamped to the grid.
    pub fn u_interp(&self, t: f64, state: usize) -> f64 {
        let (k0, k1, w) = self.grid.bracket(t);
        (1.0 - w) * self.u[k0][state] + w * self.u[k1][state]
    }

    /// Linear interpolation of all `z` columns at once.
    pub fn z_interp_cols(&self, t: f64) -> DMatrix<f64> {
        let (k0, k1, w) = self.grid.bracket(t);
        if k0 == k1 {
            return self.z[k0].clone();
        }
        &self.z[k0] * (1.0 - w) + &self.z[k1] * w
    }

    pub(crate) fn u_mut(&mut self) -> &mut Vec<DVector<f64>> {
        &mut self.u
    }

    pub(crate) fn z_mut(&mut self) -> &mut Vec<DMatrix<f64>> {
        &mut self.z
    }
}

/// Backward RK4 pass for `du/dt = rhs(t, u)` from `u[last]` down to `u[0]`.
/// Shared by the classical and anticipated solvers so the two produce
/// identical floating-point trajectories on identical inputs.
pub(crate) fn integrate_backward(
    grid: &TimeGrid,
    terminal: DVector<f64>,
    rhs: &dyn Fn(f64, &DVector<f64>) -> DVector<f64>,
    context: &str,
) -> Result<Vec<DVector<f64>>> {
    let h = grid.step();
    let n_nodes = grid.n_nodes();
    let mut u = vec![DVector::zeros(terminal.len()); n_nodes];
    u[n_nodes - 1] = terminal;
    for k in (1..n_nodes).rev() {
        let t = grid.node(k);
        let uk = &u[k];
        let k1 = rhs(t, uk);
        let k2 = rhs(t - 0.5 * h, &(uk - &k1 * (0.5 * h)));
        let k3 = rhs(t - 0.5 * h, &(uk - &k2 * (0.5 * h)));
        let k4 = rhs(t - h, &(uk - &k3 * h));
        let next = uk - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if let Some(state) = next.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical {
                context: context.into(),
                t: grid.node(k - 1),
                state,
            });
        }
        u[k - 1] = next;
    }
    Ok(u)
}

pub(crate) fn project_surface(psi_set: &PsiSet, u: &[DVector<f64>]) -> Vec<DMatrix<f64>> {
    let n = psi_set.n_states();
    u.iter()
        .map(|v| {
            let mut zm = DMatrix::zeros(n, n);
            for i in 0..n {
                zm.set_column(i, &psi_set.project(i, v));
            }
            zm
        })
        .collect()
}

/// Solve the classical BSDE backward from `u(T) = terminal` on `grid`.
pub fn solve_classical(
    terminal: &DVector<f64>,
    driver: &ClassicDriver<'_>,
    a: &RateMatrix,
    grid: &TimeGrid,
) -> Result<SolutionSurface> {
    let n = a.n_states();
    if terminal.len() != n {
        return Err(Error::Domain(format!(
            "terminal vector has {} entries, chain has {n} states",
            terminal.len()
        )));
    }
    let psi_set = PsiSet::new(a)?;
    driver.spot_check(&psi_set, (grid.t_start(), grid.t_end()), 48, 0x11b5)?;
    let load =
        grid.step() * (driver.l1 + driver.l2 * (3.0 * a.m_bound()).sqrt() + a.m_bound());
    if load > 0.5 {
        eprintln!(
            "warning: explicit step may be too coarse, h (l1 + l2 sqrt(3m) + |A|) = {load:.3}"
        );
    }
    let at = a.entries().transpose();
    let rhs = |t: f64, v: &DVector<f64>| -> DVector<f64> {
        let atv = &at * v;
        DVector::from_fn(n, |i, _| {
            let z = psi_set.project(i, v);
            -(driver.f)(t, v[i], &z, i) - atv[i]
        })
    };
    let u = integrate_backward(grid, terminal.clone(), &rhs, "classical backward solve")?;
    let z = project_surface(&psi_set, &u);
    Ok(SolutionSurface::from_parts(grid.clone(), u, z))
}

/// `Y` along a path: `Y_{t_k} = u(t_k, X_{t_k})`, right-continuous in time.
pub fn evaluate_along_path(surface: &SolutionSurface, path: &ChainPath) -> Vec<f64> {
    assert!(
        path.horizon >= surface.grid().t_end() - 1e-12,
        "path must cover the solution grid"
    );
    (0..surface.grid().n_nodes())
        .map(|k| surface.u_at(k, path.state_at(surface.grid().node(k))))
        .collect()
}
