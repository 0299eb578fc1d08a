//! Finite-state continuous-time Markov chain: path simulation, transition
//! matrices and the semimartingale decomposition
//! `X_t = X_0 + ∫ A X_s ds + M_t`.
//!
//! States are identified with the unit vectors `e_0, ..., e_{N-1}`. The
//! generator acts on column distributions, `dπ/dt = A π`, so every column of
//! `A` sums to zero and `A[(j, i)]` is the jump rate from state `i` to
//! state `j`.

mod doleans;
mod psi;

pub use doleans::doleans_exponential;
pub use psi::{pseudoinverse, psi, psi_with_tolerance, seminorm, PsiOperator, PsiSet};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Constant generator of the chain (column convention, `dX = A X dt + dM`).
#[derive(Debug, Clone)]
pub struct RateMatrix {
    entries: DMatrix<f64>,
    m_bound: f64,
}

impl RateMatrix {
    const COLUMN_SUM_TOL: f64 = 1e-9;

    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let n = entries.nrows();
        if n == 0 || entries.ncols() != n {
            return Err(Error::InvalidRateMatrix(
                "generator must be square and non-empty".into(),
            ));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidRateMatrix(
                "generator has non-finite entries".into(),
            ));
        }
        let scale = entries.amax().max(1.0);
        for i in 0..n {
            let mut col_sum = 0.0;
            for j in 0..n {
                let v = entries[(j, i)];
                if j != i && v < 0.0 {
                    return Err(Error::InvalidRateMatrix(format!(
                        "negative off-diagonal rate {v} at ({j}, {i})"
                    )));
                }
                col_sum += v;
            }
            if col_sum.abs() > Self::COLUMN_SUM_TOL * scale {
                return Err(Error::InvalidRateMatrix(format!(
                    "column {i} sums to {col_sum:e}, expected 0"
                )));
            }
        }
        let m_bound = entries.norm();
        Ok(Self { entries, m_bound })
    }

    /// Build from row-major entries.
    pub fn from_rows(n: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != n * n {
            return Err(Error::InvalidRateMatrix(format!(
                "expected {} entries for a {n}x{n} generator, got {}",
                n * n,
                rows.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, n, rows))
    }

    pub fn n_states(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Frobenius norm of the generator, the constant `m` in the norm bounds.
    pub fn m_bound(&self) -> f64 {
        self.m_bound
    }

    /// Total jump intensity out of `state`, `-A[(i, i)]`.
    pub fn exit_rate(&self, state: usize) -> f64 {
        -self.entries[(state, state)]
    }

    pub fn check_state(&self, state: usize) -> Result<()> {
        if state < self.n_states() {
            Ok(())
        } else {
            Err(Error::InvalidState {
                state,
                n_states: self.n_states(),
            })
        }
    }
}

/// `exp(A dt)`; column `j` is the law of `X_{t+dt}` given `X_t = e_j`.
pub fn transition_matrix(a: &RateMatrix, dt: f64) -> DMatrix<f64> {
    assert!(dt >= 0.0 && dt.is_finite(), "dt must be finite and >= 0");
    let n = a.n_states();
    if dt == 0.0 {
        return DMatrix::identity(n, n);
    }
    (a.entries() * dt).exp()
}

/// One simulated trajectory on `[0, horizon]`, stored as jump data.
#[derive(Debug, Clone)]
pub struct ChainPath {
    pub initial_state: usize,
    pub jump_times: Vec<f64>,
    pub post_jump_states: Vec<usize>,
    pub horizon: f64,
}

impl ChainPath {
    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Right-continuous state at time `t`.
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&u| u <= t);
        if k == 0 {
            self.initial_state
        } else {
            self.post_jump_states[k - 1]
        }
    }

    /// Left limit of the state at time `t`.
    pub fn state_before(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&u| u < t);
        if k == 0 {
            self.initial_state
        } else {
            self.post_jump_states[k - 1]
        }
    }

    /// Constant-state segments `(start, end, state)` covering `[0, horizon]`.
    pub fn segments(&self) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::with_capacity(self.n_jumps() + 1);
        let mut start = 0.0;
        let mut state = self.initial_state;
        for (m, &u) in self.jump_times.iter().enumerate() {
            out.push((start, u, state));
            start = u;
            state = self.post_jump_states[m];
        }
        out.push((start, self.horizon, state));
        out
    }
}

/// RNG stream for one path, keyed by `(seed, path_index)` so that paths are
/// independent of the order in which they are drawn.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Gillespie simulation of the chain: exponential holding times with rate
/// `-A[(i, i)]`, next state `j` with probability `A[(j, i)] / (-A[(i, i)])`.
pub fn simulate_path(
    a: &RateMatrix,
    initial_state: usize,
    horizon: f64,
    rng_seed: u64,
) -> Result<ChainPath> {
    simulate_path_with_rng(a, initial_state, horizon, &mut path_rng(rng_seed, 0))
}

pub fn simulate_path_with_rng<R: Rng + ?Sized>(
    a: &RateMatrix,
    initial_state: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<ChainPath> {
    a.check_state(initial_state)?;
    if horizon <= 0.0 || !horizon.is_finite() {
        return Err(Error::Domain(format!(
            "horizon must be positive and finite, got {horizon}"
        )));
    }
    let n = a.n_states();
    let mut t = 0.0;
    let mut state = initial_state;
    let mut jump_times = Vec::new();
    let mut post_jump_states = Vec::new();
    loop {
        let rate = a.exit_rate(state);
        if rate <= 0.0 {
            break; // absorbing state
        }
        let mut dt = 0.0;
        while dt <= 0.0 {
            dt = -(1.0 - rng.random::<f64>()).ln() / rate;
        }
        t += dt;
        if t > horizon {
            break;
        }
        let target = rng.random::<f64>() * rate;
        let mut cum = 0.0;
        let mut next = None;
        for j in 0..n {
            if j == state {
                continue;
            }
            cum += a.entries()[(j, state)];
            if target < cum {
                next = Some(j);
                break;
            }
        }
        // Float leftover can leave `target` just above the accumulated sum;
        // fall back to the last reachable state.
        let next = next.unwrap_or_else(|| {
            (0..n)
                .rev()
                .find(|&j| j != state && a.entries()[(j, state)] > 0.0)
                .expect("positive exit rate implies a positive off-diagonal entry")
        });
        jump_times.push(t);
        post_jump_states.push(next);
        state = next;
    }
    Ok(ChainPath {
        initial_state,
        jump_times,
        post_jump_states,
        horizon,
    })
}

/// The martingale part `M_t = X_t - X_0 - ∫_0^t A X_s ds` sampled on a grid.
/// The integral is exact: `X` is piecewise constant between jumps.
#[derive(Debug, Clone)]
pub struct MartingaleSample {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

fn unit_vector(n: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(n);
    e[i] = 1.0;
    e
}

pub fn martingale_increments(
    path: &ChainPath,
    a: &RateMatrix,
    grid: &TimeGrid,
) -> MartingaleSample {
    assert!(
        grid.t_start() >= -1e-12 && grid.t_end() <= path.horizon + 1e-12,
        "grid must lie within [0, horizon]"
    );
    let n = a.n_states();
    let segs = path.segments();
    let x0 = unit_vector(n, path.initial_state);

    let mut integral = DVector::zeros(n);
    let mut cursor = 0.0;
    let mut seg_idx = 0;
    let mut times = Vec::with_capacity(grid.n_nodes());
    let mut values = Vec::with_capacity(grid.n_nodes());
    for k in 0..grid.n_nodes() {
        let tk = grid.node(k);
        while cursor < tk {
            let (s0, s1, st) = segs[seg_idx];
            let lo = cursor.max(s0);
            let hi = s1.min(tk);
            if hi > lo {
                integral.axpy(hi - lo, &a.entries().column(st).into_owned(), 1.0);
                cursor = hi;
            }
            if s1 <= tk && seg_idx + 1 < segs.len() {
                seg_idx += 1;
            } else {
                break;
            }
        }
        let xt = unit_vector(n, path.state_at(tk));
        times.push(tk);
        values.push(&xt - &x0 - &integral);
    }
    MartingaleSample { times, values }
}

/// Pathwise stochastic integral `∫ Z' dM` for a deterministic step function
/// `Z(s) = z[k]` on `(node(k), node(k+1)]`. Evaluated exactly as
/// `Σ_jumps Z'ΔX - ∫ Z' A X_s ds` with the time integral in closed form per
/// constant-state segment.
pub fn stochastic_integral(
    path: &ChainPath,
    a: &RateMatrix,
    grid: &TimeGrid,
    z: &[DVector<f64>],
) -> f64 {
    assert_eq!(z.len(), grid.n_steps(), "one Z value per grid cell");
    let mut total = 0.0;
    for (m, &u) in path.jump_times.iter().enumerate() {
        if u <= grid.t_start() || u > grid.t_end() {
            continue;
        }
        let k = grid.cell_of(u);
        let pre = path.state_before(u);
        let post = path.post_jump_states[m];
        total += z[k][post] - z[k][pre];
    }
    for_each_refined_segment(path, grid, |k, lo, hi, state| {
        total -= z[k].dot(&a.entries().column(state).into_owned()) * (hi - lo);
    });
    total
}

/// Pathwise `∫ ||Z_s||^2_{X_s} ds` for the same step-function convention.
pub fn seminorm_sq_integral(
    path: &ChainPath,
    psi_set: &PsiSet,
    grid: &TimeGrid,
    z: &[DVector<f64>],
) -> f64 {
    assert_eq!(z.len(), grid.n_steps(), "one Z value per grid cell");
    let mut total = 0.0;
    for_each_refined_segment(path, grid, |k, lo, hi, state| {
        total += psi_set.seminorm_sq(state, &z[k]) * (hi - lo);
    });
    total
}

/// Visit the refinement of grid cells by path segments: `f(cell, lo, hi,
/// state)` for every maximal interval with constant state inside one cell.
fn for_each_refined_segment<F: FnMut(usize, f64, f64, usize)>(
    path: &ChainPath,
    grid: &TimeGrid,
    mut f: F,
) {
    let segs = path.segments();
    for k in 0..grid.n_steps() {
        let (c0, c1) = (grid.node(k), grid.node(k + 1));
        for &(s0, s1, st) in &segs {
            let lo = s0.max(c0);
            let hi = s1.min(c1);
            if hi > lo {
                f(k, lo, hi, st);
            }
        }
    }
}
