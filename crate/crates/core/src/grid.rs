//! Uniform time grids. Nodes are computed as `t_start + k * step` so that
//! derived grids (prefixes, extensions) share node values bit for bit.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    step: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Grid("grid needs at least one step".into()));
        }
        if !t_start.is_finite() || !t_end.is_finite() || t_end <= t_start {
            return Err(Error::Grid(format!(
                "invalid grid bounds [{t_start}, {t_end}]"
            )));
        }
        Ok(Self {
            t_start,
            step: (t_end - t_start) / n_steps as f64,
            n_steps,
        })
    }

    pub fn from_step(t_start: f64, step: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || !step.is_finite() || step <= 0.0 || !t_start.is_finite() {
            return Err(Error::Grid(format!(
                "invalid grid: start {t_start}, step {step}, {n_steps} steps"
            )));
        }
        Ok(Self {
            t_start,
            step,
            n_steps,
        })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    /// Canonical end point, always `node(n_steps)`.
    pub fn t_end(&self) -> f64 {
        self.node(self.n_steps)
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn node(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.step
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes()).map(|k| self.node(k))
    }

    /// First `n` steps with the step size preserved exactly.
    pub fn prefix(&self, n_steps: usize) -> Self {
        assert!(n_steps >= 1 && n_steps <= self.n_steps);
        Self {
            t_start: self.t_start,
            step: self.step,
            n_steps,
        }
    }

    /// Same step, `extra` more steps at the end.
    pub fn extended(&self, extra: usize) -> Self {
        Self {
            t_start: self.t_start,
            step: self.step,
            n_steps: self.n_steps + extra,
        }
    }

    /// Cell index `k` with `t ∈ (node(k), node(k+1)]`, clamped to the grid.
    /// Matches the left-continuous convention for step-function integrands.
    pub fn cell_of(&self, t: f64) -> usize {
        let raw = ((t - self.t_start) / self.step).ceil() - 1.0;
        if raw < 0.0 {
            0
        } else {
            (raw as usize).min(self.n_steps - 1)
        }
    }

    /// Bracketing nodes and interpolation weight for `t`, clamped.
    pub fn bracket(&self, t: f64) -> (usize, usize, f64) {
        let raw = (t - self.t_start) / self.step;
        if raw <= 0.0 {
            return (0, 0, 0.0);
        }
        if raw >= self.n_steps as f64 {
            return (self.n_steps, self.n_steps, 0.0);
        }
        let k = (raw.floor() as usize).min(self.n_steps - 1);
        let w = ((t - self.node(k)) / self.step).clamp(0.0, 1.0);
        (k, k + 1, w)
    }

    /// Trapezoid quadrature weight of node `k`.
    pub fn trapezoid_weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.n_steps {
            0.5 * self.step
        } else {
            self.step
        }
    }

    /// Index of `t` if it is (numerically) a grid node.
    pub fn index_of(&self, t: f64, tol: f64) -> Option<usize> {
        let raw = (t - self.t_start) / self.step;
        let k = raw.round();
        if k < 0.0 || k > self.n_steps as f64 {
            return None;
        }
        let k = k as usize;
        if (self.node(k) - t).abs() <= tol {
            Some(k)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_and_weights() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(g.n_nodes(), 5);
        assert_eq!(g.node(2), 0.5);
        assert_eq!(g.trapezoid_weight(0), 0.125);
        assert_eq!(g.trapezoid_weight(2), 0.25);
        let total: f64 = (0..g.n_nodes()).map(|k| g.trapezoid_weight(k)).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cell_is_left_continuous() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(g.cell_of(0.25), 0);
        assert_eq!(g.cell_of(0.2500001), 1);
        assert_eq!(g.cell_of(1.0), 3);
        assert_eq!(g.cell_of(0.0), 0);
    }

    #[test]
    fn bracket_clamps() {
        let g = TimeGrid::new(0.0, 2.0, 8).unwrap();
        assert_eq!(g.bracket(-1.0), (0, 0, 0.0));
        assert_eq!(g.bracket(3.0), (8, 8, 0.0));
        let (k0, k1, w) = g.bracket(0.6);
        assert_eq!((k0, k1), (2, 3));
        assert!((w - 0.4).abs() < 1e-12);
    }

    #[test]
    fn prefix_preserves_step_bits() {
        let g = TimeGrid::new(0.0, 1.25, 100).unwrap();
        let p = g.prefix(80);
        assert_eq!(p.step().to_bits(), g.step().to_bits());
        assert_eq!(p.node(80).to_bits(), g.node(80).to_bits());
    }

    #[test]
    fn degenerate_grids_rejected() {
        assert!(TimeGrid::new(0.0, 0.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::from_step(0.0, -0.1, 4).is_err());
    }
}
