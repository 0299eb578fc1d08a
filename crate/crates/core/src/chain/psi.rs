//! The Ψ-calculus. `Ψ_t = diag(A X_t) - diag(X_t) A' - A diag(X_t)` is the
//! density of the predictable bracket `⟨X, X⟩`; it is symmetric, positive
//! semidefinite and rank-deficient (rows sum to zero). Martingale integrands
//! are measured in the seminorm `||C||^2_X = Tr(C' Ψ C)` and projected with
//! `Ψ Ψ†`, built from the Moore-Penrose pseudoinverse.

use nalgebra::{DMatrix, DVector, Dyn};

use super::RateMatrix;
use crate::error::{Error, Result};

/// Relative eigenvalue cutoff used when no explicit tolerance is given.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

/// `Ψ(e_i)` together with its pseudoinverse.
#[derive(Debug, Clone)]
pub struct PsiOperator {
    pub state: usize,
    pub psi: DMatrix<f64>,
    pub psi_dagger: DMatrix<f64>,
    pub rank_tolerance: f64,
}

impl PsiOperator {
    /// The projector `Ψ Ψ†` onto the effective range of the noise.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.psi * &self.psi_dagger
    }

    /// Quadratic form `v' Ψ v`; may be a tiny negative from rounding.
    pub fn seminorm_sq_vec(&self, v: &DVector<f64>) -> f64 {
        let n = self.psi.nrows();
        let mut acc = 0.0;
        for r in 0..n {
            let mut row = 0.0;
            for c in 0..n {
                row += self.psi[(r, c)] * v[c];
            }
            acc += v[r] * row;
        }
        acc
    }

    /// Frobenius norm of `Ψ†`, the quantity entering the driver assumption.
    pub fn dagger_norm(&self) -> f64 {
        self.psi_dagger.norm()
    }
}

/// Evaluate `Ψ(e_i)` and its pseudoinverse with the default rank cutoff.
pub fn psi(a: &RateMatrix, state: usize) -> Result<PsiOperator> {
    psi_with_tolerance(a, state, DEFAULT_RANK_TOLERANCE)
}

pub fn psi_with_tolerance(a: &RateMatrix, state: usize, tol: f64) -> Result<PsiOperator> {
    a.check_state(state)?;
    let n = a.n_states();
    let col = a.entries().column(state);
    // diag(A e_i) - diag(e_i) A' - A diag(e_i): only row/column `state` and the
    // diagonal are touched.
    let mut psi = DMatrix::zeros(n, n);
    for k in 0..n {
        psi[(k, k)] += col[k];
        psi[(state, k)] -= col[k];
        psi[(k, state)] -= col[k];
    }
    let se = psi.clone().symmetric_eigen();
    let max_abs: f64 = se.eigenvalues.amax();
    if se.eigenvalues.iter().any(|&l| l < -tol * max_abs.max(1.0)) {
        return Err(Error::Domain(format!(
            "Psi(e_{state}) is not positive semidefinite (min eigenvalue {:.3e})",
            se.eigenvalues.min()
        )));
    }
    let psi_dagger = pinv_from_eigen(&se, tol);
    Ok(PsiOperator {
        state,
        psi,
        psi_dagger,
        rank_tolerance: tol,
    })
}

fn pinv_from_eigen(se: &nalgebra::SymmetricEigen<f64, Dyn>, tol: f64) -> DMatrix<f64> {
    let max_abs = se.eigenvalues.amax();
    let cutoff = tol * max_abs;
    let inv = se.eigenvalues.map(|l| if l.abs() <= cutoff { 0.0 } else { 1.0 / l });
    &se.eigenvectors * DMatrix::from_diagonal(&inv) * se.eigenvectors.transpose()
}

/// Moore-Penrose pseudoinverse of a symmetric matrix via its eigensystem.
/// Eigenvalues with `|λ| <= tol * max|λ|` are treated as zero.
pub fn pseudoinverse(q: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let n = q.nrows();
    assert_eq!(n, q.ncols(), "pseudoinverse expects a square matrix");
    let mut dev = 0.0f64;
    for r in 0..n {
        for c in (r + 1)..n {
            dev = dev.max((q[(r, c)] - q[(c, r)]).abs());
        }
    }
    let sym_tol = tol * q.amax().max(1.0);
    if dev > sym_tol {
        return Err(Error::NotSymmetric {
            deviation: dev,
            tol: sym_tol,
        });
    }
    let sym = (q + q.transpose()) * 0.5;
    let se = sym.symmetric_eigen();
    Ok(pinv_from_eigen(&se, tol))
}

/// The seminorm `||C||_X = sqrt(Tr(C' Ψ C))`. Tiny negative traces are
/// clamped; anything beyond the tolerance signals a non-PSD `Ψ`.
pub fn seminorm(c: &DMatrix<f64>, op: &PsiOperator) -> Result<f64> {
    assert_eq!(
        c.nrows(),
        op.psi.nrows(),
        "integrand rows must match the state count"
    );
    let mut trace = 0.0;
    for k in 0..c.ncols() {
        trace += op.seminorm_sq_vec(&c.column(k).into_owned());
    }
    let tol = op.rank_tolerance * (1.0 + op.psi.norm() * c.norm_squared());
    if trace < -tol {
        return Err(Error::NegativeSeminorm { trace, tol });
    }
    Ok(trace.max(0.0).sqrt())
}

/// Per-state Ψ data for a whole chain, with the derived quantities used by
/// the solvers: projectors `Ψ Ψ†`, the drift contractions `Ψ† A e_i` and the
/// jump vectors `Ψ†(e_j - e_i)`.
#[derive(Debug, Clone)]
pub struct PsiSet {
    ops: Vec<PsiOperator>,
    projectors: Vec<DMatrix<f64>>,
    dagger_a_cols: Vec<DVector<f64>>,
    jump_vectors: Vec<Vec<DVector<f64>>>,
    m_bound: f64,
}

impl PsiSet {
    pub fn new(a: &RateMatrix) -> Result<Self> {
        Self::with_tolerance(a, DEFAULT_RANK_TOLERANCE)
    }

    pub fn with_tolerance(a: &RateMatrix, tol: f64) -> Result<Self> {
        let n = a.n_states();
        let ops = (0..n)
            .map(|i| psi_with_tolerance(a, i, tol))
            .collect::<Result<Vec<_>>>()?;
        let projectors = ops.iter().map(|op| op.projector()).collect::<Vec<_>>();
        let dagger_a_cols = (0..n)
            .map(|i| &ops[i].psi_dagger * a.entries().column(i))
            .collect::<Vec<_>>();
        let jump_vectors = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let d = &ops[i].psi_dagger;
                        DVector::from_fn(n, |r, _| d[(r, j)] - d[(r, i)])
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            ops,
            projectors,
            dagger_a_cols,
            jump_vectors,
            m_bound: a.m_bound(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.ops.len()
    }

    pub fn m_bound(&self) -> f64 {
        self.m_bound
    }

    pub fn op(&self, state: usize) -> &PsiOperator {
        &self.ops[state]
    }

    pub fn projector(&self, state: usize) -> &DMatrix<f64> {
        &self.projectors[state]
    }

    /// `Ψ Ψ† v`, the canonical representative of the integrand in state `i`.
    pub fn project(&self, state: usize, v: &DVector<f64>) -> DVector<f64> {
        &self.projectors[state] * v
    }

    /// `v' Ψ_i v`, clamped at zero.
    pub fn seminorm_sq(&self, state: usize, v: &DVector<f64>) -> f64 {
        self.ops[state].seminorm_sq_vec(v).max(0.0)
    }

    /// `v' Ψ†_i v`, clamped at zero. For a linear driver term `b·z` this
    /// gives the square of its Lipschitz constant in the `||.||_X` seminorm.
    pub fn dual_seminorm_sq(&self, state: usize, v: &DVector<f64>) -> f64 {
        let d = &self.ops[state].psi_dagger;
        let n = d.nrows();
        let mut acc = 0.0;
        for r in 0..n {
            let mut row = 0.0;
            for c in 0..n {
                row += d[(r, c)] * v[c];
            }
            acc += v[r] * row;
        }
        acc.max(0.0)
    }

    /// `Ψ†_i A e_i`; since `Ψ†` is symmetric this is `(Ψ†)' A X` in state `i`.
    pub fn dagger_a_column(&self, state: usize) -> &DVector<f64> {
        &self.dagger_a_cols[state]
    }

    /// `Ψ†_i (e_j - e_i)`, the direction a jump `i -> j` feeds through `(Ψ†)'`.
    pub fn jump_vector(&self, from: usize, to: usize) -> &DVector<f64> {
        &self.jump_vectors[from][to]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::path_rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn two_state() -> RateMatrix {
        RateMatrix::from_rows(2, &[-1.0, 1.0, 1.0, -1.0]).unwrap()
    }

    #[test]
    fn two_state_psi_by_hand() {
        let op = psi(&two_state(), 0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!((op.psi.clone() - expected).amax() < 1e-14);
    }

    #[test]
    fn single_state_psi_is_zero() {
        let a = RateMatrix::from_rows(1, &[0.0]).unwrap();
        let op = psi(&a, 0).unwrap();
        assert_eq!(op.psi[(0, 0)], 0.0);
        assert_eq!(op.psi_dagger[(0, 0)], 0.0);
    }

    #[test]
    fn pseudoinverse_of_rank_one_projector() {
        // Ψ = 2P with P the rank-1 projector (1/2)[[1,-1],[-1,1]], so Ψ† = P/2.
        let q = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let d = pseudoinverse(&q, 1e-10).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert!((d - expected).amax() < 1e-12);
    }

    #[test]
    fn pseudoinverse_fixed_points() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert!(pseudoinverse(&z, 1e-10).unwrap().amax() == 0.0);
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((pseudoinverse(&id, 1e-10).unwrap() - id).amax() < 1e-14);
    }

    #[test]
    fn pseudoinverse_rejects_asymmetric_input() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            pseudoinverse(&q, 1e-10),
            Err(Error::NotSymmetric { .. })
        ));
    }

    fn penrose_residuals(q: &DMatrix<f64>, d: &DMatrix<f64>) -> [f64; 4] {
        let qd = q * d;
        let dq = d * q;
        [
            (&qd * q - q).norm(),
            (&dq * d - d).norm(),
            (qd.transpose() - &qd).norm(),
            (dq.transpose() - &dq).norm(),
        ]
    }

    #[test]
    fn penrose_identities_hold_for_psi() {
        let a =
            RateMatrix::from_rows(3, &[-2.0, 1.0, 0.5, 1.5, -1.0, 0.5, 0.5, 0.0, -1.0]).unwrap();
        for i in 0..3 {
            let op = psi(&a, i).unwrap();
            for r in penrose_residuals(&op.psi, &op.psi_dagger) {
                assert!(r < 1e-10, "Penrose residual {r:.3e} in state {i}");
            }
        }
    }

    #[test]
    fn seminorm_examples() {
        let op = psi(&two_state(), 0).unwrap();
        let zero = DMatrix::<f64>::zeros(2, 3);
        assert_eq!(seminorm(&zero, &op).unwrap(), 0.0);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert_abs_diff_eq!(seminorm(&b, &op).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn seminorm_rejects_non_psd() {
        let bad = PsiOperator {
            state: 0,
            psi: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]),
            psi_dagger: DMatrix::zeros(2, 2),
            rank_tolerance: 1e-10,
        };
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert!(matches!(
            seminorm(&b, &bad),
            Err(Error::NegativeSeminorm { .. })
        ));
    }

    #[test]
    fn vector_norm_bound_on_random_vectors() {
        let a =
            RateMatrix::from_rows(3, &[-2.0, 1.0, 0.5, 1.5, -1.0, 0.5, 0.5, 0.0, -1.0]).unwrap();
        let set = PsiSet::new(&a).unwrap();
        let bound = (3.0 * a.m_bound()).sqrt();
        let mut rng = path_rng(77, 0);
        for _ in 0..1000 {
            let b = DVector::from_fn(3, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            for i in 0..3 {
                let lhs = set.seminorm_sq(i, &b).sqrt();
                assert!(lhs <= bound * b.norm() + 1e-12);
            }
        }
    }

    #[test]
    fn projector_reproduces_jump_vector_identity() {
        let a = two_state();
        let set = PsiSet::new(&a).unwrap();
        // Ψ†(e_1 - e_0) for state 0 is (-1/2, 1/2) by the hand pseudoinverse.
        let w = set.jump_vector(0, 1);
        assert_abs_diff_eq!(w[0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 0.5, epsilon = 1e-12);
    }

    fn arb_generator(n: usize) -> impl Strategy<Value = RateMatrix> {
        proptest::collection::vec(0.0f64..2.0, n * n).prop_map(move |rates| {
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                let mut sum = 0.0;
                for j in 0..n {
                    if i != j {
                        let r = rates[j * n + i];
                        m[(j, i)] = r;
                        sum += r;
                    }
                }
                m[(i, i)] = -sum;
            }
            RateMatrix::new(m).unwrap()
        })
    }

    proptest! {
        #[test]
        fn psi_is_symmetric_psd_with_zero_row_sums(a in arb_generator(4), state in 0usize..4) {
            let op = psi(&a, state).unwrap();
            prop_assert!((op.psi.transpose() - &op.psi).amax() == 0.0);
            for r in 0..4 {
                let row_sum: f64 = (0..4).map(|c| op.psi[(r, c)]).sum();
                prop_assert!(row_sum.abs() < 1e-12);
            }
            let eigs = op.psi.clone().symmetric_eigen().eigenvalues;
            prop_assert!(eigs.min() > -1e-10);
        }

        #[test]
        fn penrose_identities_random_generators(a in arb_generator(5), state in 0usize..5) {
            // rates may differ by orders of magnitude, so each residual is
            // measured against the scale of the matrix it reconstructs
            let op = psi(&a, state).unwrap();
            let r = penrose_residuals(&op.psi, &op.psi_dagger);
            prop_assert!(r[0] <= 1e-10 * op.psi.norm().max(1.0));
            prop_assert!(r[1] <= 1e-10 * op.psi_dagger.norm().max(1.0));
            prop_assert!(r[2] <= 1e-10);
            prop_assert!(r[3] <= 1e-10);
        }
    }
}
