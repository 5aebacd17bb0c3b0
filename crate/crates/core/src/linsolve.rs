//! Dense Gauss-Seidel solver for small square systems.
//!
//! The iteration updates components in ascending order and reuses the
//! components already updated within the same sweep:
//!
//! ```text
//! x_i' = (b_i - sum_{j<i} a_ij * x_j' - sum_{j>i} a_ij * x_j) / a_ii
//! ```
//!
//! This is forward substitution against the lower-triangular part of `A`
//! (diagonal included) with the strictly upper part moved to the right-hand
//! side. Neither triangle is materialized; the sweep walks the row directly.
//!
//! The benchmark path always runs a fixed number of sweeps so that every call
//! performs the same amount of work. [`gauss_seidel_until`] exists for
//! diagnostics and is never used while timing.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating a supplied known solution.
pub const KNOWN_SOLUTION_RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinsolveError {
    #[error("coefficient matrix has {len} entries, which is not {n}x{n}")]
    NotSquare { n: usize, len: usize },
    #[error("empty system")]
    Empty,
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("zero diagonal entry at row {row}")]
    ZeroDiagonal { row: usize },
    #[error("non-finite coefficient at ({row}, {col})")]
    NonFiniteCoefficient { row: usize, col: usize },
    #[error("known solution does not satisfy the system: residual {residual:e}")]
    BadKnownSolution { residual: f64 },
    #[error("iteration diverged: non-finite component {component} after sweep {iteration}")]
    Diverged { iteration: usize, component: usize },
    #[error("matrix is singular (no usable pivot in column {column})")]
    Singular { column: usize },
}

pub type Result<T> = std::result::Result<T, LinsolveError>;

/// A square system `A x = b`, optionally carrying its exact solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    n: usize,
    /// Row-major `n * n` coefficients.
    a: Vec<f64>,
    b: Vec<f64>,
    known_solution: Option<Vec<f64>>,
}

impl LinearSystem {
    /// Builds a system from rows of `A` and the vector `b`.
    pub fn from_rows(rows: &[Vec<f64>], b: Vec<f64>) -> Result<Self> {
        let n = rows.len();
        let mut a = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(LinsolveError::NotSquare {
                    n,
                    len: rows.iter().map(Vec::len).sum(),
                });
            }
            a.extend_from_slice(row);
        }
        Self::new(n, a, b)
    }

    pub fn new(n: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(LinsolveError::Empty);
        }
        if a.len() != n * n {
            return Err(LinsolveError::NotSquare { n, len: a.len() });
        }
        check_len("b", n, b.len())?;
        for (idx, v) in a.iter().enumerate() {
            if !v.is_finite() {
                return Err(LinsolveError::NonFiniteCoefficient {
                    row: idx / n,
                    col: idx % n,
                });
            }
        }
        for row in 0..n {
            if a[row * n + row] == 0.0 {
                return Err(LinsolveError::ZeroDiagonal { row });
            }
        }
        Ok(Self {
            n,
            a,
            b,
            known_solution: None,
        })
    }

    /// Attaches the exact solution; rejected unless `‖A·x* − b‖∞ ≤ 1e-9`.
    pub fn with_known_solution(mut self, x: Vec<f64>) -> Result<Self> {
        check_len("known_solution", self.n, x.len())?;
        let residual = residual_inf_norm(&self, &x)?;
        if !(residual <= KNOWN_SOLUTION_RESIDUAL_TOL) {
            return Err(LinsolveError::BadKnownSolution { residual });
        }
        self.known_solution = Some(x);
        Ok(self)
    }

    pub fn identity(b: Vec<f64>) -> Result<Self> {
        let n = b.len();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        Self::new(n, a, b)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn coeff(&self, row: usize, col: usize) -> f64 {
        self.a[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.a[row * self.n..(row + 1) * self.n]
    }

    pub fn rhs(&self) -> &[f64] {
        &self.b
    }

    pub fn known_solution(&self) -> Option<&[f64]> {
        self.known_solution.as_deref()
    }

    /// Applies the same permutation to rows and columns of `A` and to `b`.
    /// `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_len("permutation", self.n, perm.len())?;
        let n = self.n;
        let mut a = vec![0.0; n * n];
        for (ni, &oi) in perm.iter().enumerate() {
            for (nj, &oj) in perm.iter().enumerate() {
                a[ni * n + nj] = self.coeff(oi, oj);
            }
        }
        let b = perm.iter().map(|&o| self.b[o]).collect();
        let mut out = Self::new(n, a, b)?;
        out.known_solution = self
            .known_solution
            .as_ref()
            .map(|x| perm.iter().map(|&o| x[o]).collect());
        Ok(out)
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(LinsolveError::Dimension {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

/// A row that fails strict diagonal dominance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominanceViolation {
    /// Zero-based row index.
    pub row: usize,
    pub diagonal_abs: f64,
    pub off_diagonal_abs_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub strictly_dominant: bool,
    pub violating_rows: Vec<DominanceViolation>,
}

impl DominanceReport {
    pub fn violating_indices(&self) -> Vec<usize> {
        self.violating_rows.iter().map(|v| v.row).collect()
    }
}

impl fmt::Display for DominanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.strictly_dominant {
            return write!(f, "strictly diagonally dominant");
        }
        write!(f, "not strictly diagonally dominant:")?;
        for v in &self.violating_rows {
            write!(
                f,
                " row {} (|a_ii| = {} <= {})",
                v.row + 1,
                v.diagonal_abs,
                v.off_diagonal_abs_sum
            )?;
        }
        Ok(())
    }
}

/// Classifies each row against `|a_ii| > sum_{j != i} |a_ij|`.
///
/// A failing report is informational: Gauss-Seidel can still converge on
/// systems that are not strictly dominant.
pub fn check_dominance(system: &LinearSystem) -> DominanceReport {
    let violating_rows: Vec<_> = (0..system.n)
        .filter_map(|i| {
            let diagonal_abs = system.coeff(i, i).abs();
            let off_diagonal_abs_sum: f64 = system
                .row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v.abs())
                .sum();
            (diagonal_abs <= off_diagonal_abs_sum).then_some(DominanceViolation {
                row: i,
                diagonal_abs,
                off_diagonal_abs_sum,
            })
        })
        .collect();
    DominanceReport {
        strictly_dominant: violating_rows.is_empty(),
        violating_rows,
    }
}

#[inline]
fn sweep_in_place(system: &LinearSystem, x: &mut [f64]) {
    let n = system.n;
    for i in 0..n {
        let row = system.row(i);
        let mut acc = system.b[i];
        for j in 0..n {
            if j != i {
                acc -= row[j] * x[j];
            }
        }
        x[i] = acc / row[i];
    }
}

/// One Gauss-Seidel sweep starting from `x`.
pub fn gauss_seidel_sweep(system: &LinearSystem, x: &[f64]) -> Result<Vec<f64>> {
    check_len("x", system.n, x.len())?;
    let mut out = x.to_vec();
    sweep_in_place(system, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub solution: Vec<f64>,
    pub iterations_performed: usize,
    pub final_residual_inf_norm: f64,
}

/// Runs exactly `iterations` sweeps from `x0`. There is no early exit.
pub fn gauss_seidel_solve(
    system: &LinearSystem,
    x0: &[f64],
    iterations: usize,
) -> Result<SolveOutcome> {
    check_len("x0", system.n, x0.len())?;
    let mut x = x0.to_vec();
    for k in 0..iterations {
        sweep_in_place(system, &mut x);
        if let Some(component) = x.iter().position(|v| !v.is_finite()) {
            return Err(LinsolveError::Diverged {
                iteration: k + 1,
                component,
            });
        }
    }
    let final_residual_inf_norm = residual_inf_norm(system, &x)?;
    Ok(SolveOutcome {
        solution: x,
        iterations_performed: iterations,
        final_residual_inf_norm,
    })
}

/// Sweeps until the residual drops to `tol` or `max_iterations` is reached.
/// Not used on timed paths.
pub fn gauss_seidel_until(
    system: &LinearSystem,
    x0: &[f64],
    tol: f64,
    max_iterations: usize,
) -> Result<SolveOutcome> {
    check_len("x0", system.n, x0.len())?;
    let mut x = x0.to_vec();
    let mut residual = residual_inf_norm(system, &x)?;
    let mut k = 0;
    while residual > tol && k < max_iterations {
        sweep_in_place(system, &mut x);
        k += 1;
        if let Some(component) = x.iter().position(|v| !v.is_finite()) {
            return Err(LinsolveError::Diverged {
                iteration: k,
                component,
            });
        }
        residual = residual_inf_norm(system, &x)?;
    }
    Ok(SolveOutcome {
        solution: x,
        iterations_performed: k,
        final_residual_inf_norm: residual,
    })
}

/// `max_i |sum_j a_ij x_j - b_i|`
pub fn residual_inf_norm(system: &LinearSystem, x: &[f64]) -> Result<f64> {
    check_len("x", system.n, x.len())?;
    Ok((0..system.n)
        .map(|i| {
            let ax: f64 = system.row(i).iter().zip(x).map(|(a, v)| a * v).sum();
            (ax - system.b[i]).abs()
        })
        .fold(0.0, f64::max))
}

/// Gaussian elimination with partial pivoting.
///
/// Reference solver for cross-checking iterative results; the benchmark
/// never calls it.
pub fn direct_solve(system: &LinearSystem) -> Result<Vec<f64>> {
    let n = system.n;
    let mut m = system.a.clone();
    let mut rhs = system.b.clone();
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));

    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r1, &r2| m[r1 * n + col].abs().total_cmp(&m[r2 * n + col].abs()))
            .unwrap_or(col);
        if m[pivot * n + col].abs() <= scale * f64::EPSILON * n as f64 {
            return Err(LinsolveError::Singular { column: col });
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            rhs.swap(col, pivot);
        }
        let p = m[col * n + col];
        for r in col + 1..n {
            let factor = m[r * n + col] / p;
            if factor == 0.0 {
                continue;
            }
            m[r * n + col] = 0.0;
            for j in col + 1..n {
                m[r * n + j] -= factor * m[col * n + j];
            }
            rhs[r] -= factor * rhs[col];
        }
    }

    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = rhs[i];
        for j in i + 1..n {
            acc -= m[i * n + j] * x[j];
        }
        x[i] = acc / m[i * n + i];
    }
    Ok(x)
}
