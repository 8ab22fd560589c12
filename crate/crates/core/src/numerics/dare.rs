use nalgebra::{DMatrix, Matrix2, RowVector2, Vector2};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    /// State feedback `u = K·x`.
    pub k: DMatrix<f64>,
    pub iterations: usize,
}

const MAX_ITER: usize = 100_000;

fn gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    p: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let btp = b.transpose() * p;
    let s = r + &btp * b;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::domain("R + BᵀPB is singular"))?;
    Ok(-(s_inv * btp * a))
}

/// Riccati map `AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q` minus `P`, in ∞-norm.
pub fn riccati_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64> {
    let k = gain(a, b, p, r)?;
    let atp = a.transpose() * p;
    let next = &atp * a + &atp * b * &k + q;
    Ok((next - p).amax())
}

/// Fixed-point iteration of the discrete algebraic Riccati equation from `P₀ = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
) -> Result<DareSolution> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: q.nrows(),
        });
    }
    if b.nrows() != n {
        return Err(Error::Dimension {
            expected: n,
            got: b.nrows(),
        });
    }
    if r.nrows() != b.ncols() || r.ncols() != b.ncols() {
        return Err(Error::Dimension {
            expected: b.ncols(),
            got: r.nrows(),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::domain("tolerance must be positive"));
    }
    for m in [a, b, q, r] {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite Riccati data"));
        }
    }
    let mut p = q.clone();
    for it in 1..=MAX_ITER {
        let k = gain(a, b, &p, r)?;
        let atp = a.transpose() * &p;
        let mut next = &atp * a + &atp * b * &k + q;
        next = (&next + next.transpose()) * 0.5;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::MaxIterations(it));
        }
        let diff = (&next - &p).amax();
        p = next;
        if diff <= tol {
            let k = gain(a, b, &p, r)?;
            return Ok(DareSolution {
                p,
                k,
                iterations: it,
            });
        }
    }
    Err(Error::MaxIterations(MAX_ITER))
}

/// Two-state, single-input convenience wrapper.
pub fn solve_dare_2x2(
    a: &Matrix2<f64>,
    b: &Vector2<f64>,
    q: &Matrix2<f64>,
    r: f64,
    tol: f64,
) -> Result<(Matrix2<f64>, RowVector2<f64>)> {
    let sol = solve_dare(
        &DMatrix::from_column_slice(2, 2, a.as_slice()),
        &DMatrix::from_column_slice(2, 1, b.as_slice()),
        &DMatrix::from_column_slice(2, 2, q.as_slice()),
        &DMatrix::from_element(1, 1, r),
        tol,
    )?;
    let p = Matrix2::from_column_slice(sol.p.as_slice());
    let k = RowVector2::new(sol.k[(0, 0)], sol.k[(0, 1)]);
    Ok((p, k))
}
