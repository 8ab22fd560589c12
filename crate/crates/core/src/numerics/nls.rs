use crate::error::{Error, Result};

pub const DEFAULT_GRID_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlsFit {
    pub argmin: f64,
    pub objective: f64,
    pub grid_argmin: f64,
    pub grid_objective: f64,
}

fn sum_sq(r: &[f64]) -> f64 {
    if r.iter().all(|v| v.is_finite()) {
        r.iter().map(|v| v * v).sum()
    } else {
        f64::INFINITY
    }
}

/// Minimizes `‖residual(T)‖²` over `bracket` by a coarse grid scan followed by
/// Brent refinement (parabolic steps with golden-section fallback) between the
/// grid neighbours of the best node.
pub fn fit_scalar_nls<F>(mut residual: F, bracket: (f64, f64), tol: f64) -> Result<NlsFit>
where
    F: FnMut(f64) -> Vec<f64>,
{
    let (lo, hi) = bracket;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::domain(format!("invalid bracket [{lo}, {hi}]")));
    }
    if !(tol > 0.0) {
        return Err(Error::domain("tolerance must be positive"));
    }
    let n = DEFAULT_GRID_POINTS;
    let step = (hi - lo) / (n - 1) as f64;
    let grid: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let t = if i == n - 1 { hi } else { lo + step * i as f64 };
            (t, sum_sq(&residual(t)))
        })
        .collect();
    let (best_i, &(grid_t, grid_obj)) = grid
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("grid is non-empty");
    if !grid_obj.is_finite() {
        return Err(Error::EstimationFailed(
            "all residuals are non-finite".into(),
        ));
    }
    let a = grid[best_i.saturating_sub(1)].0;
    let b = grid[(best_i + 1).min(n - 1)].0;
    let (t_ref, obj_ref) = brent(
        &mut |t| sum_sq(&residual(t)),
        a,
        b,
        grid_t,
        grid_obj,
        tol * 1e-2,
    );
    let (argmin, objective) = if obj_ref <= grid_obj {
        (t_ref, obj_ref)
    } else {
        (grid_t, grid_obj)
    };
    Ok(NlsFit {
        argmin,
        objective,
        grid_argmin: grid_t,
        grid_objective: grid_obj,
    })
}

fn brent(
    f: &mut dyn FnMut(f64) -> f64,
    mut a: f64,
    mut b: f64,
    x0: f64,
    fx0: f64,
    tol: f64,
) -> (f64, f64) {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let (mut x, mut w, mut v) = (x0, x0, x0);
    let (mut fx, mut fw, mut fv) = (fx0, fx0, fx0);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let tol1 = tol + 1e-12 * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + tol1.copysign(d)
        };
        let fu = f(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            (v, fv) = (w, fw);
            (w, fw) = (x, fx);
            (x, fx) = (u, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, fv) = (w, fw);
                (w, fw) = (u, fu);
            } else if fu <= fv || v == x || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    (x, fx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_residual() {
        let fit = fit_scalar_nls(|t| vec![t - 1.2], (0.5, 3.0), 1e-6).unwrap();
        assert!((fit.argmin - 1.2).abs() < 1e-6);
    }

    #[test]
    fn flat_bottom() {
        let fit = fit_scalar_nls(|t| vec![(t - 2.0).powi(2) + 0.1], (0.5, 3.0), 1e-4).unwrap();
        assert!((fit.argmin - 2.0).abs() < 1e-2, "{}", fit.argmin);
        assert!((fit.objective - 0.01).abs() < 1e-9);
    }

    #[test]
    fn all_nan_fails() {
        let r = fit_scalar_nls(|_| vec![f64::NAN], (0.5, 3.0), 1e-6);
        assert!(matches!(r, Err(Error::EstimationFailed(_))));
    }

    #[test]
    fn boundary_minimum() {
        let fit = fit_scalar_nls(|t| vec![t - 5.0], (0.5, 3.0), 1e-6).unwrap();
        assert!((fit.argmin - 3.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn refinement_is_monotone_and_matches_dense_grid(c in 0.5f64..3.0, k in 0.2f64..4.0) {
            let res = |t: f64| vec![(k * (t - c)).sin(), 0.3 * (t - c)];
            let fit = fit_scalar_nls(res, (0.5, 3.0), 1e-6).unwrap();
            prop_assert!(fit.objective <= fit.grid_objective);
            let dense = (0..=20_000)
                .map(|i| 0.5 + 2.5 * i as f64 / 20_000.0)
                .map(|t| { let r = res(t); (t, r[0] * r[0] + r[1] * r[1]) })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            prop_assert!(fit.objective <= dense.1 + 1e-9);
        }
    }
}
