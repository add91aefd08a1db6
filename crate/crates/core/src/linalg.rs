//! Linear solvers for the implicit step.

use crate::error::{Error, Result};

/// Solves a tridiagonal system by forward elimination and back
/// substitution. `lower[i]` couples row `i + 1` to `i`, `upper[i]` couples
/// row `i` to `i + 1`.
///
/// For an M-matrix with a nonnegative right-hand side every intermediate
/// quantity keeps its sign, so the result is nonnegative in floating point.
pub fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if rhs.len() != n || lower.len() + 1 != n || upper.len() + 1 != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: rhs.len(),
        });
    }
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(Error::invalid("zero pivot in tridiagonal solve"));
    }
    if n > 1 {
        cp[0] = upper[0] / denom;
    }
    dp[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i - 1] * cp[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::invalid(format!("bad pivot {denom} in tridiagonal solve at row {i}")));
        }
        if i + 1 < n {
            cp[i] = upper[i] / denom;
        }
        dp[i] = (rhs[i] - lower[i - 1] * dp[i - 1]) / denom;
    }
    let mut x = dp;
    for i in (0..n - 1).rev() {
        x[i] -= cp[i] * x[i + 1];
    }
    Ok(x)
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for an SPD operator given as a
/// matrix-vector product. `x` holds the initial guess and the result.
/// Stops when `||b - A x|| <= tol ||b||`, and, with `weights`, also when
/// `Σ w |b - A x| <= tol Σ w |b|`. Convergence is confirmed on the true residual.
pub fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
    weights: Option<&[f64]>,
) -> Result<SolveStats> {
    let n = b.len();
    if weights.is_some_and(|w| w.len() != n) {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: weights.map_or(0, |w| w.len()),
        });
    }
    let bnorm = norm(b);
    let bweighted = weights.map(|w| weighted_l1(w, b));
    let measure = |r: &[f64]| -> f64 {
        let plain = norm(r) / bnorm;
        match (weights, bweighted) {
            (Some(w), Some(bw)) if bw > 0.0 => plain.max(weighted_l1(w, r) / bw),
            _ => plain,
        }
    };
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats {
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(a, d)| a / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut res = measure(&r);
    let mut it = 0;
    while res > tol {
        if it >= max_iter {
            return Err(Error::SolverFailure {
                iterations: it,
                residual: res,
            });
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::SolverFailure {
                iterations: it,
                residual: res,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        it += 1;
        res = measure(&r);
        // the recurrence drifts from the true residual, so confirm on the
        // latter and restart from it
        let restart = res <= tol;
        if restart {
            apply(x, &mut ap);
            for i in 0..n {
                r[i] = b[i] - ap[i];
            }
            res = measure(&r);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = if restart { 0.0 } else { rz_new / rz };
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(SolveStats {
        iterations: it,
        residual: res,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn weighted_l1(w: &[f64], a: &[f64]) -> f64 {
    w.iter().zip(a).map(|(w, a)| w * a.abs()).sum()
}
