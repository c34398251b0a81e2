//! Matrix-free Krylov solvers and a tridiagonal direct solver.

use crate::error::{Error, Result};

const CG_RESTARTS: usize = 4;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

pub fn remove_mean(a: &mut [f64]) {
    let m = mean(a);
    a.iter_mut().for_each(|v| *v -= m);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveInfo {
    pub iterations: usize,
    /// Final `‖b − A x‖ / ‖b‖` (recomputed, not the recursive estimate).
    pub relative_residual: f64,
}

/// Options of [`cg`].
#[derive(Clone, Copy, Debug)]
pub struct CgOptions<'a> {
    pub tol: f64,
    pub max_iter: usize,
    /// Project iterates and residuals onto zero-mean vectors (periodic
    /// operators whose kernel is the constants).
    pub project_mean: bool,
    /// Jacobi preconditioner (the diagonal of `A`).
    pub diagonal: Option<&'a [f64]>,
}

/// Preconditioned conjugate gradients for a symmetric positive
/// (semi)definite operator, starting from the contents of `x`.
pub fn cg<F>(mut apply: F, b: &[f64], x: &mut [f64], opts: CgOptions<'_>) -> Result<SolveInfo>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveInfo {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    if opts.project_mean {
        remove_mean(x);
    }
    let precondition = |r: &[f64], z: &mut [f64]| match opts.diagonal {
        Some(d) => {
            for i in 0..n {
                z[i] = if d[i] != 0.0 { r[i] / d[i] } else { r[i] };
            }
        }
        None => z.copy_from_slice(r),
    };

    let mut r = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut z = vec![0.0; n];
    let target = opts.tol * bnorm;
    let mut it = 0;
    let mut rel = f64::INFINITY;
    // the recursive residual drifts from the true one; restart from the
    // true residual when it stops short
    for _ in 0..=CG_RESTARTS {
        apply(x, &mut ap);
        for i in 0..n {
            r[i] = b[i] - ap[i];
        }
        if opts.project_mean {
            remove_mean(&mut r);
        }
        rel = norm(&r) / bnorm;
        if rel <= opts.tol || it >= opts.max_iter {
            break;
        }
        precondition(&r, &mut z);
        if opts.project_mean {
            remove_mean(&mut z);
        }
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        while norm(&r) > target && it < opts.max_iter {
            apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            axpy(alpha, &p, x);
            axpy(-alpha, &ap, &mut r);
            if opts.project_mean {
                remove_mean(x);
                remove_mean(&mut r);
            }
            precondition(&r, &mut z);
            if opts.project_mean {
                remove_mean(&mut z);
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
            it += 1;
        }
    }
    if rel > 10.0 * opts.tol {
        return Err(Error::SolverDiverged {
            residual: rel,
            iterations: it,
            slice: None,
        });
    }
    Ok(SolveInfo {
        iterations: it,
        relative_residual: rel,
    })
}

/// BiCGSTAB for nonsymmetric nonsingular operators, starting from `x`.
pub fn bicgstab<F>(mut apply: F, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<SolveInfo>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveInfo {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    apply(x, &mut tmp);
    for i in 0..n {
        r[i] = b[i] - tmp[i];
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let target = tol * bnorm;
    let mut it = 0;
    while norm(&r) > target && it < max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        apply(&p, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) <= target {
            axpy(alpha, &p, x);
            it += 1;
            break;
        }
        apply(&s, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
        it += 1;
        if omega == 0.0 {
            break;
        }
    }
    apply(x, &mut tmp);
    for i in 0..n {
        r[i] = b[i] - tmp[i];
    }
    let rel = norm(&r) / bnorm;
    if rel > 10.0 * tol {
        return Err(Error::SolverDiverged {
            residual: rel,
            iterations: it,
            slice: None,
        });
    }
    Ok(SolveInfo {
        iterations: it,
        relative_residual: rel,
    })
}

/// Thomas algorithm for `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]`
/// (`lower[0]` and `upper[n-1]` are ignored). No pivoting: intended for
/// diagonally dominant systems.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    c[0] = if n > 1 { upper[0] / denom } else { 0.0 };
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if i + 1 < n {
            c[i] = upper[i] / denom;
        }
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}
