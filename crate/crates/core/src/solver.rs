//! Matrix-free conjugate gradients for the symmetric systems that appear in
//! the implicit diffusion and pressure solves.

use crate::domain::dot;
use crate::error::{Error, Result};

/// Default relative residual target for every CG solve.
pub const CG_REL_TOL: f64 = 1e-10;

/// Iteration cap `10 * sqrt(n)`.
pub fn default_max_iter(n: usize) -> usize {
    ((10.0 * (n as f64).sqrt()).ceil() as usize).max(10)
}

#[derive(Clone, Copy, Debug)]
pub struct CgOptions {
    pub rel_tol: f64,
    /// Converged once `||r||_2 <= abs_tol` even if the relative target is not met.
    pub abs_tol: f64,
    pub max_iter: usize,
    /// Remove the constant component from the residual (singular Neumann systems).
    pub zero_mean: bool,
    pub name: &'static str,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub rel_residual: f64,
}

fn remove_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Solves `A x = b` for symmetric positive (semi-)definite `A`, starting from
/// the contents of `x`.
pub fn conjugate_gradient(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    opts: &CgOptions,
) -> Result<CgStats> {
    let n = b.len();
    let mut rhs = b.to_vec();
    if opts.zero_mean {
        remove_mean(&mut rhs);
        remove_mean(x);
    }
    let b_norm = dot(&rhs, &rhs).sqrt();
    let mut ap = vec![0.0; n];
    apply(x, &mut ap);
    let mut r: Vec<f64> = rhs.iter().zip(&ap).map(|(b, a)| b - a).collect();
    if opts.zero_mean {
        remove_mean(&mut r);
    }
    let target = (opts.rel_tol * b_norm).max(opts.abs_tol);
    let rel = |rn: f64| if b_norm > 0.0 { rn / b_norm } else { rn };

    let mut rr = dot(&r, &r);
    if rr.sqrt() <= target || rr == 0.0 {
        return Ok(CgStats {
            iterations: 0,
            rel_residual: rel(rr.sqrt()),
        });
    }
    let mut p = r.clone();
    for it in 1..=opts.max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::SolverFailure {
                solver: opts.name,
                residual: rel(rr.sqrt()),
                iterations: it,
            });
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if opts.zero_mean {
            remove_mean(&mut r);
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= target {
            if opts.zero_mean {
                remove_mean(x);
            }
            return Ok(CgStats {
                iterations: it,
                rel_residual: rel(rr_new.sqrt()),
            });
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::SolverFailure {
        solver: opts.name,
        residual: rel(rr.sqrt()),
        iterations: opts.max_iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(x: &[f64], y: &mut [f64]) {
        let n = x.len();
        for i in 0..n {
            let l = if i > 0 { x[i - 1] } else { 0.0 };
            let r = if i + 1 < n { x[i + 1] } else { 0.0 };
            y[i] = 4.0 * x[i] - l - r;
        }
    }

    #[test]
    fn solves_spd_tridiagonal() {
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut x = vec![0.0; 50];
        let opts = CgOptions {
            rel_tol: 1e-12,
            abs_tol: 0.0,
            max_iter: 200,
            zero_mean: false,
            name: "test",
        };
        let stats = conjugate_gradient(tridiag, &b, &mut x, &opts).unwrap();
        assert!(stats.rel_residual <= 1e-12);
        let mut ax = vec![0.0; 50];
        tridiag(&x, &mut ax);
        for (a, b) in ax.iter().zip(&b) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn reports_non_convergence() {
        let b = vec![1.0; 40];
        let mut x = vec![0.0; 40];
        let opts = CgOptions {
            rel_tol: 1e-14,
            abs_tol: 0.0,
            max_iter: 2,
            zero_mean: false,
            name: "test",
        };
        match conjugate_gradient(tridiag, &b, &mut x, &opts) {
            Err(Error::SolverFailure { iterations, .. }) => assert_eq!(iterations, 2),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn zero_rhs_returns_immediately() {
        let b = vec![0.0; 10];
        let mut x = vec![0.0; 10];
        let opts = CgOptions {
            rel_tol: 1e-10,
            abs_tol: 0.0,
            max_iter: 5,
            zero_mean: false,
            name: "test",
        };
        let s = conjugate_gradient(tridiag, &b, &mut x, &opts).unwrap();
        assert_eq!(s.iterations, 0);
        assert!(x.iter().all(|v| *v == 0.0));
    }
}
