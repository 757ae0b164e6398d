//! Perron root and vector of a nonnegative matrix.
//!
//! Power iteration from the uniform vector is tried first. Periodic or
//! reducible matrices can make it oscillate; for those the iteration is
//! repeated on a diagonally shifted matrix, and as a last resort a dense
//! eigenvalue solve provides the spectral radius.

use nalgebra::{DMatrix, DVector};

use crate::config::EigenConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    Power,
    /// Power iteration on `T + sI`.
    Shifted,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerronPair {
    pub value: f64,
    /// Nonnegative, unit 1-norm.
    pub vector: DVector<f64>,
    pub iterations: usize,
    pub method: SolveMethod,
}

pub fn residual(t: &DMatrix<f64>, value: f64, vector: &DVector<f64>) -> f64 {
    (t * vector - vector * value).lp_norm(1)
}

struct PowerOutcome {
    value: f64,
    vector: DVector<f64>,
    iterations: usize,
    converged: bool,
    last_change: f64,
}

/// Plain power iteration on `t + shift * I`, returning the estimate for `t`.
fn power(t: &DMatrix<f64>, shift: f64, cfg: &EigenConfig, max_iter: usize) -> PowerOutcome {
    let n = t.nrows();
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut y = DVector::zeros(n);
    let mut prev = f64::NAN;
    let mut last_change = f64::INFINITY;
    for k in 1..=max_iter {
        t.mul_to(&x, &mut y);
        if shift != 0.0 {
            y.axpy(shift, &x, 1.0);
        }
        let s = y.sum();
        if s == 0.0 {
            // x is in the kernel of t: nilpotent direction, eigenvalue 0
            return PowerOutcome {
                value: 0.0,
                vector: x,
                iterations: k,
                converged: true,
                last_change: 0.0,
            };
        }
        if !s.is_finite() {
            break;
        }
        y /= s;
        // y now holds the next iterate; a complex subdominant pair can make
        // consecutive estimates agree by accident, so the vector must settle too
        let step: f64 = y.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut x, &mut y);
        let est = s - shift;
        last_change = (est - prev).abs();
        prev = est;
        if last_change <= cfg.tol * est.abs().max(1.0) && step <= cfg.tol {
            return PowerOutcome {
                value: est,
                vector: x,
                iterations: k,
                converged: true,
                last_change,
            };
        }
    }
    PowerOutcome {
        value: prev,
        vector: x,
        iterations: max_iter,
        converged: false,
        last_change,
    }
}

/// Spectral radius by a dense eigenvalue decomposition.
pub fn dense_spectral_radius(t: &DMatrix<f64>) -> Option<f64> {
    let eig = t.clone().try_schur(f64::EPSILON, 100_000)?.complex_eigenvalues();
    Some(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Largest eigenvalue and its nonnegative eigenvector.
pub fn perron(t: &DMatrix<f64>, cfg: &EigenConfig) -> Result<PerronPair> {
    let n = t.nrows();
    if n == 0 || t.ncols() != n {
        return Err(Error::Internal(format!(
            "transmission matrix must be square and non-empty, got {}x{}",
            t.nrows(),
            t.ncols()
        )));
    }
    if t.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Numerical {
            message: "matrix has negative or non-finite entries".into(),
            iterations: 0,
            last_change: f64::NAN,
        });
    }
    let scale = |v: f64| v.abs().max(1.0);
    let accept = |o: &PowerOutcome| o.converged && residual(t, o.value, &o.vector) <= cfg.residual_tol * scale(o.value);

    let first = power(t, 0.0, cfg, cfg.stall_iter.min(cfg.max_iter));
    if accept(&first) {
        return Ok(PerronPair {
            value: first.value,
            vector: first.vector,
            iterations: first.iterations,
            method: SolveMethod::Power,
        });
    }

    // The spectral radius lies between the smallest and largest column sum.
    // For s > 0, lambda + s is the only eigenvalue of T + sI of largest
    // modulus, which removes the oscillation of periodic matrices; s close
    // to lambda gives the fastest convergence.
    let col_sums: Vec<f64> = t.column_iter().map(|c| c.sum()).collect();
    let lo = col_sums.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col_sums.iter().copied().fold(0.0, f64::max);
    let guess = if first.value.is_finite() { first.value } else { hi };
    let shift = guess.clamp(lo, hi);
    let mut iterations = first.iterations;
    if shift > 0.0 {
        let shifted = power(t, shift, cfg, cfg.max_iter);
        iterations += shifted.iterations;
        if accept(&shifted) {
            return Ok(PerronPair {
                value: shifted.value.max(0.0),
                vector: shifted.vector,
                iterations,
                method: SolveMethod::Shifted,
            });
        }
    }

    if n > cfg.dense_max_n {
        return Err(Error::Numerical {
            message: format!("power iteration did not converge for a {n}x{n} matrix"),
            iterations,
            last_change: first.last_change,
        });
    }
    let value = dense_spectral_radius(t).ok_or_else(|| Error::Numerical {
        message: "dense eigenvalue solver did not converge".into(),
        iterations,
        last_change: first.last_change,
    })?;
    if value == 0.0 {
        // nilpotent: the plain iteration reaches the kernel within n steps
        let v = power(t, 0.0, cfg, n + 1);
        return Ok(PerronPair {
            value: 0.0,
            vector: v.vector,
            iterations: iterations + v.iterations,
            method: SolveMethod::Dense,
        });
    }
    let shifted = power(t, value, cfg, cfg.max_iter);
    let vector = shifted.vector;
    let res = residual(t, value, &vector);
    if res > cfg.residual_tol.sqrt() * scale(value) {
        return Err(Error::Numerical {
            message: format!("no nonnegative eigenvector found (residual {res:e})"),
            iterations: iterations + shifted.iterations,
            last_change: shifted.last_change,
        });
    }
    Ok(PerronPair {
        value,
        vector,
        iterations: iterations + shifted.iterations,
        method: SolveMethod::Dense,
    })
}
