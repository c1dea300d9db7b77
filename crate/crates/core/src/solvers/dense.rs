use nalgebra::{DMatrix, DVector};

use super::{count_solve, SolveState, SolverKind};
use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::sh::ColorSh;
use crate::transport::TransportSystem;

/// Largest per-channel system the dense solver accepts.
pub const DENSE_UNKNOWN_LIMIT: usize = 4096;

fn channel_matrix(sys: &TransportSystem, c: usize) -> DMatrix<f64> {
    let k = crate::sh::num_coeffs(sys.degree);
    let n = sys.kernel_count() * k;
    let mut a = DMatrix::zeros(n, n);
    for p in &sys.pairs {
        let r = sys.reflect[p.receiver].channel(c);
        let (row0, col0) = (p.receiver * k, p.source * k);
        for (kk, (rr, yr)) in r.iter().zip(&p.y_rev).enumerate() {
            let w = p.decay * rr * yr;
            if w == 0.0 {
                continue;
            }
            for (ll, yf) in p.y_fwd.iter().enumerate() {
                a[(row0 + kk, col0 + ll)] += w * yf;
            }
        }
    }
    a
}

/// Power-iteration estimate of the spectral radius of `a`.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.25 * ((i as f64) * 0.7).sin());
    x /= x.norm();
    const WARMUP: usize = 100;
    const MEASURE: usize = 200;
    let mut log_growth = 0.0;
    for it in 0..WARMUP + MEASURE {
        let y = a * &x;
        let norm = y.norm();
        if norm == 0.0 {
            return 0.0;
        }
        if it >= WARMUP {
            log_growth += norm.ln();
        }
        x = y / norm;
    }
    (log_growth / MEASURE as f64).exp()
}

/// Exact solve of `(I - M) B = E` per channel.
pub fn solve_dense_system(sys: &TransportSystem) -> Result<SolveState> {
    let k = crate::sh::num_coeffs(sys.degree);
    let n = sys.kernel_count() * k;
    if n > DENSE_UNKNOWN_LIMIT {
        return Err(Error::SizeGuard {
            unknowns: n,
            limit: DENSE_UNKNOWN_LIMIT,
        });
    }
    let mut state = SolveState::empty(sys, SolverKind::Dense);
    let mut solutions = Vec::with_capacity(3);
    for c in 0..3 {
        let a = channel_matrix(sys, c);
        let rho = spectral_radius(&a);
        if rho >= 1.0 {
            return Err(Error::NonConvergent(rho));
        }
        let lhs = DMatrix::identity(n, n) - a;
        let rhs = DVector::from_iterator(
            n,
            sys.emission.iter().flat_map(|e| e.channel(c).iter().copied()),
        );
        let x = lhs.lu().solve(&rhs).ok_or(Error::NonConvergent(rho))?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonConvergent(rho));
        }
        solutions.push(x);
    }
    for i in 0..sys.kernel_count() {
        let mut b = ColorSh::zeros(sys.degree);
        for (c, x) in solutions.iter().enumerate() {
            b.channel_mut(c).copy_from_slice(&x.as_slice()[i * k..(i + 1) * k]);
        }
        state.radiosity[i] = b;
    }
    state.finish(sys, true);
    Ok(state)
}

pub fn solve_dense(scene: &Scene) -> Result<SolveState> {
    count_solve();
    solve_dense_system(&TransportSystem::build(scene)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_of_scaled_identity() {
        let a = DMatrix::identity(4, 4) * 0.3;
        assert!((spectral_radius(&a) - 0.3).abs() < 1e-12);
        assert_eq!(spectral_radius(&DMatrix::zeros(3, 3)), 0.0);
    }

    #[test]
    fn radius_of_nilpotent_is_zero() {
        let mut a = DMatrix::zeros(3, 3);
        a[(0, 1)] = 5.0;
        assert_eq!(spectral_radius(&a), 0.0);
    }
}
