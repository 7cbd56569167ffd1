//! Backward solution of the recursive cost and the linear-driver oracle.

use crate::coeffs::Coefficients;
use crate::error::{Error, Result};
use crate::lsmc::{solve_backward, BackwardProblem, RegressionBasis, Scheme};
use crate::scalar::{c, Scalar};
use crate::smdde::TrajectoryBundle;
use crate::stats::MeanAcc;

/// `Y(s)` with its standard error; `Y` and `Z` are written into the bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSolution {
    pub y0: f64,
    pub se: f64,
    pub basis: RegressionBasis,
    pub scheme: Scheme,
    pub warnings: Vec<String>,
}

/// `J = -Y(s)`.
pub fn cost_functional_j(sol: &BackwardSolution) -> f64 {
    -sol.y0
}

/// Solve `-dY = f dt - Z dW`, `Y(T) = Phi(X(T), X1(T))` along the bundle.
pub fn solve_bsde_lsmc<T: Scalar>(
    bundle: &mut TrajectoryBundle<T>,
    co: &dyn Coefficients<T>,
    basis: &RegressionBasis,
    scheme: Scheme,
) -> Result<BackwardSolution> {
    let dt = bundle.grid.dt();
    if let Some(l) = co.driver_lipschitz() {
        if (l * dt).as_f64() >= 1.0 {
            return Err(Error::Config(format!(
                "step too large for driver Lipschitz constant ({} * {} >= 1)",
                l, dt
            )));
        }
    }
    let n = bundle.grid.n_steps();
    let np = bundle.n_paths;
    let terminal: Vec<f64> = (0..np)
        .map(|p| {
            let k = bundle.idx(p, n);
            co.phi(bundle.x[k], bundle.x1[k]).as_f64()
        })
        .collect();
    let b = &*bundle;
    let driver = |i: usize, p: usize, y: &[f64], z: &[f64], out: &mut [f64]| {
        out[0] = co.f(&b.point(p, i), c(y[0]), c(z[0])).as_f64();
    };
    let prob = BackwardProblem { dim: 1, terminal, driver: &driver };
    let out = solve_backward(b, &prob, basis, scheme)?;
    // Keep the exact terminal identity in `T` precision.
    let mut y: Vec<T> = out.y[0].iter().map(|v| c(*v)).collect();
    for p in 0..np {
        let k = bundle.idx(p, n);
        y[k] = co.phi(bundle.x[k], bundle.x1[k]);
    }
    bundle.y = Some(y);
    bundle.z = Some(out.z[0].iter().map(|v| c(*v)).collect());
    Ok(BackwardSolution {
        y0: out.y0[0],
        se: out.se[0],
        basis: *basis,
        scheme,
        warnings: out.warnings,
    })
}

/// Plain Monte Carlo estimate of `Y(s)` for `f = a + fbar(t) y + g(t) z`:
/// `E[ sum e^{int fbar} a dt + e^{int fbar} Phi ]`.
///
/// When `g` is non-zero the bundle must have been simulated under the
/// drift-shifted measure.
pub fn linear_driver_oracle<T: Scalar>(
    co: &dyn Coefficients<T>,
    bundle: &TrajectoryBundle<T>,
) -> Result<(f64, f64)> {
    let n = bundle.grid.n_steps();
    let dt = bundle.grid.dt().as_f64();
    let mut rates = Vec::with_capacity(n);
    for i in 0..n {
        let t = bundle.grid.time(i);
        let (r, g) = co.linear_driver(t).ok_or_else(|| {
            Error::Inapplicable(format!("driver of '{}' is not linear in (y, z)", co.name()))
        })?;
        if g != T::zero() && !bundle.shifted_measure {
            return Err(Error::Inapplicable(
                "driver has a z-loading; simulate under the shifted measure first".into(),
            ));
        }
        rates.push(r.as_f64());
    }
    let acc: MeanAcc = (0..bundle.n_paths)
        .map(|p| {
            let mut disc = 1.0f64;
            let mut sum = 0.0;
            for (i, r) in rates.iter().enumerate() {
                let a = co.f(&bundle.point(p, i), T::zero(), T::zero()).as_f64();
                sum += disc * a * dt;
                disc *= (r * dt).exp();
            }
            let k = bundle.idx(p, n);
            sum + disc * co.phi(bundle.x[k], bundle.x1[k]).as_f64()
        })
        .collect();
    Ok((acc.mean(), acc.std_error()))
}
