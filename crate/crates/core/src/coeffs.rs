//! Coefficient oracles `b`, `sigma`, `f`, `Phi` with analytic first derivatives.
//!
//! Callers can implement [`Coefficients`] for their own types; the built-in
//! registry is the polynomial family [`Poly`].

use crate::scalar::{c, Scalar};

/// Arguments shared by `b`, `sigma` and `f`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point<T> {
    pub t: T,
    pub x: T,
    pub x1: T,
    pub x2: T,
    pub u: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(t: T, x: T, x1: T, x2: T, u: T) -> Self {
        Self { t, x, x1, x2, u }
    }
}

/// Partial derivatives of `b` or `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateGrad<T> {
    pub x: T,
    pub x1: T,
    pub x2: T,
    pub u: T,
}

/// Partial derivatives of the driver `f`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DriverGrad<T> {
    pub x: T,
    pub x1: T,
    pub x2: T,
    pub y: T,
    pub z: T,
    pub u: T,
}

/// The coefficient bundle of the controlled forward-backward system.
///
/// Implementations must be pure: the same inputs always give the same outputs,
/// and evaluation is safe from many threads at once.
pub trait Coefficients<T: Scalar>: Send + Sync {
    fn name(&self) -> String;

    /// Decay rate of the distributed delay.
    fn lambda(&self) -> T;

    fn b(&self, p: &Point<T>) -> T;
    fn sigma(&self, p: &Point<T>) -> T;
    fn f(&self, p: &Point<T>, y: T, z: T) -> T;
    fn phi(&self, x: T, x1: T) -> T;

    fn b_grad(&self, p: &Point<T>) -> StateGrad<T>;
    fn sigma_grad(&self, p: &Point<T>) -> StateGrad<T>;
    fn f_grad(&self, p: &Point<T>, y: T, z: T) -> DriverGrad<T>;
    /// `(Phi_x, Phi_x1)`.
    fn phi_grad(&self, x: T, x1: T) -> (T, T);

    /// `Phi_xx`; the default differentiates `Phi_x` numerically.
    fn phi_xx(&self, x: T, x1: T) -> T {
        let h = c::<T>(1e-4) * (x.abs() + T::one());
        (self.phi_grad(x + h, x1).0 - self.phi_grad(x - h, x1).0) / (h + h)
    }

    /// Lipschitz constant of `f` in `(y, z)`, when known.
    fn driver_lipschitz(&self) -> Option<T> {
        None
    }

    /// `Some((fbar(t), gbar(t)))` when `f = a(t,x,x1,x2,u) + fbar(t) y + gbar(t) z`
    /// with deterministic bounded `fbar`, `gbar`.
    fn linear_driver(&self, _t: T) -> Option<(T, T)> {
        None
    }

    /// `Some(g(t))` when this bundle is a measure-changed version of another one
    /// whose drift was shifted by `sigma * g`.
    fn girsanov_loading(&self, _t: T) -> Option<T> {
        None
    }
}

/// Saturation used by the bilinear term so that growth stays linear.
#[inline]
fn sat<T: Scalar>(v: T, cap: T) -> (T, T) {
    if v > cap {
        (cap, T::zero())
    } else if v < -cap {
        (-cap, T::zero())
    } else {
        (v, T::one())
    }
}

/// Polynomial registry family.
///
/// ```text
/// b     = b0 + bx x + bx1 x1 + bx2 x2 + bu u + bxx1 sat(x) sat(x1)
/// sigma = s0 + sx x + sx1 x1 + sx2 x2 + su u
/// f     = f0 + fx x + fx1 x1 + fx2 x2 + fy y + fz z + fu u - qx x^2 - ru u^2
/// Phi   = c0 + m x + n x1 + pxx x^2
/// ```
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Poly<T> {
    pub family: String,
    pub lambda: T,
    pub b0: T,
    pub bx: T,
    pub bx1: T,
    pub bx2: T,
    pub bu: T,
    pub bxx1: T,
    pub sat_cap: T,
    pub s0: T,
    pub sx: T,
    pub sx1: T,
    pub sx2: T,
    pub su: T,
    pub f0: T,
    pub fx: T,
    pub fx1: T,
    pub fx2: T,
    pub fy: T,
    pub fz: T,
    pub fu: T,
    pub qx: T,
    pub ru: T,
    pub c0: T,
    pub m: T,
    pub n: T,
    pub pxx: T,
}

impl<T: Scalar> Poly<T> {
    /// Every coefficient zero.
    pub fn zero(lambda: T) -> Self {
        Self { family: "zero".into(), lambda, sat_cap: c(10.0), ..Default::default() }
    }

    /// Constant drift, volatility and driver with constant terminal cost.
    pub fn constant(lambda: T, b: T, sigma: T, f: T, phi: T) -> Self {
        Self { family: "constant".into(), b0: b, s0: sigma, f0: f, c0: phi, ..Self::zero(lambda) }
    }

    /// Drift and volatility affine in `(x, x1, x2)`, driver zero, `Phi = x`.
    #[allow(clippy::too_many_arguments)]
    pub fn linear(lambda: T, b: [T; 4], sigma: [T; 4]) -> Self {
        Self {
            family: "linear".into(),
            b0: b[0],
            bx: b[1],
            bx1: b[2],
            bx2: b[3],
            s0: sigma[0],
            sx: sigma[1],
            sx1: sigma[2],
            sx2: sigma[3],
            m: T::one(),
            ..Self::zero(lambda)
        }
    }

    /// `b = k sat(x) sat(x1)` with small constant noise.
    pub fn bilinear(lambda: T, k: T, sigma: T) -> Self {
        Self { family: "bilinear".into(), bxx1: k, s0: sigma, m: T::one(), ..Self::zero(lambda) }
    }

    /// Geometric Brownian motion `dX = a X dt + s X dW`, `Phi = x`.
    pub fn gbm(lambda: T, a: T, s: T) -> Self {
        Self { family: "gbm".into(), bx: a, sx: s, m: T::one(), ..Self::zero(lambda) }
    }

    /// Linear-quadratic regulator without delay dependence:
    /// `b = a x + bu u`, `sigma = s0`, `f = -(q x^2 + r u^2)`, `Phi = ml x - mq x^2`.
    #[allow(clippy::too_many_arguments)]
    pub fn linear_quadratic(lambda: T, a: T, bu: T, s0: T, q: T, r: T, mq: T, ml: T) -> Self {
        Self {
            family: "linear_quadratic".into(),
            bx: a,
            bu,
            s0,
            qx: q,
            ru: r,
            m: ml,
            pxx: -mq,
            ..Self::zero(lambda)
        }
    }

    /// Growth degree of `b` and `sigma` in the state (1 for every registry member).
    pub fn growth_degree(&self) -> u32 {
        1
    }
}

impl<T: Scalar> Coefficients<T> for Poly<T> {
    fn name(&self) -> String {
        self.family.clone()
    }

    fn lambda(&self) -> T {
        self.lambda
    }

    #[inline]
    fn b(&self, p: &Point<T>) -> T {
        let mut v = self.b0 + self.bx * p.x + self.bx1 * p.x1 + self.bx2 * p.x2 + self.bu * p.u;
        if self.bxx1 != T::zero() {
            v += self.bxx1 * sat(p.x, self.sat_cap).0 * sat(p.x1, self.sat_cap).0;
        }
        v
    }

    #[inline]
    fn sigma(&self, p: &Point<T>) -> T {
        self.s0 + self.sx * p.x + self.sx1 * p.x1 + self.sx2 * p.x2 + self.su * p.u
    }

    #[inline]
    fn f(&self, p: &Point<T>, y: T, z: T) -> T {
        self.f0 + self.fx * p.x + self.fx1 * p.x1 + self.fx2 * p.x2 + self.fy * y + self.fz * z
            + self.fu * p.u
            - self.qx * p.x * p.x
            - self.ru * p.u * p.u
    }

    #[inline]
    fn phi(&self, x: T, x1: T) -> T {
        self.c0 + self.m * x + self.n * x1 + self.pxx * x * x
    }

    #[inline]
    fn b_grad(&self, p: &Point<T>) -> StateGrad<T> {
        let mut g = StateGrad { x: self.bx, x1: self.bx1, x2: self.bx2, u: self.bu };
        if self.bxx1 != T::zero() {
            let (sx, dx) = sat(p.x, self.sat_cap);
            let (sx1, dx1) = sat(p.x1, self.sat_cap);
            g.x += self.bxx1 * dx * sx1;
            g.x1 += self.bxx1 * sx * dx1;
        }
        g
    }

    #[inline]
    fn sigma_grad(&self, _p: &Point<T>) -> StateGrad<T> {
        StateGrad { x: self.sx, x1: self.sx1, x2: self.sx2, u: self.su }
    }

    #[inline]
    fn f_grad(&self, p: &Point<T>, _y: T, _z: T) -> DriverGrad<T> {
        DriverGrad {
            x: self.fx - T::two() * self.qx * p.x,
            x1: self.fx1,
            x2: self.fx2,
            y: self.fy,
            z: self.fz,
            u: self.fu - T::two() * self.ru * p.u,
        }
    }

    #[inline]
    fn phi_grad(&self, x: T, _x1: T) -> (T, T) {
        (self.m + T::two() * self.pxx * x, self.n)
    }

    fn phi_xx(&self, _x: T, _x1: T) -> T {
        T::two() * self.pxx
    }

    fn driver_lipschitz(&self) -> Option<T> {
        Some(self.fy.abs() + self.fz.abs())
    }

    fn linear_driver(&self, _t: T) -> Option<(T, T)> {
        Some((self.fy, self.fz))
    }
}

/// Worst relative disagreement between analytic derivatives and central
/// differences at one point. The step is `h * (|arg| + 1)`.
pub fn derivative_mismatch<T: Scalar>(
    co: &dyn Coefficients<T>,
    p: &Point<T>,
    y: T,
    z: T,
    h: f64,
) -> f64 {
    let step = |v: T| c::<T>(h) * (v.abs() + T::one());
    let rel = |a: T, fd: T| {
        let (a, fd) = (a.as_f64(), fd.as_f64());
        (a - fd).abs() / a.abs().max(1.0)
    };
    let mut worst = 0.0f64;
    let mut push = |e: f64| worst = worst.max(e);

    let bg = co.b_grad(p);
    let sg = co.sigma_grad(p);
    let fg = co.f_grad(p, y, z);
    let arms: [(T, Box<dyn Fn(T) -> Point<T>>, T, T, T); 4] = [
        (step(p.x), Box::new(|d| Point { x: p.x + d, ..*p }), bg.x, sg.x, fg.x),
        (step(p.x1), Box::new(|d| Point { x1: p.x1 + d, ..*p }), bg.x1, sg.x1, fg.x1),
        (step(p.x2), Box::new(|d| Point { x2: p.x2 + d, ..*p }), bg.x2, sg.x2, fg.x2),
        (step(p.u), Box::new(|d| Point { u: p.u + d, ..*p }), bg.u, sg.u, fg.u),
    ];
    for (hh, mv, db, ds, df) in arms.iter() {
        let (lo, hi) = (mv(-*hh), mv(*hh));
        let den = *hh + *hh;
        push(rel(*db, (co.b(&hi) - co.b(&lo)) / den));
        push(rel(*ds, (co.sigma(&hi) - co.sigma(&lo)) / den));
        push(rel(*df, (co.f(&hi, y, z) - co.f(&lo, y, z)) / den));
    }
    let hy = step(y);
    push(rel(fg.y, (co.f(p, y + hy, z) - co.f(p, y - hy, z)) / (hy + hy)));
    let hz = step(z);
    push(rel(fg.z, (co.f(p, y, z + hz) - co.f(p, y, z - hz)) / (hz + hz)));

    let (px, px1) = co.phi_grad(p.x, p.x1);
    let hx = step(p.x);
    push(rel(px, (co.phi(p.x + hx, p.x1) - co.phi(p.x - hx, p.x1)) / (hx + hx)));
    let hx1 = step(p.x1);
    push(rel(px1, (co.phi(p.x, p.x1 + hx1) - co.phi(p.x, p.x1 - hx1)) / (hx1 + hx1)));
    worst
}
