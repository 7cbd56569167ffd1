//! The Hamiltonian `H` and the generalized Hamiltonians `G`, `G-bar`, `G-tilde`.

use crate::coeffs::{Coefficients, Point};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

/// Current state together with its two delay functionals.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DelayedState<T> {
    pub x: T,
    pub x1: T,
    pub x2: T,
}

impl<T: Scalar> DelayedState<T> {
    pub fn new(x: T, x1: T, x2: T) -> Self {
        Self { x, x1, x2 }
    }

    pub fn at(&self, t: T, u: T) -> Point<T> {
        Point { t, x: self.x, x1: self.x1, x2: self.x2, u }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdjointVector<T> {
    pub gamma: T,
    pub p1: T,
    pub p2: T,
    pub p3: T,
    pub q1: T,
    pub q2: T,
}

/// `x - lambda x1 - e^{-lambda delta} x2`, the drift of the distributed delay.
#[inline]
pub fn transport<T: Scalar>(x: T, x1: T, x2: T, lambda: T, delta: T) -> T {
    x - lambda * x1 - (-lambda * delta).exp() * x2
}

/// `H = p1 b + p2 (x - lambda x1 - e^{-lambda delta} x2) + q1 sigma - gamma f`.
pub fn eval_h<T: Scalar>(
    t: T,
    state: &DelayedState<T>,
    y: T,
    z: T,
    u: T,
    adj: &AdjointVector<T>,
    co: &dyn Coefficients<T>,
    delta: T,
) -> T {
    let p = state.at(t, u);
    adj.p1 * co.b(&p)
        + adj.p2 * transport(state.x, state.x1, state.x2, co.lambda(), delta)
        + adj.q1 * co.sigma(&p)
        - adj.gamma * co.f(&p, y, z)
}

/// Partial derivatives of `H`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HamiltonianGrad<T> {
    pub x: T,
    pub x1: T,
    pub x2: T,
    pub y: T,
    pub z: T,
    pub u: T,
}

#[allow(clippy::too_many_arguments)]
pub fn eval_h_grad<T: Scalar>(
    t: T,
    state: &DelayedState<T>,
    y: T,
    z: T,
    u: T,
    adj: &AdjointVector<T>,
    co: &dyn Coefficients<T>,
    delta: T,
) -> HamiltonianGrad<T> {
    let p = state.at(t, u);
    let lam = co.lambda();
    let w0 = (-lam * delta).exp();
    let bg = co.b_grad(&p);
    let sg = co.sigma_grad(&p);
    let fg = co.f_grad(&p, y, z);
    HamiltonianGrad {
        x: adj.p1 * bg.x + adj.p2 + adj.q1 * sg.x - adj.gamma * fg.x,
        x1: adj.p1 * bg.x1 - lam * adj.p2 + adj.q1 * sg.x1 - adj.gamma * fg.x1,
        x2: adj.p1 * bg.x2 - w0 * adj.p2 + adj.q1 * sg.x2 - adj.gamma * fg.x2,
        y: -adj.gamma * fg.y,
        z: -adj.gamma * fg.z,
        u: adj.p1 * bg.u + adj.q1 * sg.u - adj.gamma * fg.u,
    }
}

/// Which generalized Hamiltonian to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GVariant {
    /// `G`: the driver is evaluated at `(y, z) = (k, p sigma)`.
    Standard,
    /// `G-bar`: linear driver `a + fbar k` with the drift shifted by `sigma g`.
    Girsanov,
    /// `G-tilde`: `G-bar` with `g = 0`.
    Reduced,
}

impl GVariant {
    pub fn needs_driver(self) -> bool {
        !matches!(self, GVariant::Standard)
    }
}

/// Deterministic piecewise-constant `fbar(t)` and `g(t)` of a linear driver.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDriver<T> {
    knots: Vec<T>,
    rate: Vec<T>,
    loading: Vec<T>,
}

impl<T: Scalar> LinearDriver<T> {
    pub fn constant(rate: T, loading: T) -> Self {
        Self { knots: vec![T::neg_infinity()], rate: vec![rate], loading: vec![loading] }
    }

    /// Piecewise constant on `[knots[i], knots[i+1])`; values before the first
    /// knot use the first piece.
    pub fn piecewise(knots: Vec<T>, rate: Vec<T>, loading: Vec<T>) -> Result<Self> {
        if knots.is_empty() || knots.len() != rate.len() || knots.len() != loading.len() {
            return Err(Error::Config("linear driver tables must be non-empty and aligned".into()));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("linear driver knots must increase".into()));
        }
        if rate.iter().chain(loading.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("linear driver must be bounded".into()));
        }
        Ok(Self { knots, rate, loading })
    }

    /// Read the split `f = a + fbar y + g z` off a coefficient bundle.
    pub fn from_coefficients(co: &dyn Coefficients<T>, t: T) -> Result<Self> {
        match co.linear_driver(t) {
            Some((r, g)) => Ok(Self::constant(r, g)),
            None => Err(Error::Inapplicable(format!(
                "driver of '{}' is not linear in (y, z)",
                co.name()
            ))),
        }
    }

    #[inline]
    fn piece(&self, t: T) -> usize {
        match self.knots.iter().rposition(|k| *k <= t) {
            Some(i) => i,
            None => 0,
        }
    }

    #[inline]
    pub fn rate(&self, t: T) -> T {
        self.rate[self.piece(t)]
    }

    #[inline]
    pub fn loading(&self, t: T) -> T {
        self.loading[self.piece(t)]
    }

    pub fn sup_loading(&self) -> T {
        self.loading.iter().fold(T::zero(), |a, v| a.max(v.abs()))
    }

    pub fn sup_rate(&self) -> T {
        self.rate.iter().fold(T::zero(), |a, v| a.max(v.abs()))
    }

    /// Same rate, zero loading.
    pub fn without_loading(&self) -> Self {
        Self { loading: vec![T::zero(); self.loading.len()], ..self.clone() }
    }
}

/// Jet-like arguments of `G`: `(k, p, R, q)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GArgs<T> {
    pub k: T,
    pub p: T,
    pub r: T,
    pub q: T,
}

fn need_driver<'a, T>(
    variant: GVariant,
    driver: Option<&'a LinearDriver<T>>,
) -> Result<Option<&'a LinearDriver<T>>> {
    if variant.needs_driver() && driver.is_none() {
        return Err(Error::Config(format!("{variant:?} requires a linear driver")));
    }
    Ok(driver)
}

/// Evaluate `G`, `G-bar` or `G-tilde` at `pt` with arguments `args`.
///
/// `a(t,x,x1,x2,u)` for the linear variants is `f` evaluated at `y = z = 0`.
pub fn eval_g<T: Scalar>(
    variant: GVariant,
    pt: &Point<T>,
    args: &GArgs<T>,
    co: &dyn Coefficients<T>,
    delta: T,
    driver: Option<&LinearDriver<T>>,
) -> Result<T> {
    let driver = need_driver(variant, driver)?;
    Ok(eval_g_unchecked(variant, pt, args, co, delta, driver))
}

#[inline]
pub(crate) fn eval_g_unchecked<T: Scalar>(
    variant: GVariant,
    pt: &Point<T>,
    args: &GArgs<T>,
    co: &dyn Coefficients<T>,
    delta: T,
    driver: Option<&LinearDriver<T>>,
) -> T {
    let sig = co.sigma(pt);
    let b = co.b(pt);
    let tr = transport(pt.x, pt.x1, pt.x2, co.lambda(), delta);
    g_from_parts(variant, pt, args, b, sig, tr, co, driver)
}

/// `G` given precomputed `b`, `sigma` and transport at `pt`.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn g_from_parts<T: Scalar>(
    variant: GVariant,
    pt: &Point<T>,
    args: &GArgs<T>,
    b: T,
    sig: T,
    tr: T,
    co: &dyn Coefficients<T>,
    driver: Option<&LinearDriver<T>>,
) -> T {
    let common = T::half() * args.r * sig * sig + args.q * tr;
    match variant {
        GVariant::Standard => common + args.p * b + co.f(pt, args.k, args.p * sig),
        GVariant::Girsanov => {
            let d = driver.expect("checked");
            common
                + args.p * (b + sig * d.loading(pt.t))
                + co.f(pt, T::zero(), T::zero())
                + d.rate(pt.t) * args.k
        }
        GVariant::Reduced => {
            let d = driver.expect("checked");
            common + args.p * b + co.f(pt, T::zero(), T::zero()) + d.rate(pt.t) * args.k
        }
    }
}

/// Drift seen by the first-order `p` term of `G` after linearizing the driver
/// in `z`; decides the upwind direction in the HJB scheme.
#[inline]
pub(crate) fn effective_drift<T: Scalar>(
    variant: GVariant,
    pt: &Point<T>,
    args: &GArgs<T>,
    co: &dyn Coefficients<T>,
    driver: Option<&LinearDriver<T>>,
) -> T {
    let b = co.b(pt);
    match variant {
        GVariant::Standard => {
            let sig = co.sigma(pt);
            b + sig * co.f_grad(pt, args.k, args.p * sig).z
        }
        GVariant::Girsanov => b + co.sigma(pt) * driver.map_or(T::zero(), |d| d.loading(pt.t)),
        GVariant::Reduced => b,
    }
}

/// Coefficient of `k` in `G` (the driver's `y`-slope).
#[inline]
pub(crate) fn k_slope<T: Scalar>(
    variant: GVariant,
    pt: &Point<T>,
    args: &GArgs<T>,
    co: &dyn Coefficients<T>,
    driver: Option<&LinearDriver<T>>,
) -> T {
    match variant {
        GVariant::Standard => co.f_grad(pt, args.k, args.p * co.sigma(pt)).y,
        _ => driver.map_or(T::zero(), |d| d.rate(pt.t)),
    }
}

/// Gauss-Legendre nodes and weights on `[0, 1]`, 8 points.
pub fn gauss_legendre_8<T: Scalar>() -> [(T, T); 8] {
    const X: [f64; 4] = [
        0.183_434_642_495_649_8,
        0.525_532_409_916_329,
        0.796_666_477_413_626_7,
        0.960_289_856_497_536_3,
    ];
    const W: [f64; 4] = [
        0.362_683_783_378_362,
        0.313_706_645_877_887_3,
        0.222_381_034_453_374_5,
        0.101_228_536_290_376_3,
    ];
    let mut out = [(T::zero(), T::zero()); 8];
    for i in 0..4 {
        out[2 * i] = (c(0.5 * (1.0 - X[i])), c(0.5 * W[i]));
        out[2 * i + 1] = (c(0.5 * (1.0 + X[i])), c(0.5 * W[i]));
    }
    out
}
