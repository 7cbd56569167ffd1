//! Control domain and control policies.

use crate::error::{Error, Result};
use crate::hamiltonian::DelayedState;
use crate::scalar::{c, Scalar};

/// Box `U = [lower, upper]` with a uniform discretization of `n_u` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlDomain<T> {
    lower: T,
    upper: T,
    n_u: usize,
}

impl<T: Scalar> ControlDomain<T> {
    pub fn new(lower: T, upper: T, n_u: usize) -> Result<Self> {
        if !(lower <= upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::Config(format!("control box [{lower}, {upper}] is empty")));
        }
        if n_u == 0 {
            return Err(Error::Config("n_u must be at least 1".into()));
        }
        if n_u == 1 && lower != upper {
            return Err(Error::Config("n_u = 1 cannot include both endpoints".into()));
        }
        Ok(Self { lower, upper, n_u })
    }

    pub fn lower(&self) -> T {
        self.lower
    }
    pub fn upper(&self) -> T {
        self.upper
    }
    pub fn n_u(&self) -> usize {
        self.n_u
    }

    /// The discretized set; includes both endpoints.
    pub fn points(&self) -> Vec<T> {
        if self.n_u == 1 {
            return vec![self.lower];
        }
        let h = (self.upper - self.lower) / c((self.n_u - 1) as f64);
        (0..self.n_u)
            .map(|i| if i + 1 == self.n_u { self.upper } else { self.lower + h * c(i as f64) })
            .collect()
    }

    pub fn spacing(&self) -> T {
        if self.n_u == 1 {
            T::zero()
        } else {
            (self.upper - self.lower) / c((self.n_u - 1) as f64)
        }
    }

    #[inline]
    pub fn clamp(&self, u: T) -> T {
        u.max(self.lower).min(self.upper)
    }
}

/// A rule producing the control used at `(path, step)`.
pub trait ControlPolicy<T: Scalar>: Send + Sync {
    fn control(&self, path: usize, step: usize, t: T, state: &DelayedState<T>) -> T;
}

impl<T: Scalar, P: ControlPolicy<T> + ?Sized> ControlPolicy<T> for &P {
    fn control(&self, path: usize, step: usize, t: T, state: &DelayedState<T>) -> T {
        (**self).control(path, step, t, state)
    }
}

impl<T: Scalar, P: ControlPolicy<T> + ?Sized> ControlPolicy<T> for Box<P> {
    fn control(&self, path: usize, step: usize, t: T, state: &DelayedState<T>) -> T {
        (**self).control(path, step, t, state)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantControl<T>(pub T);

impl<T: Scalar> ControlPolicy<T> for ConstantControl<T> {
    fn control(&self, _: usize, _: usize, _: T, _: &DelayedState<T>) -> T {
        self.0
    }
}

/// Deterministic value per step; the last value repeats past the end.
#[derive(Debug, Clone)]
pub struct OpenLoop<T>(pub Vec<T>);

impl<T: Scalar> ControlPolicy<T> for OpenLoop<T> {
    fn control(&self, _: usize, step: usize, _: T, _: &DelayedState<T>) -> T {
        self.0[step.min(self.0.len() - 1)]
    }
}

/// Stored per-path, per-step values (path-major, `stride` values per path).
/// Replays a realized control process on coupled runs.
#[derive(Debug, Clone)]
pub struct Pathwise<T> {
    values: Vec<T>,
    stride: usize,
}

impl<T: Scalar> Pathwise<T> {
    pub fn new(values: Vec<T>, stride: usize) -> Self {
        assert!(stride > 0 && values.len() % stride == 0);
        Self { values, stride }
    }
}

impl<T: Scalar> ControlPolicy<T> for Pathwise<T> {
    fn control(&self, path: usize, step: usize, _: T, _: &DelayedState<T>) -> T {
        self.values[path * self.stride + step.min(self.stride - 1)]
    }
}

/// Markov feedback `u(t, x, x1)`.
pub struct Feedback<F>(pub F);

impl<T: Scalar, F: Fn(T, T, T) -> T + Send + Sync> ControlPolicy<T> for Feedback<F> {
    fn control(&self, _: usize, _: usize, t: T, s: &DelayedState<T>) -> T {
        (self.0)(t, s.x, s.x1)
    }
}

/// `clamp(base + shift)` on `[from, to)`, `base` elsewhere.
pub struct Perturbed<P, T> {
    pub base: P,
    pub shift: T,
    pub from: T,
    pub to: T,
    pub domain: ControlDomain<T>,
}

impl<T: Scalar, P: ControlPolicy<T>> ControlPolicy<T> for Perturbed<P, T> {
    fn control(&self, path: usize, step: usize, t: T, s: &DelayedState<T>) -> T {
        let u = self.base.control(path, step, t, s);
        if t >= self.from && t < self.to {
            self.domain.clamp(u + self.shift)
        } else {
            u
        }
    }
}
