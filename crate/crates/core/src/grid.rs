//! Time grid, initial segment and the distributed-delay functional.

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

/// Uniform time grid on `[s, T]` whose step divides the delay exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T> {
    s: T,
    dt: T,
    n_steps: usize,
    m: usize,
}

const ALIGN_TOL: f64 = 1e-9;

fn integral_ratio(num: f64, den: f64, tol: f64, what: &str) -> Result<usize> {
    let r = num / den;
    let n = r.round();
    if !r.is_finite() || n < 0.0 || (r - n).abs() > tol * n.max(1.0) {
        return Err(Error::Config(format!(
            "{what} = {num} is not an integer multiple of dt = {den}"
        )));
    }
    Ok(n as usize)
}

impl<T: Scalar> TimeGrid<T> {
    /// Build a grid from physical quantities. `T - s` and `delay` must both be
    /// integer multiples of `dt`.
    pub fn new(s: T, horizon: T, dt: T, delay: T) -> Result<Self> {
        let (sf, hf, dtf, df) = (s.as_f64(), horizon.as_f64(), dt.as_f64(), delay.as_f64());
        if !(dtf > 0.0) || !dtf.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {dtf}")));
        }
        if !(sf >= 0.0) || !(hf >= sf) {
            return Err(Error::Config(format!("need 0 <= s <= T, got s = {sf}, T = {hf}")));
        }
        // Inputs rounded to `T` carry its relative error.
        let tol = ALIGN_TOL.max(16.0 * T::epsilon().as_f64());
        let n_steps = integral_ratio(hf - sf, dtf, tol, "T - s")?;
        let m = integral_ratio(df, dtf, tol, "delay")?;
        Self::from_steps(s, dt, n_steps, m)
    }

    /// Build a grid from step counts; the delay is `m * dt` by construction.
    pub fn from_steps(s: T, dt: T, n_steps: usize, m: usize) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if m == 0 {
            return Err(Error::Config("delay must span at least one step".into()));
        }
        if s < T::zero() {
            return Err(Error::Config("start time must be non-negative".into()));
        }
        Ok(Self { s, dt, n_steps, m })
    }

    pub fn s(&self) -> T {
        self.s
    }
    pub fn dt(&self) -> T {
        self.dt
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn delay_steps(&self) -> usize {
        self.m
    }
    pub fn delay(&self) -> T {
        c::<T>(self.m as f64) * self.dt
    }
    pub fn horizon(&self) -> T {
        self.time(self.n_steps)
    }

    /// Time of grid index `i` (index 0 is `s`).
    #[inline]
    pub fn time(&self, i: usize) -> T {
        self.s + c::<T>(i as f64) * self.dt
    }

    /// Time of a possibly negative (history) index.
    pub fn time_signed(&self, i: isize) -> T {
        self.s + c::<T>(i as f64) * self.dt
    }

    /// Same horizon and delay with `dt` divided by `factor`.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            s: self.s,
            dt: self.dt / c(factor as f64),
            n_steps: self.n_steps * factor,
            m: self.m * factor,
        }
    }

    /// Index of the grid point nearest to `t`, clamped to `[0, n_steps]`.
    pub fn index_of(&self, t: T) -> usize {
        let r = ((t - self.s) / self.dt).as_f64().round();
        (r.max(0.0) as usize).min(self.n_steps)
    }
}

/// The initial segment on `[s - delta, s]`, sampled at the `m + 1` grid times.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryPath<T> {
    samples: Vec<T>,
}

impl<T: Scalar> HistoryPath<T> {
    pub fn from_samples(samples: Vec<T>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidHistory("need at least two samples".into()));
        }
        if let Some(j) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidHistory(format!("sample {j} is not finite")));
        }
        Ok(Self { samples })
    }

    pub fn constant(value: T, m: usize) -> Self {
        Self { samples: vec![value; m + 1] }
    }

    /// Sample `phi(tau)` for `tau = -delta, ..., 0` on the grid.
    pub fn from_fn(grid: &TimeGrid<T>, phi: impl Fn(T) -> T) -> Result<Self> {
        let m = grid.delay_steps();
        let samples = (0..=m)
            .map(|j| phi(c::<T>(j as f64 - m as f64) * grid.dt()))
            .collect();
        Self::from_samples(samples)
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn delay_steps(&self) -> usize {
        self.samples.len() - 1
    }

    /// Check the sample count against a grid.
    pub fn check_grid(&self, grid: &TimeGrid<T>) -> Result<()> {
        if self.delay_steps() != grid.delay_steps() {
            return Err(Error::Config(format!(
                "history has {} samples but the grid needs {}",
                self.samples.len(),
                grid.delay_steps() + 1
            )));
        }
        Ok(())
    }

    /// Linear interpolation at `tau` in `[-delta, 0]`, given the grid step.
    pub fn value_at(&self, tau: T, dt: T) -> T {
        let m = self.delay_steps();
        let pos = (tau / dt).as_f64() + m as f64;
        if pos <= 0.0 {
            return self.samples[0];
        }
        if pos >= m as f64 {
            return self.samples[m];
        }
        let j = pos.floor() as usize;
        let w = c::<T>(pos - j as f64);
        self.samples[j] * (T::one() - w) + self.samples[j + 1] * w
    }

    /// `phi(0)`.
    pub fn x(&self) -> T {
        self.samples[self.delay_steps()]
    }

    /// `phi(-delta)`.
    pub fn x2(&self) -> T {
        self.samples[0]
    }

    pub fn x1(&self, lambda: T, dt: T) -> T {
        eval_x1_quadrature(&self.samples, lambda, dt).expect("history validated at construction")
    }

    pub fn sup_abs(&self) -> T {
        self.samples.iter().fold(T::zero(), |a, v| a.max(v.abs()))
    }

    pub fn shifted(&self, by: T) -> Self {
        Self { samples: self.samples.iter().map(|v| *v + by).collect() }
    }

    pub fn scaled(&self, by: T) -> Self {
        Self { samples: self.samples.iter().map(|v| *v * by).collect() }
    }
}

/// Trapezoidal rule for `int_{-delta}^0 e^{lambda tau} X(t + tau) dtau`.
///
/// `window` holds `X(t - delta), ..., X(t)` on the grid, so `delta = (len - 1) * dt`.
pub fn eval_x1_quadrature<T: Scalar>(window: &[T], lambda: T, dt: T) -> Result<T> {
    if window.len() < 2 {
        return Err(Error::InvalidHistory("quadrature window needs two samples".into()));
    }
    if let Some(j) = window.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidHistory(format!("window sample {j} is not finite")));
    }
    let m = window.len() - 1;
    Ok(weighted_sum(window, lambda, dt, m))
}

fn weighted_sum<T: Scalar>(window: &[T], lambda: T, dt: T, m: usize) -> T {
    let decay = (-lambda * dt).exp();
    // Horner-style accumulation from the oldest sample keeps one exp call.
    let mut s = T::zero();
    for v in window {
        s = s * decay + *v;
    }
    let w0 = (-lambda * dt * c(m as f64)).exp();
    dt * (s - T::half() * (w0 * window[0] + window[m]))
}

/// O(1) per-step update of the trapezoidal distributed delay.
///
/// Keeps the unhalved weighted sum `S = sum_j e^{-lambda (m - j) dt} X[i - m + j]`
/// and slides it one step at a time. Callers re-anchor from the full window
/// every `m` steps so rounding cannot accumulate.
#[derive(Debug, Clone, Copy)]
pub struct X1Slider<T> {
    decay: T,
    w0: T,
    dt: T,
    sum: T,
}

impl<T: Scalar> X1Slider<T> {
    pub fn new(lambda: T, dt: T, m: usize) -> Self {
        Self {
            decay: (-lambda * dt).exp(),
            w0: (-lambda * dt * c(m as f64)).exp(),
            dt,
            sum: T::zero(),
        }
    }

    /// Reset from a full window `X[i - m..=i]` and return `X1[i]`.
    pub fn anchor(&mut self, window: &[T]) -> T {
        let mut s = T::zero();
        for v in window {
            s = s * self.decay + *v;
        }
        self.sum = s;
        self.value(window[0], window[window.len() - 1])
    }

    /// Slide from `i` to `i + 1`: `leaving = X[i - m]`, `oldest = X[i + 1 - m]`,
    /// `newest = X[i + 1]`. Returns `X1[i + 1]`.
    #[inline]
    pub fn advance(&mut self, leaving: T, oldest: T, newest: T) -> T {
        self.sum = self.decay * (self.sum - self.w0 * leaving) + newest;
        self.value(oldest, newest)
    }

    #[inline]
    fn value(&self, oldest: T, newest: T) -> T {
        self.dt * (self.sum - T::half() * (self.w0 * oldest + newest))
    }
}
