//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

/// No-delay LQ problem `dX = (aX + Bu)dt + s0 dW`, running cost `Q x^2 + R u^2`,
/// terminal cost `mq x^2 - ml x`.
#[derive(Debug, Clone, Copy)]
pub struct Lq {
    pub a: f64,
    pub b: f64,
    pub s0: f64,
    pub q: f64,
    pub r: f64,
    pub mq: f64,
    pub ml: f64,
    pub horizon: f64,
}

impl Lq {
    pub fn canonical() -> Self {
        Self { a: -0.1, b: 0.5, s0: 0.2, q: 0.5, r: 1.0, mq: 0.5, ml: 0.0, horizon: 1.0 }
    }

    fn rhs(&self, y: [f64; 3]) -> [f64; 3] {
        let [k, l, _] = y;
        let bb = self.b * self.b / self.r;
        // Derivatives in forward time.
        [
            -(2.0 * self.a * k - bb * k * k + self.q),
            -(self.a * l - bb * k * l),
            -(-self.b * self.b * l * l / (4.0 * self.r) + self.s0 * self.s0 * k),
        ]
    }

    /// `(K, L, k)` at time `t` with `V = K x^2 + L x + k`, by RK4 backward from the horizon.
    pub fn riccati(&self, t: f64) -> [f64; 3] {
        let n = 20_000;
        let h = -(self.horizon - t) / n as f64;
        let mut y = [self.mq, -self.ml, 0.0];
        let add = |y: [f64; 3], d: [f64; 3], s: f64| [y[0] + s * d[0], y[1] + s * d[1], y[2] + s * d[2]];
        for _ in 0..n {
            let k1 = self.rhs(y);
            let k2 = self.rhs(add(y, k1, 0.5 * h));
            let k3 = self.rhs(add(y, k2, 0.5 * h));
            let k4 = self.rhs(add(y, k3, h));
            for i in 0..3 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        y
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        let [k, l, c] = self.riccati(t);
        k * x * x + l * x + c
    }

    pub fn value_x(&self, t: f64, x: f64) -> f64 {
        let [k, l, _] = self.riccati(t);
        2.0 * k * x + l
    }

    /// `dV/dt` at `(t, x)`.
    pub fn value_t(&self, t: f64, x: f64) -> f64 {
        let y = self.riccati(t);
        let d = self.rhs(y);
        d[0] * x * x + d[1] * x + d[2]
    }

    pub fn control(&self, t: f64, x: f64) -> f64 {
        -self.b * self.value_x(t, x) / (2.0 * self.r)
    }
}
