//! Uniform time grid on `[0, T]` shared by every solver and simulator.

use crate::error::{Error, Result};

/// Uniform grid with `N` steps: nodes `t_k = k T / N`, `k = 0..=N`.
///
/// Nodes are strictly increasing with `t_0 = 0` and `t_N = T` by
/// construction; only `N` and `T` are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    n_steps: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(n_steps: usize, horizon: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::GridTooCoarse(0));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::NonpositiveHorizon(horizon));
        }
        Ok(TimeGrid { n_steps, horizon })
    }

    /// Number of steps `N`.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of nodes, `N + 1`.
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Step size `h = T / N`.
    pub fn h(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Node `t_k = k T / N`; the terminal node is `T` bit-exactly (the
    /// rounded product `T * N / N` can miss it).
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.n_steps);
        if k == self.n_steps {
            return self.horizon;
        }
        self.horizon * k as f64 / self.n_steps as f64
    }

    /// Clamped locator: returns `(k, w)` with `t ≈ (1-w) t_k + w t_{k+1}`,
    /// `k < N`, `0 <= w <= 1`. Exact node values snap to weight 0 or 1 so
    /// interpolation reproduces node data bit-for-bit.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let s = (t / self.h()).clamp(0.0, self.n_steps as f64);
        let mut k = s.floor() as usize;
        if k >= self.n_steps {
            k = self.n_steps - 1;
        }
        if t == self.node(k) {
            return (k, 0.0);
        }
        if t == self.node(k + 1) {
            return (k, 1.0);
        }
        let w = (t - self.node(k)) / self.h();
        (k, w.clamp(0.0, 1.0))
    }

    /// Trapezoidal quadrature weight of node `k` (`h/2` at the ends, `h`
    /// inside).
    pub fn trapezoid_weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.n_steps {
            0.5 * self.h()
        } else {
            self.h()
        }
    }

    /// Refined grid with twice as many steps on the same horizon.
    pub fn refine(&self) -> TimeGrid {
        TimeGrid {
            n_steps: 2 * self.n_steps,
            horizon: self.horizon,
        }
    }
}
