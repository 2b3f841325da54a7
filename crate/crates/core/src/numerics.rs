//! Uniform grids on `[0, 1]`, composite trapezoid quadrature and linear
//! interpolation.
//!
//! Every integral operator in the crate (`∫₀ˣ`, `∫_y¹`, `∫_yˣ`) is realized
//! with [`trapz_range`] on the shared grid. The slice-level helpers are the
//! ones used in hot loops; [`trapezoid`], [`trapezoid_partial`] and
//! [`interp_linear`] are the checked entry points on [`Field`].

use crate::error::{contract, Error, Result};

/// Uniform grid `x_i = i·h` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    n: usize,
    h: f64,
}

impl Grid1D {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return contract(format!("grid needs at least 2 nodes, got {n}"));
        }
        Ok(Self {
            n,
            h: 1.0 / (n - 1) as f64,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Node coordinate; the last node is exactly 1.
    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        i as f64 / (self.n - 1) as f64
    }

    pub fn nodes(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.node(i))
    }

    /// Trapezoid weights for the full interval.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = vec![self.h; self.n];
        w[0] *= 0.5;
        w[self.n - 1] *= 0.5;
        w
    }
}

/// Samples of a function at the nodes of a [`Grid1D`].
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid1D,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return contract(format!(
                "field has {} values for a grid of {} nodes",
                values.len(),
                grid.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return contract(format!("non-finite field value at node {i}"));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid1D) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: Grid1D, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid,
            values: grid.nodes().map(f).collect(),
        }
    }

    #[inline]
    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// `‖·‖_{L²(0,1)}` by trapezoid.
    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.values, self.grid.h)
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }

    pub(crate) fn same_grid(&self, other: &Field) -> Result<()> {
        if self.grid != other.grid {
            return contract(format!(
                "grid mismatch: {} vs {} nodes",
                self.grid.len(),
                other.grid.len()
            ));
        }
        Ok(())
    }
}

/// Composite trapezoid approximation of `∫₀¹ f`.
pub fn trapezoid(f: &Field) -> f64 {
    trapz(&f.values, f.grid.h)
}

/// Trapezoid value over `[x_a, x_b]`.
pub fn trapezoid_partial(f: &Field, a: usize, b: usize) -> Result<f64> {
    if a > b || b >= f.grid.len() {
        return contract(format!(
            "partial integral needs 0 <= a <= b <= {}, got a = {a}, b = {b}",
            f.grid.len() - 1
        ));
    }
    Ok(trapz_range(&f.values, f.grid.h, a, b))
}

/// Piecewise-linear interpolant at `x ∈ [0, 1]`.
pub fn interp_linear(f: &Field, x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Contract(format!(
            "interpolation point {x} outside [0, 1]"
        )));
    }
    Ok(lerp(&f.values, f.grid.h, x))
}

#[inline]
pub fn trapz(values: &[f64], h: f64) -> f64 {
    trapz_range(values, h, 0, values.len() - 1)
}

/// Trapezoid over nodes `a..=b`; zero when `a == b`.
#[inline]
pub fn trapz_range(values: &[f64], h: f64, a: usize, b: usize) -> f64 {
    if a >= b {
        return 0.0;
    }
    let inner: f64 = values[a + 1..b].iter().sum();
    h * (0.5 * (values[a] + values[b]) + inner)
}

/// Linear interpolation of nodal samples with spacing `h`; `x` is clamped
/// to `[0, 1]`.
#[inline]
pub fn lerp(values: &[f64], h: f64, x: f64) -> f64 {
    let last = values.len() - 1;
    let mut s = (x / h).clamp(0.0, last as f64);
    // snap roundoff in `x / h` so nodes are reproduced exactly
    let r = s.round();
    if (s - r).abs() <= 1e-10 * (1.0 + r) {
        s = r;
    }
    let i = s.floor() as usize;
    if i >= last {
        return values[last];
    }
    let t = s - i as f64;
    if t == 0.0 {
        return values[i];
    }
    values[i] + t * (values[i + 1] - values[i])
}

#[inline]
pub fn l2_norm(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    let inner: f64 = values[1..n - 1].iter().map(|v| v * v).sum();
    (h * (0.5 * (values[0] * values[0] + values[n - 1] * values[n - 1]) + inner)).sqrt()
}

#[inline]
pub fn sup_norm(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Least-squares slope of `log(err)` against `log(h)`.
pub fn convergence_slope(hs: &[f64], errs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = hs.iter().zip(errs).map(|(h, e)| (h.ln(), e.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}
