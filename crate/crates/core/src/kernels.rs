//! Backstepping kernels.
//!
//! Direct kernels `k` (triangle), `γ` (square) with edge trace `q(s) = γ(s, 1)`,
//! and inverse kernels `l` (triangle), `η` (square) with `p(s) = η(s, 1)`.
//! The delay-dependent pair `(γ, q)` is tabulated over a grid of candidate
//! delays in a [`KernelCache`] so the adaptive loop can interpolate at the
//! running estimate `D̂(t)`.
//!
//! Triangle kernels are solved by marching along the characteristics
//! `x − y = const` one row at a time. Each row is a fixed point (the integral
//! source couples the row to itself) that contracts by a factor `O(h)`; the
//! nonlocal `y = 0` closure of `k` is solved exactly as a scalar equation
//! inside every sweep. `γ` is marched in `x` with semi-Lagrangian steps along
//! `dy/dx = D`.

use crate::adaptive;
use crate::error::{contract, Error, Result};
use crate::numerics::{lerp, sup_norm, Field, Grid1D};
use crate::plant::DelayBounds;

/// Sampled plant coefficients `g(x)` and `f(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    grid: Grid1D,
    g: Vec<f64>,
    /// Row-major `f(x_i, y_j)`.
    f: Vec<f64>,
}

impl Coefficients {
    pub fn sample(grid: Grid1D, g: impl Fn(f64) -> f64, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.len();
        let g = grid.nodes().map(&g).collect();
        let mut tab = Vec::with_capacity(n * n);
        for i in 0..n {
            let x = grid.node(i);
            tab.extend(grid.nodes().map(|y| f(x, y)));
        }
        Self { grid, g, f: tab }
    }

    pub fn from_tables(grid: Grid1D, g: Vec<f64>, f: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if g.len() != n || f.len() != n * n {
            return contract("coefficient tables do not match the grid");
        }
        if g.iter().chain(&f).any(|v| !v.is_finite()) {
            return contract("coefficient tables contain non-finite values");
        }
        Ok(Self { grid, g, f })
    }

    pub fn zero(grid: Grid1D) -> Self {
        Self::sample(grid, |_| 0.0, |_, _| 0.0)
    }

    #[inline]
    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    #[inline]
    pub fn g(&self) -> &[f64] {
        &self.g
    }

    #[inline]
    pub fn f(&self, i: usize, j: usize) -> f64 {
        self.f[i * self.grid.len() + j]
    }

    /// Row `f(x_i, ·)`.
    #[inline]
    pub fn f_row(&self, i: usize) -> &[f64] {
        let n = self.grid.len();
        &self.f[i * n..(i + 1) * n]
    }
}

/// Which integrand index pattern the triangle kernel equations (and `M₃`) use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelForm {
    /// Forms obtained by reducing the plant to the target system:
    /// `k_x + k_y = ∫_y^x k(x,τ) f(τ,y) dτ − f(x,y)` and
    /// `l_x + l_y = −∫_y^x f(x,τ) l(τ,y) dτ − f(x,y)`.
    #[default]
    Derived,
    /// The literal integrands `f(τ,y) k(τ,y)` and `f(τ,y) l(τ,y)`, and `M₃`
    /// with `q + q_D̂` ungrouped. Kept for comparison only.
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub form: KernelForm,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            form: KernelForm::Derived,
        }
    }
}

/// Convergence record of a marching solve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveStats {
    /// Largest number of sweeps any row (or slice) needed.
    pub max_sweeps: usize,
    /// `history[m]`: largest sup-norm change at sweep `m` over all rows.
    pub history: Vec<f64>,
}

impl SolveStats {
    fn record(&mut self, sweep: usize, change: f64) {
        if self.history.len() <= sweep {
            self.history.resize(sweep + 1, 0.0);
        }
        self.history[sweep] = self.history[sweep].max(change);
        self.max_sweeps = self.max_sweeps.max(sweep + 1);
    }
}

/// Kernel on the triangle `0 ≤ y ≤ x ≤ 1`; entries above the diagonal are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TriKernel {
    grid: Grid1D,
    values: Vec<f64>,
}

impl TriKernel {
    pub fn zeros(grid: Grid1D) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len() * grid.len()],
        }
    }

    pub fn from_fn(grid: Grid1D, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.len();
        let mut k = Self::zeros(grid);
        for i in 0..n {
            for j in 0..=i {
                k.values[i * n + j] = f(grid.node(i), grid.node(j));
            }
        }
        k
    }

    pub fn from_values(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() * grid.len() {
            return contract("triangle kernel table does not match the grid");
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.len() + j]
    }

    /// Row `x_i`; only the first `i + 1` entries are meaningful.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The `x = 1` slice, defined for every `y`.
    pub fn last_row(&self) -> Field {
        Field::new(self.grid, self.row(self.grid.len() - 1).to_vec())
            .expect("kernel values are finite")
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }
}

/// Kernel on the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareKernel {
    grid: Grid1D,
    values: Vec<f64>,
}

impl SquareKernel {
    pub fn zeros(grid: Grid1D) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len() * grid.len()],
        }
    }

    pub fn from_values(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() * grid.len() {
            return contract("square kernel table does not match the grid");
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.len() + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column `y = y_j` as a function of `x`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let n = self.grid.len();
        (0..n).map(|i| self.values[i * n + j]).collect()
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }

    /// `∂/∂y` by central differences, one-sided at `y = 0` and `y = 1`.
    pub fn d_dy(&self) -> SquareKernel {
        let n = self.grid.len();
        let mut out = vec![0.0; n * n];
        d_dy_into(&self.values, n, self.grid.h(), &mut out);
        SquareKernel {
            grid: self.grid,
            values: out,
        }
    }
}

pub(crate) fn d_dy_into(src: &[f64], n: usize, h: f64, out: &mut [f64]) {
    for i in 0..n {
        let r = &src[i * n..(i + 1) * n];
        let o = &mut out[i * n..(i + 1) * n];
        o[0] = (r[1] - r[0]) / h;
        o[n - 1] = (r[n - 1] - r[n - 2]) / h;
        for j in 1..n - 1 {
            o[j] = (r[j + 1] - r[j - 1]) / (2.0 * h);
        }
    }
}

/// Single-argument kernel `s ↦ q(s)` or `s ↦ p(s)` on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeKernel {
    grid: Grid1D,
    values: Vec<f64>,
}

impl EdgeKernel {
    pub fn from_values(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return contract("edge kernel does not match the grid");
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }
}

/// Trace of a square kernel along `y = 1`.
fn edge_of(k: &SquareKernel) -> EdgeKernel {
    EdgeKernel {
        grid: k.grid,
        values: k.column(k.grid.len() - 1),
    }
}

#[derive(Clone, Copy)]
enum Triangle {
    K,
    L,
}

/// Integral source term at `(x_i, y_j)` for row-marched triangle kernels.
#[inline]
fn tri_source(
    which: Triangle,
    form: KernelForm,
    table: &[f64],
    row: &[f64],
    c: &Coefficients,
    i: usize,
    j: usize,
) -> f64 {
    let n = c.grid.len();
    let h = c.grid.h();
    // trapezoid over m in [j, i]; `row` holds the current iterate of row i
    let integral = if i == j {
        0.0
    } else {
        let term = |m: usize| -> f64 {
            let own = |mm: usize| if mm == i { row[j] } else { table[mm * n + j] };
            match (which, form) {
                (Triangle::K, KernelForm::Derived) => row[m] * c.f(m, j),
                (Triangle::L, KernelForm::Derived) => c.f(i, m) * own(m),
                (_, KernelForm::Printed) => c.f(m, j) * own(m),
            }
        };
        let mut s = 0.5 * (term(j) + term(i));
        for m in j + 1..i {
            s += term(m);
        }
        h * s
    };
    match which {
        Triangle::K => integral - c.f(i, j),
        Triangle::L => -integral - c.f(i, j),
    }
}

fn solve_triangle(
    which: Triangle,
    c: &Coefficients,
    opts: &SolverOptions,
) -> Result<(TriKernel, SolveStats)> {
    let grid = c.grid;
    let n = grid.len();
    let h = grid.h();
    let mut table = vec![0.0; n * n];
    let mut source = vec![0.0; n * n];
    let mut stats = SolveStats::default();
    let name = match which {
        Triangle::K => "k kernel",
        Triangle::L => "l kernel",
    };

    table[0] = -c.g[0];
    source[0] = -c.f(0, 0);

    let mut row = vec![0.0; n];
    let mut next = vec![0.0; n];
    for i in 1..n {
        // explicit predictor along each characteristic
        for j in 1..=i {
            row[j] = table[(i - 1) * n + j - 1] + h * source[(i - 1) * n + j - 1];
        }
        row[0] = closure(which, c, &row, i);

        let mut converged = false;
        let mut change = f64::INFINITY;
        for sweep in 0..opts.max_iter {
            for j in 1..=i {
                let s = tri_source(which, opts.form, &table, &row, c, i, j);
                next[j] = table[(i - 1) * n + j - 1] + 0.5 * h * (source[(i - 1) * n + j - 1] + s);
            }
            next[0] = closure(which, c, &next, i);
            change = (0..=i).fold(0.0_f64, |m, j| m.max((next[j] - row[j]).abs()));
            row[..=i].copy_from_slice(&next[..=i]);
            stats.record(sweep, change);
            if !change.is_finite() {
                break;
            }
            if change < opts.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::IterationFailure {
                what: name,
                iterations: opts.max_iter,
                residual: change,
            });
        }
        table[i * n..i * n + i + 1].copy_from_slice(&row[..=i]);
        for j in 0..=i {
            source[i * n + j] = tri_source(which, opts.form, &table, &row, c, i, j);
        }
    }
    Ok((
        TriKernel {
            grid,
            values: table,
        },
        stats,
    ))
}

/// `y = 0` value of row `i`.
fn closure(which: Triangle, c: &Coefficients, row: &[f64], i: usize) -> f64 {
    match which {
        Triangle::L => -c.g[i],
        Triangle::K => {
            // k(x,0) = ∫₀ˣ k(x,y) g(y) dy − g(x), solved for k(x,0)
            let h = c.grid.h();
            let g = &c.g;
            let mut rhs = 0.5 * row[i] * g[i];
            for m in 1..i {
                rhs += row[m] * g[m];
            }
            rhs *= h;
            1.0 / (1.0 - 0.5 * h * g[0]) * (rhs - g[i])
        }
    }
}

/// Direct kernel `k` on the triangle.
pub fn solve_k(c: &Coefficients, opts: &SolverOptions) -> Result<TriKernel> {
    solve_k_with_stats(c, opts).map(|r| r.0)
}

pub fn solve_k_with_stats(
    c: &Coefficients,
    opts: &SolverOptions,
) -> Result<(TriKernel, SolveStats)> {
    check_k_closure(c)?;
    solve_triangle(Triangle::K, c, opts)
}

/// Inverse kernel `l` on the triangle.
pub fn solve_l(c: &Coefficients, opts: &SolverOptions) -> Result<TriKernel> {
    solve_l_with_stats(c, opts).map(|r| r.0)
}

pub fn solve_l_with_stats(
    c: &Coefficients,
    opts: &SolverOptions,
) -> Result<(TriKernel, SolveStats)> {
    solve_triangle(Triangle::L, c, opts)
}

const SINGULAR_CLOSURE: f64 = 1e-12;

fn check_k_closure(c: &Coefficients) -> Result<()> {
    let coef = 1.0 - 0.5 * c.grid.h() * c.g[0];
    if coef.abs() < SINGULAR_CLOSURE {
        return Err(Error::DegenerateBoundary {
            x: 0.0,
            coefficient: coef,
        });
    }
    Ok(())
}

/// `γ` on the unit square and `q(s) = γ(s, 1)`.
///
/// `initial` is the `x = 0` slice, normally `k(1, ·)`.
pub fn solve_gamma(
    initial: &Field,
    c: &Coefficients,
    delay: f64,
    opts: &SolverOptions,
) -> Result<(SquareKernel, EdgeKernel)> {
    solve_gamma_with_stats(initial, c, delay, opts).map(|(g, q, _)| (g, q))
}

pub fn solve_gamma_with_stats(
    initial: &Field,
    c: &Coefficients,
    delay: f64,
    opts: &SolverOptions,
) -> Result<(SquareKernel, EdgeKernel, SolveStats)> {
    if !(delay > 0.0) {
        return contract(format!("delay must be positive, got {delay}"));
    }
    if initial.grid() != c.grid {
        return contract("initial slice and coefficients live on different grids");
    }
    let grid = c.grid;
    let n = grid.len();
    let h = grid.h();
    let shift = delay * h;
    let w = grid.weights();
    let g = &c.g;

    let mut gamma = vec![0.0; n * n];
    gamma[..n].copy_from_slice(initial.values());

    // S(y_j) = ∫_{y_j}^1 f(τ, y_j) γ(x, τ) dτ for one slice
    let slice_source = |slice: &[f64], out: &mut [f64]| {
        for j in 0..n {
            if j == n - 1 {
                out[j] = 0.0;
                continue;
            }
            let mut s = 0.5 * (c.f(j, j) * slice[j] + c.f(n - 1, j) * slice[n - 1]);
            for m in j + 1..n - 1 {
                s += c.f(m, j) * slice[m];
            }
            out[j] = h * s;
        }
    };

    let mut s_old = vec![0.0; n];
    slice_source(&gamma[..n], &mut s_old);
    let mut s_new = vec![0.0; n];
    let mut cur = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut beta = vec![0.0; n];
    let mut stats = SolveStats::default();

    for i in 1..n {
        let (done, rest) = gamma.split_at_mut(i * n);
        let old = &done[(i - 1) * n..];
        let b_old = old[0];
        s_new.copy_from_slice(&s_old);
        cur.copy_from_slice(old);
        let mut converged = false;
        let mut change = f64::INFINITY;
        for sweep in 0..opts.max_iter {
            // α_j + β_j·b_new for every j ≥ 1
            let mut num = 0.0;
            let mut den = 1.0 - w[0] * g[0];
            for j in 1..n {
                let y = grid.node(j);
                let alpha;
                if y >= shift {
                    let foot = y - shift;
                    alpha =
                        lerp(old, h, foot) + 0.5 * delay * h * (lerp(&s_old, h, foot) + s_new[j]);
                    beta[j] = 0.0;
                } else {
                    // characteristic enters through y = 0 inside this step
                    let s = 1.0 - y / shift;
                    let s_corner = (1.0 - s) * s_old[0] + s * s_new[0];
                    alpha = (1.0 - s) * b_old + 0.5 * y * (s_corner + s_new[j]);
                    beta[j] = s;
                }
                next[j] = alpha;
                num += w[j] * g[j] * alpha;
                den -= w[j] * g[j] * beta[j];
            }
            if den.abs() < SINGULAR_CLOSURE {
                return Err(Error::DegenerateBoundary {
                    x: grid.node(i),
                    coefficient: den,
                });
            }
            let b_new = num / den;
            next[0] = b_new;
            for j in 1..n {
                next[j] += beta[j] * b_new;
            }
            change = next
                .iter()
                .zip(&cur)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            cur.copy_from_slice(&next);
            slice_source(&cur, &mut s_new);
            stats.record(sweep, change);
            if !change.is_finite() {
                break;
            }
            if change < opts.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::IterationFailure {
                what: "gamma kernel",
                iterations: opts.max_iter,
                residual: change,
            });
        }
        rest[..n].copy_from_slice(&cur);
        std::mem::swap(&mut s_old, &mut s_new);
    }
    let gamma = SquareKernel {
        grid,
        values: gamma,
    };
    let q = edge_of(&gamma);
    Ok((gamma, q, stats))
}

/// `η(x, y) = ψ(y − D x)·𝟙[y ≥ D x]` and `p(s) = η(s, 1)`.
pub fn solve_eta(initial: &Field, delay: f64, grid: Grid1D) -> Result<(SquareKernel, EdgeKernel)> {
    if !(delay > 0.0) {
        return contract(format!("delay must be positive, got {delay}"));
    }
    if initial.grid() != grid {
        return contract("initial slice lives on a different grid");
    }
    let n = grid.len();
    let h = grid.h();
    let mut values = vec![0.0; n * n];
    eta_into(initial.values(), delay, n, h, &mut values);
    let eta = SquareKernel { grid, values };
    let p = edge_of(&eta);
    Ok((eta, p))
}

pub(crate) fn eta_into(psi: &[f64], delay: f64, n: usize, h: f64, out: &mut [f64]) {
    for i in 0..n {
        let x = i as f64 * h;
        for j in 0..n {
            let arg = j as f64 * h - delay * x;
            out[i * n + j] = if arg >= -1e-12 {
                lerp(psi, h, arg.max(0.0))
            } else {
                0.0
            };
        }
    }
}

/// Kernels evaluated at one delay value.
#[derive(Debug, Clone)]
pub struct KernelBundle {
    pub d_hat: f64,
    pub gamma: SquareKernel,
    pub gamma_y: SquareKernel,
    pub gamma_d: SquareKernel,
    pub q: EdgeKernel,
    pub q_d: EdgeKernel,
}

/// `γ` solved at one cached delay node.
#[derive(Debug, Clone)]
pub struct CacheNode {
    pub delay: f64,
    pub gamma: SquareKernel,
    /// `M₂` table at this node, used by the update law.
    pub m2: SquareKernel,
}

/// `(γ, q)` on a grid of candidate delays over `[D̲, D̄]`, plus the
/// delay-independent `k` and `l`.
#[derive(Debug, Clone)]
pub struct KernelCache {
    coeffs: Coefficients,
    opts: SolverOptions,
    bounds: DelayBounds,
    k: TriKernel,
    l: TriKernel,
    nodes: Vec<CacheNode>,
}

/// Uniform candidate delays with exact end points.
pub fn delay_grid(bounds: DelayBounds, n_delay: usize) -> Vec<f64> {
    let (lo, hi) = (bounds.low(), bounds.high());
    (0..n_delay)
        .map(|m| {
            if m == n_delay - 1 {
                hi
            } else {
                lo + (hi - lo) * m as f64 / (n_delay - 1) as f64
            }
        })
        .collect()
}

/// Solves `k`, `l` once and `(γ, q)` at `n_delay` delays.
pub fn build_cache(
    c: &Coefficients,
    bounds: DelayBounds,
    n_delay: usize,
    opts: &SolverOptions,
) -> Result<KernelCache> {
    check_cache_shape(bounds, n_delay)?;
    let k = solve_k(c, opts)?;
    let l = solve_l(c, opts)?;
    let initial = k.last_row();
    let mut gammas = Vec::with_capacity(n_delay);
    for (index, &delay) in delay_grid(bounds, n_delay).iter().enumerate() {
        let (gamma, _) = solve_gamma(&initial, c, delay, opts).map_err(|e| Error::DelayNode {
            index,
            delay,
            source: Box::new(e),
        })?;
        gammas.push(gamma);
    }
    KernelCache::from_parts(c.clone(), *opts, bounds, k, l, gammas)
}

fn check_cache_shape(bounds: DelayBounds, n_delay: usize) -> Result<()> {
    if n_delay < 3 {
        return contract(format!("delay cache needs at least 3 nodes, got {n_delay}"));
    }
    if !(bounds.low() < bounds.high()) {
        return contract("delay cache needs D_low < D_high");
    }
    Ok(())
}

impl KernelCache {
    /// Reassembles a cache from solved tables; derived tables are recomputed.
    pub fn from_parts(
        coeffs: Coefficients,
        opts: SolverOptions,
        bounds: DelayBounds,
        k: TriKernel,
        l: TriKernel,
        gammas: Vec<SquareKernel>,
    ) -> Result<Self> {
        check_cache_shape(bounds, gammas.len())?;
        let grid = coeffs.grid;
        if k.grid != grid || l.grid != grid || gammas.iter().any(|g| g.grid != grid) {
            return contract("cache tables live on different grids");
        }
        let delays = delay_grid(bounds, gammas.len());
        let nodes = gammas
            .into_iter()
            .zip(delays)
            .map(|(gamma, delay)| {
                let gamma_y = gamma.d_dy();
                let m2 = adaptive::m2_table(&gamma, &gamma_y, &l, &coeffs);
                CacheNode { delay, gamma, m2 }
            })
            .collect();
        Ok(Self {
            coeffs,
            opts,
            bounds,
            k,
            l,
            nodes,
        })
    }

    pub fn grid(&self) -> Grid1D {
        self.coeffs.grid
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coeffs
    }

    pub fn options(&self) -> &SolverOptions {
        &self.opts
    }

    pub fn bounds(&self) -> DelayBounds {
        self.bounds
    }

    pub fn k(&self) -> &TriKernel {
        &self.k
    }

    pub fn l(&self) -> &TriKernel {
        &self.l
    }

    pub fn nodes(&self) -> &[CacheNode] {
        &self.nodes
    }

    pub fn delays(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.delay).collect()
    }

    /// Lower node index and weight of the upper node for `d_hat`.
    pub fn bracket(&self, d_hat: f64) -> Result<(usize, f64)> {
        let (lo, hi) = (self.bounds.low(), self.bounds.high());
        let slack = 1e-12 * hi;
        if !(d_hat >= lo - slack && d_hat <= hi + slack) {
            return contract(format!(
                "delay estimate {d_hat} outside cached range [{lo}, {hi}]"
            ));
        }
        let d = d_hat.clamp(lo, hi);
        let m = self.nodes.len();
        let step = (hi - lo) / (m - 1) as f64;
        let mut idx = (((d - lo) / step).floor() as usize).min(m - 2);
        // guard against rounding in the division
        while idx > 0 && self.nodes[idx].delay > d {
            idx -= 1;
        }
        while idx < m - 2 && self.nodes[idx + 1].delay <= d {
            idx += 1;
        }
        let (a, b) = (self.nodes[idx].delay, self.nodes[idx + 1].delay);
        let t = ((d - a) / (b - a)).clamp(0.0, 1.0);
        Ok((idx, t))
    }

    /// Central difference of `γ` across delay nodes (one-sided at the ends).
    pub fn gamma_d_at_node(&self, m: usize) -> SquareKernel {
        let last = self.nodes.len() - 1;
        let (a, b) = match m {
            0 => (0, 1),
            _ if m == last => (last - 1, last),
            _ => (m - 1, m + 1),
        };
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        let inv = 1.0 / (nb.delay - na.delay);
        let values = na
            .gamma
            .values
            .iter()
            .zip(&nb.gamma.values)
            .map(|(x, y)| (y - x) * inv)
            .collect();
        SquareKernel {
            grid: self.grid(),
            values,
        }
    }

    /// Blends a per-node table linearly in the delay coordinate.
    pub fn lerp_table_into<'a>(
        &'a self,
        d_hat: f64,
        pick: impl Fn(&'a CacheNode) -> &'a [f64],
        out: &mut [f64],
    ) -> Result<()> {
        let (m, t) = self.bracket(d_hat)?;
        let a = pick(&self.nodes[m]);
        if t == 0.0 {
            out.copy_from_slice(a);
            return Ok(());
        }
        let b = pick(&self.nodes[m + 1]);
        if t == 1.0 {
            out.copy_from_slice(b);
            return Ok(());
        }
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o = x + t * (y - x);
        }
        Ok(())
    }

    /// `η` and `p` at a delay, from the closed form.
    pub fn eta_at(&self, d: f64) -> Result<(SquareKernel, EdgeKernel)> {
        solve_eta(&self.l.last_row(), d, self.grid())
    }

    /// Kernel bundle solved directly at `d` (no interpolation). `γ_D̂` comes
    /// from re-solves at `d ± δ`, `δ = min(0.01, half the cache spacing)`.
    pub fn exact_bundle(&self, d: f64) -> Result<KernelBundle> {
        let initial = self.k.last_row();
        let (gamma, q) = solve_gamma(&initial, &self.coeffs, d, &self.opts)?;
        let spacing = self.nodes[1].delay - self.nodes[0].delay;
        let delta = (0.5 * spacing).min(0.01);
        let lo = (d - delta).max(self.bounds.low().min(d));
        let hi = (d + delta).min(self.bounds.high().max(d));
        let (g_lo, _) = solve_gamma(&initial, &self.coeffs, lo, &self.opts)?;
        let (g_hi, _) = solve_gamma(&initial, &self.coeffs, hi, &self.opts)?;
        let inv = 1.0 / (hi - lo);
        let gamma_d = SquareKernel {
            grid: self.grid(),
            values: g_lo
                .values
                .iter()
                .zip(&g_hi.values)
                .map(|(a, b)| (b - a) * inv)
                .collect(),
        };
        let gamma_y = gamma.d_dy();
        let q_d = edge_of(&gamma_d);
        Ok(KernelBundle {
            d_hat: d,
            gamma,
            gamma_y,
            gamma_d,
            q,
            q_d,
        })
    }
}

/// Bundle `(γ, γ_y, γ_D̂, q, q_D̂)` at `d_hat`, linear in the delay coordinate
/// and node-exact.
pub fn query_cache(cache: &KernelCache, d_hat: f64) -> Result<KernelBundle> {
    let grid = cache.grid();
    let n = grid.len();
    let (m, t) = cache.bracket(d_hat)?;
    let mut gamma = vec![0.0; n * n];
    cache.lerp_table_into(d_hat, |node| node.gamma.values(), &mut gamma)?;
    let gd_a = cache.gamma_d_at_node(m);
    let gamma_d = if t == 0.0 {
        gd_a
    } else {
        let gd_b = cache.gamma_d_at_node(m + 1);
        if t == 1.0 {
            gd_b
        } else {
            SquareKernel {
                grid,
                values: gd_a
                    .values
                    .iter()
                    .zip(&gd_b.values)
                    .map(|(a, b)| a + t * (b - a))
                    .collect(),
            }
        }
    };
    let gamma = SquareKernel {
        grid,
        values: gamma,
    };
    let gamma_y = gamma.d_dy();
    let q = edge_of(&gamma);
    let q_d = edge_of(&gamma_d);
    Ok(KernelBundle {
        d_hat,
        gamma,
        gamma_y,
        gamma_d,
        q,
        q_d,
    })
}

/// Sup-norm bounds of the six kernels and the norm-equivalence constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelBounds {
    pub k_bar: f64,
    pub l_bar: f64,
    pub gamma_bar: f64,
    pub q_bar: f64,
    pub eta_bar: f64,
    pub p_bar: f64,
    pub d_high: f64,
    pub r1: f64,
    pub r2: f64,
    pub s1: f64,
    pub s2: f64,
}

impl KernelBounds {
    pub fn from_bars(
        k_bar: f64,
        l_bar: f64,
        gamma_bar: f64,
        q_bar: f64,
        eta_bar: f64,
        p_bar: f64,
        d_high: f64,
    ) -> Self {
        Self {
            k_bar,
            l_bar,
            gamma_bar,
            q_bar,
            eta_bar,
            p_bar,
            d_high,
            r1: 2.0 + 2.0 * l_bar * l_bar + 3.0 * eta_bar * eta_bar,
            r2: 3.0 + 3.0 * d_high * d_high * p_bar * p_bar,
            s1: 2.0 + 2.0 * k_bar * k_bar + 3.0 * gamma_bar * gamma_bar,
            s2: 3.0 + 3.0 * d_high * d_high * q_bar * q_bar,
        }
    }
}

/// Sup norms over every sampled node and every cached delay.
pub fn kernel_bounds(cache: &KernelCache) -> KernelBounds {
    let grid = cache.grid();
    let n = grid.len();
    let psi = cache.l.last_row();
    let mut eta = vec![0.0; n * n];
    let (mut gamma_bar, mut q_bar, mut eta_bar, mut p_bar) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for node in &cache.nodes {
        gamma_bar = gamma_bar.max(node.gamma.sup_norm());
        q_bar = q_bar.max(sup_norm(&node.gamma.column(n - 1)));
        eta_into(psi.values(), node.delay, n, grid.h(), &mut eta);
        eta_bar = eta_bar.max(sup_norm(&eta));
        p_bar = p_bar.max((0..n).fold(0.0_f64, |m, i| m.max(eta[i * n + n - 1].abs())));
    }
    KernelBounds::from_bars(
        cache.k.sup_norm(),
        cache.l.sup_norm(),
        gamma_bar,
        q_bar,
        eta_bar,
        p_bar,
        cache.bounds.high(),
    )
}

/// Interior residual of the triangle kernel equation, discretized with
/// backward differences in `x` and `y` separately (independent of the
/// characteristic marching used by the solver). Returns the discrete L²
/// norm over the triangle.
pub fn triangle_residual(
    kernel: &TriKernel,
    c: &Coefficients,
    inverse: bool,
    form: KernelForm,
) -> f64 {
    let n = c.grid.len();
    let h = c.grid.h();
    let which = if inverse { Triangle::L } else { Triangle::K };
    let mut acc = 0.0;
    for i in 2..n {
        let row = kernel.row(i);
        for j in 1..i {
            let kx = (kernel.get(i, j) - kernel.get(i - 1, j)) / h;
            let ky = (kernel.get(i, j) - kernel.get(i, j - 1)) / h;
            let s = tri_source(which, form, &kernel.values, row, c, i, j);
            let r = kx + ky - s;
            acc += r * r;
        }
    }
    (acc * h * h).sqrt()
}

/// Interior residual of `γ_x + Dγ_y − D∫_y¹ f(τ,y)γ(x,τ)dτ` with backward
/// differences, as a discrete L² norm over the square.
pub fn gamma_residual(gamma: &SquareKernel, c: &Coefficients, delay: f64) -> f64 {
    let n = c.grid.len();
    let h = c.grid.h();
    let mut acc = 0.0;
    for i in 1..n {
        let row = gamma.row(i);
        for j in 1..n {
            let gx = (row[j] - gamma.get(i - 1, j)) / h;
            let gy = (row[j] - row[j - 1]) / h;
            let mut s = if j == n - 1 {
                0.0
            } else {
                0.5 * (c.f(j, j) * row[j] + c.f(n - 1, j) * row[n - 1])
                    + (j + 1..n - 1).map(|m| c.f(m, j) * row[m]).sum::<f64>()
            };
            s *= h;
            let r = gx + delay * gy - delay * s;
            acc += r * r;
        }
    }
    (acc * h * h).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, PI};

    fn grid(n: usize) -> Grid1D {
        Grid1D::new(n).unwrap()
    }

    fn reference_coeffs(n: usize) -> Coefficients {
        Coefficients::sample(
            grid(n),
            |x| 2.0 * (1.0 - x),
            |x, y| (2.0 * PI * x).cos() + 4.0 * (2.0 * PI * y).sin(),
        )
    }

    #[test]
    fn zero_coefficients_give_zero_kernels() {
        let c = Coefficients::zero(grid(21));
        let o = SolverOptions::default();
        assert_eq!(solve_k(&c, &o).unwrap().sup_norm(), 0.0);
        assert_eq!(solve_l(&c, &o).unwrap().sup_norm(), 0.0);
        let (g, q) = solve_gamma(&Field::zeros(grid(21)), &c, 1.3, &o).unwrap();
        assert_eq!(g.sup_norm(), 0.0);
        assert_eq!(q.sup_norm(), 0.0);
    }

    #[test]
    fn k_for_unit_g_is_minus_exponential() {
        let c = Coefficients::sample(grid(201), |_| 1.0, |_, _| 0.0);
        let k = solve_k(&c, &SolverOptions::default()).unwrap();
        assert!((k.get(200, 0) + E).abs() < 1e-3);
        let mut err = 0.0_f64;
        for i in 0..201 {
            for j in 0..=i {
                let (x, y) = (c.grid.node(i), c.grid.node(j));
                err = err.max((k.get(i, j) + (x - y).exp()).abs());
            }
        }
        assert!(err < 1e-3, "max error {err}");
    }

    #[test]
    fn l_for_constant_g_is_constant() {
        let c = Coefficients::sample(grid(31), |_| 0.7, |_, _| 0.0);
        let l = solve_l(&c, &SolverOptions::default()).unwrap();
        for i in 0..31 {
            for j in 0..=i {
                assert!((l.get(i, j) + 0.7).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn gamma_transports_linear_slice() {
        let g = grid(101);
        let c = Coefficients::zero(g);
        let psi = Field::from_fn(g, |y| y);
        let (gamma, q) = solve_gamma(&psi, &c, 0.5, &SolverOptions::default()).unwrap();
        for i in 0..101 {
            let x = g.node(i);
            assert!((q.get(i) - (1.0 - 0.5 * x)).abs() < 1e-12);
            for j in 0..101 {
                let y = g.node(j);
                let exact = if y >= 0.5 * x { y - 0.5 * x } else { 0.0 };
                // repeated linear interpolation smears the kink y = x/2 over a
                // band that widens like the square root of the step count
                let band = 3.0 * ((i + 1) as f64).sqrt() * g.h();
                let tol = if (y - 0.5 * x).abs() <= band {
                    band / 6.0
                } else {
                    1e-10
                };
                assert!(
                    (gamma.get(i, j) - exact).abs() <= tol,
                    "({x},{y}) err {}",
                    (gamma.get(i, j) - exact).abs()
                );
            }
        }
    }

    #[test]
    fn eta_examples() {
        let g = grid(101);
        let (eta, p) = solve_eta(&Field::zeros(g), 2.0, g).unwrap();
        assert_eq!(eta.sup_norm() + p.sup_norm(), 0.0);

        let (_, p) = solve_eta(&Field::constant(g, 1.0), 2.0, g).unwrap();
        for i in 0..101 {
            let expect = if g.node(i) <= 0.5 { 1.0 } else { 0.0 };
            assert_eq!(p.get(i), expect, "x = {}", g.node(i));
        }

        let (eta, p) = solve_eta(&Field::from_fn(g, |y| y), 0.5, g).unwrap();
        for i in 0..101 {
            assert!((p.get(i) - (1.0 - 0.5 * g.node(i))).abs() < 1e-12);
            assert_eq!(p.get(i), eta.get(i, 100));
        }
    }

    #[test]
    fn closure_degeneracy_is_reported() {
        // 1 − (h/2)·g(0) = 0 with h = 0.1
        let c = Coefficients::sample(grid(11), |_| 20.0, |_, _| 0.0);
        assert!(matches!(
            solve_k(&c, &SolverOptions::default()),
            Err(Error::DegenerateBoundary { .. })
        ));
    }

    #[test]
    fn iteration_budget_is_enforced() {
        let c = reference_coeffs(21);
        let opts = SolverOptions {
            max_iter: 1,
            ..Default::default()
        };
        assert!(matches!(
            solve_k(&c, &opts),
            Err(Error::IterationFailure { .. })
        ));
    }

    #[test]
    fn successive_approximation_contracts() {
        let c = reference_coeffs(101);
        let opts = SolverOptions::default();
        for stats in [
            solve_k_with_stats(&c, &opts).unwrap().1,
            solve_l_with_stats(&c, &opts).unwrap().1,
        ] {
            assert!(stats.max_sweeps < 20);
            for w in stats.history.windows(2) {
                if w[0] > 1e-13 {
                    assert!(w[1] <= 0.5 * w[0], "{:?}", stats.history);
                }
            }
        }
        let k = solve_k(&c, &opts).unwrap();
        let (_, _, stats) = solve_gamma_with_stats(&k.last_row(), &c, 2.0, &opts).unwrap();
        for w in stats.history.windows(2) {
            if w[0] > 1e-13 {
                assert!(w[1] <= 0.5 * w[0], "{:?}", stats.history);
            }
        }
    }

    #[test]
    fn residuals_decrease_under_refinement() {
        let opts = SolverOptions::default();
        let mut rk = Vec::new();
        let mut rl = Vec::new();
        let mut rg = Vec::new();
        for n in [51, 101, 201] {
            let c = reference_coeffs(n);
            let k = solve_k(&c, &opts).unwrap();
            let l = solve_l(&c, &opts).unwrap();
            let (gamma, _) = solve_gamma(&k.last_row(), &c, 2.0, &opts).unwrap();
            rk.push(triangle_residual(&k, &c, false, KernelForm::Derived));
            rl.push(triangle_residual(&l, &c, true, KernelForm::Derived));
            rg.push(gamma_residual(&gamma, &c, 2.0));
        }
        for r in [&rk, &rl, &rg] {
            assert!(r[1] < 0.7 * r[0] && r[2] < 0.7 * r[1], "{r:?}");
        }
    }

    #[test]
    fn cache_is_node_exact_and_consistent() {
        let g = grid(31);
        let c = reference_coeffs(31);
        let bounds = DelayBounds::new(0.5, 2.5).unwrap();
        let opts = SolverOptions::default();
        let cache = build_cache(&c, bounds, 5, &opts).unwrap();
        let delays = cache.delays();
        assert_eq!(delays[0], 0.5);
        assert_eq!(delays[4], 2.5);
        let initial = cache.k().last_row();
        for (m, &d) in delays.iter().enumerate() {
            let b = query_cache(&cache, d).unwrap();
            let (direct, q) = solve_gamma(&initial, &c, d, &opts).unwrap();
            assert_eq!(b.gamma.values(), direct.values());
            assert_eq!(b.q.values(), q.values());
            assert_eq!(b.gamma_d.values(), cache.gamma_d_at_node(m).values());
        }
        // interior central difference against fresh solves
        let (lo, _) = solve_gamma(&initial, &c, delays[1], &opts).unwrap();
        let (hi, _) = solve_gamma(&initial, &c, delays[3], &opts).unwrap();
        let gd = cache.gamma_d_at_node(2);
        let step = delays[3] - delays[1];
        for idx in 0..g.len() * g.len() {
            let fd = (hi.values()[idx] - lo.values()[idx]) / step;
            assert!((fd - gd.values()[idx]).abs() <= 1e-12 * (1.0 + fd.abs()));
        }
        assert!(query_cache(&cache, 2.6).is_err());
        assert!(query_cache(&cache, 0.4).is_err());
    }

    #[test]
    fn cache_interpolates_linearly_between_nodes() {
        let g = grid(11);
        let bounds = DelayBounds::new(1.0, 3.0).unwrap();
        let c = Coefficients::zero(g);
        let l = TriKernel::zeros(g);
        let k = TriKernel::zeros(g);
        // synthetic γ(x, y; D) = D·(x + y)
        let gammas = delay_grid(bounds, 3)
            .into_iter()
            .map(|d| {
                let mut v = vec![0.0; 121];
                for i in 0..11 {
                    for j in 0..11 {
                        v[i * 11 + j] = d * (g.node(i) + g.node(j));
                    }
                }
                SquareKernel::from_values(g, v).unwrap()
            })
            .collect();
        let cache =
            KernelCache::from_parts(c, SolverOptions::default(), bounds, k, l, gammas).unwrap();
        let b = query_cache(&cache, 1.5).unwrap();
        for i in 0..11 {
            for j in 0..11 {
                let expect = 1.5 * (g.node(i) + g.node(j));
                assert!((b.gamma.get(i, j) - expect).abs() < 1e-14);
                assert!((b.gamma_d.get(i, j) - (g.node(i) + g.node(j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_cache_is_zero() {
        let g = grid(21);
        let cache = build_cache(
            &Coefficients::zero(g),
            DelayBounds::new(0.1, 4.0).unwrap(),
            4,
            &SolverOptions::default(),
        )
        .unwrap();
        for node in cache.nodes() {
            assert_eq!(node.gamma.sup_norm(), 0.0);
            assert_eq!(node.m2.sup_norm(), 0.0);
        }
        let kb = kernel_bounds(&cache);
        assert_eq!((kb.r1, kb.r2, kb.s1, kb.s2), (2.0, 3.0, 2.0, 3.0));
    }

    #[test]
    fn bound_formulas() {
        let kb = KernelBounds::from_bars(1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 4.0);
        assert_eq!(kb.s1, 7.0);
        assert_eq!(kb.s2, 3.0);
        assert_eq!(kb.r1, 2.0);
        let kb = KernelBounds::from_bars(0.0, 1.0, 0.0, 0.5, 2.0, 0.5, 4.0);
        assert_eq!(kb.r1, 2.0 + 2.0 + 12.0);
        assert_eq!(kb.r2, 3.0 + 3.0 * 16.0 * 0.25);
        assert_eq!(kb.s2, 3.0 + 3.0 * 16.0 * 0.25);
    }

    #[test]
    fn q_and_p_are_edge_traces() {
        let c = reference_coeffs(41);
        let opts = SolverOptions::default();
        let k = solve_k(&c, &opts).unwrap();
        let l = solve_l(&c, &opts).unwrap();
        let (gamma, q) = solve_gamma(&k.last_row(), &c, 1.7, &opts).unwrap();
        let (eta, p) = solve_eta(&l.last_row(), 1.7, c.grid).unwrap();
        for i in 0..41 {
            assert_eq!(q.get(i), gamma.get(i, 40));
            assert_eq!(p.get(i), eta.get(i, 40));
        }
        // γ(0, ·) = k(1, ·)
        assert_eq!(gamma.row(0), k.row(40));
    }
}
