//! Plant/actuator cascade
//!
//! ```text
//! u_t = u_x + g(x) u(0,t) + ∫₀ˣ f(x,y) u(y,t) dy,   u(1,t) = v(0,t)
//! D v_t = v_x,                                       v(1,t) = U(t)
//! ```
//!
//! advanced by first-order upwind with explicit sources, and the closed loop
//! around it. The closed loop solves the boundary control implicitly at the
//! new time level so that the transformed actuator state satisfies
//! `z(1) = 0` exactly on the grid.

use std::collections::VecDeque;

use crate::adaptive::m2_table;
use crate::adaptive::{self, control_u_closed, p1_into, tau_raw, UpdateLawConfig};
use crate::diagnostics::{self, TargetSample};
use crate::error::{contract, Error, Result};
use crate::kernels::{Coefficients, KernelCache};
use crate::numerics::{l2_norm, lerp, sup_norm, Field, Grid1D};
use crate::transforms::{volterra_into, weighted_norm_n_raw, z_into};

/// Known bounds `0 < D̲ ≤ D ≤ D̄` on the input delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayBounds {
    low: f64,
    high: f64,
}

impl DelayBounds {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low > 0.0 && low <= high && high.is_finite()) {
            return contract(format!(
                "delay bounds need 0 < low <= high, got [{low}, {high}]"
            ));
        }
        Ok(Self { low, high })
    }

    #[inline]
    pub fn low(&self) -> f64 {
        self.low
    }

    #[inline]
    pub fn high(&self) -> f64 {
        self.high
    }

    #[inline]
    pub fn contains(&self, d: f64) -> bool {
        d >= self.low && d <= self.high
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub t: f64,
    pub u: Field,
    pub v: Field,
    pub d_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Adaptive,
    /// `D̂ ≡ D`, kernels solved at the true delay.
    NonadaptiveExact,
    /// `D̂ ≡ D̂₀` held fixed.
    NonadaptiveMismatch,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Adaptive => "adaptive",
            Mode::NonadaptiveExact => "nonadaptive-exact",
            Mode::NonadaptiveMismatch => "nonadaptive-mismatch",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Mode::Adaptive),
            "nonadaptive-exact" => Ok(Mode::NonadaptiveExact),
            "nonadaptive-mismatch" => Ok(Mode::NonadaptiveMismatch),
            other => Err(Error::Validation(format!(
                "mode must be adaptive, nonadaptive-exact or nonadaptive-mismatch, got {other:?}"
            ))),
        }
    }
}

/// How the input delay is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActuatorModel {
    /// Transport PDE for `v`.
    #[default]
    Transport,
    /// Pure dead time: `u(1,t) = U(t − D)` from a buffer of past inputs, `v`
    /// rebuilt as `v(x,t) = U(t + D(x − 1))`.
    DelayBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub d_true: f64,
    pub d_hat0: f64,
    pub law: UpdateLawConfig,
    pub cfl: f64,
    pub t_final: f64,
    pub mode: Mode,
    pub u0: Field,
    pub v0: Field,
    /// Log every `record_stride`-th step.
    pub record_stride: usize,
    /// Store `u` every `snapshot_stride`-th step; 0 disables snapshots.
    pub snapshot_stride: usize,
    /// Evaluate the target-system residual at every step.
    pub residuals: bool,
}

impl SimConfig {
    pub fn dt(&self) -> f64 {
        self.cfl * self.u0.grid().h() * self.d_true.min(1.0)
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt() - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TraceRecord {
    pub t: f64,
    pub norm_u: f64,
    pub norm_v: f64,
    pub norm_w: f64,
    pub norm_z: f64,
    pub u_ctrl: f64,
    pub tau: f64,
    pub d_hat: f64,
    pub v1: f64,
    pub n: f64,
    pub d_hat_dot: f64,
    pub max_abs_u: f64,
    pub max_abs_v: f64,
    pub psi: f64,
    /// `‖w_x‖` and `‖z_x‖` by forward differences.
    pub wx_norm: f64,
    pub zx_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub u: Vec<f64>,
    /// Kept for transform-based checks; the CSV export carries `u` only.
    pub v: Vec<f64>,
}

/// `(t, ‖r_w‖, ‖r_z‖)` for the step ending at `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSample {
    pub t: f64,
    pub w: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub grid: Grid1D,
    pub dt: f64,
    pub steps: usize,
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<Snapshot>,
    pub residuals: Vec<ResidualSample>,
    /// `(t, detail)` if the run was aborted.
    pub divergence: Option<(f64, String)>,
    pub final_state: PlantState,
}

pub const TRACE_HEADER: &str = "t,norm_u,norm_v,norm_w,norm_z,U,tau,Dhat,V1,N";

impl Trace {
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.records.len() + 1));
        s.push_str(TRACE_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.t, r.norm_u, r.norm_v, r.norm_w, r.norm_z, r.u_ctrl, r.tau, r.d_hat, r.v1, r.n
            ));
        }
        s
    }

    pub fn snapshot_csv(&self, snap: &Snapshot) -> String {
        let mut s = String::from("x,u\n");
        for (i, u) in snap.u.iter().enumerate() {
            s.push_str(&format!("{},{}\n", self.grid.node(i), u));
        }
        s
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }
}

/// One upwind step of the interiors of `u`; the `x = 1` entry is left as 0.
fn advance_u(u: &[f64], c: &Coefficients, dt: f64, h: f64, out: &mut [f64]) {
    let n = u.len();
    let g = c.g();
    let r = dt / h;
    for i in 0..n - 1 {
        let row = c.f_row(i);
        let integral = if i == 0 {
            0.0
        } else {
            let mut s = 0.5 * (row[0] * u[0] + row[i] * u[i]);
            for m in 1..i {
                s += row[m] * u[m];
            }
            h * s
        };
        out[i] = u[i] + r * (u[i + 1] - u[i]) + dt * (g[i] * u[0] + integral);
    }
    out[n - 1] = 0.0;
}

fn advance_v(v: &[f64], d: f64, dt: f64, h: f64, out: &mut [f64]) {
    let n = v.len();
    let r = dt / (d * h);
    for i in 0..n - 1 {
        out[i] = v[i] + r * (v[i + 1] - v[i]);
    }
}

fn check_cfl(dt: f64, d_true: f64, h: f64) -> Result<()> {
    if !(d_true > 0.0) {
        return contract(format!("true delay must be positive, got {d_true}"));
    }
    if !(dt > 0.0) || dt > h * d_true.min(1.0) * (1.0 + 1e-9) {
        return contract(format!(
            "time step {dt} violates the CFL limit {}",
            h * d_true.min(1.0)
        ));
    }
    Ok(())
}

fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// One step of the open cascade driven by the input `u_ctrl` at the new time.
pub fn step_plant(
    state: &PlantState,
    u_ctrl: f64,
    d_true: f64,
    dt: f64,
    c: &Coefficients,
) -> Result<PlantState> {
    let grid = state.u.grid();
    state.u.same_grid(&state.v)?;
    if c.grid() != grid {
        return contract("coefficients and state live on different grids");
    }
    let h = grid.h();
    check_cfl(dt, d_true, h)?;
    let n = grid.len();
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    advance_u(state.u.values(), c, dt, h, &mut u);
    advance_v(state.v.values(), d_true, dt, h, &mut v);
    v[n - 1] = u_ctrl;
    u[n - 1] = v[0];
    let t = state.t + dt;
    if !all_finite(&u) || !all_finite(&v) {
        return Err(Error::Divergence {
            t,
            detail: "non-finite plant state".into(),
        });
    }
    Ok(PlantState {
        t,
        u: Field::new(grid, u)?,
        v: Field::new(grid, v)?,
        d_hat: state.d_hat,
    })
}

/// `z(x,t) = z₀(x + t/D)` while `x + t/D ≤ 1`, zero beyond.
pub fn mild_solution_z(z0: &Field, d: f64, t: f64) -> Result<Field> {
    if !(d > 0.0) {
        return contract(format!("delay must be positive, got {d}"));
    }
    if !(t >= 0.0) {
        return contract(format!("time must be nonnegative, got {t}"));
    }
    let grid = z0.grid();
    let shift = t / d;
    let values = grid
        .nodes()
        .map(|x| {
            let s = x + shift;
            if s <= 1.0 + 1e-12 {
                lerp(z0.values(), grid.h(), s.min(1.0))
            } else {
                0.0
            }
        })
        .collect();
    Field::new(grid, values)
}

/// Past inputs `U(s)`, `s ≤ t`, extended backwards by the initial actuator
/// state: `U(s) = v₀(1 + s/D)` for `−D ≤ s < 0`.
#[derive(Debug, Clone)]
struct DelayLine {
    v0: Vec<f64>,
    h: f64,
    d: f64,
    dt: f64,
    /// `samples[m]` is `U(t_{first + m})`.
    samples: VecDeque<f64>,
    first: usize,
}

impl DelayLine {
    fn new(v0: &[f64], h: f64, d: f64, dt: f64) -> Self {
        let mut samples = VecDeque::new();
        samples.push_back(v0[v0.len() - 1]);
        Self {
            v0: v0.to_vec(),
            h,
            d,
            dt,
            samples,
            first: 0,
        }
    }

    fn push(&mut self, u: f64, t_now: f64) {
        self.samples.push_back(u);
        // keep what the oldest lookup `t − D` still needs
        let keep_from = ((t_now - self.d) / self.dt).floor() - 2.0;
        while keep_from > self.first as f64 && self.samples.len() > 2 {
            self.samples.pop_front();
            self.first += 1;
        }
    }

    fn eval(&self, s: f64) -> f64 {
        if s < 0.0 {
            return lerp(&self.v0, self.h, (1.0 + s / self.d).max(0.0));
        }
        let pos = s / self.dt;
        let k = pos.floor();
        let frac = pos - k;
        let k = (k as usize).max(self.first);
        let idx = k - self.first;
        let last = self.samples.len() - 1;
        if idx >= last {
            return self.samples[last];
        }
        let (a, b) = (self.samples[idx], self.samples[idx + 1]);
        a + frac * (b - a)
    }

    /// Mean of the history over `[s − half, min(s + half, t_max)]`.
    ///
    /// The history is piecewise linear between its knots (sample times for
    /// `s ≥ 0`, the `v₀` nodes mapped to `D(x − 1)` before), so the trapezoid
    /// rule over the merged knots is exact. Point sampling at the grid
    /// spacing `D·h` would alias the step-to-step content of `U` down to low
    /// frequencies, where the `q`-convolution feeds it back.
    fn cell_mean(&self, s: f64, half: f64, t_max: f64) -> f64 {
        let a = s - half;
        let b = (s + half).min(t_max);
        if b <= a {
            return self.eval(s);
        }
        let mut knots = vec![a, b];
        if a < 0.0 && b > 0.0 {
            knots.push(0.0);
        }
        if a < 0.0 {
            let step = self.d * self.h;
            let lo = (a / step).ceil() as i64;
            let hi = (b.min(0.0) / step).floor() as i64;
            knots.extend(
                (lo..=hi)
                    .map(|k| k as f64 * step)
                    .filter(|&x| x > a && x < b),
            );
        }
        if b > 0.0 {
            let lo = (a.max(0.0) / self.dt).ceil() as i64;
            let hi = (b / self.dt).floor() as i64;
            knots.extend(
                (lo..=hi)
                    .map(|k| k as f64 * self.dt)
                    .filter(|&x| x > a && x < b),
            );
        }
        knots.sort_by(f64::total_cmp);
        let mut acc = 0.0;
        let mut prev = (knots[0], self.eval(knots[0]));
        for &x in &knots[1..] {
            let cur = (x, self.eval(x));
            acc += 0.5 * (cur.0 - prev.0) * (cur.1 + prev.1);
            prev = cur;
        }
        acc / (b - a)
    }
}

/// Kernel tables the loop needs at the current estimate.
struct LoopKernels {
    fixed: bool,
    d_hat: f64,
    gamma: Vec<f64>,
    q: Vec<f64>,
    m2: Vec<f64>,
}

impl LoopKernels {
    fn new(cache: &KernelCache, d_hat: f64, fixed: bool) -> Result<Self> {
        let n = cache.grid().len();
        let mut lk = Self {
            fixed,
            d_hat,
            gamma: vec![0.0; n * n],
            q: vec![0.0; n],
            m2: vec![0.0; n * n],
        };
        if fixed {
            let b = cache.exact_bundle(d_hat)?;
            lk.gamma.copy_from_slice(b.gamma.values());
            lk.q.copy_from_slice(b.q.values());
            let m2 = m2_table(&b.gamma, &b.gamma_y, cache.l(), cache.coefficients());
            lk.m2.copy_from_slice(m2.values());
        } else {
            lk.refresh(cache, d_hat)?;
        }
        Ok(lk)
    }

    fn refresh(&mut self, cache: &KernelCache, d_hat: f64) -> Result<()> {
        if self.fixed {
            return Ok(());
        }
        let n = self.q.len();
        self.d_hat = d_hat;
        cache.lerp_table_into(d_hat, |node| node.gamma.values(), &mut self.gamma)?;
        cache.lerp_table_into(d_hat, |node| node.m2.values(), &mut self.m2)?;
        for i in 0..n {
            self.q[i] = self.gamma[i * n + n - 1];
        }
        Ok(())
    }

    fn gamma_1(&self) -> &[f64] {
        let n = self.q.len();
        &self.gamma[(n - 1) * n..]
    }
}

fn forward_diff_norm(a: &[f64], h: f64) -> f64 {
    let d: Vec<f64> = a.windows(2).map(|p| (p[1] - p[0]) / h).collect();
    (h * d.iter().map(|x| x * x).sum::<f64>()).sqrt()
}

/// Runs the closed loop with the transport actuator.
pub fn simulate(config: &SimConfig, cache: &KernelCache) -> Result<Trace> {
    simulate_with(config, cache, ActuatorModel::Transport)
}

/// Runs the closed loop with the input delay realized as pure dead time.
pub fn delay_buffer_oracle(config: &SimConfig, cache: &KernelCache) -> Result<Trace> {
    simulate_with(config, cache, ActuatorModel::DelayBuffer)
}

pub fn simulate_with(
    config: &SimConfig,
    cache: &KernelCache,
    model: ActuatorModel,
) -> Result<Trace> {
    let grid = cache.grid();
    if config.u0.grid() != grid || config.v0.grid() != grid {
        return contract("initial data and kernel cache live on different grids");
    }
    let bounds = cache.bounds();
    if config.law.bounds != bounds {
        return contract("update-law bounds differ from the cache bounds");
    }
    if !bounds.contains(config.d_hat0) {
        return contract(format!(
            "initial estimate {} outside the delay bounds",
            config.d_hat0
        ));
    }
    if config.record_stride == 0 {
        return contract("record stride must be at least 1");
    }
    if !(config.cfl > 0.0 && config.cfl <= 1.0) {
        return contract(format!("cfl must lie in (0, 1], got {}", config.cfl));
    }
    let n = grid.len();
    let h = grid.h();
    let d = config.d_true;
    let dt = config.dt();
    check_cfl(dt, d, h)?;
    let steps = config.steps();
    let law = config.law;
    let adaptive_mode = config.mode == Mode::Adaptive;
    let d_hat_start = match config.mode {
        Mode::NonadaptiveExact => d,
        _ => config.d_hat0,
    };
    if !bounds.contains(d_hat_start) {
        return contract(format!("delay {d_hat_start} outside the cached bounds"));
    }
    let c = cache.coefficients();
    let mut kern = LoopKernels::new(cache, d_hat_start, !adaptive_mode)?;

    let mut u = config.u0.values().to_vec();
    let mut v = config.v0.values().to_vec();
    let mut d_hat = d_hat_start;
    let mut t = 0.0;
    let mut line = match model {
        ActuatorModel::DelayBuffer => Some(DelayLine::new(&v, h, d, dt)),
        ActuatorModel::Transport => None,
    };

    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p1 = vec![0.0; n];
    let mut u_next = vec![0.0; n];
    let mut v_next = vec![0.0; n];
    let mut records = Vec::with_capacity(steps / config.record_stride + 2);
    let mut snapshots = Vec::new();
    let mut residuals = Vec::new();
    let mut prev_sample: Option<TargetSample> = None;
    let mut divergence = None;

    let mut step = 0usize;
    loop {
        // observation at t
        volterra_into(&u, cache.k().values(), h, -1.0, &mut w);
        z_into(&u, &v, &kern.gamma, &kern.q, d_hat, h, &mut z);
        let n_val = weighted_norm_n_raw(&w, &z, h, law.b1);
        p1_into(&w, &z, &kern.q, &kern.m2, h, &mut p1);
        let tau = tau_raw(&w, &z, &p1, h, law.b1);
        let rate = if adaptive_mode {
            law.theta * adaptive::project(d_hat, tau, bounds)?
        } else {
            0.0
        };
        let d_tilde = d - d_hat;
        let norm_u = l2_norm(&u, h);
        let norm_v = l2_norm(&v, h);

        let finite = n_val.is_finite() && norm_u.is_finite() && norm_v.is_finite();
        if !finite || norm_u > 1e12 || norm_v > 1e12 {
            divergence = Some((t, "state norm is non-finite or exceeds 1e12".to_string()));
        }

        if config.residuals && divergence.is_none() {
            let p2 = if adaptive_mode {
                let bundle = crate::kernels::query_cache(cache, d_hat)?;
                let (_, p2) = adaptive::p_from_plant(
                    &Field::new(grid, u.clone())?,
                    &Field::new(grid, v.clone())?,
                    &bundle,
                    c,
                )?;
                p2.into_values()
            } else {
                vec![0.0; n]
            };
            let sample = TargetSample {
                t,
                w: w.clone(),
                z: z.clone(),
                d_hat,
                d_hat_dot: rate,
                p1: p1.clone(),
                p2,
            };
            if let Some(prev) = &prev_sample {
                let (rw, rz) = diagnostics::target_residual(prev, &sample, d, h)?;
                residuals.push(ResidualSample { t, w: rw, z: rz });
            }
            prev_sample = Some(sample);
        }

        if step.is_multiple_of(config.record_stride) || step == steps || divergence.is_some() {
            records.push(TraceRecord {
                t,
                norm_u,
                norm_v,
                norm_w: l2_norm(&w, h),
                norm_z: l2_norm(&z, h),
                u_ctrl: v[n - 1],
                tau,
                d_hat,
                v1: d * n_val.ln_1p() + d_tilde * d_tilde / (2.0 * law.theta),
                n: n_val,
                d_hat_dot: rate,
                max_abs_u: sup_norm(&u),
                max_abs_v: sup_norm(&v),
                psi: norm_u * norm_u + norm_v * norm_v + d_tilde * d_tilde,
                wx_norm: forward_diff_norm(&w, h),
                zx_norm: forward_diff_norm(&z, h),
            });
        }
        if config.snapshot_stride > 0
            && (step.is_multiple_of(config.snapshot_stride) || step == steps)
        {
            snapshots.push(Snapshot {
                t,
                u: u.clone(),
                v: v.clone(),
            });
        }
        if divergence.is_some() || step == steps {
            break;
        }

        // update law, then plant interiors, then boundaries
        let d_hat_new = if adaptive_mode {
            (d_hat + dt * rate).clamp(bounds.low(), bounds.high())
        } else {
            d_hat
        };
        let t_new = (step + 1) as f64 * dt;
        advance_u(&u, c, dt, h, &mut u_next);
        match line.as_mut() {
            None => {
                advance_v(&v, d, dt, h, &mut v_next);
                u_next[n - 1] = v_next[0];
            }
            Some(line) => {
                for (i, vi) in v_next.iter_mut().enumerate().take(n - 1) {
                    *vi = line.cell_mean(t_new + d * (grid.node(i) - 1.0), 0.5 * d * h, t_new - dt);
                }
                u_next[n - 1] = line.eval(t_new - d);
            }
        }
        kern.refresh(cache, d_hat_new)?;
        let u_ctrl = control_u_closed(&u_next, &mut v_next, kern.gamma_1(), &kern.q, d_hat_new, h);
        if let Some(line) = line.as_mut() {
            line.push(u_ctrl, t_new);
        }
        std::mem::swap(&mut u, &mut u_next);
        std::mem::swap(&mut v, &mut v_next);
        d_hat = d_hat_new;
        t = t_new;
        step += 1;
        if !all_finite(&u) || !all_finite(&v) {
            divergence = Some((t, "non-finite plant state".to_string()));
            // the non-finite state cannot be logged; stop here
            records.push(TraceRecord {
                t,
                d_hat,
                norm_u: f64::INFINITY,
                norm_v: f64::INFINITY,
                ..Default::default()
            });
            break;
        }
    }

    let final_state = PlantState {
        t,
        u: Field::new(
            grid,
            u.iter()
                .map(|x| if x.is_finite() { *x } else { 0.0 })
                .collect(),
        )?,
        v: Field::new(
            grid,
            v.iter()
                .map(|x| if x.is_finite() { *x } else { 0.0 })
                .collect(),
        )?,
        d_hat,
    };
    Ok(Trace {
        grid,
        dt,
        steps: step,
        records,
        snapshots,
        residuals,
        divergence,
        final_state,
    })
}
