//! Lyapunov functional, composite norm, stability constants and trace
//! post-processing.

use crate::adaptive::{theta_star, StabilityConstants, UpdateLawConfig};
use crate::error::{contract, Result};
use crate::kernels::KernelBounds;
use crate::numerics::Field;
use crate::plant::{ResidualSample, Trace};
use crate::transforms::weighted_norm_n;

/// `V₁ = D·log(1 + N) + D̃²/(2θ)`.
pub fn lyapunov_v1(w: &Field, z: &Field, d_tilde: f64, b1: f64, theta: f64, d_true: f64) -> f64 {
    d_true * weighted_norm_n(w, z, b1).ln_1p() + d_tilde * d_tilde / (2.0 * theta)
}

/// `Ψ = ‖u‖² + ‖v‖² + D̃²`.
pub fn psi(u: &Field, v: &Field, d_tilde: f64) -> f64 {
    let (a, b) = (u.l2_norm(), v.l2_norm());
    a * a + b * b + d_tilde * d_tilde
}

/// `R = 2r₁ + 2r₂/b₁ + 2θ/D̲`, `ρ = D̄·max{1,b₁}(s₁+s₂) + 1/(2θ)` and `θ*`.
/// With `L̄ = 0` (no perturbation terms) every gain is admissible and `θ*`
/// is reported as `+∞`.
pub fn stability_constants(
    kb: &KernelBounds,
    law: &UpdateLawConfig,
    l_bar: f64,
) -> Result<StabilityConstants> {
    let theta_star = if l_bar == 0.0 {
        f64::INFINITY
    } else {
        theta_star(law.b1, law.bounds, l_bar)?
    };
    let r = 2.0 * kb.r1 + 2.0 * kb.r2 / law.b1 + 2.0 * law.theta / law.bounds.low();
    let rho = law.bounds.high() * law.b1.max(1.0) * (kb.s1 + kb.s2) + 1.0 / (2.0 * law.theta);
    Ok(StabilityConstants {
        l_bar,
        theta_star,
        r,
        rho,
    })
}

/// Target variables and perturbation fields at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSample {
    pub t: f64,
    pub w: Vec<f64>,
    pub z: Vec<f64>,
    pub d_hat: f64,
    pub d_hat_dot: f64,
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
}

/// L² norms of
///
/// ```text
/// r_w = w_t − w_x
/// r_z = D z_t − z_x + D̃ P₁ + D D̂′ P₂
/// ```
///
/// with forward differences in time and space; perturbations are taken at
/// the earlier level.
pub fn target_residual(
    prev: &TargetSample,
    next: &TargetSample,
    d_true: f64,
    h: f64,
) -> Result<(f64, f64)> {
    let dt = next.t - prev.t;
    if !(dt > 0.0) {
        return contract(format!("samples must be time ordered, got dt = {dt}"));
    }
    let n = prev.w.len();
    let lens = [
        prev.z.len(),
        prev.p1.len(),
        prev.p2.len(),
        next.w.len(),
        next.z.len(),
    ];
    if n < 2 || lens.iter().any(|&l| l != n) {
        return contract("target samples have inconsistent lengths");
    }
    let d_tilde = d_true - prev.d_hat;
    let (mut aw, mut az) = (0.0, 0.0);
    for i in 0..n - 1 {
        let rw = (next.w[i] - prev.w[i]) / dt - (prev.w[i + 1] - prev.w[i]) / h;
        let rz = d_true * (next.z[i] - prev.z[i]) / dt - (prev.z[i + 1] - prev.z[i]) / h
            + d_tilde * prev.p1[i]
            + d_true * prev.d_hat_dot * prev.p2[i];
        aw += rw * rw;
        az += rz * rz;
    }
    Ok(((h * aw).sqrt(), (h * az).sqrt()))
}

/// `(∫‖r_w‖² dt)^½` and `(∫‖r_z‖² dt)^½` over a residual series.
pub fn residual_l2_in_time(series: &[ResidualSample], dt: f64) -> (f64, f64) {
    let w: f64 = series.iter().map(|r| r.w * r.w).sum();
    let z: f64 = series.iter().map(|r| r.z * r.z).sum();
    ((dt * w).sqrt(), (dt * z).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub holds: bool,
    /// Smallest `log(bound) − log Ψ(t)`; `+∞` when every `Ψ(t)` is 0 and
    /// the bound is positive.
    pub min_log_margin: f64,
}

/// `Ψ(t) ≤ R(e^{ρΨ(0)} − 1)` at every logged time, in log space.
pub fn check_stability_bound(trace: &Trace, constants: &StabilityConstants) -> BoundCheck {
    let Some(first) = trace.records.first() else {
        return BoundCheck {
            holds: true,
            min_log_margin: f64::INFINITY,
        };
    };
    let a = constants.rho * first.psi;
    // log(e^a − 1) = a + log(1 − e^{−a})
    let log_bound = if a > 0.0 {
        constants.r.ln() + a + (-(-a).exp()).ln_1p()
    } else {
        f64::NEG_INFINITY
    };
    let mut holds = true;
    let mut margin = f64::INFINITY;
    for r in &trace.records {
        if !(r.psi.is_finite()) {
            holds = false;
            margin = f64::NEG_INFINITY;
            continue;
        }
        if r.psi == 0.0 {
            if log_bound == f64::NEG_INFINITY {
                margin = margin.min(0.0);
            }
            continue;
        }
        let m = log_bound - r.psi.ln();
        margin = margin.min(m);
        if m < 0.0 {
            holds = false;
        }
    }
    BoundCheck {
        holds,
        min_log_margin: margin,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monotonicity {
    pub eps: f64,
    pub violations: usize,
    /// Largest positive increment of `V₁` between consecutive records.
    pub max_increment: f64,
    /// `max_t V₁(t) − V₁(0)`.
    pub max_excess: f64,
}

/// Counts increments of `V₁` above `ε = 10·h·(1 + V₁(0))`.
pub fn v1_monotonicity(v1: &[f64], h: f64) -> Monotonicity {
    let v0 = v1.first().copied().unwrap_or(0.0);
    let eps = 10.0 * h * (1.0 + v0);
    let mut violations = 0;
    let mut max_increment = 0.0_f64;
    for w in v1.windows(2) {
        let inc = w[1] - w[0];
        max_increment = max_increment.max(inc);
        if !(inc <= eps) {
            violations += 1;
        }
    }
    let max_excess = v1.iter().fold(0.0_f64, |m, v| m.max(v - v0));
    Monotonicity {
        eps,
        violations,
        max_increment,
        max_excess,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regulation {
    /// Final-quarter maximum of `max|u|` over its initial value.
    pub u_ratio: f64,
    /// Final-quarter maximum of `max|v|` over its peak across the run; the
    /// initial actuator state is often identically zero.
    pub v_ratio: f64,
    pub final_norm_u_ratio: f64,
}

pub fn regulation(trace: &Trace) -> Regulation {
    let recs = &trace.records;
    if recs.is_empty() {
        return Regulation {
            u_ratio: 0.0,
            v_ratio: 0.0,
            final_norm_u_ratio: 0.0,
        };
    }
    let t_end = recs[recs.len() - 1].t;
    let start = 0.75 * t_end;
    let tail = recs.iter().filter(|r| r.t >= start);
    let (mut u_tail, mut v_tail) = (0.0_f64, 0.0_f64);
    for r in tail {
        u_tail = u_tail.max(r.max_abs_u);
        v_tail = v_tail.max(r.max_abs_v);
    }
    let v_peak = recs.iter().fold(0.0_f64, |m, r| m.max(r.max_abs_v));
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    Regulation {
        u_ratio: ratio(u_tail, recs[0].max_abs_u),
        v_ratio: ratio(v_tail, v_peak),
        final_norm_u_ratio: ratio(recs[recs.len() - 1].norm_u, recs[0].norm_u),
    }
}

/// `‖u‖² + ‖v‖² ≤ r₁‖w‖² + r₂‖z‖²` and `‖w‖² + ‖z‖² ≤ s₁‖u‖² + s₂‖v‖²`.
pub fn norm_equivalence(
    u: &Field,
    v: &Field,
    w: &Field,
    z: &Field,
    kb: &KernelBounds,
) -> (bool, bool) {
    let sq = |f: &Field| f.l2_norm().powi(2);
    let (nu, nv, nw, nz) = (sq(u), sq(v), sq(w), sq(z));
    (
        nu + nv <= kb.r1 * nw + kb.r2 * nz,
        nw + nz <= kb.s1 * nu + kb.s2 * nv,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub times: Vec<f64>,
    pub v1_series: Vec<f64>,
    pub psi_series: Vec<f64>,
    pub max_abs_u: Vec<f64>,
    pub max_abs_v: Vec<f64>,
    pub residual_norms: Vec<ResidualSample>,
    pub constants: StabilityConstants,
    pub monotonicity: Monotonicity,
    pub bound: BoundCheck,
    pub regulation: Regulation,
}

pub fn report(trace: &Trace, constants: StabilityConstants) -> DiagnosticsReport {
    let v1: Vec<f64> = trace.records.iter().map(|r| r.v1).collect();
    DiagnosticsReport {
        times: trace.times(),
        monotonicity: v1_monotonicity(&v1, trace.grid.h()),
        v1_series: v1,
        psi_series: trace.records.iter().map(|r| r.psi).collect(),
        max_abs_u: trace.records.iter().map(|r| r.max_abs_u).collect(),
        max_abs_v: trace.records.iter().map(|r| r.max_abs_v).collect(),
        residual_norms: trace.residuals.clone(),
        bound: check_stability_bound(trace, &constants),
        regulation: regulation(trace),
        constants,
    }
}

impl DiagnosticsReport {
    /// Flat `key = value` summary.
    pub fn summary(&self, extra: &[(&str, String)]) -> String {
        let c = &self.constants;
        let m = &self.monotonicity;
        let mut lines = vec![
            ("l_bar", format!("{}", c.l_bar)),
            ("theta_star", format!("{}", c.theta_star)),
            ("R", format!("{}", c.r)),
            ("rho", format!("{}", c.rho)),
            ("v1_eps", format!("{}", m.eps)),
            ("v1_violations", format!("{}", m.violations)),
            ("v1_max_increment", format!("{}", m.max_increment)),
            ("v1_max_excess", format!("{}", m.max_excess)),
            ("bound_holds", format!("{}", self.bound.holds)),
            (
                "bound_min_log_margin",
                format!("{}", self.bound.min_log_margin),
            ),
            ("regulation_u_ratio", format!("{}", self.regulation.u_ratio)),
            ("regulation_v_ratio", format!("{}", self.regulation.v_ratio)),
            (
                "final_norm_u_ratio",
                format!("{}", self.regulation.final_norm_u_ratio),
            ),
        ];
        lines.extend(extra.iter().cloned());
        let mut s = String::new();
        for (k, v) in lines {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Series aligned with the trace records.
    pub fn series_csv(&self, trace: &Trace) -> String {
        let mut s = String::from("t,V1,Psi,max_abs_u,max_abs_v,Dhat_dot,norm_wx,norm_zx\n");
        for r in &trace.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.t, r.v1, r.psi, r.max_abs_u, r.max_abs_v, r.d_hat_dot, r.wx_norm, r.zx_norm
            ));
        }
        s
    }
}
