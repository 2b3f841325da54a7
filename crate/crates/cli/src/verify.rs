//! `verify` suites: kernel residuals and reciprocity, transport oracles,
//! projection cases and refinement slopes.

use std::path::Path;
use std::time::Instant;

use hypbstep_core::adaptive::{euler_update, project};
use hypbstep_core::diagnostics::residual_l2_in_time;
use hypbstep_core::kernels::{gamma_residual, solve_gamma, solve_k, triangle_residual};
use hypbstep_core::numerics::convergence_slope;
use hypbstep_core::plant::{delay_buffer_oracle, simulate, step_plant};
use hypbstep_core::transforms::{forward_transform, inverse_transform};
use hypbstep_core::{
    query_cache, Coefficients, DelayBounds, Field, Grid1D, KernelForm, Mode, PlantState,
    ScenarioConfig, SolverOptions, UpdateLawConfig,
};

use crate::error::{CliError, CliResult};
use crate::store;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Level {
    Quick,
    Full,
}

impl Level {
    fn grids(self) -> &'static [usize] {
        match self {
            Level::Quick => &[101, 201],
            Level::Full => &[101, 201, 401],
        }
    }
}

type SuiteFn<'a> = Box<dyn Fn() -> CliResult<Suite> + 'a>;

pub struct Suite {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn list(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.3e}"))
        .collect::<Vec<_>>()
        .join(" → ")
}

fn reference(n: usize, n_d: usize) -> ScenarioConfig {
    ScenarioConfig {
        n_x: n,
        n_d,
        ..ScenarioConfig::default()
    }
}

fn hs(grids: &[usize]) -> Vec<f64> {
    grids.iter().map(|&n| 1.0 / (n - 1) as f64).collect()
}

/// `f ≡ 0`, `g ≡ 1` has `k = −e^{x−y}`.
fn kernel_oracle(level: Level) -> CliResult<Suite> {
    let mut errs = vec![];
    for &n in level.grids() {
        let grid = Grid1D::new(n)?;
        let c = Coefficients::sample(grid, |_| 1.0, |_, _| 0.0);
        let k = solve_k(&c, &SolverOptions::default())?;
        let mut err = 0.0_f64;
        for i in 0..n {
            for j in 0..=i {
                err = err.max((k.get(i, j) + (grid.node(i) - grid.node(j)).exp()).abs());
            }
        }
        errs.push(err);
    }
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    Ok(Suite {
        name: "kernel oracle",
        pass: errs.iter().all(|&e| e <= 1e-3) && decreasing,
        detail: format!("max |k + e^(x−y)|: {} (≤ 1e-3, decreasing)", list(&errs)),
    })
}

/// Discrete residuals of `k`, `l` and `γ(·,·,2)` fall at first order.
fn kernel_residuals(level: Level) -> CliResult<Suite> {
    let grids = level.grids();
    let opts = SolverOptions::default();
    let (mut rk, mut rl, mut rg) = (vec![], vec![], vec![]);
    for &n in grids {
        let c = reference(n, 3).coefficients()?;
        let k = solve_k(&c, &opts)?;
        let l = hypbstep_core::kernels::solve_l(&c, &opts)?;
        let (gamma, _) = solve_gamma(&k.last_row(), &c, 2.0, &opts)?;
        rk.push(triangle_residual(&k, &c, false, KernelForm::Derived));
        rl.push(triangle_residual(&l, &c, true, KernelForm::Derived));
        rg.push(gamma_residual(&gamma, &c, 2.0));
    }
    let h = hs(grids);
    let slopes = [&rk, &rl, &rg].map(|r| convergence_slope(&h, r));
    Ok(Suite {
        name: "kernel residuals",
        pass: slopes.iter().all(|&s| s >= 0.7),
        detail: format!(
            "slopes k {:.2}, l {:.2}, γ {:.2} (≥ 0.7); k {}; l {}; γ {}",
            slopes[0],
            slopes[1],
            slopes[2],
            list(&rk),
            list(&rl),
            list(&rg)
        ),
    })
}

/// Forward then inverse transform of a smooth `(u, v)` at three delays;
/// the `u` channel round trip is the `k`/`l` reciprocity.
fn reciprocity(level: Level, cache_dir: Option<&Path>) -> CliResult<Suite> {
    let grids = level.grids();
    let delays = [0.1, 2.05, 4.0];
    let mut worst = vec![];
    let mut ok = true;
    for &n in grids {
        let (cache, _) = store::load_or_build(&reference(n, 5), cache_dir)?;
        let grid = cache.grid();
        let u = Field::from_fn(grid, |x| (2.0 * x).sin() + x * x);
        let v = Field::from_fn(grid, |x| (1.0 - x).powi(2));
        let mut e = 0.0_f64;
        for d in delays {
            let t = forward_transform(&u, &v, &query_cache(&cache, d)?, cache.k())?;
            let (eta, p) = cache.eta_at(d)?;
            let (u2, _) = inverse_transform(&t.w, &t.z, cache.l(), &eta, &p, d)?;
            let diff: Vec<f64> = u
                .values()
                .iter()
                .zip(u2.values())
                .map(|(a, b)| a - b)
                .collect();
            e = e.max(Field::new(grid, diff)?.l2_norm() / u.l2_norm());
        }
        ok &= e <= grid.h();
        worst.push(e);
    }
    let slope = convergence_slope(&hs(grids), &worst);
    Ok(Suite {
        name: "transform reciprocity",
        pass: ok && slope >= 0.9,
        detail: format!(
            "relative L² error of u at D = 0.1, 2.05, 4: {} (≤ h, slope {slope:.2} ≥ 0.9)",
            list(&worst)
        ),
    })
}

/// Pure transport reproduces `v(x,t) = U(t + D(x − 1))`, and the delay
/// buffer leaves `u(1) = 0` for `t < D`.
fn transport(level: Level) -> CliResult<Suite> {
    let d = 2.0;
    let input = |t: f64| (1.5 * t).sin() + 0.3;
    let grids = level.grids();
    let mut errs = vec![];
    for &n in grids {
        let grid = Grid1D::new(n)?;
        let c = Coefficients::zero(grid);
        let dt = 0.9 * grid.h();
        let mut state = PlantState {
            t: 0.0,
            u: Field::zeros(grid),
            v: Field::from_fn(grid, |x| input(d * (x - 1.0))),
            d_hat: d,
        };
        for _ in 0..(3.0 / dt).round() as usize {
            let next = state.t + dt;
            state = step_plant(&state, input(next), d, dt, &c)?;
        }
        let err = grid
            .nodes()
            .zip(state.v.values())
            .fold(0.0_f64, |m, (x, v)| {
                m.max((v - input(state.t + d * (x - 1.0))).abs())
            });
        errs.push(err);
    }
    let slope = convergence_slope(&hs(grids), &errs);

    let s = ScenarioConfig {
        n_x: 51,
        n_d: 3,
        mode: Mode::NonadaptiveExact,
        d_hat0: 2.0,
        t_final: 1.9,
        snapshot_stride: 1,
        g: "0.5*(1-x)".parse()?,
        f: "0.5*cos(pi*x)*y".parse()?,
        u0: "x*(1-x)".parse()?,
        ..ScenarioConfig::default()
    };
    let (cache, _) = store::load_or_build(&s, None)?;
    let tr = delay_buffer_oracle(&s.sim_config()?, &cache)?;
    let n = tr.grid.len();
    let dead = tr.snapshots.iter().all(|snap| snap.u[n - 1] == 0.0);
    let actuated = tr.records.iter().any(|r| r.u_ctrl != 0.0);

    Ok(Suite {
        name: "transport oracles",
        pass: slope >= 0.8 && dead && actuated,
        detail: format!(
            "delay identity sup error {} (slope {slope:.2} ≥ 0.8); buffer dead time exact: {}",
            list(&errs),
            dead && actuated
        ),
    })
}

fn projection() -> CliResult<Suite> {
    let b = DelayBounds::new(0.1, 4.0)?;
    let law = UpdateLawConfig::new(0.021, 9.0, b)?;
    let mut failed = vec![];
    let cases: [(f64, f64, f64); 6] = [
        (2.0, 1.5, 1.5),
        (2.0, -1.5, -1.5),
        (0.1, -1.0, 0.0),
        (0.1, 1.0, 1.0),
        (4.0, 1.0, 0.0),
        (4.0, -1.0, -1.0),
    ];
    for (d, tau, want) in cases {
        if project(d, tau, b)? != want {
            failed.push(format!("Proj({d}, {tau})"));
        }
    }
    if project(4.5, 0.0, b).is_ok() {
        failed.push("out-of-bounds estimate accepted".into());
    }
    for (d, tau) in [(3.99, 1e6), (0.11, -1e6), (2.0, 0.0)] {
        let next = euler_update(d, tau, &law, 0.01)?;
        if !b.contains(next) {
            failed.push(format!("update from {d} left the bounds"));
        }
    }
    Ok(Suite {
        name: "projection cases",
        pass: failed.is_empty(),
        detail: if failed.is_empty() {
            "9 cases and the out-of-bounds rejection".into()
        } else {
            failed.join(", ")
        },
    })
}

/// Target residuals of the exact-delay closed loop fall at first order.
fn refinement(level: Level) -> CliResult<Suite> {
    let grids = level.grids();
    let (mut rw, mut rz) = (vec![], vec![]);
    for &n in grids {
        let s = ScenarioConfig {
            mode: Mode::NonadaptiveExact,
            d_hat0: 2.0,
            t_final: 6.0,
            ..reference(n, 3)
        };
        let (cache, _) = store::load_or_build(&s, None)?;
        let mut cfg = s.sim_config()?;
        cfg.residuals = true;
        cfg.snapshot_stride = 0;
        let tr = simulate(&cfg, &cache)?;
        let (a, b) = residual_l2_in_time(&tr.residuals, tr.dt);
        rw.push(a);
        rz.push(b);
    }
    let h = hs(grids);
    let (sw, sz) = (convergence_slope(&h, &rw), convergence_slope(&h, &rz));
    let ok = |s: f64| (0.7..=1.3).contains(&s);
    Ok(Suite {
        name: "refinement slopes",
        pass: ok(sw) && ok(sz),
        detail: format!(
            "target residual slopes w {sw:.2}, z {sz:.2} (in [0.7, 1.3]); w {}; z {}",
            list(&rw),
            list(&rz)
        ),
    })
}

/// Runs every suite, prints one line each, and fails if any suite does.
pub fn cmd_verify(level: Level, cache_dir: Option<&Path>) -> CliResult<()> {
    let start = Instant::now();
    let suites: [(&str, SuiteFn); 6] = [
        ("kernel oracle", Box::new(|| kernel_oracle(level))),
        ("kernel residuals", Box::new(|| kernel_residuals(level))),
        (
            "transform reciprocity",
            Box::new(|| reciprocity(level, cache_dir)),
        ),
        ("transport oracles", Box::new(|| transport(level))),
        ("projection cases", Box::new(projection)),
        ("refinement slopes", Box::new(|| refinement(level))),
    ];
    let mut failures = vec![];
    for (name, run) in suites {
        let t = Instant::now();
        let suite = run().unwrap_or_else(|e| Suite {
            name,
            pass: false,
            detail: format!("error: {e}"),
        });
        println!(
            "{} {}: {} [{:.2}s]",
            if suite.pass { "PASS" } else { "FAIL" },
            suite.name,
            suite.detail,
            t.elapsed().as_secs_f64()
        );
        if !suite.pass {
            failures.push(suite.name);
        }
    }
    println!("total {:.2}s", start.elapsed().as_secs_f64());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "failing suites: {}",
            failures.join(", ")
        )))
    }
}
