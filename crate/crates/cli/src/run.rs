//! `run` and `kernels` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use hypbstep_core::adaptive::estimate_lbar_over_cache;
use hypbstep_core::diagnostics::{self, stability_constants, DiagnosticsReport};
use hypbstep_core::kernels::kernel_bounds;
use hypbstep_core::plant::simulate;
use hypbstep_core::scenario::preset;
use hypbstep_core::{
    parse_scenario, query_cache, KernelCache, ScenarioConfig, StabilityConstants, Trace,
};

use crate::error::{CliError, CliResult};
use crate::store::{self, Origin};
use crate::svg;

/// Options shared by `run` and `kernels`.
#[derive(Debug, Clone, Default)]
pub struct Flags {
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub no_svg: bool,
    pub printed_kernel_forms: bool,
}

/// Paths written by a run; every one exists after a successful exit.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub trace: PathBuf,
    pub snapshots: PathBuf,
    pub diagnostics: PathBuf,
    pub summary: PathBuf,
    pub svgs: Vec<PathBuf>,
}

impl RunArtifacts {
    /// Declared files that are missing or empty.
    fn incomplete(&self) -> Vec<PathBuf> {
        let files = [&self.trace, &self.diagnostics, &self.summary]
            .into_iter()
            .cloned()
            .chain([self.snapshots.join("index.csv")])
            .chain(self.svgs.iter().cloned());
        files
            .filter(|p| fs::metadata(p).map_or(true, |m| m.len() == 0))
            .collect()
    }
}

/// Reads a scenario file, or falls back to a bundled preset of that name.
pub fn load_scenario(arg: &str, printed_kernel_forms: bool) -> CliResult<ScenarioConfig> {
    let path = Path::new(arg);
    let text = if path.is_file() {
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {arg}: {e}")))?
    } else if let Some(text) = preset(arg) {
        text.to_string()
    } else {
        return Err(CliError::Config(format!(
            "no scenario file or preset named {arg:?}"
        )));
    };
    let mut s = parse_scenario(&text).map_err(|e| CliError::Config(format!("{arg}: {e}")))?;
    if printed_kernel_forms {
        s.compat_printed_kernels = true;
    }
    Ok(s)
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(CliError::io(path))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(CliError::io(path))
}

fn out_dir(flags: &Flags, s: &ScenarioConfig, default_root: &str) -> PathBuf {
    flags
        .out
        .clone()
        .or_else(|| s.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new(default_root).join(&s.name))
}

fn cache(s: &ScenarioConfig, flags: &Flags) -> CliResult<KernelCache> {
    let (cache, origin) = store::load_or_build(s, flags.cache.as_deref())?;
    let what = match origin {
        Origin::Built => "built",
        Origin::Loaded => "loaded",
        Origin::Rebuilt => "rebuilt (stored copy was unusable)",
    };
    eprintln!("kernel cache {what}: n_x = {}, n_d = {}", s.n_x, s.n_d);
    Ok(cache)
}

/// `θ*`, `L̄`, `R`, `ρ` for the scenario's law and cache.
pub fn constants_for(s: &ScenarioConfig, cache: &KernelCache) -> CliResult<StabilityConstants> {
    let law = s.law().map_err(|e| CliError::Config(e.to_string()))?;
    let l_bar = estimate_lbar_over_cache(cache)?;
    Ok(stability_constants(&kernel_bounds(cache), &law, l_bar)?)
}

/// Removes snapshot files left by an earlier run into the same directory.
fn clear_snapshots(dir: &Path) -> CliResult<()> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(());
    };
    for entry in entries.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("u_") && name.ends_with(".csv") {
            fs::remove_file(entry.path()).map_err(CliError::io(entry.path()))?;
        }
    }
    Ok(())
}

fn summary_extras(
    s: &ScenarioConfig,
    trace: &Trace,
    c: &StabilityConstants,
) -> Vec<(&'static str, String)> {
    let last = trace.records.last();
    let get = |f: fn(&hypbstep_core::TraceRecord) -> f64| last.map_or(f64::NAN, f);
    let status = match &trace.divergence {
        Some((t, why)) => format!("diverged at t = {t}: {why}"),
        None => "completed".into(),
    };
    vec![
        ("scenario", s.name.clone()),
        ("mode", s.mode.as_str().into()),
        ("n_x", s.n_x.to_string()),
        ("n_d", s.n_d.to_string()),
        ("dt", trace.dt.to_string()),
        ("steps", trace.steps.to_string()),
        ("t_end", get(|r| r.t).to_string()),
        ("final_norm_u", get(|r| r.norm_u).to_string()),
        ("final_norm_v", get(|r| r.norm_v).to_string()),
        ("final_norm_w", get(|r| r.norm_w).to_string()),
        ("final_norm_z", get(|r| r.norm_z).to_string()),
        ("final_dhat", get(|r| r.d_hat).to_string()),
        ("theta", s.theta.to_string()),
        (
            "theta_below_theta_star",
            (s.theta < c.theta_star).to_string(),
        ),
        ("strict_stability", s.strict_stability.to_string()),
        ("status", status),
    ]
}

fn print_table(trace: &Trace, report: &DiagnosticsReport) {
    let last = trace.records.last();
    let get = |f: fn(&hypbstep_core::TraceRecord) -> f64| last.map_or(f64::NAN, f);
    let c = &report.constants;
    let rows = [
        ("T", format!("{}", get(|r| r.t))),
        ("‖u(T)‖", format!("{:.6e}", get(|r| r.norm_u))),
        ("‖v(T)‖", format!("{:.6e}", get(|r| r.norm_v))),
        ("‖w(T)‖", format!("{:.6e}", get(|r| r.norm_w))),
        ("‖z(T)‖", format!("{:.6e}", get(|r| r.norm_z))),
        ("D̂(T)", format!("{:.6}", get(|r| r.d_hat))),
        ("θ*", format!("{:.6e}", c.theta_star)),
        ("L̄", format!("{:.6e}", c.l_bar)),
        ("R", format!("{:.6e}", c.r)),
        ("ρ", format!("{:.6e}", c.rho)),
        (
            "V₁ violations",
            format!(
                "{} (max increment {:.3e}, tolerance {:.3e})",
                report.monotonicity.violations,
                report.monotonicity.max_increment,
                report.monotonicity.eps
            ),
        ),
    ];
    for (k, v) in rows {
        println!("{k:<16}{v}");
    }
}

fn write_svgs(dir: &Path, trace: &Trace) -> CliResult<Vec<PathBuf>> {
    let t = trace.times();
    let series = |f: fn(&hypbstep_core::TraceRecord) -> f64| -> Vec<f64> {
        trace.records.iter().map(f).collect()
    };
    let x: Vec<f64> = trace.grid.nodes().collect();
    let snap_t: Vec<f64> = trace.snapshots.iter().map(|s| s.t).collect();
    let rows: Vec<Vec<f64>> = trace.snapshots.iter().map(|s| s.u.clone()).collect();
    let plots = [
        ("u_heatmap.svg", svg::heatmap("u(x, t)", &x, &snap_t, &rows)),
        (
            "norm_u.svg",
            svg::line_plot("‖u(·, t)‖", "t", "‖u‖", &t, &series(|r| r.norm_u)),
        ),
        (
            "control.svg",
            svg::line_plot("control U(t)", "t", "U", &t, &series(|r| r.u_ctrl)),
        ),
        (
            "dhat_dot.svg",
            svg::line_plot("update rate D̂′(t)", "t", "D̂′", &t, &series(|r| r.d_hat_dot)),
        ),
        (
            "dhat.svg",
            svg::line_plot("delay estimate D̂(t)", "t", "D̂", &t, &series(|r| r.d_hat)),
        ),
    ];
    let mut paths = vec![];
    for (name, body) in plots {
        let p = dir.join(name);
        write(&p, &body)?;
        paths.push(p);
    }
    Ok(paths)
}

fn write_artifacts(
    dir: &Path,
    s: &ScenarioConfig,
    trace: &Trace,
    report: &DiagnosticsReport,
    no_svg: bool,
) -> CliResult<RunArtifacts> {
    create_dir(dir)?;
    let snapshots = dir.join("snapshots");
    create_dir(&snapshots)?;
    clear_snapshots(&snapshots)?;
    let mut index = String::from("file,t\n");
    for (k, snap) in trace.snapshots.iter().enumerate() {
        let name = format!("u_{k:05}.csv");
        write(&snapshots.join(&name), &trace.snapshot_csv(snap))?;
        index.push_str(&format!("{name},{}\n", snap.t));
    }
    write(&snapshots.join("index.csv"), &index)?;
    let artifacts = RunArtifacts {
        trace: dir.join("trace.csv"),
        snapshots,
        diagnostics: dir.join("diagnostics.csv"),
        summary: dir.join("summary.txt"),
        svgs: if no_svg {
            vec![]
        } else {
            write_svgs(dir, trace)?
        },
    };
    write(&artifacts.trace, &trace.to_csv())?;
    write(&artifacts.diagnostics, &report.series_csv(trace))?;
    write(
        &artifacts.summary,
        &report.summary(&summary_extras(s, trace, &report.constants)),
    )?;
    Ok(artifacts)
}

pub fn cmd_run(scenario: &str, flags: &Flags) -> CliResult<RunArtifacts> {
    let s = load_scenario(scenario, flags.printed_kernel_forms)?;
    let cfg = s
        .sim_config()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let cache = cache(&s, flags)?;
    let constants = constants_for(&s, &cache)?;
    if s.strict_stability && s.theta >= constants.theta_star {
        return Err(CliError::Config(format!(
            "strict stability needs theta < theta* = {:e}, got theta = {}",
            constants.theta_star, s.theta
        )));
    }
    let trace = simulate(&cfg, &cache)?;
    let report = diagnostics::report(&trace, constants);
    let dir = out_dir(flags, &s, "hypbstep-out");
    let artifacts = write_artifacts(&dir, &s, &trace, &report, flags.no_svg)?;
    print_table(&trace, &report);
    println!("artifacts in {}", dir.display());
    let missing = artifacts.incomplete();
    if !missing.is_empty() {
        return Err(CliError::Verification(format!(
            "artifacts missing or empty: {missing:?}"
        )));
    }

    if let Some((t, detail)) = &trace.divergence {
        return Err(CliError::Divergence {
            t: *t,
            detail: detail.clone(),
        });
    }
    if !report.bound.holds {
        return Err(CliError::Verification(format!(
            "stability envelope exceeded (log margin {})",
            report.bound.min_log_margin
        )));
    }
    if s.strict_stability && report.monotonicity.violations > 0 {
        return Err(CliError::Verification(format!(
            "V1 increased beyond tolerance at {} steps (largest excess {:e})",
            report.monotonicity.violations, report.monotonicity.max_excess
        )));
    }
    Ok(artifacts)
}

/// Cache node indices exported by `kernels`: ends, quartiles and the node
/// nearest the true delay.
fn selected_nodes(cache: &KernelCache, d_true: f64) -> Vec<usize> {
    let last = cache.nodes().len() - 1;
    let nearest = cache
        .nodes()
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (a.1.delay - d_true)
                .abs()
                .total_cmp(&(b.1.delay - d_true).abs())
        })
        .map_or(0, |(m, _)| m);
    let mut picks = vec![0, last / 4, last / 2, 3 * last / 4, last, nearest];
    picks.sort_unstable();
    picks.dedup();
    picks
}

pub fn cmd_kernels(scenario: &str, flags: &Flags) -> CliResult<PathBuf> {
    let s = load_scenario(scenario, flags.printed_kernel_forms)?;
    s.coefficients()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let cache = cache(&s, flags)?;
    let dir = out_dir(flags, &s, "hypbstep-kernels");
    create_dir(&dir)?;
    let grid = cache.grid();
    let n = grid.len();

    for (name, table) in [("k.csv", cache.k()), ("l.csv", cache.l())] {
        let mut out = String::from("x,y,value\n");
        for i in 0..n {
            for j in 0..=i {
                out.push_str(&format!(
                    "{},{},{}\n",
                    grid.node(i),
                    grid.node(j),
                    table.get(i, j)
                ));
            }
        }
        write(&dir.join(name), &out)?;
    }

    let mut index = String::from("node,delay,gamma,q\n");
    for m in selected_nodes(&cache, s.d_true) {
        let delay = cache.nodes()[m].delay;
        let bundle = query_cache(&cache, delay)?;
        let (gname, qname) = (format!("gamma_{m:03}.csv"), format!("q_{m:03}.csv"));
        let mut g = String::from("x,y,value\n");
        for i in 0..n {
            for j in 0..n {
                g.push_str(&format!(
                    "{},{},{}\n",
                    grid.node(i),
                    grid.node(j),
                    bundle.gamma.get(i, j)
                ));
            }
        }
        write(&dir.join(&gname), &g)?;
        let mut q = String::from("s,value\n");
        for i in 0..n {
            q.push_str(&format!("{},{}\n", grid.node(i), bundle.q.get(i)));
        }
        write(&dir.join(&qname), &q)?;
        index.push_str(&format!("{m},{delay},{gname},{qname}\n"));
    }
    write(&dir.join("delays.csv"), &index)?;
    println!("kernel tables in {}", dir.display());
    Ok(dir)
}
