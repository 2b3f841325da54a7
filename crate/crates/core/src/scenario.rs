//! Scenario files: flat `key = value` lines, `#` comments, expression
//! values in double quotes. Keys that are absent keep the defaults of the
//! reference experiment (`D = 2`, bounds `[0.1, 4]`, `θ = 0.021`, `b₁ = 9`,
//! `g = 2(1 − x)`, `f = cos 2πx + 4 sin 2πy`, `u₀ = 4 sin πx`, `v₀ = 0`).

use crate::adaptive::UpdateLawConfig;
use crate::error::{Error, Result};
use crate::expr::{eval_expr, parse_expr_at, ExprTree};
use crate::kernels::{Coefficients, KernelForm, SolverOptions};
use crate::numerics::{Field, Grid1D};
use crate::plant::{DelayBounds, Mode, SimConfig};

/// Expression with the source text it was parsed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub source: String,
    pub tree: ExprTree,
}

impl Expr {
    fn parse(src: &str, line: usize, column: usize) -> Result<Self> {
        Ok(Self {
            source: src.to_string(),
            tree: parse_expr_at(src, line, column)?,
        })
    }

    fn default(src: &str) -> Self {
        Self::parse(src, 0, 0).expect("default expressions parse")
    }
}

impl std::str::FromStr for Expr {
    type Err = Error;

    fn from_str(src: &str) -> Result<Self> {
        Self::parse(src, 1, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub d_true: f64,
    pub bounds: DelayBounds,
    pub d_hat0: f64,
    pub theta: f64,
    pub b1: f64,
    pub n_x: usize,
    pub n_d: usize,
    pub cfl: f64,
    pub t_final: f64,
    pub mode: Mode,
    pub g: Expr,
    pub f: Expr,
    pub u0: Expr,
    pub v0: Expr,
    pub output_dir: Option<String>,
    pub snapshot_stride: usize,
    pub record_stride: usize,
    pub strict_stability: bool,
    pub compat_printed_kernels: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            d_true: 2.0,
            bounds: DelayBounds::new(0.1, 4.0).expect("valid"),
            d_hat0: 1.0,
            theta: 0.021,
            b1: 9.0,
            n_x: 201,
            n_d: 65,
            cfl: 0.9,
            t_final: 40.0,
            mode: Mode::Adaptive,
            g: Expr::default("2*(1-x)"),
            f: Expr::default("cos(2*pi*x)+4*sin(2*pi*y)"),
            u0: Expr::default("4*sin(pi*x)"),
            v0: Expr::default("0"),
            output_dir: None,
            snapshot_stride: 50,
            record_stride: 1,
            strict_stability: false,
            compat_printed_kernels: false,
        }
    }
}

const KEYS: &[&str] = &[
    "name",
    "d_true",
    "d_low",
    "d_high",
    "d_hat0",
    "theta",
    "b1",
    "n_x",
    "n_d",
    "cfl",
    "t_final",
    "mode",
    "g",
    "f",
    "u0",
    "v0",
    "output_dir",
    "snapshot_stride",
    "record_stride",
    "strict_stability",
    "compat_printed_kernels",
];

fn syntax(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        column,
        message: message.into(),
    }
}

/// Parses and validates a scenario.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    let (mut d_low, mut d_high) = (cfg.bounds.low(), cfg.bounds.high());

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw);
        if line.trim().is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            let col = line.len() - line.trim_start().len() + 1;
            return Err(syntax(line_no, col, "expected `key = value`"));
        };
        let key = line[..eq].trim();
        let Some(&key) = KEYS.iter().find(|k| **k == key) else {
            return Err(Error::Validation(format!(
                "line {line_no}: unknown key {key:?}"
            )));
        };
        if seen.contains(&key) {
            return Err(Error::Validation(format!(
                "line {line_no}: duplicate key {key:?}"
            )));
        }
        seen.push(key);
        let after = &line[eq + 1..];
        let value_col = eq + 2 + (after.len() - after.trim_start().len());
        let value = after.trim();
        if value.is_empty() {
            return Err(syntax(
                line_no,
                value_col,
                format!("missing value for {key}"),
            ));
        }
        let (unquoted, inner_col) = unquote(value, line_no, value_col)?;
        let num = || -> Result<f64> {
            unquoted.parse::<f64>().map_err(|_| {
                syntax(
                    line_no,
                    value_col,
                    format!("{key} expects a number, got {value:?}"),
                )
            })
        };
        let count = || -> Result<usize> {
            unquoted.parse::<usize>().map_err(|_| {
                syntax(
                    line_no,
                    value_col,
                    format!("{key} expects a nonnegative integer, got {value:?}"),
                )
            })
        };
        let flag = || -> Result<bool> {
            match unquoted {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(syntax(
                    line_no,
                    value_col,
                    format!("{key} expects true or false, got {value:?}"),
                )),
            }
        };
        let expr = || Expr::parse(unquoted, line_no, inner_col);
        match key {
            "name" => cfg.name = unquoted.to_string(),
            "d_true" => cfg.d_true = num()?,
            "d_low" => d_low = num()?,
            "d_high" => d_high = num()?,
            "d_hat0" => cfg.d_hat0 = num()?,
            "theta" => cfg.theta = num()?,
            "b1" => cfg.b1 = num()?,
            "n_x" => cfg.n_x = count()?,
            "n_d" => cfg.n_d = count()?,
            "cfl" => cfg.cfl = num()?,
            "t_final" => cfg.t_final = num()?,
            "mode" => cfg.mode = unquoted.parse()?,
            "g" => cfg.g = expr()?,
            "f" => cfg.f = expr()?,
            "u0" => cfg.u0 = expr()?,
            "v0" => cfg.v0 = expr()?,
            "output_dir" => cfg.output_dir = Some(unquoted.to_string()),
            "snapshot_stride" => cfg.snapshot_stride = count()?,
            "record_stride" => cfg.record_stride = count()?,
            "strict_stability" => cfg.strict_stability = flag()?,
            "compat_printed_kernels" => cfg.compat_printed_kernels = flag()?,
            _ => unreachable!("key list and match arms agree"),
        }
    }

    if !(d_low > 0.0 && d_low <= d_high && d_high.is_finite()) {
        return Err(Error::Validation(format!(
            "delay bounds must satisfy 0 < d_low <= d_high, got [{d_low}, {d_high}]"
        )));
    }
    cfg.bounds = DelayBounds::new(d_low, d_high)?;
    cfg.validate()?;
    Ok(cfg)
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Strips one pair of double quotes; returns the text and its 1-based column.
fn unquote(value: &str, line: usize, column: usize) -> Result<(&str, usize)> {
    if let Some(rest) = value.strip_prefix('"') {
        match rest.strip_suffix('"') {
            Some(inner) if !inner.contains('"') => Ok((inner, column + 1)),
            _ => Err(syntax(line, column, "unterminated or stray quote")),
        }
    } else {
        Ok((value, column))
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let v = |m: String| Err(Error::Validation(m));
        let (lo, hi) = (self.bounds.low(), self.bounds.high());
        if !(self.d_true >= lo && self.d_true <= hi) {
            return v(format!(
                "d_true = {} must lie within the delay bounds [{lo}, {hi}]",
                self.d_true
            ));
        }
        if !(self.d_hat0 >= lo && self.d_hat0 <= hi) {
            return v(format!(
                "d_hat0 = {} must lie within the delay bounds [{lo}, {hi}]",
                self.d_hat0
            ));
        }
        if !(self.b1 > 2.0 * hi) {
            return v(format!(
                "b1 must exceed 2*D_bar = {}, got {}",
                2.0 * hi,
                self.b1
            ));
        }
        if !(self.theta > 0.0) {
            return v(format!("theta must be positive, got {}", self.theta));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return v(format!("cfl must lie in (0, 1], got {}", self.cfl));
        }
        if self.n_x < 11 {
            return v(format!("n_x must be at least 11, got {}", self.n_x));
        }
        if self.n_d < 3 {
            return v(format!("n_d must be at least 3, got {}", self.n_d));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return v(format!("t_final must be positive, got {}", self.t_final));
        }
        if self.record_stride == 0 {
            return v("record_stride must be at least 1".into());
        }
        for (key, e) in [("g", &self.g), ("u0", &self.u0), ("v0", &self.v0)] {
            if e.tree.references_y() {
                return v(format!("{key} may only depend on x"));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid1D {
        Grid1D::new(self.n_x).expect("validated n_x")
    }

    pub fn kernel_form(&self) -> KernelForm {
        if self.compat_printed_kernels {
            KernelForm::Printed
        } else {
            KernelForm::Derived
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            form: self.kernel_form(),
            ..Default::default()
        }
    }

    pub fn coefficients(&self) -> Result<Coefficients> {
        let grid = self.grid();
        let n = grid.len();
        let mut g = Vec::with_capacity(n);
        for x in grid.nodes() {
            g.push(eval_expr(&self.g.tree, x, None)?);
        }
        let mut f = Vec::with_capacity(n * n);
        for x in grid.nodes() {
            for y in grid.nodes() {
                f.push(eval_expr(&self.f.tree, x, Some(y))?);
            }
        }
        Coefficients::from_tables(grid, g, f).map_err(|_| {
            Error::Eval("coefficient expressions produce non-finite values on the grid".into())
        })
    }

    fn sample(&self, e: &Expr, what: &str) -> Result<Field> {
        let grid = self.grid();
        let mut vals = Vec::with_capacity(grid.len());
        for x in grid.nodes() {
            vals.push(eval_expr(&e.tree, x, None)?);
        }
        Field::new(grid, vals).map_err(|_| Error::Eval(format!("{what} is not finite on the grid")))
    }

    pub fn law(&self) -> Result<UpdateLawConfig> {
        UpdateLawConfig::new(self.theta, self.b1, self.bounds)
            .map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        Ok(SimConfig {
            d_true: self.d_true,
            d_hat0: self.d_hat0,
            law: self.law()?,
            cfl: self.cfl,
            t_final: self.t_final,
            mode: self.mode,
            u0: self.sample(&self.u0, "u0")?,
            v0: self.sample(&self.v0, "v0")?,
            record_stride: self.record_stride,
            snapshot_stride: self.snapshot_stride,
            residuals: false,
        })
    }

    /// Canonical text of the inputs that determine the kernel cache.
    pub fn cache_identity(&self) -> String {
        format!(
            "g={}\nf={}\nd_low={:?}\nd_high={:?}\nn_x={}\nn_d={}\nprinted={}\n",
            self.g.tree,
            self.f.tree,
            self.bounds.low(),
            self.bounds.high(),
            self.n_x,
            self.n_d,
            self.compat_printed_kernels
        )
    }
}

/// Bundled scenarios by name.
pub const PRESETS: &[(&str, &str)] = &[
    (
        "paper-adaptive-d1",
        include_str!("../presets/paper-adaptive-d1.scn"),
    ),
    (
        "paper-adaptive-d3",
        include_str!("../presets/paper-adaptive-d3.scn"),
    ),
    (
        "paper-mismatch",
        include_str!("../presets/paper-mismatch.scn"),
    ),
    ("paper-exact", include_str!("../presets/paper-exact.scn")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|p| p.0 == name).map(|p| p.1)
}
