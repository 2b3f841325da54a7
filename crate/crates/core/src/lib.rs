//! Delay-adaptive backstepping boundary control of a first-order hyperbolic
//! PIDE with an unknown input delay: kernel solvers, backstepping transforms,
//! the closed-loop simulator with its projected update law, and diagnostics.

// `!(x > 0.0)` is used on purpose so NaN fails validation; index loops
// mirror the quadrature formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adaptive;
pub mod diagnostics;
pub mod error;
pub mod expr;
pub mod kernels;
pub mod numerics;
pub mod plant;
pub mod scenario;
pub mod transforms;

pub use adaptive::{MFields, StabilityConstants, UpdateLawConfig};
pub use diagnostics::DiagnosticsReport;
pub use error::{Error, Result};
pub use expr::{eval_expr, parse_expr, ExprTree};
pub use kernels::{
    build_cache, query_cache, Coefficients, EdgeKernel, KernelBounds, KernelBundle, KernelCache,
    KernelForm, SolverOptions, SquareKernel, TriKernel,
};
pub use numerics::{Field, Grid1D};
pub use plant::{DelayBounds, Mode, PlantState, SimConfig, Trace, TraceRecord};
pub use scenario::{parse_scenario, ScenarioConfig};
pub use transforms::TargetState;
